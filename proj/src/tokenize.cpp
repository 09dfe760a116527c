#include "memecap/tokenize.hpp"

#include <cctype>

namespace memecap {

std::vector<std::string> basic_tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    };
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (u < 0x80 && std::isspace(u)) {
            flush();
        } else if (u < 0x80 && std::ispunct(u) && ch != '\'') {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
        }
    }
    flush();
    return out;
}

std::string join_tokens(const std::vector<std::string> &tokens, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) {
            out += sep;
        }
        out += tokens[i];
    }
    return out;
}

} // namespace memecap
