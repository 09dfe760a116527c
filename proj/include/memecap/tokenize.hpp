#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace memecap {

using Tokenizer = std::function<std::vector<std::string>(std::string_view)>;

/// Splits on whitespace, emits each ASCII punctuation character as its own
/// token and lower-cases ASCII letters. Non-ASCII bytes stay inside tokens.
std::vector<std::string> basic_tokenize(std::string_view text);

std::string join_tokens(const std::vector<std::string> &tokens, std::string_view sep = " ");

} // namespace memecap
