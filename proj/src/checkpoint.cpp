#include "memecap/checkpoint.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include <bit>
#include <cstring>

namespace memecap {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'E', 'C', 'A', 'P', '\0'};

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

template <typename T> void put(std::string &out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_str(std::string &out, const std::string &s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
  public:
    explicit Reader(std::string_view b) : b_(b) {}

    template <typename T> T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_str() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(b_.substr(pos_, n));
        pos_ += n;
        return s;
    }

    std::string_view raw(std::size_t n) {
        need(n);
        auto v = b_.substr(pos_, n);
        pos_ += n;
        return v;
    }

    bool done() const { return pos_ == b_.size(); }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) {
            throw Error("blob truncated");
        }
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

} // namespace

const Mat &Blob::tensor(const std::string &name) const {
    for (const auto &[n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw Error("blob has no tensor '" + name + "'");
}

const std::string &Blob::meta_at(const std::string &key) const {
    auto it = meta.find(key);
    if (it == meta.end()) {
        throw Error("blob has no metadata key '" + key + "'");
    }
    return it->second;
}

std::string serialize_blob(const Blob &blob) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kBlobVersion);
    put_str(out, blob.kind);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(blob.meta.size()));
    for (const auto &[k, v] : blob.meta) {
        put_str(out, k);
        put_str(out, v);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(blob.tensors.size()));
    for (const auto &[name, m] : blob.tensors) {
        put_str(out, name);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    }
    for (const auto &[name, m] : blob.tensors) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                put<double>(out, m(r, c));
            }
        }
    }
    return out;
}

Blob parse_blob(std::string_view bytes) {
    Reader rd(bytes);
    if (rd.raw(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
        throw Error("not a memecap blob (bad magic)");
    }
    const auto version = rd.get<std::uint32_t>();
    if (version != kBlobVersion) {
        throw Error("unsupported blob version " + std::to_string(version));
    }
    Blob blob;
    blob.kind = rd.get_str();
    const auto nmeta = rd.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = rd.get_str();
        blob.meta[k] = rd.get_str();
    }
    const auto ntensors = rd.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        std::string name = rd.get_str();
        const auto rows = rd.get<std::uint64_t>();
        const auto cols = rd.get<std::uint64_t>();
        blob.tensors.emplace_back(std::move(name), Mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)));
    }
    for (auto &[name, m] : blob.tensors) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                m(r, c) = rd.get<double>();
            }
        }
    }
    if (!rd.done()) {
        throw Error("trailing bytes after blob payload");
    }
    return blob;
}

void save_blob(const std::filesystem::path &path, const Blob &blob) { write_file(path, serialize_blob(blob)); }

Blob load_blob(const std::filesystem::path &path) { return parse_blob(read_file(path)); }

void put_params(Blob &blob, const ad::ParamList &params, const std::string &prefix) {
    for (const ad::Parameter *p : params) {
        blob.tensors.emplace_back(prefix + p->name, p->value);
    }
}

void get_params(const Blob &blob, const ad::ParamList &params, const std::string &prefix) {
    for (ad::Parameter *p : params) {
        const Mat &m = blob.tensor(prefix + p->name);
        if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
            throw ShapeError("checkpoint tensor '" + prefix + p->name + "' has shape " + std::to_string(m.rows()) +
                             "x" + std::to_string(m.cols()) + ", expected " + std::to_string(p->value.rows()) + "x" +
                             std::to_string(p->value.cols()));
        }
        p->value = m;
        p->zero_grad();
    }
}

} // namespace memecap
