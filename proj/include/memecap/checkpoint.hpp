#pragma once

// Versioned binary blob used for every trainable artifact (encoders, align
// parameters, decoders, reward models, RL policies).
//
// Layout (little-endian):
//   "MEMECAP\0"            8-byte magic
//   u32 version            currently 1
//   str kind               e.g. "decoder", "reward-model"
//   u32 meta_count, then meta_count x (str key, str value)
//   u32 tensor_count, then tensor_count x (str name, u64 rows, u64 cols)   shape table
//   f64 data for each tensor in table order, row-major
// where str = u32 byte length followed by UTF-8 bytes.

#include "memecap/autograd.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace memecap {

inline constexpr std::uint32_t kBlobVersion = 1;

struct Blob {
    std::string kind;
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat &tensor(const std::string &name) const;
    const std::string &meta_at(const std::string &key) const;
};

std::string serialize_blob(const Blob &blob);
Blob parse_blob(std::string_view bytes);

void save_blob(const std::filesystem::path &path, const Blob &blob);
Blob load_blob(const std::filesystem::path &path);

/// Appends every parameter under "<prefix><name>".
void put_params(Blob &blob, const ad::ParamList &params, const std::string &prefix = "");
/// Restores parameters by name; shapes must match exactly.
void get_params(const Blob &blob, const ad::ParamList &params, const std::string &prefix = "");

} // namespace memecap
