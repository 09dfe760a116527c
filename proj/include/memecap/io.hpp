#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace memecap {

std::string read_file(const std::filesystem::path &path);
/// Writes through a temporary sibling and renames, so readers never see a partial file.
void write_file(const std::filesystem::path &path, std::string_view bytes);

/// Appends bytes and fsyncs before returning.
void append_durable(const std::filesystem::path &path, std::string_view bytes);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path &path);

} // namespace memecap
