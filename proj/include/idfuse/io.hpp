#pragma once
// Filesystem helpers shared by the persistence layers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace idfuse {

/// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

/// Root directory for relative output paths: $IDFUSE_OUTPUT_ROOT if set, else the working directory.
std::filesystem::path output_root();
std::filesystem::path resolve_output(const std::filesystem::path& p);

}  // namespace idfuse
