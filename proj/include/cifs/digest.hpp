#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace cifs {

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Lower-case hex SHA-256 of a file's contents.
std::string file_sha256_hex(const std::filesystem::path& path);

}  // namespace cifs
