#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

namespace dbagent::jsonl {

/// Calls `fn(line_number, line)` for every non-blank line (1-based numbering).
/// Throws DataError if the file cannot be opened.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, std::string_view)>& fn);

std::string read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename; the temp file is removed on
/// failure so no partial output is left behind.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view data);

}  // namespace dbagent::jsonl
