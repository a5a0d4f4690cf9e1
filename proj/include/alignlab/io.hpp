#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace alignlab {

/// Shortest-safe decimal for f64: 17 significant digits, round-trips bit-exactly.
std::string format_double(double x);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string content_hash(std::string_view bytes);

}  // namespace alignlab
