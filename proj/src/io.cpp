#include "alignlab/io.hpp"

#include "alignlab/core.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace alignlab {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ContextTooLong: return "context-too-long";
    case ErrorCode::TokenOutOfRange: return "token-out-of-range";
    case ErrorCode::InvalidContext: return "invalid-context";
    case ErrorCode::InstanceTooLarge: return "instance-too-large";
    case ErrorCode::NonFinite: return "non-finite";
    case ErrorCode::EmptyBatch: return "empty-batch";
    case ErrorCode::Mismatch: return "mismatch";
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::CheckFailure: return "check-failure";
    case ErrorCode::Io: return "io";
    case ErrorCode::Config: return "config";
    case ErrorCode::Dependency: return "dependency";
  }
  return "unknown";
}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "short write to " + path);
}

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace alignlab
