#pragma once

// Small text helpers shared by every file format: round-trip decimal
// formatting, CSV splitting, the provenance header line, and hashing.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace spiboter::io {

inline constexpr std::string_view kToolVersion = "1.0.0";

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);
/// Whole-string parse; `what` names the cell in the error message.
double parse_double(std::string_view text, const std::string& what);
long long parse_int(std::string_view text, const std::string& what);

std::string_view trim(std::string_view s);
std::vector<std::string_view> split(std::string_view s, char sep);

std::uint64_t fnv1a(std::string_view data);
std::string hex64(std::uint64_t v);

/// "# spiboter <version> config=<hash>"; first line of every output file.
std::string header_line(std::uint64_t config_hash);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace spiboter::io
