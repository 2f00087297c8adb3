#pragma once

// Locale-independent text helpers shared by every on-disk format.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pldcp::io {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);
/// Fixed-point text with `digits` decimals and '.' separator.
std::string format_fixed(double value, int digits);

/// Strict parse of the whole field; returns false on any trailing garbage.
bool parse_double(std::string_view text, double& out);
bool parse_int(std::string_view text, long long& out);

std::vector<std::string_view> split(std::string_view line, char sep);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// Sidecar path convention: data.csv -> data.json.
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

/// Deterministic 64-bit seed mixing (splitmix64 finaliser).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace pldcp::io
