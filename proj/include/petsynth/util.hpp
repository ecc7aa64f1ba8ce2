#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace petsynth {

namespace fs = std::filesystem;

/// 64-bit FNV-1a over a byte buffer. Used for content hashes in manifests;
/// not cryptographic.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

/// FNV-1a of a whole file. Throws IoError if unreadable.
std::uint64_t hash_file(const fs::path& path);

std::string hex64(std::uint64_t v);

std::vector<char> read_file_bytes(const fs::path& path);
std::string read_file_text(const fs::path& path);
void write_file_text(const fs::path& path, const std::string& text);

/// printf-style helper for short messages.
std::string strfmt(const char* fmt, ...);

/// Fixed decimal formatting used for every CSV/manifest float we emit, so
/// re-runs are byte-identical. Shortest representation that round-trips.
std::string format_double(double v);

bool starts_with(const std::string& s, const std::string& prefix);
std::string trim(const std::string& s);
std::vector<std::string> split(const std::string& s, char sep);

}  // namespace petsynth
