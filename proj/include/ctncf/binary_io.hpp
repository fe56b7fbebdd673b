#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "ctncf/error.hpp"

namespace ctncf::bin {

// Little-endian fixed-width encoding for the cache and checkpoint files.

template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) {
    throw DataError("unexpected end of binary file");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

inline void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// A u32 count that must not exceed `limit`; guards allocations against
/// corrupt files.
inline std::uint32_t read_count(std::istream& is, std::uint64_t limit, const char* what) {
  const std::uint32_t n = read_u32(is);
  if (n > limit) {
    throw DataError(std::string("corrupt binary file: ") + what + " count " + std::to_string(n) +
                    " exceeds " + std::to_string(limit));
  }
  return n;
}

inline constexpr std::uint32_t kMaxStringLength = 1u << 16;

inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_count(is, kMaxStringLength, "string length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError("unexpected end of binary file");
  return s;
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw DataError("bad file header: expected magic " + std::string(magic));
  }
}

}  // namespace ctncf::bin
