#pragma once

// Little-endian primitives for the dataset and checkpoint containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "pcav/numerics.hpp"

namespace pcav::binary {

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw Error("unexpected end of file");
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void put_u32(std::ostream& out, std::uint64_t v) {
  if (v > UINT32_MAX) throw Error("value does not fit in u32");
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
}
inline std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }

inline void put_f64(std::ostream& out, double v) {
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}
inline double get_f64(std::istream& in) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in));
}

inline void put_i32(std::ostream& out, std::int32_t v) {
  put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}
inline std::int32_t get_i32(std::istream& in) {
  return std::bit_cast<std::int32_t>(get_le<std::uint32_t>(in));
}

inline void put_i8(std::ostream& out, std::int8_t v) {
  out.put(static_cast<char>(v));
}
inline std::int8_t get_i8(std::istream& in) {
  char c;
  if (!in.get(c)) throw Error("unexpected end of file");
  return static_cast<std::int8_t>(c);
}

inline void put_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) ||
      got != magic) {
    throw Error("bad magic: not a " + std::string(magic.substr(0, 6)) + " file");
  }
}

}  // namespace pcav::binary
