#ifndef CSPEECH_UTIL_BINIO_H_
#define CSPEECH_UTIL_BINIO_H_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cspeech/util/common.h"

namespace cspeech {

// Little-endian binary IO. All on-disk formats in this project are
// little-endian with a 4-byte magic followed by a u32 format version.

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check_runtime(bool(is), "binio: unexpected end of file reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v & 0xffffffffULL));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

inline uint64_t read_u64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  write_u64(os, u);
}

inline double read_f64(std::istream& is) {
  uint64_t u = read_u64(is);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void write_magic(std::ostream& os, const char magic[5]) {
  os.write(magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[5], const std::string& what) {
  char buf[4];
  is.read(buf, 4);
  check_runtime(bool(is) && std::memcmp(buf, magic, 4) == 0,
                what + ": bad magic, expected \"" + std::string(magic) + "\"");
}

inline void write_f32_array(std::ostream& os, const double* data, size_t n) {
  std::vector<float> tmp(n);
  for (size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(data[i]);
  os.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
}

inline void read_f32_array(std::istream& is, double* data, size_t n) {
  std::vector<float> tmp(n);
  is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
  check_runtime(bool(is), "binio: unexpected end of file reading f32 array");
  for (size_t i = 0; i < n; ++i) data[i] = static_cast<double>(tmp[i]);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check_runtime(bool(os), "cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_runtime(bool(is), "cannot open for reading: " + path);
  return is;
}

}  // namespace cspeech

#endif  // CSPEECH_UTIL_BINIO_H_
