#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rp {

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct bad_magic_error : io_error {
  explicit bad_magic_error(const std::string& what) : io_error("bad magic: " + what) {}
};
struct bad_version_error : io_error {
  explicit bad_version_error(const std::string& what) : io_error("version mismatch: " + what) {}
};
struct truncated_error : io_error {
  explicit truncated_error(const std::string& what) : io_error("truncated: " + what) {}
};

// Little-endian writers/readers. The host is assumed little-endian (checked
// at startup of the binary formats via static_assert on std::endian).

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}

  void bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void i32(std::int32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void f32s(const float* p, size_t n) { bytes(p, 4 * n); }
  void magic(const char m[4]) { bytes(m, 4); }
  void blob(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& os_;
};

class ByteReader {
 public:
  ByteReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* p, size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n) throw truncated_error(what_);
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  void f32s(float* p, size_t n) { bytes(p, 4 * n); }
  void expect_magic(const char m[4]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      throw bad_magic_error(what_ + " (expected \"" + std::string(m, 4) + "\")");
  }
  std::uint32_t expect_version(std::uint32_t want) {
    std::uint32_t v = u32();
    if (v != want)
      throw bad_version_error(what_ + " (file v" + std::to_string(v) + ", supported v" +
                              std::to_string(want) + ")");
    return v;
  }
  std::string blob() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void expect_eof() {
    char c;
    is_.read(&c, 1);
    if (!is_.eof()) throw io_error(what_ + ": trailing bytes after payload");
  }

 private:
  std::istream& is_;
  std::string what_;
};

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open for reading: " + path);
  return is;
}

}  // namespace rp
