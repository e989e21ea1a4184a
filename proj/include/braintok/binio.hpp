#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace braintok {

// I/O failures (missing files, malformed headers, truncated payloads).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path);
    path_ = path;
  }

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void put_bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  void close() {
    out_.close();
    if (!out_) throw IoError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
    path_ = path;
  }

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw IoError("truncated payload: " + path_);
    return v;
  }

  void get_bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated payload: " + path_);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    if (n > 0) get_bytes(s.data(), n);
    return s;
  }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace braintok
