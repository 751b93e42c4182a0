#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ssr3d/errors.hpp"

namespace ssr3d::detail {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <class T>
  void put(T v) {
    raw(&v, sizeof(T));
  }
  void put_f32(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void append_crc() { put<std::uint32_t>(crc32(bytes_)); }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian reader; errors carry the byte offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " reading " + field + " (need " +
                        std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
    }
  }

  template <class T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void get_f32(std::span<float> out, const char* field) {
    need(out.size_bytes(), field);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  /// Verifies the trailing CRC32 over everything before it and that nothing follows.
  void check_crc() {
    const std::size_t body = pos_;
    const auto stored = get<std::uint32_t>("crc32");
    const auto actual = crc32(bytes_.first(body));
    if (stored != actual) {
      throw FormatError(what_ + ": CRC mismatch at byte " + std::to_string(body));
    }
    if (remaining() != 0) {
      throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes after CRC at byte " +
                        std::to_string(pos_));
    }
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError(what_ + ": " + msg + " at byte " + std::to_string(at));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace ssr3d::detail
