#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian byte packing for the two on-disk formats (param blobs and
// memory-bank files). Explicit shifts rather than memcpy of structs so the
// layout is identical on any host.

namespace ahc {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf_.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    buf_.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    buf_.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void magic(const char (&m)[5]) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(m[i]));
  }
  void zeros(std::size_t n) { buf_.insert(buf_.end(), n, 0); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string format_name)
      : buf_(buf), name_(std::move(format_name)) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = static_cast<std::uint32_t>(buf_[pos_]) |
                      (static_cast<std::uint32_t>(buf_[pos_ + 1]) << 8) |
                      (static_cast<std::uint32_t>(buf_[pos_ + 2]) << 16) |
                      (static_cast<std::uint32_t>(buf_[pos_ + 3]) << 24);
    pos_ += 4;
    return v;
  }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }

  void expect_magic(const char (&m)[5]) {
    need(4, "magic");
    for (int i = 0; i < 4; ++i) {
      if (buf_[pos_ + i] != static_cast<std::uint8_t>(m[i])) {
        throw std::runtime_error(name_ + ": bad magic at byte offset " +
                                 std::to_string(pos_ + i) + " (expected \"" + m + "\")");
      }
    }
    pos_ += 4;
  }
  void expect_zeros(std::size_t n, const char* field) {
    need(n, field);
    for (std::size_t i = 0; i < n; ++i) {
      if (buf_[pos_ + i] != 0) {
        throw std::runtime_error(name_ + ": nonzero " + field + " byte at offset " +
                                 std::to_string(pos_ + i));
      }
    }
    pos_ += n;
  }
  void expect_end() const {
    if (pos_ != buf_.size()) {
      throw std::runtime_error(name_ + ": " + std::to_string(buf_.size() - pos_) +
                               " trailing bytes at offset " + std::to_string(pos_));
    }
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  void fail(const std::string& why) const {
    throw std::runtime_error(name_ + ": " + why + " at byte offset " +
                             std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* field) const {
    if (buf_.size() - pos_ < n) {
      throw std::runtime_error(name_ + ": truncated at byte offset " +
                               std::to_string(pos_) + " (need " + std::to_string(n) +
                               " bytes for " + field + ", have " +
                               std::to_string(buf_.size() - pos_) + ")");
    }
  }

  const std::vector<std::uint8_t>& buf_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace ahc
