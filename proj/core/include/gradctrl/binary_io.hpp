#pragma once

// Little-endian byte encoding shared by the GCLF and GCLB formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "gradctrl/errors.hpp"

namespace gradctrl::io {

namespace detail {

template <typename T>
T to_little(T value) noexcept {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return value;
}

}  // namespace detail

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const T le = detail::to_little(value);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&le);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  void put_doubles(std::span<const double> values) {
    bytes_.reserve(bytes_.size() + values.size() * sizeof(double));
    for (double v : values) put(v);
  }

  std::vector<std::uint8_t>& bytes() noexcept { return bytes_; }
  std::vector<std::uint8_t> take() noexcept { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return detail::to_little(value);
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void get_doubles(std::span<double> out, const char* what) {
    need(out.size() * sizeof(double), what);
    for (double& v : out) v = get<double>(what);
  }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(pos_, std::string("truncated input while reading ") + what + ": need " +
                                  std::to_string(n) + " bytes, have " +
                                  std::to_string(remaining()));
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Whole-file helpers; throw IoError on failure.
std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);

}  // namespace gradctrl::io
