#pragma once

// Named-tensor checkpoint file:
//   "RKCK" | u16 version | u32 count |
//   count x ( u16 name_len | name bytes | u8 rank | rank x u32 dims | f64 payload )
// all integers and doubles little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rkm/tensor.hpp"

namespace rkm {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace detail {

inline void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <class T>
void put_pod(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(T));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string what)
      : buf_(buf), what_(std::move(what)) {}

  template <class T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  void floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, buf_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  std::size_t remaining() const { return buf_.size() - pos_; }

  void expect_end() const {
    if (pos_ != buf_.size())
      throw std::runtime_error(what_ + ": " + std::to_string(buf_.size() - pos_) +
                               " trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw std::runtime_error(what_ + ": truncated file");
  }

  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

constexpr std::uint16_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::string buf;
  buf.append("RKCK", 4);
  detail::put_pod<std::uint16_t>(buf, kCheckpointVersion);
  detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: name too long: " + name);
    detail::put_pod<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    detail::put_bytes(buf, name.data(), name.size());
    detail::put_pod<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape())
      detail::put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    detail::put_bytes(buf, t.data().data(), t.size() * sizeof(double));
  }
  detail::write_file(path, buf);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  if (r.bytes(4) != "RKCK") throw std::runtime_error(path + ": bad magic, expected RKCK");
  const auto version = r.pod<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const auto count = r.pod<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint16_t>();
    std::string name = r.bytes(name_len);
    const auto rank = r.pod<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint32_t>();
    Tensor t = Tensor::zeros(shape);
    r.doubles(t.data().data(), t.size());
    out.emplace_back(std::move(name), std::move(t));
  }
  r.expect_end();
  return out;
}

inline const Tensor& find_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return t;
  throw std::runtime_error("checkpoint entry missing: " + name);
}

inline bool has_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return true;
  return false;
}

}  // namespace rkm
