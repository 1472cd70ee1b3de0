#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace debs {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct contract_error : std::logic_error {
  using std::logic_error::logic_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class record_fault { bad_magic, bad_version, truncated, bad_checksum };

struct record_error : data_error {
  record_fault fault;
  record_error(record_fault f, const std::string& msg) : data_error(msg), fault(f) {}
};

inline void require(bool cond, const char* msg) {
  if (!cond) throw contract_error(msg);
}

namespace detail {
inline const std::uint32_t* crc32_table() {
  static const auto table = [] {
    static std::uint32_t t[256];
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}
}  // namespace detail

inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
  const auto* p = static_cast<const unsigned char*>(data);
  const std::uint32_t* table = detail::crc32_table();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Little-endian byte buffer helpers shared by the record and checkpoint formats.
class byte_writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class byte_reader {
 public:
  byte_reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  explicit byte_reader(const std::vector<std::uint8_t>& v) : p_(v.data()), n_(v.size()) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() { return load<std::uint16_t>(); }
  std::uint32_t u32() { return load<std::uint32_t>(); }
  std::uint64_t u64() { return load<std::uint64_t>(); }
  float f32() { return load<float>(); }
  double f64() { return load<double>(); }
  std::string str() {
    std::size_t n = u16();
    const auto* b = take(n);
    return std::string(reinterpret_cast<const char*>(b), n);
  }
  void bytes(void* out, std::size_t n) { std::memcpy(out, take(n), n); }
  std::size_t remaining() const { return n_ - off_; }
  std::size_t offset() const { return off_; }

 private:
  template <class V>
  V load() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (off_ + n > n_) throw record_error(record_fault::truncated, "unexpected end of data");
    const auto* r = p_ + off_;
    off_ += n;
    return r;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_float(float v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace debs
