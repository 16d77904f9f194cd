#ifndef DCSAU_TENSOR_HPP
#define DCSAU_TENSOR_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcsau/error.hpp"

namespace dcsau {

/// Extents of a rank-4 (N, C, H, W) tensor. Weight tensors reuse the same
/// four slots as (out-channels, in-channels, kernel-h, kernel-w).
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << ',' << c << ',' << h << ',' << w << ']';
    return os.str();
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

/// Dense row-major (N, C, H, W) storage. `T` is float for everything that is
/// stored or trained; double instantiations exist for finite-difference checks.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
    }
  }

  static BasicTensor zeros(Shape s) { return BasicTensor(s); }
  static BasicTensor full(Shape s, T v) { return BasicTensor(s, v); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const { return data_[index(n, c, h, w)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (n, c) plane.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor& operator+=(const BasicTensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool bit_equal(const BasicTensor& o) const {
    return shape_ == o.shape_ && std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  void check_same(const BasicTensor& o, const char* what) const {
    if (!(shape_ == o.shape_)) {
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + o.shape_.str());
    }
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// ---------------------------------------------------------------------------
// Serialization. Little-endian: "DTNS", version 1, dtype 0 (f32), four u32
// extents, then N*C*H*W f32 values.

namespace io {

inline constexpr std::array<char, 4> kTensorMagic{'D', 'T', 'N', 'S'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("truncated ") + what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 4);
  os.put(static_cast<char>(kTensorVersion));
  os.put(static_cast<char>(kDtypeF32));
  const Shape& s = t.shape();
  for (std::size_t e : {s.n, s.c, s.h, s.w}) put_u32(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic.data(), 4) != 0) {
    throw FormatError("bad tensor magic (expected DTNS)");
  }
  int version = is.get();
  int dtype = is.get();
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  if (dtype != kDtypeF32) throw FormatError("unsupported tensor dtype " + std::to_string(dtype));
  Shape s;
  s.n = get_u32(is, "tensor extents");
  s.c = get_u32(is, "tensor extents");
  s.h = get_u32(is, "tensor extents");
  s.w = get_u32(is, "tensor extents");
  Tensor t(s);
  if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)))) {
    throw FormatError("truncated tensor payload for shape " + s.str());
  }
  return t;
}

}  // namespace io

/// Ordered (name, tensor) records. Serialized as a u32 record count followed by
/// (u32 name length, UTF-8 name bytes, tensor record) for each entry.
class Archive {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  void add(std::string name, Tensor t) { entries_.push_back({std::move(name), std::move(t)}); }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Tensor* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  void write(std::ostream& os) const {
    io::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      io::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      io::write_tensor(os, e.tensor);
    }
  }

  static Archive read(std::istream& is) {
    Archive a;
    std::uint32_t count = io::get_u32(is, "archive header");
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t len = io::get_u32(is, "archive name length");
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw FormatError("truncated archive entry name");
      a.add(std::move(name), io::read_tensor(is));
    }
    return a;
  }

  std::string bytes() const {
    std::ostringstream os(std::ios::binary);
    write(os);
    return std::move(os).str();
  }

  static Archive from_bytes(const std::string& b) {
    std::istringstream is(b, std::ios::binary);
    return read(is);
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace dcsau

#endif  // DCSAU_TENSOR_HPP
