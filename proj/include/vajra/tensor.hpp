#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vajra/error.hpp"

namespace vajra {

/// Dimensions of an NCHW activation or an OIHW weight tensor.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool valid() const noexcept { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

/// Parses "NxCxHxW" (all dims >= 1).
inline Shape4 parse_shape(std::string_view text) {
  auto fail = [&]() -> Shape4 {
    throw ShapeError("shape must look like NxCxHxW with positive dims, got '" + std::string(text) + "'");
  };
  std::vector<int> dims;
  std::size_t pos = 0;
  while (true) {
    const std::size_t end = std::min(text.find_first_of("xX", pos), text.size());
    const std::string_view part = text.substr(pos, end - pos);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size() || v < 1) return fail();
    dims.push_back(v);
    if (end == text.size()) break;
    pos = end + 1;
  }
  if (dims.size() != 4) return fail();
  return {dims[0], dims[1], dims[2], dims[3]};
}

/// Dense rank-4 tensor of 32-bit reals stored row-major in (n, c, h, w) order.
///
/// A default-constructed tensor is empty (all dims zero) and is only useful as
/// a placeholder; every tensor produced by an op has all dims >= 1.
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape4 shape, float fill = 0.0f) : shape_(shape) {
    if (!shape.valid()) {
      throw ShapeError("tensor dims must all be >= 1, got " + shape.str());
    }
    data_.assign(shape.numel(), fill);
  }

  Tensor4(int n, int c, int h, int w, float fill = 0.0f) : Tensor4(Shape4{n, c, h, w}, fill) {}

  Tensor4(Shape4 shape, std::vector<float> values) : shape_(shape), data_(std::move(values)) {
    if (!shape.valid()) {
      throw ShapeError("tensor dims must all be >= 1, got " + shape.str());
    }
    if (data_.size() != shape.numel()) {
      throw ShapeError("tensor " + shape.str() + " needs " + std::to_string(shape.numel()) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  const Shape4& shape() const noexcept { return shape_; }
  int n() const noexcept { return shape_.n; }
  int c() const noexcept { return shape_.c; }
  int h() const noexcept { return shape_.h; }
  int w() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  float& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }

  /// Contiguous h*w plane of one (n, c) slice.
  std::span<float> plane(int n, int c) noexcept {
    return {data_.data() + offset(n, c, 0, 0), static_cast<std::size_t>(shape_.h) * shape_.w};
  }
  std::span<const float> plane(int n, int c) const noexcept {
    return {data_.data() + offset(n, c, 0, 0), static_cast<std::size_t>(shape_.h) * shape_.w};
  }

  /// Same data, new dims. Element count must be unchanged.
  Tensor4 reshaped(Shape4 shape) const& {
    if (shape.numel() != data_.size()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor4(shape, data_);
  }
  Tensor4 reshaped(Shape4 shape) && {
    if (shape.numel() != data_.size()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor4(shape, std::move(data_));
  }

  void fill(float v) noexcept {
    for (auto& x : data_) x = v;
  }

  /// Bitwise equality of dims and payload (distinguishes -0.0f, compares NaN payloads).
  bool bit_equal(const Tensor4& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
  }

 private:
  Shape4 shape_{};
  std::vector<float> data_;
};

/// Largest absolute elementwise difference. Shapes must match.
inline float max_abs_diff(const Tensor4& a, const Tensor4& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  float m = 0.0f;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    float d = x[i] - y[i];
    d = d < 0 ? -d : d;
    if (d > m || d != d) m = d;
  }
  return m;
}

}  // namespace vajra
