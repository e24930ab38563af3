#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rp {

// Thrown when an op produces a NaN/Inf or is fed one.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

// Dense row-major f32 tensor.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace rp
