#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdt {

// Dense row-major tensor of doubles. Small and dumb on purpose; all the
// interesting work happens in the kernels and the graph ops.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, double fill = 0.0) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(count(shape)), fill);
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  bool empty() const { return v.empty(); }

  int64_t dim(int i) const {
    if (i < 0) i += static_cast<int>(shape.size());
    return shape[static_cast<size_t>(i)];
  }

  // product of all dims but the last
  int64_t rows() const { return shape.empty() ? 0 : size() / shape.back(); }
  int64_t cols() const { return shape.empty() ? 0 : shape.back(); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  static std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + ")";
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace hdt
