#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssm2mel {

class Xoshiro256pp;

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// Dense row-major tensor of 64-bit floats. The universal value type of
// the library; all arithmetic is done in double precision.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vec(std::vector<double> v);
  static Tensor matrix(int64_t r, int64_t c, std::vector<double> v);
  static Tensor uniform(std::vector<int64_t> shape, double lo, double hi, Xoshiro256pp& rng);
  static Tensor gaussian(std::vector<int64_t> shape, double mean, double std, Xoshiro256pp& rng);

  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const;

  // 2-D accessors; at() assumes ndim()==2
  int64_t rows() const;
  int64_t cols() const;
  double& at(int64_t r, int64_t c) { return data[r * shape[1] + c]; }
  double at(int64_t r, int64_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

}  // namespace ssm2mel
