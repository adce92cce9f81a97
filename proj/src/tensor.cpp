#include "tensor.hpp"

#include <cmath>

#include "errors.hpp"
#include "rng.hpp"

namespace ssm2mel {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int64_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  for (int64_t e : shape) {
    if (e <= 0) throw Error(ErrKind::Shape, "tensor: non-positive extent in " + shape_str(shape));
  }
  if (shape_numel(shape) != numel()) {
    throw Error(ErrKind::Shape, "tensor: shape " + shape_str(shape) + " does not match " +
                                    std::to_string(numel()) + " elements");
  }
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
}

Tensor Tensor::vec(std::vector<double> v) {
  int64_t n = static_cast<int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(int64_t r, int64_t c, std::vector<double> v) {
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::uniform(std::vector<int64_t> shape, double lo, double hi, Xoshiro256pp& rng) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::gaussian(std::vector<int64_t> shape, double mean, double std, Xoshiro256pp& rng) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data) v = mean + std * rng.normal();
  return t;
}

double Tensor::scalar_value() const {
  if (!is_scalar()) throw Error(ErrKind::Shape, "tensor: expected scalar, got " + shape_str(shape));
  return data[0];
}

int64_t Tensor::rows() const {
  if (ndim() != 2) throw Error(ErrKind::Shape, "tensor: rows() on non-matrix " + shape_str(shape));
  return shape[0];
}

int64_t Tensor::cols() const {
  if (ndim() != 2) throw Error(ErrKind::Shape, "tensor: cols() on non-matrix " + shape_str(shape));
  return shape[1];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace ssm2mel
