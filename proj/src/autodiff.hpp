#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tensor.hpp"

namespace ssm2mel::ad {

class Tape;

// Handle to one node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;
  bool defined() const { return tape != nullptr; }
  const Tensor& val() const;
};

// Define-by-run reverse-mode tape. Nodes are recorded in topological order
// (every input precedes its consumers); backward walks the list once in
// reverse and sums gradient contributions from all consumers.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // loss must be scalar (one element); throws otherwise.
  void backward(Var loss);

  const Tensor& value(int32_t id) const { return nodes_[id].value; }
  const Tensor& grad(Var v) const;
  bool node_requires_grad(int32_t id) const { return nodes_[id].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // When set, every recorded value is checked for NaN/Inf.
  static bool finite_checks;
  // Test hook: mis-scales the GELU backward rule (negative control for
  // the gradient checker).
  static bool corrupt_gelu_backward;

  Var make(const char* op, Tensor value, bool requires_grad,
           std::function<void(Tape&, int32_t)> back);
  Tensor& grad_buf(int32_t id);  // lazily allocated, zero-initialized

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&, int32_t)> back;  // empty for leaves / constants
  };
  std::vector<Node> nodes_;
};

// ---- operation set ------------------------------------------------------
// Elementwise ops accept equal shapes; add/sub/mul additionally broadcast a
// scalar or a 1-D tensor matching the last axis (bias/row patterns).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);            // strictly 2-D
Var transpose(Var a);                // 2-D
Var reshape(Var a, std::vector<int64_t> shape);
Var concat(const std::vector<Var>& xs, int axis);   // 2-D, axis 0 or 1; 1-D axis 0
Var slice(Var a, int axis, int64_t start, int64_t len);
Var pad2d(Var a, int64_t top, int64_t bottom, int64_t left, int64_t right);

// x [T x Cin], w [Cout x Cin/groups x K], optional bias [Cout]; "valid"
// convolution (pad beforehand), output [(T-K)/stride+1 x Cout].
Var conv1d(Var x, Var w, Var b, int64_t stride, int64_t groups);
// x [T x Cin], w [Cin x Cout x K]; output [(T-1)*stride+K x Cout].
Var conv1d_transpose(Var x, Var w, Var b, int64_t stride);

Var softmax(Var a);      // last axis
Var layer_norm(Var a);   // normalize last axis, eps 1e-5, no affine part

Var gelu(Var a);
Var silu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var power(Var a, double p);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var mean(Var a);  // full reduction -> shape [1]
Var sum(Var a);

inline Var neg(Var a) { return scale(a, -1.0); }
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---- finite-difference gradient checker ---------------------------------
struct GradCheckEntry {
  int64_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0;
  double step = 0;
  double tol = 0;
  int64_t checked = 0;
  std::vector<GradCheckEntry> worst;  // few largest offenders
};

// Central differences (f(x+h)-f(x-h))/2h per coordinate of x against the
// tape gradient. Relative error uses |a-b| / max(|a|,|b|,1e-3); the floor
// keeps finite-difference noise on near-zero coordinates from dominating.
// max_coords > 0 checks a seeded random subset of coordinates.
GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                           double step, double tol, int64_t max_coords = 0,
                           uint64_t sample_seed = 0x5eed);

}  // namespace ssm2mel::ad
