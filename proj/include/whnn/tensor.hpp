#ifndef WHNN_TENSOR_HPP
#define WHNN_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "whnn/rng.hpp"

namespace whnn {

// Test builds run everything in double; training precision is the same type.
using Real = double;

struct Shape {
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t numel() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

// Persistent leaf storage: value plus accumulated gradient. Parameters
// outlive any single tape; Tape::leaf wires them into a forward pass.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool trainable = true;
  bool grad_seen = false;  // set by backward() when this leaf was reached

  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(s), value(s.numel(), 0.0), grad(s.numel(), 0.0) {}

  void zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
    grad_seen = false;
  }
};

class Tape;

// Lightweight handle to a node on a tape. Valid as long as the tape lives.
class Tensor {
 public:
  Tensor() = default;
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  int64_t rows() const { return shape().rows; }
  int64_t cols() const { return shape().cols; }
  int64_t numel() const { return shape().numel(); }
  std::span<const Real> values() const;
  Real scalar() const;
  Real at(int64_t r, int64_t c) const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Append-only record of a forward computation. Backward walks the records
// in reverse exactly once; gradients accumulate additively across fan-out.
class Tape {
 public:
  // Receives the tape and the id of the node whose grad is being propagated.
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Parameter& p);
  Tensor constant(Shape s, std::vector<Real> values, const char* op = "constant");
  Tensor record(const char* op, Shape s, std::vector<Real> values,
                std::vector<int> inputs, BackwardFn back);

  // Fills gradients of every reachable node and flushes leaf grads into
  // their Parameters. `loss` must be scalar; a tape backpropagates once.
  void backward(const Tensor& loss);

  std::span<const Real> values(int id) const { return nodes_[id].value; }
  const Shape& shape(int id) const { return nodes_[id].shape; }
  const char* op_name(int id) const { return nodes_[id].op; }
  size_t num_nodes() const { return nodes_.size(); }

  // Gradient of a node after backward(); empty if the node was not reached.
  std::span<const Real> gradient(const Tensor& t) const;

  // Accumulation buffer, allocated (zeroed) on first use during backward.
  Real* grad_buffer(int id);
  bool grad_allocated(int id) const { return !nodes_[id].grad.empty(); }

  // Name of the first op (in execution order) that produced a non-finite
  // value, or empty string when everything is finite.
  std::string first_nonfinite_op() const;

  bool check_finite() const { return check_finite_; }

 private:
  struct Node {
    const char* op;
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    std::vector<int> inputs;
    BackwardFn back;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
  bool check_finite_ = false;
  bool backward_done_ = false;
};

// ---- Operator catalogue ----------------------------------------------------
// Every op below has a matching backward rule; grad_check covers them all.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, Real c);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // v is 1 x cols
Tensor mul_rowvec(const Tensor& a, const Tensor& v);  // v is 1 x cols
Tensor mul_colvec(const Tensor& a, const Tensor& v);  // v is rows x 1
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias);
Tensor dropout(const Tensor& a, double rate, Rng& rng);  // train-mode only
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int64_t first, int64_t count);
Tensor gather_rows(const Tensor& a, std::vector<int64_t> index);
Tensor reshape(const Tensor& a, int64_t rows, int64_t cols);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Segment reductions over a CSR layout: offsets has S+1 entries and row
// ranges [offsets[s], offsets[s+1]) of `a` form segment s.
Tensor segment_sum(const Tensor& a, std::vector<int64_t> offsets);
Tensor segment_mean(const Tensor& a, std::vector<int64_t> offsets);
// Softmax over each segment of a column vector (rows x 1).
Tensor segment_softmax_col(const Tensor& a, std::vector<int64_t> offsets);

// Stacks `times` copies of `a` vertically.
Tensor repeat_rows(const Tensor& a, int64_t times);

// Sorts each column ascending (stable). perm[c * rows + r] is the source row
// of sorted element r in column c; backward scatters through the permutation.
struct SortResult {
  Tensor sorted;
  std::vector<int64_t> perm;
};
SortResult sort_columns(const Tensor& a);

// Evaluates the piecewise-linear empirical quantile function of each sorted
// column at r_out equally spaced points t_k = k/(r_out-1) (t = 0.5 for
// r_out = 1). Columns must be nondecreasing. n == r_out is the identity.
Tensor quantile_interp_columns(const Tensor& a_sorted, int64_t r_out);

// Fused per-segment sort + quantile interpolation used by the Wasserstein
// aggregator: for every segment and every column independently, sorts the
// segment's entries and interpolates them to length r_out. Output has
// S * r_out rows. Gradients flow through both the interpolation weights and
// the sorting permutation.
Tensor segment_sort_interpolate(const Tensor& a, std::vector<int64_t> offsets,
                                int64_t r_out);

// Root-mean-square over blocks of `block_rows` consecutive rows, per column:
// (S*block_rows) x C -> S x C.
Tensor block_column_rms(const Tensor& a, int64_t block_rows);

// Block-diagonal matmuls for batched per-set attention. `a` has g*ra rows,
// `b` has g*rb rows; block i of the output pairs rows [i*ra,(i+1)*ra) of a
// with rows [i*rb,(i+1)*rb) of b.
Tensor blocked_matmul_nt(const Tensor& a, const Tensor& b, int64_t ra, int64_t rb);
Tensor blocked_matmul_nn(const Tensor& s, const Tensor& b, int64_t ra, int64_t rb);

// Mean over masked rows of -log softmax(logits)[label]; stabilised by max
// subtraction. labels/mask sized rows; mask must select at least one row.
Tensor masked_cross_entropy(const Tensor& logits, std::vector<int32_t> labels,
                            std::vector<uint8_t> mask);

// ---- Optimiser -------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamConfig cfg = {});
  // Bias-corrected update in place; zeroes grads afterwards. Throws if a
  // parameter was never reached by backward() since the last step.
  void step();
  int64_t steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<Real>> m_, v_;
  int64_t t_ = 0;
  AdamConfig cfg_;
};

// ---- Gradient checking -----------------------------------------------------

// Central finite differences on every coordinate of every parameter (or a
// seeded subsample above max_coords); returns the max relative error against
// the reverse-mode gradient. `build` must be deterministic.
double grad_check(const std::function<Tensor(Tape&)>& build,
                  const std::vector<Parameter*>& params, double eps = 1e-5,
                  int64_t max_coords = 10000, uint64_t seed = 123);

}  // namespace whnn

#endif  // WHNN_TENSOR_HPP
