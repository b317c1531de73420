#include "whnn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace whnn {

namespace {

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Tape* common_tape(const Tensor& a, const Tensor& b) {
  require(a.valid() && b.valid(), "tensor op on invalid tensor");
  require(a.tape() == b.tape(), "tensor op across different tapes");
  return a.tape();
}

bool all_finite(std::span<const Real> v) {
  for (Real x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Interpolation grid position for output k of r_out points over n inputs.
// Computed as (k*(n-1))/(r_out-1) so that n == r_out lands exactly on the
// input nodes.
inline double interp_pos(int64_t k, int64_t n, int64_t r_out) {
  if (r_out == 1) return 0.5 * static_cast<double>(n - 1);
  return static_cast<double>(k * (n - 1)) / static_cast<double>(r_out - 1);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

const Shape& Tensor::shape() const { return tape_->shape(id_); }

std::span<const Real> Tensor::values() const { return tape_->values(id_); }

Real Tensor::scalar() const {
  require(numel() == 1, "scalar() on non-scalar tensor");
  return values()[0];
}

Real Tensor::at(int64_t r, int64_t c) const { return values()[r * cols() + c]; }

// ---- Tape ------------------------------------------------------------------

Tensor Tape::leaf(Parameter& p) {
  Node n;
  n.op = "leaf";
  n.shape = p.shape;
  n.value = p.value;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::constant(Shape s, std::vector<Real> values, const char* op) {
  require(static_cast<int64_t>(values.size()) == s.numel(),
          "constant: value count does not match shape");
  Node n;
  n.op = op;
  n.shape = s;
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::record(const char* op, Shape s, std::vector<Real> values,
                    std::vector<int> inputs, BackwardFn back) {
  require(static_cast<int64_t>(values.size()) == s.numel(),
          std::string(op) + ": value count does not match shape");
  if (check_finite_ && !all_finite(values))
    throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
  Node n;
  n.op = op;
  n.shape = s;
  n.value = std::move(values);
  n.inputs = std::move(inputs);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Real* Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.shape.numel(), 0.0);
  return n.grad.data();
}

std::span<const Real> Tape::gradient(const Tensor& t) const {
  return nodes_[t.id()].grad;
}

void Tape::backward(const Tensor& loss) {
  require(loss.valid() && loss.tape() == this, "backward: loss not on this tape");
  require(loss.numel() == 1, "backward: loss must be scalar");
  if (backward_done_) throw std::runtime_error("backward: tape already consumed");
  backward_done_ = true;

  grad_buffer(loss.id())[0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;  // not reachable from the loss
    if (n.back) n.back(*this, id);
    if (n.param) {
      Real* g = n.param->grad.data();
      for (int64_t i = 0; i < n.shape.numel(); ++i) g[i] += n.grad[i];
      n.param->grad_seen = true;
    }
  }
}

std::string Tape::first_nonfinite_op() const {
  for (const Node& n : nodes_)
    if (!all_finite(n.value)) return n.op;
  return {};
}

// ---- Ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape* t = common_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Shape s{a.rows(), b.cols()};
  std::vector<Real> out(s.numel());
  {
    MapC ma(a.values().data(), a.rows(), a.cols());
    MapC mb(b.values().data(), b.rows(), b.cols());
    MapM mo(out.data(), s.rows, s.cols);
    mo.noalias() = ma * mb;
  }
  int ia = a.id(), ib = b.id();
  return t->record("matmul", s, std::move(out), {ia, ib},
                   [ia, ib](Tape& tp, int id) {
                     auto sa = tp.shape(ia);
                     auto sb = tp.shape(ib);
                     auto so = tp.shape(id);
                     MapC go(tp.grad_buffer(id), so.rows, so.cols);
                     MapC ma(tp.values(ia).data(), sa.rows, sa.cols);
                     MapC mb(tp.values(ib).data(), sb.rows, sb.cols);
                     MapM ga(tp.grad_buffer(ia), sa.rows, sa.cols);
                     MapM gb(tp.grad_buffer(ib), sb.rows, sb.cols);
                     ga.noalias() += go * mb.transpose();
                     gb.noalias() += ma.transpose() * go;
                   });
}

Tensor transpose(const Tensor& a) {
  Tape* t = a.tape();
  Shape s{a.cols(), a.rows()};
  std::vector<Real> out(s.numel());
  auto av = a.values();
  for (int64_t r = 0; r < a.rows(); ++r)
    for (int64_t c = 0; c < a.cols(); ++c) out[c * s.cols + r] = av[r * a.cols() + c];
  int ia = a.id();
  return t->record("transpose", s, std::move(out), {ia}, [ia](Tape& tp, int id) {
    auto so = tp.shape(id);
    const Real* go = tp.grad_buffer(id);
    Real* ga = tp.grad_buffer(ia);
    for (int64_t r = 0; r < so.rows; ++r)
      for (int64_t c = 0; c < so.cols; ++c) ga[c * so.rows + r] += go[r * so.cols + c];
  });
}

namespace {

Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b,
                         Real (*f)(Real, Real), void (*bwd)(Real ga_in, Real av, Real bv,
                                                            Real& ga, Real& gb)) {
  Tape* t = common_tape(a, b);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
  std::vector<Real> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(av[i], bv[i]);
  int ia = a.id(), ib = b.id();
  return t->record(op, a.shape(), std::move(out), {ia, ib},
                   [ia, ib, bwd](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     auto av = tp.values(ia);
                     auto bv = tp.values(ib);
                     Real* ga = tp.grad_buffer(ia);
                     Real* gb = tp.grad_buffer(ib);
                     for (int64_t i = 0; i < tp.shape(id).numel(); ++i) {
                       Real da = 0, db = 0;
                       bwd(go[i], av[i], bv[i], da, db);
                       ga[i] += da;
                       gb[i] += db;
                     }
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real, Real& ga, Real& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real g, Real, Real, Real& ga, Real& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real g, Real x, Real y, Real& ga, Real& gb) {
        ga = g * y;
        gb = g * x;
      });
}

Tensor scale(const Tensor& a, Real c) {
  Tape* t = a.tape();
  std::vector<Real> out(a.numel());
  auto av = a.values();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] * c;
  int ia = a.id();
  return t->record("scale", a.shape(), std::move(out), {ia}, [ia, c](Tape& tp, int id) {
    const Real* go = tp.grad_buffer(id);
    Real* ga = tp.grad_buffer(ia);
    for (int64_t i = 0; i < tp.shape(id).numel(); ++i) ga[i] += go[i] * c;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  Tape* t = common_tape(a, v);
  require(v.rows() == 1 && v.cols() == a.cols(), "add_rowvec: vector shape mismatch");
  std::vector<Real> out(a.numel());
  auto av = a.values(), vv = v.values();
  for (int64_t r = 0; r < a.rows(); ++r)
    for (int64_t c = 0; c < a.cols(); ++c) out[r * a.cols() + c] = av[r * a.cols() + c] + vv[c];
  int ia = a.id(), iv = v.id();
  return t->record("add_rowvec", a.shape(), std::move(out), {ia, iv},
                   [ia, iv](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     Real* gv = tp.grad_buffer(iv);
                     for (int64_t r = 0; r < s.rows; ++r)
                       for (int64_t c = 0; c < s.cols; ++c) {
                         ga[r * s.cols + c] += go[r * s.cols + c];
                         gv[c] += go[r * s.cols + c];
                       }
                   });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  Tape* t = common_tape(a, v);
  require(v.rows() == 1 && v.cols() == a.cols(), "mul_rowvec: vector shape mismatch");
  std::vector<Real> out(a.numel());
  auto av = a.values(), vv = v.values();
  for (int64_t r = 0; r < a.rows(); ++r)
    for (int64_t c = 0; c < a.cols(); ++c) out[r * a.cols() + c] = av[r * a.cols() + c] * vv[c];
  int ia = a.id(), iv = v.id();
  return t->record("mul_rowvec", a.shape(), std::move(out), {ia, iv},
                   [ia, iv](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     auto av = tp.values(ia);
                     auto vv = tp.values(iv);
                     Real* ga = tp.grad_buffer(ia);
                     Real* gv = tp.grad_buffer(iv);
                     for (int64_t r = 0; r < s.rows; ++r)
                       for (int64_t c = 0; c < s.cols; ++c) {
                         ga[r * s.cols + c] += go[r * s.cols + c] * vv[c];
                         gv[c] += go[r * s.cols + c] * av[r * s.cols + c];
                       }
                   });
}

Tensor mul_colvec(const Tensor& a, const Tensor& v) {
  Tape* t = common_tape(a, v);
  require(v.cols() == 1 && v.rows() == a.rows(), "mul_colvec: vector shape mismatch");
  std::vector<Real> out(a.numel());
  auto av = a.values(), vv = v.values();
  for (int64_t r = 0; r < a.rows(); ++r)
    for (int64_t c = 0; c < a.cols(); ++c) out[r * a.cols() + c] = av[r * a.cols() + c] * vv[r];
  int ia = a.id(), iv = v.id();
  return t->record("mul_colvec", a.shape(), std::move(out), {ia, iv},
                   [ia, iv](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     auto av = tp.values(ia);
                     auto vv = tp.values(iv);
                     Real* ga = tp.grad_buffer(ia);
                     Real* gv = tp.grad_buffer(iv);
                     for (int64_t r = 0; r < s.rows; ++r)
                       for (int64_t c = 0; c < s.cols; ++c) {
                         ga[r * s.cols + c] += go[r * s.cols + c] * vv[r];
                         gv[r] += go[r * s.cols + c] * av[r * s.cols + c];
                       }
                   });
}

Tensor relu(const Tensor& a) {
  Tape* t = a.tape();
  std::vector<Real> out(a.numel());
  auto av = a.values();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] > 0 ? av[i] : 0.0;
  int ia = a.id();
  return t->record("relu", a.shape(), std::move(out), {ia}, [ia](Tape& tp, int id) {
    const Real* go = tp.grad_buffer(id);
    auto av = tp.values(ia);
    Real* ga = tp.grad_buffer(ia);
    for (int64_t i = 0; i < tp.shape(id).numel(); ++i)
      if (av[i] > 0) ga[i] += go[i];
  });
}

Tensor softmax_rows(const Tensor& a) {
  Tape* t = a.tape();
  std::vector<Real> out(a.numel());
  auto av = a.values();
  int64_t n = a.rows(), c = a.cols();
  for (int64_t r = 0; r < n; ++r) {
    const Real* row = av.data() + r * c;
    Real m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    Real sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      out[r * c + j] = std::exp(row[j] - m);
      sum += out[r * c + j];
    }
    for (int64_t j = 0; j < c; ++j) out[r * c + j] /= sum;
  }
  int ia = a.id();
  return t->record("softmax_rows", a.shape(), std::move(out), {ia},
                   [ia](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     auto p = tp.values(id);  // probabilities
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t r = 0; r < s.rows; ++r) {
                       Real dot = 0;
                       for (int64_t j = 0; j < s.cols; ++j)
                         dot += go[r * s.cols + j] * p[r * s.cols + j];
                       for (int64_t j = 0; j < s.cols; ++j)
                         ga[r * s.cols + j] +=
                             p[r * s.cols + j] * (go[r * s.cols + j] - dot);
                     }
                   });
}

// Small epsilon keeps the normalised rows at unit variance to ~1e-9 while
// still guarding the all-constant-row case.
static constexpr Real kLayerNormEps = 1e-9;

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  Tape* t = common_tape(a, gain);
  common_tape(gain, bias);
  require(gain.rows() == 1 && gain.cols() == a.cols() && bias.shape() == gain.shape(),
          "layer_norm_rows: gain/bias must be 1 x cols");
  int64_t n = a.rows(), c = a.cols();
  std::vector<Real> out(a.numel());
  auto av = a.values(), gv = gain.values(), bv = bias.values();
  std::vector<Real> inv_std(n);
  for (int64_t r = 0; r < n; ++r) {
    const Real* row = av.data() + r * c;
    Real mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(c);
    Real is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (int64_t j = 0; j < c; ++j)
      out[r * c + j] = (row[j] - mu) * is * gv[j] + bv[j];
  }
  int ia = a.id(), ig = gain.id(), ib = bias.id();
  return t->record(
      "layer_norm", a.shape(), std::move(out), {ia, ig, ib},
      [ia, ig, ib, inv_std = std::move(inv_std)](Tape& tp, int id) {
        auto s = tp.shape(id);
        int64_t c = s.cols;
        const Real* go = tp.grad_buffer(id);
        auto av = tp.values(ia);
        auto gv = tp.values(ig);
        Real* ga = tp.grad_buffer(ia);
        Real* gg = tp.grad_buffer(ig);
        Real* gb = tp.grad_buffer(ib);
        for (int64_t r = 0; r < s.rows; ++r) {
          const Real* row = av.data() + r * c;
          Real mu = 0;
          for (int64_t j = 0; j < c; ++j) mu += row[j];
          mu /= static_cast<Real>(c);
          Real is = inv_std[r];
          Real mean_dy = 0, mean_dyy = 0;
          for (int64_t j = 0; j < c; ++j) {
            Real y = (row[j] - mu) * is;
            Real dy = go[r * c + j] * gv[j];
            gg[j] += go[r * c + j] * y;
            gb[j] += go[r * c + j];
            mean_dy += dy;
            mean_dyy += dy * y;
          }
          mean_dy /= static_cast<Real>(c);
          mean_dyy /= static_cast<Real>(c);
          for (int64_t j = 0; j < c; ++j) {
            Real y = (row[j] - mu) * is;
            Real dy = go[r * c + j] * gv[j];
            ga[r * c + j] += is * (dy - mean_dy - y * mean_dyy);
          }
        }
      });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  require(rate < 1.0, "dropout: rate must be < 1");
  Tape* t = a.tape();
  double keep = 1.0 - rate;
  std::vector<uint8_t> mask(a.numel());
  std::vector<Real> out(a.numel());
  auto av = a.values();
  Real inv_keep = 1.0 / keep;
  for (int64_t i = 0; i < a.numel(); ++i) {
    mask[i] = rng.uniform() < keep ? 1 : 0;
    out[i] = mask[i] ? av[i] * inv_keep : 0.0;
  }
  int ia = a.id();
  return t->record("dropout", a.shape(), std::move(out), {ia},
                   [ia, mask = std::move(mask), inv_keep](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t i = 0; i < tp.shape(id).numel(); ++i)
                       if (mask[i]) ga[i] += go[i] * inv_keep;
                   });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  Tape* t = common_tape(a, b);
  require(a.rows() == b.rows(), "concat_cols: row count mismatch");
  Shape s{a.rows(), a.cols() + b.cols()};
  std::vector<Real> out(s.numel());
  auto av = a.values(), bv = b.values();
  for (int64_t r = 0; r < s.rows; ++r) {
    std::copy_n(av.data() + r * a.cols(), a.cols(), out.data() + r * s.cols);
    std::copy_n(bv.data() + r * b.cols(), b.cols(), out.data() + r * s.cols + a.cols());
  }
  int ia = a.id(), ib = b.id();
  int64_t ca = a.cols();
  return t->record("concat_cols", s, std::move(out), {ia, ib},
                   [ia, ib, ca](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     Real* gb = tp.grad_buffer(ib);
                     int64_t cb = s.cols - ca;
                     for (int64_t r = 0; r < s.rows; ++r) {
                       for (int64_t c = 0; c < ca; ++c) ga[r * ca + c] += go[r * s.cols + c];
                       for (int64_t c = 0; c < cb; ++c)
                         gb[r * cb + c] += go[r * s.cols + ca + c];
                     }
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: empty input list");
  Tape* t = parts[0].tape();
  int64_t cols = parts[0].cols();
  int64_t rows = 0;
  std::vector<int> ids;
  for (const Tensor& p : parts) {
    require(p.tape() == t, "concat_rows: tensors on different tapes");
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id());
  }
  Shape s{rows, cols};
  std::vector<Real> out(s.numel());
  int64_t at = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.values().data(), p.numel(), out.data() + at);
    at += p.numel();
  }
  return t->record("concat_rows", s, std::move(out), ids,
                   [ids](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     int64_t at = 0;
                     for (int in : ids) {
                       int64_t n = tp.shape(in).numel();
                       Real* g = tp.grad_buffer(in);
                       for (int64_t i = 0; i < n; ++i) g[i] += go[at + i];
                       at += n;
                     }
                   });
}

Tensor slice_cols(const Tensor& a, int64_t first, int64_t count) {
  Tape* t = a.tape();
  require(first >= 0 && count >= 1 && first + count <= a.cols(),
          "slice_cols: range out of bounds");
  Shape s{a.rows(), count};
  std::vector<Real> out(s.numel());
  auto av = a.values();
  for (int64_t r = 0; r < s.rows; ++r)
    std::copy_n(av.data() + r * a.cols() + first, count, out.data() + r * count);
  int ia = a.id();
  return t->record("slice_cols", s, std::move(out), {ia},
                   [ia, first](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     auto sa = tp.shape(ia);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t r = 0; r < s.rows; ++r)
                       for (int64_t c = 0; c < s.cols; ++c)
                         ga[r * sa.cols + first + c] += go[r * s.cols + c];
                   });
}

Tensor gather_rows(const Tensor& a, std::vector<int64_t> index) {
  Tape* t = a.tape();
  for (int64_t i : index)
    require(i >= 0 && i < a.rows(), "gather_rows: index out of range");
  Shape s{static_cast<int64_t>(index.size()), a.cols()};
  std::vector<Real> out(s.numel());
  auto av = a.values();
  for (size_t r = 0; r < index.size(); ++r)
    std::copy_n(av.data() + index[r] * a.cols(), a.cols(), out.data() + r * a.cols());
  int ia = a.id();
  return t->record("gather_rows", s, std::move(out), {ia},
                   [ia, index = std::move(index)](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (size_t r = 0; r < index.size(); ++r)
                       for (int64_t c = 0; c < s.cols; ++c)
                         ga[index[r] * s.cols + c] += go[r * s.cols + c];
                   });
}

Tensor reshape(const Tensor& a, int64_t rows, int64_t cols) {
  Tape* t = a.tape();
  require(rows * cols == a.numel(), "reshape: element count mismatch");
  std::vector<Real> out(a.values().begin(), a.values().end());
  int ia = a.id();
  return t->record("reshape", Shape{rows, cols}, std::move(out), {ia},
                   [ia](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t i = 0; i < tp.shape(id).numel(); ++i) ga[i] += go[i];
                   });
}

Tensor sum_all(const Tensor& a) {
  Tape* t = a.tape();
  Real s = 0;
  for (Real x : a.values()) s += x;
  int ia = a.id();
  return t->record("sum_all", Shape{1, 1}, {s}, {ia}, [ia](Tape& tp, int id) {
    Real g = tp.grad_buffer(id)[0];
    Real* ga = tp.grad_buffer(ia);
    for (int64_t i = 0; i < tp.shape(ia).numel(); ++i) ga[i] += g;
  });
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<Real>(a.numel()));
}

namespace {

void check_offsets(const std::vector<int64_t>& offsets, int64_t rows, const char* op) {
  require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == rows,
          std::string(op) + ": bad segment offsets");
  for (size_t s = 0; s + 1 < offsets.size(); ++s)
    require(offsets[s] <= offsets[s + 1], std::string(op) + ": offsets not monotone");
}

}  // namespace

Tensor segment_sum(const Tensor& a, std::vector<int64_t> offsets) {
  Tape* t = a.tape();
  check_offsets(offsets, a.rows(), "segment_sum");
  int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
  int64_t c = a.cols();
  std::vector<Real> out(segs * c, 0.0);
  auto av = a.values();
  for (int64_t s = 0; s < segs; ++s)
    for (int64_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (int64_t j = 0; j < c; ++j) out[s * c + j] += av[r * c + j];
  int ia = a.id();
  return t->record("segment_sum", Shape{segs, c}, std::move(out), {ia},
                   [ia, offsets = std::move(offsets)](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t seg = 0; seg < s.rows; ++seg)
                       for (int64_t r = offsets[seg]; r < offsets[seg + 1]; ++r)
                         for (int64_t j = 0; j < s.cols; ++j)
                           ga[r * s.cols + j] += go[seg * s.cols + j];
                   });
}

Tensor segment_mean(const Tensor& a, std::vector<int64_t> offsets) {
  Tape* t = a.tape();
  check_offsets(offsets, a.rows(), "segment_mean");
  int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
  int64_t c = a.cols();
  for (int64_t s = 0; s < segs; ++s)
    require(offsets[s + 1] > offsets[s], "segment_mean: empty segment");
  std::vector<Real> out(segs * c, 0.0);
  auto av = a.values();
  for (int64_t s = 0; s < segs; ++s) {
    Real inv = 1.0 / static_cast<Real>(offsets[s + 1] - offsets[s]);
    for (int64_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (int64_t j = 0; j < c; ++j) out[s * c + j] += av[r * c + j] * inv;
  }
  int ia = a.id();
  return t->record("segment_mean", Shape{segs, c}, std::move(out), {ia},
                   [ia, offsets = std::move(offsets)](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t seg = 0; seg < s.rows; ++seg) {
                       Real inv = 1.0 / static_cast<Real>(offsets[seg + 1] - offsets[seg]);
                       for (int64_t r = offsets[seg]; r < offsets[seg + 1]; ++r)
                         for (int64_t j = 0; j < s.cols; ++j)
                           ga[r * s.cols + j] += go[seg * s.cols + j] * inv;
                     }
                   });
}

Tensor segment_softmax_col(const Tensor& a, std::vector<int64_t> offsets) {
  Tape* t = a.tape();
  require(a.cols() == 1, "segment_softmax_col: expects a column vector");
  check_offsets(offsets, a.rows(), "segment_softmax_col");
  int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
  std::vector<Real> out(a.numel());
  auto av = a.values();
  for (int64_t s = 0; s < segs; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    require(hi > lo, "segment_softmax_col: empty segment");
    Real m = av[lo];
    for (int64_t r = lo + 1; r < hi; ++r) m = std::max(m, av[r]);
    Real sum = 0;
    for (int64_t r = lo; r < hi; ++r) {
      out[r] = std::exp(av[r] - m);
      sum += out[r];
    }
    for (int64_t r = lo; r < hi; ++r) out[r] /= sum;
  }
  int ia = a.id();
  return t->record("segment_softmax", a.shape(), std::move(out), {ia},
                   [ia, offsets = std::move(offsets)](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     auto p = tp.values(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (size_t s = 0; s + 1 < offsets.size(); ++s) {
                       Real dot = 0;
                       for (int64_t r = offsets[s]; r < offsets[s + 1]; ++r)
                         dot += go[r] * p[r];
                       for (int64_t r = offsets[s]; r < offsets[s + 1]; ++r)
                         ga[r] += p[r] * (go[r] - dot);
                     }
                   });
}

Tensor repeat_rows(const Tensor& a, int64_t times) {
  Tape* t = a.tape();
  require(times >= 1, "repeat_rows: times must be positive");
  Shape s{a.rows() * times, a.cols()};
  std::vector<Real> out(s.numel());
  for (int64_t k = 0; k < times; ++k)
    std::copy_n(a.values().data(), a.numel(), out.data() + k * a.numel());
  int ia = a.id();
  return t->record("repeat_rows", s, std::move(out), {ia},
                   [ia, times](Tape& tp, int id) {
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     int64_t n = tp.shape(ia).numel();
                     for (int64_t k = 0; k < times; ++k)
                       for (int64_t i = 0; i < n; ++i) ga[i] += go[k * n + i];
                   });
}

namespace {

// Stable argsort of column entries; shared by sort_columns and the fused
// segment kernel so both use identical tie handling.
void stable_argsort(const Real* vals, int64_t n, int64_t stride, int64_t* perm) {
  std::iota(perm, perm + n, int64_t{0});
  std::stable_sort(perm, perm + n, [vals, stride](int64_t i, int64_t j) {
    return vals[i * stride] < vals[j * stride];
  });
}

}  // namespace

SortResult sort_columns(const Tensor& a) {
  Tape* t = a.tape();
  int64_t n = a.rows(), c = a.cols();
  std::vector<Real> out(a.numel());
  std::vector<int64_t> perm(a.numel());
  auto av = a.values();
  for (int64_t col = 0; col < c; ++col) {
    stable_argsort(av.data() + col, n, c, perm.data() + col * n);
    for (int64_t r = 0; r < n; ++r) out[r * c + col] = av[perm[col * n + r] * c + col];
  }
  int ia = a.id();
  Tensor sorted = t->record(
      "sort_columns", a.shape(), std::move(out), {ia},
      [ia, perm](Tape& tp, int id) {
        auto s = tp.shape(id);
        const Real* go = tp.grad_buffer(id);
        Real* ga = tp.grad_buffer(ia);
        for (int64_t col = 0; col < s.cols; ++col)
          for (int64_t r = 0; r < s.rows; ++r)
            ga[perm[col * s.rows + r] * s.cols + col] += go[r * s.cols + col];
      });
  return {sorted, perm};
}

Tensor quantile_interp_columns(const Tensor& a_sorted, int64_t r_out) {
  Tape* t = a_sorted.tape();
  int64_t n = a_sorted.rows(), c = a_sorted.cols();
  require(n >= 1, "quantile_interp: empty input");
  require(r_out >= 1, "quantile_interp: output length must be positive");
  std::vector<Real> out(r_out * c);
  auto av = a_sorted.values();
  for (int64_t k = 0; k < r_out; ++k) {
    if (n == 1) {
      for (int64_t col = 0; col < c; ++col) out[k * c + col] = av[col];
      continue;
    }
    double p = interp_pos(k, n, r_out);
    int64_t i = std::min(static_cast<int64_t>(p), n - 2);
    Real w = static_cast<Real>(p - static_cast<double>(i));
    for (int64_t col = 0; col < c; ++col)
      out[k * c + col] = (1.0 - w) * av[i * c + col] + w * av[(i + 1) * c + col];
  }
  int ia = a_sorted.id();
  return t->record("quantile_interp", Shape{r_out, c}, std::move(out), {ia},
                   [ia, n](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t k = 0; k < s.rows; ++k) {
                       if (n == 1) {
                         for (int64_t col = 0; col < s.cols; ++col)
                           ga[col] += go[k * s.cols + col];
                         continue;
                       }
                       double p = interp_pos(k, n, s.rows);
                       int64_t i = std::min(static_cast<int64_t>(p), n - 2);
                       Real w = static_cast<Real>(p - static_cast<double>(i));
                       for (int64_t col = 0; col < s.cols; ++col) {
                         ga[i * s.cols + col] += (1.0 - w) * go[k * s.cols + col];
                         ga[(i + 1) * s.cols + col] += w * go[k * s.cols + col];
                       }
                     }
                   });
}

Tensor segment_sort_interpolate(const Tensor& a, std::vector<int64_t> offsets,
                                int64_t r_out) {
  Tape* t = a.tape();
  check_offsets(offsets, a.rows(), "segment_sort_interpolate");
  require(r_out >= 1, "segment_sort_interpolate: output length must be positive");
  int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
  int64_t c = a.cols();
  for (int64_t s = 0; s < segs; ++s)
    require(offsets[s + 1] > offsets[s], "segment_sort_interpolate: empty neighbourhood");

  auto av = a.values();
  std::vector<Real> out(segs * r_out * c);
  // Per segment and column: absolute source rows in sorted order. Laid out
  // contiguously: segment s, column l occupies [offsets[s]*c + l*k, +k).
  std::vector<int64_t> perm(a.rows() * c);
  std::vector<int64_t> scratch;
  for (int64_t s = 0; s < segs; ++s) {
    int64_t lo = offsets[s], k = offsets[s + 1] - offsets[s];
    scratch.resize(k);
    for (int64_t col = 0; col < c; ++col) {
      stable_argsort(av.data() + lo * c + col, k, c, scratch.data());
      int64_t* dst = perm.data() + lo * c + col * k;
      for (int64_t r = 0; r < k; ++r) dst[r] = lo + scratch[r];
      for (int64_t q = 0; q < r_out; ++q) {
        Real v;
        if (k == 1) {
          v = av[dst[0] * c + col];
        } else {
          double p = interp_pos(q, k, r_out);
          int64_t i = std::min(static_cast<int64_t>(p), k - 2);
          Real w = static_cast<Real>(p - static_cast<double>(i));
          v = (1.0 - w) * av[dst[i] * c + col] + w * av[dst[i + 1] * c + col];
        }
        out[(s * r_out + q) * c + col] = v;
      }
    }
  }
  int ia = a.id();
  return t->record(
      "segment_sort_interpolate", Shape{segs * r_out, c}, std::move(out), {ia},
      [ia, offsets = std::move(offsets), perm = std::move(perm), r_out](Tape& tp, int id) {
        auto s = tp.shape(id);
        int64_t c = s.cols;
        const Real* go = tp.grad_buffer(id);
        Real* ga = tp.grad_buffer(ia);
        int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
        for (int64_t seg = 0; seg < segs; ++seg) {
          int64_t lo = offsets[seg], k = offsets[seg + 1] - offsets[seg];
          for (int64_t col = 0; col < c; ++col) {
            const int64_t* src = perm.data() + lo * c + col * k;
            for (int64_t q = 0; q < r_out; ++q) {
              Real g = go[(seg * r_out + q) * c + col];
              if (k == 1) {
                ga[src[0] * c + col] += g;
              } else {
                double p = interp_pos(q, k, r_out);
                int64_t i = std::min(static_cast<int64_t>(p), k - 2);
                Real w = static_cast<Real>(p - static_cast<double>(i));
                ga[src[i] * c + col] += (1.0 - w) * g;
                ga[src[i + 1] * c + col] += w * g;
              }
            }
          }
        }
      });
}

Tensor block_column_rms(const Tensor& a, int64_t block_rows) {
  Tape* t = a.tape();
  require(block_rows >= 1 && a.rows() % block_rows == 0,
          "block_column_rms: rows must be a multiple of block_rows");
  int64_t segs = a.rows() / block_rows;
  int64_t c = a.cols();
  std::vector<Real> out(segs * c, 0.0);
  auto av = a.values();
  for (int64_t s = 0; s < segs; ++s) {
    for (int64_t r = 0; r < block_rows; ++r)
      for (int64_t j = 0; j < c; ++j) {
        Real x = av[(s * block_rows + r) * c + j];
        out[s * c + j] += x * x;
      }
    for (int64_t j = 0; j < c; ++j)
      out[s * c + j] = std::sqrt(out[s * c + j] / static_cast<Real>(block_rows));
  }
  int ia = a.id();
  return t->record("block_column_rms", Shape{segs, c}, std::move(out), {ia},
                   [ia, block_rows](Tape& tp, int id) {
                     auto s = tp.shape(id);
                     const Real* go = tp.grad_buffer(id);
                     auto av = tp.values(ia);
                     auto ov = tp.values(id);
                     Real* ga = tp.grad_buffer(ia);
                     for (int64_t seg = 0; seg < s.rows; ++seg)
                       for (int64_t r = 0; r < block_rows; ++r)
                         for (int64_t j = 0; j < s.cols; ++j) {
                           Real denom = ov[seg * s.cols + j] * static_cast<Real>(block_rows);
                           if (denom <= 0) continue;  // subgradient 0 at exact zero
                           int64_t idx = (seg * block_rows + r) * s.cols + j;
                           ga[idx] += go[seg * s.cols + j] * av[idx] / denom;
                         }
                   });
}

Tensor blocked_matmul_nt(const Tensor& a, const Tensor& b, int64_t ra, int64_t rb) {
  Tape* t = common_tape(a, b);
  require(ra >= 1 && rb >= 1 && a.rows() % ra == 0 && b.rows() % rb == 0,
          "blocked_matmul_nt: rows not divisible by block size");
  require(a.rows() / ra == b.rows() / rb, "blocked_matmul_nt: block count mismatch");
  require(a.cols() == b.cols(), "blocked_matmul_nt: inner dimension mismatch");
  int64_t g = a.rows() / ra, d = a.cols();
  Shape s{g * ra, rb};
  std::vector<Real> out(s.numel());
  {
    MapC ma(a.values().data(), a.rows(), d);
    MapC mb(b.values().data(), b.rows(), d);
    MapM mo(out.data(), s.rows, s.cols);
    for (int64_t i = 0; i < g; ++i)
      mo.middleRows(i * ra, ra).noalias() =
          ma.middleRows(i * ra, ra) * mb.middleRows(i * rb, rb).transpose();
  }
  int ia = a.id(), ib = b.id();
  return t->record("blocked_matmul_nt", s, std::move(out), {ia, ib},
                   [ia, ib, ra, rb](Tape& tp, int id) {
                     auto sa = tp.shape(ia);
                     auto sb = tp.shape(ib);
                     auto so = tp.shape(id);
                     int64_t g = sa.rows / ra;
                     MapC go(tp.grad_buffer(id), so.rows, so.cols);
                     MapC ma(tp.values(ia).data(), sa.rows, sa.cols);
                     MapC mb(tp.values(ib).data(), sb.rows, sb.cols);
                     MapM ga(tp.grad_buffer(ia), sa.rows, sa.cols);
                     MapM gb(tp.grad_buffer(ib), sb.rows, sb.cols);
                     for (int64_t i = 0; i < g; ++i) {
                       ga.middleRows(i * ra, ra).noalias() +=
                           go.middleRows(i * ra, ra) * mb.middleRows(i * rb, rb);
                       gb.middleRows(i * rb, rb).noalias() +=
                           go.middleRows(i * ra, ra).transpose() * ma.middleRows(i * ra, ra);
                     }
                   });
}

Tensor blocked_matmul_nn(const Tensor& s, const Tensor& b, int64_t ra, int64_t rb) {
  Tape* t = common_tape(s, b);
  require(ra >= 1 && rb >= 1 && s.rows() % ra == 0 && b.rows() % rb == 0,
          "blocked_matmul_nn: rows not divisible by block size");
  require(s.rows() / ra == b.rows() / rb, "blocked_matmul_nn: block count mismatch");
  require(s.cols() == rb, "blocked_matmul_nn: scores width must equal key block");
  int64_t g = s.rows() / ra, d = b.cols();
  Shape shp{g * ra, d};
  std::vector<Real> out(shp.numel());
  {
    MapC ms(s.values().data(), s.rows(), s.cols());
    MapC mb(b.values().data(), b.rows(), d);
    MapM mo(out.data(), shp.rows, shp.cols);
    for (int64_t i = 0; i < g; ++i)
      mo.middleRows(i * ra, ra).noalias() =
          ms.middleRows(i * ra, ra) * mb.middleRows(i * rb, rb);
  }
  int is = s.id(), ib = b.id();
  return t->record("blocked_matmul_nn", shp, std::move(out), {is, ib},
                   [is, ib, ra, rb](Tape& tp, int id) {
                     auto ss = tp.shape(is);
                     auto sb = tp.shape(ib);
                     auto so = tp.shape(id);
                     int64_t g = ss.rows / ra;
                     MapC go(tp.grad_buffer(id), so.rows, so.cols);
                     MapC ms(tp.values(is).data(), ss.rows, ss.cols);
                     MapC mb(tp.values(ib).data(), sb.rows, sb.cols);
                     MapM gs(tp.grad_buffer(is), ss.rows, ss.cols);
                     MapM gb(tp.grad_buffer(ib), sb.rows, sb.cols);
                     for (int64_t i = 0; i < g; ++i) {
                       gs.middleRows(i * ra, ra).noalias() +=
                           go.middleRows(i * ra, ra) * mb.middleRows(i * rb, rb).transpose();
                       gb.middleRows(i * rb, rb).noalias() +=
                           ms.middleRows(i * ra, ra).transpose() * go.middleRows(i * ra, ra);
                     }
                   });
}

Tensor masked_cross_entropy(const Tensor& logits, std::vector<int32_t> labels,
                            std::vector<uint8_t> mask) {
  Tape* t = logits.tape();
  int64_t n = logits.rows(), c = logits.cols();
  require(static_cast<int64_t>(labels.size()) == n, "cross_entropy: labels size mismatch");
  require(static_cast<int64_t>(mask.size()) == n, "cross_entropy: mask size mismatch");
  int64_t count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  require(count > 0, "cross_entropy: empty mask");
  auto lv = logits.values();
  Real loss = 0;
  for (int64_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    require(labels[r] >= 0 && labels[r] < c, "cross_entropy: label out of range");
    const Real* row = lv.data() + r * c;
    Real m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    Real sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
    loss += std::log(sum) - (row[labels[r]] - m);
  }
  loss /= static_cast<Real>(count);
  int il = logits.id();
  return t->record(
      "cross_entropy", Shape{1, 1}, {loss}, {il},
      [il, labels = std::move(labels), mask = std::move(mask), count](Tape& tp, int id) {
        Real g = tp.grad_buffer(id)[0] / static_cast<Real>(count);
        auto s = tp.shape(il);
        auto lv = tp.values(il);
        Real* gl = tp.grad_buffer(il);
        for (int64_t r = 0; r < s.rows; ++r) {
          if (!mask[r]) continue;
          const Real* row = lv.data() + r * s.cols;
          Real m = row[0];
          for (int64_t j = 1; j < s.cols; ++j) m = std::max(m, row[j]);
          Real sum = 0;
          for (int64_t j = 0; j < s.cols; ++j) sum += std::exp(row[j] - m);
          for (int64_t j = 0; j < s.cols; ++j) {
            Real p = std::exp(row[j] - m) / sum;
            gl[r * s.cols + j] += g * (p - (j == labels[r] ? 1.0 : 0.0));
          }
        }
      });
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->shape.numel(), 0.0);
    v_.emplace_back(p->shape.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    if (!p->grad_seen)
      throw std::runtime_error("adam_step: missing gradient on parameter '" + p->name + "'");
    for (int64_t j = 0; j < p->shape.numel(); ++j) {
      Real g = p->grad[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
      Real mhat = m_[i][j] / bc1;
      Real vhat = v_[i][j] / bc2;
      p->value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    p->zero_grad();
  }
}

// ---- Gradient checking -----------------------------------------------------

double grad_check(const std::function<Tensor(Tape&)>& build,
                  const std::vector<Parameter*>& params, double eps,
                  int64_t max_coords, uint64_t seed) {
  for (Parameter* p : params) p->zero_grad();
  std::vector<std::vector<Real>> analytic;
  {
    Tape tape;
    Tensor loss = build(tape);
    tape.backward(loss);
    for (Parameter* p : params) analytic.push_back(p->grad);
  }

  // Enumerate (param, coord) pairs; subsample if the total is large.
  std::vector<std::pair<size_t, int64_t>> coords;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (int64_t j = 0; j < params[pi]->shape.numel(); ++j) coords.push_back({pi, j});
  if (static_cast<int64_t>(coords.size()) > max_coords) {
    Rng rng = Rng::stream(seed, "gradcheck");
    rng.shuffle(coords.data(), static_cast<int64_t>(coords.size()));
    coords.resize(max_coords);
  }

  auto eval = [&]() {
    Tape tape;
    return build(tape).scalar();
  };

  double max_rel = 0.0;
  for (auto [pi, j] : coords) {
    Parameter* p = params[pi];
    Real saved = p->value[j];
    p->value[j] = saved + eps;
    Real fp = eval();
    p->value[j] = saved - eps;
    Real fm = eval();
    p->value[j] = saved;
    Real fd = (fp - fm) / (2.0 * eps);
    Real an = analytic[pi][j];
    Real rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0});
    max_rel = std::max(max_rel, rel);
  }
  for (Parameter* p : params) p->zero_grad();
  return max_rel;
}

}  // namespace whnn
