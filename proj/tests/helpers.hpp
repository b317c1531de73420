#ifndef WHNN_TESTS_HELPERS_HPP
#define WHNN_TESTS_HELPERS_HPP

#include <vector>

#include "whnn/nn.hpp"
#include "whnn/tensor.hpp"

namespace whnn::testing {

inline Parameter& rand_param(ParamStore& store, const std::string& name, int64_t rows,
                             int64_t cols, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Parameter& p = store.create(name, Shape{rows, cols});
  for (Real& v : p.value) v = rng.uniform(lo, hi);
  return p;
}

// Contracts a tensor to a scalar with fixed pseudo-random weights so that
// every output coordinate contributes a distinct gradient signal.
inline Tensor reduce_loss(Tape& tape, const Tensor& y, uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<Real> w(y.numel());
  for (Real& v : w) v = rng.uniform(-1.0, 1.0);
  Tensor c = tape.constant(y.shape(), std::move(w), "loss_weights");
  return sum_all(mul(y, c));
}

inline std::vector<Real> rand_values(int64_t n, Rng& rng, double lo = -1.0,
                                     double hi = 1.0) {
  std::vector<Real> v(n);
  for (Real& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Strictly distinct values: keeps sort gradients away from tie points.
inline std::vector<Real> distinct_values(int64_t n, Rng& rng) {
  std::vector<Real> v(n);
  for (int64_t i = 0; i < n; ++i) v[i] = rng.uniform(-1.0, 1.0) + 1e-4 * static_cast<double>(i);
  return v;
}

}  // namespace whnn::testing

#endif
