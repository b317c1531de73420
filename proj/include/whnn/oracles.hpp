#ifndef WHNN_ORACLES_HPP
#define WHNN_ORACLES_HPP

#include <cstdint>
#include <span>
#include <vector>

namespace whnn {

// Closed-form 1D 2-Wasserstein distance between equal-size empirical
// distributions with uniform weights: sqrt((1/n) sum (a_(i) - b_(i))^2)
// over sorted order.
double w2_1d(std::span<const double> a, std::span<const double> b);

// Independent check: minimises the quadratic assignment cost over all n!
// pairings. Only sensible for n <= 8.
double w2_1d_exhaustive(std::span<const double> a, std::span<const double> b);

// Monte Carlo sliced 2-Wasserstein between point sets of equal size in R^d:
// sqrt of the mean over `slices` random unit directions of the squared 1D
// distance of the projections. Points are row-major n x d.
double sliced_w2(std::span<const double> a, std::span<const double> b,
                 int64_t n, int64_t dim, int64_t slices, uint64_t seed);

}  // namespace whnn

#endif  // WHNN_ORACLES_HPP
