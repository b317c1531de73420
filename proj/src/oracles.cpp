#include "whnn/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "whnn/rng.hpp"

namespace whnn {

double w2_1d(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("w2_1d: size mismatch between empirical distributions");
  if (a.empty()) throw std::invalid_argument("w2_1d: empty distributions");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double cost = 0;
  for (size_t i = 0; i < sa.size(); ++i) {
    double d = sa[i] - sb[i];
    cost += d * d;
  }
  return std::sqrt(cost / static_cast<double>(sa.size()));
}

double w2_1d_exhaustive(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("w2_1d_exhaustive: size mismatch");
  size_t n = a.size();
  if (n == 0) throw std::invalid_argument("w2_1d_exhaustive: empty distributions");
  if (n > 8) throw std::invalid_argument("w2_1d_exhaustive: n too large for n! search");
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0;
    for (size_t i = 0; i < n; ++i) {
      double d = a[i] - b[perm[i]];
      cost += d * d;
    }
    best = std::min(best, cost);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / static_cast<double>(n));
}

double sliced_w2(std::span<const double> a, std::span<const double> b,
                 int64_t n, int64_t dim, int64_t slices, uint64_t seed) {
  if (static_cast<int64_t>(a.size()) != n * dim ||
      static_cast<int64_t>(b.size()) != n * dim)
    throw std::invalid_argument("sliced_w2: size mismatch");
  if (slices < 1) throw std::invalid_argument("sliced_w2: need at least one slice");
  Rng rng = Rng::stream(seed, "slices");
  std::vector<double> theta(dim), pa(n), pb(n);
  double acc = 0;
  for (int64_t l = 0; l < slices; ++l) {
    double norm = 0;
    do {
      norm = 0;
      for (int64_t d = 0; d < dim; ++d) {
        theta[d] = rng.normal();
        norm += theta[d] * theta[d];
      }
    } while (norm == 0);
    norm = std::sqrt(norm);
    for (int64_t d = 0; d < dim; ++d) theta[d] /= norm;
    for (int64_t i = 0; i < n; ++i) {
      double da = 0, db = 0;
      for (int64_t d = 0; d < dim; ++d) {
        da += a[i * dim + d] * theta[d];
        db += b[i * dim + d] * theta[d];
      }
      pa[i] = da;
      pb[i] = db;
    }
    double w = w2_1d(pa, pb);
    acc += w * w;
  }
  return std::sqrt(acc / static_cast<double>(slices));
}

}  // namespace whnn
