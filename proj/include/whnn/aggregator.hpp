#ifndef WHNN_AGGREGATOR_HPP
#define WHNN_AGGREGATOR_HPP

#include <string>

#include "whnn/hypergraph.hpp"
#include "whnn/nn.hpp"

namespace whnn {

enum class AggregatorKind { Swp, Mean, DeepSets, Pma };

enum class SwpVariant { FlattenLinear, PerSliceScalar };

std::string to_string(AggregatorKind k);
AggregatorKind aggregator_from_string(const std::string& s);

// Draws r x l reference samples iid from a standard normal and sorts each
// column ascending. Deterministic under the seed.
void sample_reference(Parameter& q, Rng& rng);

// Returns a view of `neigh` whose segments are sorted ascending; aggregation
// always walks members in this canonical order so that outputs are
// bit-identical under member permutation.
AdjacencyList canonical_neighbourhoods(const AdjacencyList& neigh);

// Sliced Wasserstein Pooling. Per neighbourhood S: project members onto the
// slice bank, sort each slice, interpolate the quantile function to the
// reference size, take signed differences against the sorted reference, and
// combine the slices (flatten-linear by default, RMS-per-slice otherwise).
struct SwpAggregator {
  Parameter* slices = nullptr;     // Theta, d x L, columns unit norm at init
  Parameter* reference = nullptr;  // Q, R x L, columns sorted
  Parameter* combine = nullptr;    // W, (R*L) x d_out  (flatten-linear)
  Parameter* slice_weights = nullptr;  // w_l, 1 x L     (per-slice-scalar)
  SwpVariant variant = SwpVariant::FlattenLinear;
  int64_t num_ref = 10;

  static SwpAggregator build(ParamStore& store, const std::string& prefix,
                             int64_t in_dim, int64_t num_slices, int64_t num_ref,
                             int64_t out_dim, SwpVariant variant,
                             bool learnable_reference, bool learnable_slices,
                             Rng& rng);

  Tensor aggregate(Tape& tape, const Tensor& x, const AdjacencyList& neigh) const;
};

struct MeanAggregator {
  Tensor aggregate(Tape& tape, const Tensor& x, const AdjacencyList& neigh) const;
};

// MLP_out( sum_{i in S} MLP_in(x_i) )
struct DeepSetsAggregator {
  Mlp mlp_in;
  Mlp mlp_out;

  static DeepSetsAggregator build(ParamStore& store, const std::string& prefix,
                                  int64_t dim, int layers, Rng& rng,
                                  double dropout_rate);
  Tensor aggregate(Tape& tape, const Tensor& x, const AdjacencyList& neigh,
                   const ForwardCtx& ctx) const;
};

// Pooling by multihead attention: a learnable seed attends over the members;
// output is layer_norm(seed + sum_i alpha_i x_i W_v).
struct PmaAggregator {
  Parameter* seed = nullptr;  // 1 x dim
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Parameter* ln_gain = nullptr;
  Parameter* ln_bias = nullptr;

  static PmaAggregator build(ParamStore& store, const std::string& prefix,
                             int64_t dim, Rng& rng);
  Tensor aggregate(Tape& tape, const Tensor& x, const AdjacencyList& neigh) const;
};

}  // namespace whnn

#endif  // WHNN_AGGREGATOR_HPP
