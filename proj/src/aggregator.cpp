#include "whnn/aggregator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace whnn {

std::string to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::Swp: return "SWP";
    case AggregatorKind::Mean: return "Mean";
    case AggregatorKind::DeepSets: return "DeepSets";
    case AggregatorKind::Pma: return "PMA";
  }
  return "?";
}

AggregatorKind aggregator_from_string(const std::string& s) {
  if (s == "SWP" || s == "swp") return AggregatorKind::Swp;
  if (s == "Mean" || s == "mean") return AggregatorKind::Mean;
  if (s == "DeepSets" || s == "deepsets") return AggregatorKind::DeepSets;
  if (s == "PMA" || s == "pma") return AggregatorKind::Pma;
  throw std::invalid_argument("unknown aggregator: " + s);
}

void sample_reference(Parameter& q, Rng& rng) {
  int64_t rows = q.shape.rows, cols = q.shape.cols;
  for (Real& v : q.value) v = rng.normal();
  for (int64_t c = 0; c < cols; ++c) {
    std::vector<Real> col(rows);
    for (int64_t r = 0; r < rows; ++r) col[r] = q.value[r * cols + c];
    std::sort(col.begin(), col.end());
    for (int64_t r = 0; r < rows; ++r) q.value[r * cols + c] = col[r];
  }
}

namespace {

void check_nonempty(const AdjacencyList& neigh) {
  for (int64_t s = 0; s < neigh.num_segments(); ++s)
    if (neigh.size(s) == 0)
      throw std::runtime_error("aggregate: empty neighbourhood at segment " +
                               std::to_string(s) +
                               " (self_loops misconfigured upstream?)");
}

std::vector<int64_t> gather_index(const AdjacencyList& neigh) {
  std::vector<int64_t> idx(neigh.indices.size());
  for (size_t i = 0; i < neigh.indices.size(); ++i) idx[i] = neigh.indices[i];
  return idx;
}

}  // namespace

AdjacencyList canonical_neighbourhoods(const AdjacencyList& neigh) {
  bool sorted = true;
  for (int64_t s = 0; s < neigh.num_segments() && sorted; ++s) {
    auto seg = neigh.segment(s);
    sorted = std::is_sorted(seg.begin(), seg.end());
  }
  if (sorted) return neigh;
  AdjacencyList out = neigh;
  for (int64_t s = 0; s < out.num_segments(); ++s)
    std::sort(out.indices.begin() + out.offsets[s], out.indices.begin() + out.offsets[s + 1]);
  return out;
}

SwpAggregator SwpAggregator::build(ParamStore& store, const std::string& prefix,
                                   int64_t in_dim, int64_t num_slices, int64_t num_ref,
                                   int64_t out_dim, SwpVariant variant,
                                   bool learnable_reference, bool learnable_slices,
                                   Rng& rng) {
  if (num_ref < 1 || num_slices < 1)
    throw std::invalid_argument("swp: num_ref and slice count must be >= 1");
  SwpAggregator a;
  a.variant = variant;
  a.num_ref = num_ref;

  Parameter& theta = store.create(prefix + ".theta", Shape{in_dim, num_slices});
  init_unit_columns(theta, rng);
  theta.trainable = learnable_slices;
  a.slices = &theta;

  Parameter& q = store.create(prefix + ".reference", Shape{num_ref, num_slices});
  sample_reference(q, rng);
  q.trainable = learnable_reference;
  a.reference = &q;

  if (variant == SwpVariant::FlattenLinear) {
    Parameter& w = store.create(prefix + ".combine", Shape{num_ref * num_slices, out_dim});
    init_linear(w, rng);
    a.combine = &w;
  } else {
    if (out_dim != num_slices)
      throw std::invalid_argument("swp: per-slice variant needs out_dim == slice count");
    Parameter& w = store.create(prefix + ".slice_weights", Shape{1, num_slices});
    init_ones(w);
    a.slice_weights = &w;
  }
  return a;
}

Tensor SwpAggregator::aggregate(Tape& tape, const Tensor& x,
                                const AdjacencyList& neigh) const {
  check_nonempty(neigh);
  AdjacencyList canon = canonical_neighbourhoods(neigh);
  int64_t segs = canon.num_segments();

  Tensor proj = matmul(gather_rows(x, gather_index(canon)), tape.leaf(*slices));
  Tensor members = segment_sort_interpolate(proj, canon.offsets, num_ref);
  // Learnable references drift out of order under gradient updates; re-sort
  // every forward pass to maintain the nondecreasing-column invariant.
  Tensor ref = sort_columns(tape.leaf(*reference)).sorted;
  Tensor diff = sub(repeat_rows(ref, segs), members);

  if (variant == SwpVariant::FlattenLinear) {
    Tensor flat = reshape(diff, segs, num_ref * diff.cols());
    return matmul(flat, tape.leaf(*combine));
  }
  Tensor rms = block_column_rms(diff, num_ref);
  return mul_rowvec(rms, tape.leaf(*slice_weights));
}

Tensor MeanAggregator::aggregate(Tape&, const Tensor& x,
                                 const AdjacencyList& neigh) const {
  check_nonempty(neigh);
  AdjacencyList canon = canonical_neighbourhoods(neigh);
  return segment_mean(gather_rows(x, gather_index(canon)), canon.offsets);
}

DeepSetsAggregator DeepSetsAggregator::build(ParamStore& store,
                                             const std::string& prefix, int64_t dim,
                                             int layers, Rng& rng,
                                             double dropout_rate) {
  DeepSetsAggregator a;
  a.mlp_in = Mlp::build(store, prefix + ".mlp_in", layers, dim, dim, dim, rng,
                        /*final_activation=*/true, /*layer_norm=*/false,
                        /*bias=*/true, dropout_rate);
  a.mlp_out = Mlp::build(store, prefix + ".mlp_out", layers, dim, dim, dim, rng,
                         /*final_activation=*/false, /*layer_norm=*/false,
                         /*bias=*/true, dropout_rate);
  return a;
}

Tensor DeepSetsAggregator::aggregate(Tape& tape, const Tensor& x,
                                     const AdjacencyList& neigh,
                                     const ForwardCtx& ctx) const {
  check_nonempty(neigh);
  AdjacencyList canon = canonical_neighbourhoods(neigh);
  Tensor enc = mlp_in.forward(tape, gather_rows(x, gather_index(canon)), ctx);
  Tensor summed = segment_sum(enc, canon.offsets);
  return mlp_out.forward(tape, summed, ctx);
}

PmaAggregator PmaAggregator::build(ParamStore& store, const std::string& prefix,
                                   int64_t dim, Rng& rng) {
  PmaAggregator a;
  Parameter& seed = store.create(prefix + ".seed", Shape{1, dim});
  init_linear(seed, rng);
  a.seed = &seed;
  for (auto [name, slot] : {std::pair{"wq", &a.wq}, {"wk", &a.wk}, {"wv", &a.wv}}) {
    Parameter& p = store.create(prefix + "." + name, Shape{dim, dim});
    init_linear(p, rng);
    *slot = &p;
  }
  Parameter& g = store.create(prefix + ".ln_gain", Shape{1, dim});
  Parameter& b = store.create(prefix + ".ln_bias", Shape{1, dim});
  init_ones(g);
  init_zeros(b);
  a.ln_gain = &g;
  a.ln_bias = &b;
  return a;
}

Tensor PmaAggregator::aggregate(Tape& tape, const Tensor& x,
                                const AdjacencyList& neigh) const {
  check_nonempty(neigh);
  AdjacencyList canon = canonical_neighbourhoods(neigh);
  int64_t dim = x.cols();

  Tensor members = gather_rows(x, gather_index(canon));
  Tensor seed_row = tape.leaf(*seed);
  Tensor query = matmul(seed_row, tape.leaf(*wq));  // 1 x dim
  Tensor keys = matmul(members, tape.leaf(*wk));
  Tensor vals = matmul(members, tape.leaf(*wv));
  Tensor scores = scale(matmul(keys, transpose(query)),
                        1.0 / std::sqrt(static_cast<Real>(dim)));
  Tensor weights = segment_softmax_col(scores, canon.offsets);
  Tensor pooled = segment_sum(mul_colvec(vals, weights), canon.offsets);
  return layer_norm_rows(add_rowvec(pooled, seed_row), tape.leaf(*ln_gain),
                         tape.leaf(*ln_bias));
}

}  // namespace whnn
