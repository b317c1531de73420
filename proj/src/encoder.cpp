#include "whnn/encoder.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

#include "whnn/aggregator.hpp"

namespace whnn {

std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::Mlp: return "MLP";
    case EncoderKind::Sab: return "SAB";
    case EncoderKind::Isab: return "ISAB";
  }
  return "?";
}

EncoderKind encoder_from_string(const std::string& s) {
  if (s == "MLP" || s == "mlp") return EncoderKind::Mlp;
  if (s == "SAB" || s == "sab") return EncoderKind::Sab;
  if (s == "ISAB" || s == "isab") return EncoderKind::Isab;
  throw std::invalid_argument("unknown encoder: " + s);
}

MlpEncoder MlpEncoder::build(ParamStore& store, const std::string& prefix, int layers,
                             int64_t dim, Rng& rng, bool layer_norm,
                             double dropout_rate) {
  MlpEncoder e;
  e.mlp = Mlp::build(store, prefix, layers, dim, dim, dim, rng,
                     /*final_activation=*/true, layer_norm, /*bias=*/true,
                     dropout_rate);
  return e;
}

EncodeResult MlpEncoder::encode(Tape& tape, const Tensor& x,
                                const AdjacencyList& neigh,
                                const ForwardCtx& ctx) const {
  return {mlp.forward(tape, x, ctx), neigh};
}

namespace {

// Groups segments by cardinality so same-size neighbourhoods run as one
// block-diagonal attention batch.
struct SizeBuckets {
  // bucket -> (segment size, segment ids in ascending order)
  std::vector<std::pair<int64_t, std::vector<int64_t>>> groups;
  explicit SizeBuckets(const AdjacencyList& neigh) {
    std::map<int64_t, std::vector<int64_t>> by_size;
    for (int64_t s = 0; s < neigh.num_segments(); ++s) {
      if (neigh.size(s) == 0)
        throw std::runtime_error("encode: empty neighbourhood at segment " +
                                 std::to_string(s));
      by_size[neigh.size(s)].push_back(s);
    }
    groups.assign(by_size.begin(), by_size.end());
  }
};

AdjacencyList pin_view(const AdjacencyList& neigh) {
  AdjacencyList v;
  v.offsets = neigh.offsets;
  v.indices.resize(neigh.indices.size());
  std::iota(v.indices.begin(), v.indices.end(), 0);
  return v;
}

// Shared SAB/ISAB plumbing: gather pins, run `attend` on each size bucket,
// then restore the original pin order.
template <typename Fn>
EncodeResult encode_buckets(const Tensor& x, const AdjacencyList& neigh, Fn&& attend) {
  AdjacencyList canon = canonical_neighbourhoods(neigh);
  std::vector<int64_t> pin_idx(canon.indices.begin(), canon.indices.end());
  Tensor pins = gather_rows(x, pin_idx);

  SizeBuckets buckets(canon);
  if (buckets.groups.size() == 1) {
    // Uniform sizes: pins are already one contiguous batch.
    Tensor out = attend(pins, buckets.groups[0].first,
                        static_cast<int64_t>(buckets.groups[0].second.size()));
    return {out, pin_view(canon)};
  }

  std::vector<Tensor> parts;
  std::vector<int64_t> restore(pin_idx.size());
  int64_t at = 0;
  for (const auto& [k, segs] : buckets.groups) {
    std::vector<int64_t> rows;
    rows.reserve(segs.size() * k);
    for (int64_t s : segs)
      for (int64_t r = canon.offsets[s]; r < canon.offsets[s + 1]; ++r) {
        restore[r] = at++;
        rows.push_back(r);
      }
    Tensor xb = gather_rows(pins, rows);
    parts.push_back(attend(xb, k, static_cast<int64_t>(segs.size())));
  }
  Tensor stacked = concat_rows(parts);
  return {gather_rows(stacked, restore), pin_view(canon)};
}

}  // namespace

SabEncoder SabEncoder::build(ParamStore& store, const std::string& prefix, int64_t dim,
                             int heads, Rng& rng, double dropout_rate) {
  SabEncoder e;
  e.block = AttentionBlock::build(store, prefix, dim, heads, rng, dropout_rate);
  return e;
}

EncodeResult SabEncoder::encode(Tape& tape, const Tensor& x,
                                const AdjacencyList& neigh,
                                const ForwardCtx& ctx) const {
  return encode_buckets(x, neigh, [&](Tensor xb, int64_t k, int64_t) {
    return block.apply(tape, xb, xb, k, k, ctx);
  });
}

IsabEncoder IsabEncoder::build(ParamStore& store, const std::string& prefix,
                               int64_t dim, int64_t m, int heads, Rng& rng,
                               double dropout_rate) {
  if (m < 1) throw std::invalid_argument("isab: need at least one inducing point");
  IsabEncoder e;
  Parameter& ind = store.create(prefix + ".inducing", Shape{m, dim});
  init_linear(ind, rng);
  e.inducing = &ind;
  e.block1 = AttentionBlock::build(store, prefix + ".mab1", dim, heads, rng, dropout_rate);
  e.block2 = AttentionBlock::build(store, prefix + ".mab2", dim, heads, rng, dropout_rate);
  return e;
}

EncodeResult IsabEncoder::encode(Tape& tape, const Tensor& x,
                                 const AdjacencyList& neigh,
                                 const ForwardCtx& ctx) const {
  int64_t m = inducing->shape.rows;
  return encode_buckets(x, neigh, [&](Tensor xb, int64_t k, int64_t groups) {
    Tensor ind = repeat_rows(tape.leaf(*inducing), groups);
    Tensor summary = block1.apply(tape, ind, xb, m, k, ctx);
    return block2.apply(tape, xb, summary, k, m, ctx);
  });
}

}  // namespace whnn
