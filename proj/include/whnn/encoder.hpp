#ifndef WHNN_ENCODER_HPP
#define WHNN_ENCODER_HPP

#include <string>

#include "whnn/hypergraph.hpp"
#include "whnn/nn.hpp"

namespace whnn {

enum class EncoderKind { Mlp, Sab, Isab };

std::string to_string(EncoderKind k);
EncoderKind encoder_from_string(const std::string& s);

// Output of an encoder stage: a feature matrix plus the neighbourhood view
// that indexes into it. Edge-independent encoders keep the original view;
// edge-dependent ones emit one row per (member, neighbourhood) pin and an
// identity view over the pins.
struct EncodeResult {
  Tensor features;
  AdjacencyList view;
};

// Edge-independent encoder: a plain rowwise MLP (0 layers = identity).
struct MlpEncoder {
  Mlp mlp;

  static MlpEncoder build(ParamStore& store, const std::string& prefix, int layers,
                          int64_t dim, Rng& rng, bool layer_norm, double dropout_rate);
  EncodeResult encode(Tape& tape, const Tensor& x, const AdjacencyList& neigh,
                      const ForwardCtx& ctx) const;
};

// Edge-dependent encoder: self-attention among the members of each
// neighbourhood; a node in k neighbourhoods gets k distinct representations.
struct SabEncoder {
  AttentionBlock block;

  static SabEncoder build(ParamStore& store, const std::string& prefix, int64_t dim,
                          int heads, Rng& rng, double dropout_rate);
  EncodeResult encode(Tape& tape, const Tensor& x, const AdjacencyList& neigh,
                      const ForwardCtx& ctx) const;
};

// Low-rank SAB approximation through m inducing points: cost per
// neighbourhood is linear in its size for fixed m.
struct IsabEncoder {
  Parameter* inducing = nullptr;  // m x dim
  AttentionBlock block1;          // inducing attend to members
  AttentionBlock block2;          // members attend to the induced summary

  static IsabEncoder build(ParamStore& store, const std::string& prefix, int64_t dim,
                           int64_t m, int heads, Rng& rng, double dropout_rate);
  EncodeResult encode(Tape& tape, const Tensor& x, const AdjacencyList& neigh,
                      const ForwardCtx& ctx) const;
};

}  // namespace whnn

#endif  // WHNN_ENCODER_HPP
