#ifndef WHNN_MODEL_HPP
#define WHNN_MODEL_HPP

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "whnn/aggregator.hpp"
#include "whnn/encoder.hpp"
#include "whnn/hypergraph.hpp"
#include "whnn/nn.hpp"

namespace whnn {

// Flat configuration mirroring the hyperparameter names used in the search
// space (num_ref, learnable_W, heads, MLP_layers, ...).
struct ModelConfig {
  EncoderKind encoder = EncoderKind::Mlp;
  AggregatorKind aggregator = AggregatorKind::Swp;
  SwpVariant swp_variant = SwpVariant::FlattenLinear;
  bool learnable_W = false;       // learnable reference distribution (LPSWE)
  bool learnable_theta = false;   // learnable slice directions
  int64_t num_ref = 10;           // R
  int heads = 1;
  int mlp_layers = 1;             // encoder MLP depth (0 = identity)
  int64_t hidden = 128;           // MLP_hid; also the slice count L
  int mlp2_layers = 0;            // extra linear after the residual (0 or 1)
  int cls_layers = 1;
  int64_t cls_hidden = 128;
  bool self_loops = true;
  double dropout = 0.5;
  double in_dropout = 0.2;
  double alpha = 0.5;             // residual coefficient
  int layers = 1;
  int64_t isab_m = 8;
  bool bias = true;

  // Display name used in ablation tables: FPSWE/LPSWE for the two SWP modes.
  std::string aggregator_label() const;

  // Basic sanity (positivity, heads | hidden, alpha in [0,1], ...).
  void validate() const;
  // Additionally restricts every searched field to the published ranges.
  void validate_paper_space() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);
// Applies "key=value" overrides; throws on unknown keys, naming the key.
void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

using EncoderVariant = std::variant<MlpEncoder, SabEncoder, IsabEncoder>;
using AggregatorVariant =
    std::variant<SwpAggregator, MeanAggregator, DeepSetsAggregator, PmaAggregator>;

EncodeResult encode_any(const EncoderVariant& enc, Tape& tape, const Tensor& x,
                        const AdjacencyList& neigh, const ForwardCtx& ctx);
Tensor aggregate_any(const AggregatorVariant& agg, Tape& tape, const Tensor& x,
                     const AdjacencyList& neigh, const ForwardCtx& ctx);

// One two-stage layer: encode + aggregate node->edge, encode + aggregate
// edge->node, then the residual mix alpha*X + (1-alpha)*X0 and the optional
// extra linear. Stages hold independent parameters.
struct WhnnLayer {
  EncoderVariant enc_nodes;
  AggregatorVariant agg_edges;  // node -> hyperedge
  EncoderVariant enc_edges;
  AggregatorVariant agg_nodes;  // hyperedge -> node
  Parameter* mlp2_w = nullptr;
  Parameter* mlp2_b = nullptr;
  double alpha = 0.5;

  Tensor forward(Tape& tape, Tensor x, const Hypergraph& graph,
                 const ForwardCtx& ctx) const;
};

class WhnnModel {
 public:
  WhnnModel(const ModelConfig& cfg, int64_t in_dim, int64_t num_classes,
            uint64_t seed);

  // features: row-major n x in_dim. Eval mode (ctx.train = false) is
  // deterministic: repeated calls produce bitwise identical logits.
  Tensor forward(Tape& tape, std::span<const Real> features, int64_t n,
                 const Hypergraph& graph, const ForwardCtx& ctx) const;

  const ModelConfig& config() const { return cfg_; }
  int64_t in_dim() const { return in_dim_; }
  int64_t num_classes() const { return num_classes_; }
  std::vector<Parameter*> parameters() const { return store_.all(); }
  std::vector<Parameter*> trainable_parameters() const { return store_.trainable(); }
  Parameter* parameter(const std::string& name) const { return store_.find(name); }

  void save(const std::string& path) const;
  static WhnnModel load(const std::string& path);

  // public for tests: direct access to the stacked layers and the head
  std::vector<WhnnLayer> layers;
  Parameter* lift_w = nullptr;
  Parameter* lift_b = nullptr;
  Mlp classifier;

 private:
  ModelConfig cfg_;
  int64_t in_dim_ = 0;
  int64_t num_classes_ = 0;
  ParamStore store_;
};

// Graph used for message passing: self loops appended when configured.
// Throws if isolated nodes remain without self loops.
Hypergraph prepare_graph(const Hypergraph& g, const ModelConfig& cfg);

}  // namespace whnn

#endif  // WHNN_MODEL_HPP
