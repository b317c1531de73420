#include "whnn/model.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace whnn {

using nlohmann::json;
using nlohmann::ordered_json;

std::string ModelConfig::aggregator_label() const {
  if (aggregator == AggregatorKind::Swp) return learnable_W ? "LPSWE" : "FPSWE";
  return to_string(aggregator);
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (hidden < 1) bad("MLP_hid must be positive");
  if (num_ref < 1) bad("num_ref must be positive");
  if (heads < 1 || hidden % heads != 0) bad("heads must divide MLP_hid");
  if (mlp_layers < 0 || mlp_layers > 2) bad("MLP_layers must be 0, 1 or 2");
  if (mlp2_layers < 0 || mlp2_layers > 1) bad("MLP2_layers must be 0 or 1");
  if (cls_layers < 1 || cls_layers > 2) bad("Cls_layers must be 1 or 2");
  if (cls_hidden < 1) bad("Cls_hid must be positive");
  if (dropout < 0 || dropout >= 1) bad("dropout must be in [0,1)");
  if (in_dropout < 0 || in_dropout >= 1) bad("in_dropout must be in [0,1)");
  if (alpha < 0 || alpha > 1) bad("alpha must be in [0,1]");
  if (layers < 1) bad("layers must be >= 1");
  if (isab_m < 1) bad("isab_m must be >= 1");
  if (aggregator == AggregatorKind::Swp && swp_variant == SwpVariant::PerSliceScalar) {
    // per-slice output is one value per slice; stages then require L == hidden,
    // which holds by construction (L = hidden).
  }
}

namespace {

template <typename T>
bool one_of(const T& v, std::initializer_list<T> allowed) {
  return std::find(allowed.begin(), allowed.end(), v) != allowed.end();
}

}  // namespace

void ModelConfig::validate_paper_space() const {
  validate();
  auto bad = [](const std::string& msg) {
    throw std::invalid_argument("config (paper space): " + msg);
  };
  if (!one_of<int64_t>(num_ref, {5, 10, 25, 50})) bad("num_ref must be in {5,10,25,50}");
  if (!one_of(heads, {1, 2, 4})) bad("heads must be in {1,2,4}");
  if (!one_of(mlp_layers, {0, 1, 2})) bad("MLP_layers must be in {0,1,2}");
  if (!one_of<int64_t>(hidden, {128, 256, 512})) bad("MLP_hid must be in {128,256,512}");
  if (!one_of(mlp2_layers, {0, 1})) bad("MLP2_layers must be in {0,1}");
  if (!one_of(cls_layers, {1, 2})) bad("Cls_layers must be in {1,2}");
  if (!one_of<int64_t>(cls_hidden, {96, 128, 256})) bad("Cls_hid must be in {96,128,256}");
  if (!one_of(dropout, {0.5, 0.6, 0.7})) bad("dropout must be in {0.5,0.6,0.7}");
  if (!one_of(in_dropout, {0.2, 0.5, 0.6, 0.7}))
    bad("in_dropout must be in {0.2,0.5,0.6,0.7}");
  if (layers != 1) bad("layer count is fixed to 1");
  if (alpha != 0.5) bad("alpha is fixed to 0.5");
}

namespace {

std::string swp_variant_name(SwpVariant v) {
  return v == SwpVariant::FlattenLinear ? "flatten" : "per_slice";
}

SwpVariant swp_variant_from(const std::string& s) {
  if (s == "flatten") return SwpVariant::FlattenLinear;
  if (s == "per_slice") return SwpVariant::PerSliceScalar;
  throw std::invalid_argument("unknown swp_variant: " + s);
}

ordered_json config_json(const ModelConfig& c) {
  ordered_json j;
  j["encoder"] = to_string(c.encoder);
  j["aggregator"] = to_string(c.aggregator);
  j["swp_variant"] = swp_variant_name(c.swp_variant);
  j["num_ref"] = c.num_ref;
  j["learnable_W"] = c.learnable_W;
  j["learnable_theta"] = c.learnable_theta;
  j["heads"] = c.heads;
  j["MLP_layers"] = c.mlp_layers;
  j["MLP_hid"] = c.hidden;
  j["MLP2_layers"] = c.mlp2_layers;
  j["Cls_layers"] = c.cls_layers;
  j["Cls_hid"] = c.cls_hidden;
  j["self_loops"] = c.self_loops;
  j["dropout"] = c.dropout;
  j["in_dropout"] = c.in_dropout;
  j["alpha"] = c.alpha;
  j["layers"] = c.layers;
  j["isab_m"] = c.isab_m;
  j["bias"] = c.bias;
  return j;
}

void config_set(ModelConfig& c, const std::string& key, const json& v) {
  if (key == "encoder") c.encoder = encoder_from_string(v.get<std::string>());
  else if (key == "aggregator") c.aggregator = aggregator_from_string(v.get<std::string>());
  else if (key == "swp_variant") c.swp_variant = swp_variant_from(v.get<std::string>());
  else if (key == "num_ref") c.num_ref = v.get<int64_t>();
  else if (key == "learnable_W") c.learnable_W = v.get<bool>();
  else if (key == "learnable_theta") c.learnable_theta = v.get<bool>();
  else if (key == "heads") c.heads = v.get<int>();
  else if (key == "MLP_layers") c.mlp_layers = v.get<int>();
  else if (key == "MLP_hid") c.hidden = v.get<int64_t>();
  else if (key == "MLP2_layers") c.mlp2_layers = v.get<int>();
  else if (key == "Cls_layers") c.cls_layers = v.get<int>();
  else if (key == "Cls_hid") c.cls_hidden = v.get<int64_t>();
  else if (key == "self_loops") c.self_loops = v.get<bool>();
  else if (key == "dropout") c.dropout = v.get<double>();
  else if (key == "in_dropout") c.in_dropout = v.get<double>();
  else if (key == "alpha") c.alpha = v.get<double>();
  else if (key == "layers") c.layers = v.get<int>();
  else if (key == "isab_m") c.isab_m = v.get<int64_t>();
  else if (key == "bias") c.bias = v.get<bool>();
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  return {"encoder",     "aggregator", "swp_variant", "num_ref",   "learnable_W",
          "learnable_theta", "heads",  "MLP_layers",  "MLP_hid",   "MLP2_layers",
          "Cls_layers",  "Cls_hid",    "self_loops",  "dropout",   "in_dropout",
          "alpha",       "layers",     "isab_m",      "bias"};
}

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  for (auto& [key, value] : j.items()) {
    // Training keys may live in the same file; skip them here.
    if (key == "epochs" || key == "lr" || key == "seed") continue;
    config_set(c, key, value);
  }
  c.validate();
  return c;
}

void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value) {
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;  // bare strings (e.g. encoder=SAB)
  }
  config_set(cfg, key, v);
}

EncodeResult encode_any(const EncoderVariant& enc, Tape& tape, const Tensor& x,
                        const AdjacencyList& neigh, const ForwardCtx& ctx) {
  return std::visit([&](const auto& e) { return e.encode(tape, x, neigh, ctx); }, enc);
}

Tensor aggregate_any(const AggregatorVariant& agg, Tape& tape, const Tensor& x,
                     const AdjacencyList& neigh, const ForwardCtx& ctx) {
  struct Visitor {
    Tape& tape;
    const Tensor& x;
    const AdjacencyList& neigh;
    const ForwardCtx& ctx;
    Tensor operator()(const SwpAggregator& a) { return a.aggregate(tape, x, neigh); }
    Tensor operator()(const MeanAggregator& a) { return a.aggregate(tape, x, neigh); }
    Tensor operator()(const DeepSetsAggregator& a) {
      return a.aggregate(tape, x, neigh, ctx);
    }
    Tensor operator()(const PmaAggregator& a) { return a.aggregate(tape, x, neigh); }
  };
  return std::visit(Visitor{tape, x, neigh, ctx}, agg);
}

Tensor WhnnLayer::forward(Tape& tape, Tensor x, const Hypergraph& graph,
                          const ForwardCtx& ctx) const {
  Tensor x0 = x;
  // Node to hyperedge.
  EncodeResult r1 = encode_any(enc_nodes, tape, x, graph.edge_members, ctx);
  Tensor z = aggregate_any(agg_edges, tape, r1.features, r1.view, ctx);
  // Hyperedge to node.
  EncodeResult r2 = encode_any(enc_edges, tape, z, graph.node_memberships, ctx);
  Tensor propagated = aggregate_any(agg_nodes, tape, r2.features, r2.view, ctx);
  if (propagated.cols() != x0.cols())
    throw std::runtime_error("whnn layer: stage output width " +
                             std::to_string(propagated.cols()) +
                             " does not match input width " + std::to_string(x0.cols()));
  Tensor mixed = add(scale(propagated, alpha), scale(x0, 1.0 - alpha));
  if (mlp2_w) {
    mixed = matmul(mixed, tape.leaf(*mlp2_w));
    if (mlp2_b) mixed = add_rowvec(mixed, tape.leaf(*mlp2_b));
  }
  return mixed;
}

namespace {

EncoderVariant build_encoder(const ModelConfig& cfg, ParamStore& store,
                             const std::string& prefix, Rng& rng) {
  switch (cfg.encoder) {
    case EncoderKind::Mlp:
      return MlpEncoder::build(store, prefix, cfg.mlp_layers, cfg.hidden, rng,
                               /*layer_norm=*/true, cfg.dropout);
    case EncoderKind::Sab:
      return SabEncoder::build(store, prefix, cfg.hidden, cfg.heads, rng, cfg.dropout);
    case EncoderKind::Isab:
      return IsabEncoder::build(store, prefix, cfg.hidden, cfg.isab_m, cfg.heads, rng,
                                cfg.dropout);
  }
  throw std::logic_error("unreachable");
}

AggregatorVariant build_aggregator(const ModelConfig& cfg, ParamStore& store,
                                   const std::string& prefix, Rng& rng) {
  switch (cfg.aggregator) {
    case AggregatorKind::Swp:
      return SwpAggregator::build(store, prefix, cfg.hidden, cfg.hidden, cfg.num_ref,
                                  cfg.hidden, cfg.swp_variant, cfg.learnable_W,
                                  cfg.learnable_theta, rng);
    case AggregatorKind::Mean:
      return MeanAggregator{};
    case AggregatorKind::DeepSets:
      return DeepSetsAggregator::build(store, prefix, cfg.hidden,
                                       std::max(1, cfg.mlp_layers), rng, cfg.dropout);
    case AggregatorKind::Pma:
      return PmaAggregator::build(store, prefix, cfg.hidden, rng);
  }
  throw std::logic_error("unreachable");
}

}  // namespace

WhnnModel::WhnnModel(const ModelConfig& cfg, int64_t in_dim, int64_t num_classes,
                     uint64_t seed)
    : cfg_(cfg), in_dim_(in_dim), num_classes_(num_classes) {
  cfg_.validate();
  if (in_dim < 1 || num_classes < 2)
    throw std::invalid_argument("model: need in_dim >= 1 and num_classes >= 2");
  Rng rng = Rng::stream(seed, "init");

  Parameter& lw = store_.create("lift.w", Shape{in_dim, cfg_.hidden});
  init_linear(lw, rng);
  lift_w = &lw;
  if (cfg_.bias) {
    Parameter& lb = store_.create("lift.b", Shape{1, cfg_.hidden});
    init_zeros(lb);
    lift_b = &lb;
  }

  for (int l = 0; l < cfg_.layers; ++l) {
    std::string p = "layer" + std::to_string(l);
    WhnnLayer layer;
    layer.alpha = cfg_.alpha;
    layer.enc_nodes = build_encoder(cfg_, store_, p + ".enc_nodes", rng);
    layer.agg_edges = build_aggregator(cfg_, store_, p + ".agg_edges", rng);
    layer.enc_edges = build_encoder(cfg_, store_, p + ".enc_edges", rng);
    layer.agg_nodes = build_aggregator(cfg_, store_, p + ".agg_nodes", rng);
    if (cfg_.mlp2_layers > 0) {
      Parameter& w = store_.create(p + ".mlp2.w", Shape{cfg_.hidden, cfg_.hidden});
      init_linear(w, rng);
      layer.mlp2_w = &w;
      if (cfg_.bias) {
        Parameter& b = store_.create(p + ".mlp2.b", Shape{1, cfg_.hidden});
        init_zeros(b);
        layer.mlp2_b = &b;
      }
    }
    layers.push_back(std::move(layer));
  }

  classifier = Mlp::build(store_, "classifier", cfg_.cls_layers, cfg_.hidden,
                          cfg_.cls_hidden, num_classes, rng,
                          /*final_activation=*/false, /*layer_norm=*/false, cfg_.bias,
                          cfg_.dropout);
}

Tensor WhnnModel::forward(Tape& tape, std::span<const Real> features, int64_t n,
                          const Hypergraph& graph, const ForwardCtx& ctx) const {
  if (static_cast<int64_t>(features.size()) != n * in_dim_)
    throw std::invalid_argument("forward: feature buffer size mismatch");
  if (graph.num_nodes != n)
    throw std::invalid_argument("forward: node count mismatch with graph");
  Tensor x = tape.constant(Shape{n, in_dim_},
                           std::vector<Real>(features.begin(), features.end()),
                           "input");
  x = maybe_dropout(x, cfg_.in_dropout, ctx);
  x = matmul(x, tape.leaf(*lift_w));
  if (lift_b) x = add_rowvec(x, tape.leaf(*lift_b));
  for (const WhnnLayer& layer : layers) x = layer.forward(tape, x, graph, ctx);
  return classifier.forward(tape, x, ctx);
}

Hypergraph prepare_graph(const Hypergraph& g, const ModelConfig& cfg) {
  if (cfg.self_loops) return g.with_self_loops();
  auto iso = g.isolated_nodes();
  if (!iso.empty())
    throw std::runtime_error("graph has isolated node " + std::to_string(iso[0]) +
                             " and self_loops are disabled");
  return g;
}

// ---- Checkpointing ----------------------------------------------------------

void WhnnModel::save(const std::string& path) const {
  ordered_json j;
  j["format"] = "whnn-checkpoint";
  j["version"] = 1;
  j["in_dim"] = in_dim_;
  j["num_classes"] = num_classes_;
  j["config"] = config_json(cfg_);
  ordered_json params = ordered_json::object();
  for (const Parameter* p : store_.all()) {
    params[p->name] = {{"shape", {p->shape.rows, p->shape.cols}},
                       {"trainable", p->trainable},
                       {"data", p->value}};
  }
  j["params"] = std::move(params);
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
    out << j.dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

WhnnModel WhnnModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j = json::parse(in);
  if (!j.contains("format") || j["format"] != "whnn-checkpoint")
    throw std::runtime_error("checkpoint: missing or wrong format tag");
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported version");
  ModelConfig cfg = config_from_json(j["config"].dump());
  WhnnModel model(cfg, j["in_dim"].get<int64_t>(), j["num_classes"].get<int64_t>(),
                  /*seed=*/0);
  for (auto& [name, entry] : j["params"].items()) {
    Parameter* p = model.store_.find(name);
    if (!p) throw std::runtime_error("checkpoint: unexpected parameter '" + name + "'");
    auto shape = entry["shape"].get<std::vector<int64_t>>();
    if (shape.size() != 2 || shape[0] != p->shape.rows || shape[1] != p->shape.cols)
      throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name + "'");
    p->value = entry["data"].get<std::vector<Real>>();
    if (static_cast<int64_t>(p->value.size()) != p->shape.numel())
      throw std::runtime_error("checkpoint: data size mismatch for '" + name + "'");
  }
  return model;
}

}  // namespace whnn
