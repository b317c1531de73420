#include "whnn/hypergraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace whnn {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

Hypergraph Hypergraph::from_edges(int64_t num_nodes,
                                  std::vector<std::vector<int32_t>> edges) {
  if (num_nodes <= 0) fail("hypergraph: num_nodes must be positive");
  Hypergraph h;
  h.num_nodes = num_nodes;
  h.num_edges = static_cast<int64_t>(edges.size());
  for (size_t j = 0; j < edges.size(); ++j) {
    auto& e = edges[j];
    if (e.empty()) fail("edge " + std::to_string(j) + ": empty hyperedge");
    std::sort(e.begin(), e.end());
    for (size_t i = 0; i < e.size(); ++i) {
      if (e[i] < 0 || e[i] >= num_nodes)
        fail("edge " + std::to_string(j) + ": node index " + std::to_string(e[i]) +
             " out of range [0, " + std::to_string(num_nodes) + ")");
      if (i > 0 && e[i] == e[i - 1])
        fail("edge " + std::to_string(j) + ": duplicate node " + std::to_string(e[i]));
    }
    h.edge_members.push_segment(e);
  }
  h.node_memberships = transpose_adjacency(h.edge_members, num_nodes);
  return h;
}

AdjacencyList transpose_adjacency(const AdjacencyList& a, int64_t num_targets) {
  std::vector<int64_t> counts(num_targets, 0);
  for (int32_t i : a.indices) ++counts[i];
  AdjacencyList out;
  out.offsets.assign(num_targets + 1, 0);
  for (int64_t i = 0; i < num_targets; ++i) out.offsets[i + 1] = out.offsets[i] + counts[i];
  out.indices.resize(a.indices.size());
  std::vector<int64_t> cursor(out.offsets.begin(), out.offsets.end() - 1);
  // Scanning segments in ascending order keeps each target's list sorted.
  for (int64_t s = 0; s < a.num_segments(); ++s)
    for (int32_t i : a.segment(s)) out.indices[cursor[i]++] = static_cast<int32_t>(s);
  return out;
}

Hypergraph Hypergraph::with_self_loops() const {
  Hypergraph h;
  h.num_nodes = num_nodes;
  h.num_edges = num_edges + num_nodes;
  h.edge_members = edge_members;
  for (int32_t i = 0; i < num_nodes; ++i)
    h.edge_members.push_segment(std::array<int32_t, 1>{i});
  h.node_memberships = transpose_adjacency(h.edge_members, num_nodes);
  return h;
}

std::vector<int32_t> Hypergraph::isolated_nodes() const {
  std::vector<int32_t> out;
  for (int64_t i = 0; i < num_nodes; ++i)
    if (node_memberships.size(i) == 0) out.push_back(static_cast<int32_t>(i));
  return out;
}

namespace {

std::vector<uint8_t> mask_from_indices(const json& arr, int64_t n, const char* name) {
  std::vector<uint8_t> mask(n, 0);
  for (const auto& v : arr) {
    int64_t i = v.get<int64_t>();
    if (i < 0 || i >= n)
      fail(std::string("splits.") + name + ": node index " + std::to_string(i) +
           " out of range");
    mask[i] = 1;
  }
  return mask;
}

}  // namespace

Dataset parse_canonical(const std::string& text, bool allow_isolated) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("dataset parse failure: ") + e.what());
  }
  for (const char* key : {"num_nodes", "features", "labels", "edges"})
    if (!j.contains(key)) fail(std::string("dataset: missing key '") + key + "'");

  Dataset ds;
  int64_t n = j["num_nodes"].get<int64_t>();
  if (n <= 0) fail("dataset: num_nodes must be positive");

  const auto& feats = j["features"];
  if (static_cast<int64_t>(feats.size()) != n)
    fail("dataset: features has " + std::to_string(feats.size()) + " rows, expected " +
         std::to_string(n));
  ds.feature_dim = feats.empty() ? 0 : static_cast<int64_t>(feats[0].size());
  ds.features.reserve(n * ds.feature_dim);
  for (int64_t r = 0; r < n; ++r) {
    const auto& row = feats[r];
    if (static_cast<int64_t>(row.size()) != ds.feature_dim)
      fail("feature row " + std::to_string(r) + " has " + std::to_string(row.size()) +
           " values, expected " + std::to_string(ds.feature_dim));
    for (const auto& v : row) {
      double x = v.get<double>();
      if (!std::isfinite(x))
        fail("feature row " + std::to_string(r) + ": non-finite value");
      ds.features.push_back(x);
    }
  }

  const auto& labels = j["labels"];
  if (static_cast<int64_t>(labels.size()) != n)
    fail("dataset: labels has " + std::to_string(labels.size()) + " entries, expected " +
         std::to_string(n));
  for (const auto& v : labels) {
    int64_t y = v.get<int64_t>();
    if (y < 0) fail("dataset: negative label");
    ds.labels.push_back(static_cast<int32_t>(y));
    ds.num_classes = std::max(ds.num_classes, y + 1);
  }

  std::vector<std::vector<int32_t>> edges;
  for (const auto& e : j["edges"]) edges.push_back(e.get<std::vector<int32_t>>());
  ds.graph = Hypergraph::from_edges(n, std::move(edges));

  if (!allow_isolated) {
    auto iso = ds.graph.isolated_nodes();
    if (!iso.empty())
      fail("dataset: node " + std::to_string(iso[0]) +
           " is isolated (enable self_loops to accept isolated nodes)");
  }

  if (j.contains("splits")) {
    const auto& sp = j["splits"];
    ds.splits.train = mask_from_indices(sp.at("train"), n, "train");
    ds.splits.val = mask_from_indices(sp.at("val"), n, "val");
    ds.splits.test = mask_from_indices(sp.at("test"), n, "test");
    for (int64_t i = 0; i < n; ++i)
      if (ds.splits.train[i] + ds.splits.val[i] + ds.splits.test[i] > 1)
        fail("splits: node " + std::to_string(i) + " assigned to multiple masks");
    ds.has_splits = true;
  }
  return ds;
}

Dataset load_canonical(const std::string& path, bool allow_isolated) {
  std::ifstream in(path);
  if (!in) fail("cannot open dataset file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_canonical(buf.str(), allow_isolated);
}

std::string serialize_canonical(const Dataset& ds) {
  ordered_json j;
  j["num_nodes"] = ds.graph.num_nodes;
  ordered_json feats = ordered_json::array();
  for (int64_t r = 0; r < ds.graph.num_nodes; ++r) {
    ordered_json row = ordered_json::array();
    for (Real v : ds.feature_row(r)) row.push_back(v);
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  j["labels"] = ds.labels;
  ordered_json edges = ordered_json::array();
  for (int64_t s = 0; s < ds.graph.edge_members.num_segments(); ++s) {
    auto seg = ds.graph.edge_members.segment(s);
    edges.push_back(std::vector<int32_t>(seg.begin(), seg.end()));
  }
  j["edges"] = std::move(edges);
  if (ds.has_splits) {
    auto to_idx = [](const std::vector<uint8_t>& m) {
      std::vector<int64_t> out;
      for (size_t i = 0; i < m.size(); ++i)
        if (m[i]) out.push_back(static_cast<int64_t>(i));
      return out;
    };
    j["splits"] = {{"train", to_idx(ds.splits.train)},
                   {"val", to_idx(ds.splits.val)},
                   {"test", to_idx(ds.splits.test)}};
  }
  return j.dump();
}

void save_canonical(const Dataset& ds, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) fail("cannot write dataset file: " + tmp);
    out << serialize_canonical(ds) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

Splits random_split(int64_t n, std::array<double, 3> ratios, uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) fail("random_split: ratios must sum to 1");
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(seed, "split");
  rng.shuffle(order.data(), n);
  int64_t n_train = static_cast<int64_t>(ratios[0] * static_cast<double>(n));
  int64_t n_val = static_cast<int64_t>(ratios[1] * static_cast<double>(n));
  Splits sp;
  sp.train.assign(n, 0);
  sp.val.assign(n, 0);
  sp.test.assign(n, 0);
  for (int64_t i = 0; i < n; ++i) {
    if (i < n_train)
      sp.train[order[i]] = 1;
    else if (i < n_train + n_val)
      sp.val[order[i]] = 1;
    else
      sp.test[order[i]] = 1;
  }
  return sp;
}

Dataset synth_two_community(int64_t n_per_class, int64_t edges_per_class,
                            int64_t dim, double noise, uint64_t seed,
                            double mixed_fraction) {
  if (n_per_class < 2 || edges_per_class < 2 || dim < 2)
    fail("synth_two_community: all counts must be >= 2");
  if (mixed_fraction < 0.0 || mixed_fraction > 1.0)
    fail("synth_two_community: mixed_fraction must be in [0,1]");
  Rng rng = Rng::stream(seed, "data");

  int64_t n = 2 * n_per_class;
  Dataset ds;
  ds.feature_dim = dim;
  ds.num_classes = 2;
  ds.features.resize(n * dim);
  ds.labels.resize(n);
  double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int64_t i = 0; i < n; ++i) {
    int32_t cls = i < n_per_class ? 0 : 1;
    ds.labels[i] = cls;
    double centre = cls == 0 ? scale : -scale;
    for (int64_t d = 0; d < dim; ++d)
      ds.features[i * dim + d] = centre + noise * rng.normal();
  }

  int64_t total_edges = 2 * edges_per_class;
  int64_t n_mixed = static_cast<int64_t>(std::llround(mixed_fraction * total_edges));
  std::vector<std::vector<int32_t>> edges(total_edges);
  // Every node lands in at least one compatible edge; pure edges only accept
  // their own class, mixed edges accept anyone.
  auto compatible = [&](int64_t e, int32_t cls) {
    if (e < n_mixed) return true;  // edges [0, n_mixed) are mixed
    return ((e - n_mixed) < edges_per_class ? 0 : 1) == cls;
  };
  for (int64_t i = 0; i < n; ++i) {
    int32_t cls = ds.labels[static_cast<size_t>(i)];
    int64_t e;
    do {
      e = rng.uniform_int(total_edges);
    } while (!compatible(e, cls));
    edges[e].push_back(static_cast<int32_t>(i));
  }
  // Top up small edges so none is empty and sizes are >= 2.
  for (int64_t e = 0; e < total_edges; ++e) {
    while (static_cast<int64_t>(edges[e].size()) < 2) {
      int32_t i;
      do {
        i = static_cast<int32_t>(rng.uniform_int(n));
      } while (!compatible(e, ds.labels[i]) ||
               std::find(edges[e].begin(), edges[e].end(), i) != edges[e].end());
      edges[e].push_back(i);
    }
  }
  ds.graph = Hypergraph::from_edges(n, std::move(edges));
  ds.splits = random_split(n, {0.5, 0.25, 0.25}, seed);
  ds.has_splits = true;
  return ds;
}

Dataset synth_spread_dataset(int64_t n_edges, int64_t edge_size, int64_t dim,
                             uint64_t seed) {
  if (edge_size < 4) fail("synth_spread_dataset: edge_size must be >= 4");
  if (n_edges < 4) fail("synth_spread_dataset: n_edges must be >= 4");
  Rng rng = Rng::stream(seed, "data");

  int64_t n = n_edges * edge_size;
  Dataset ds;
  ds.feature_dim = dim;
  ds.num_classes = 2;
  ds.features.resize(n * dim);
  ds.labels.resize(n);

  std::vector<int32_t> edge_class(n_edges);
  for (int64_t e = 0; e < n_edges; ++e) edge_class[e] = e < n_edges / 2 ? 0 : 1;
  rng.shuffle(edge_class.data(), n_edges);

  std::vector<std::vector<int32_t>> edges(n_edges);
  std::vector<double> centre(dim), offs(edge_size * dim);
  for (int64_t e = 0; e < n_edges; ++e) {
    double sigma = edge_class[e] == 0 ? kSpreadSigmaSmall : kSpreadSigmaLarge;
    for (int64_t d = 0; d < dim; ++d) centre[d] = kSpreadCentreSigma * rng.normal();
    for (int64_t k = 0; k < edge_size * dim; ++k) offs[k] = rng.normal();
    // Empirically centre the offsets: the edge mean equals the centre exactly,
    // so neighbourhood means carry no class signal.
    for (int64_t d = 0; d < dim; ++d) {
      double mu = 0;
      for (int64_t k = 0; k < edge_size; ++k) mu += offs[k * dim + d];
      mu /= static_cast<double>(edge_size);
      for (int64_t k = 0; k < edge_size; ++k) offs[k * dim + d] -= mu;
    }
    for (int64_t k = 0; k < edge_size; ++k) {
      int64_t node = e * edge_size + k;
      ds.labels[node] = edge_class[e];
      edges[e].push_back(static_cast<int32_t>(node));
      for (int64_t d = 0; d < dim; ++d)
        ds.features[node * dim + d] = centre[d] + sigma * offs[k * dim + d];
    }
  }
  ds.graph = Hypergraph::from_edges(n, std::move(edges));

  // Edge-level split: nodes inherit the split of their edge, so test-time
  // edges sit at centres never seen during training.
  std::vector<int64_t> order(n_edges);
  std::iota(order.begin(), order.end(), 0);
  Rng srng = Rng::stream(seed, "split");
  srng.shuffle(order.data(), n_edges);
  int64_t e_train = n_edges / 2, e_val = n_edges / 4;
  ds.splits.train.assign(n, 0);
  ds.splits.val.assign(n, 0);
  ds.splits.test.assign(n, 0);
  for (int64_t i = 0; i < n_edges; ++i) {
    auto* mask = i < e_train                ? &ds.splits.train
                 : i < e_train + e_val      ? &ds.splits.val
                                            : &ds.splits.test;
    for (int64_t k = 0; k < edge_size; ++k) (*mask)[order[i] * edge_size + k] = 1;
  }
  ds.has_splits = true;
  return ds;
}

}  // namespace whnn
