#ifndef WHNN_HYPERGRAPH_HPP
#define WHNN_HYPERGRAPH_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "whnn/tensor.hpp"

namespace whnn {

// CSR-style list of segments: segment s owns indices[offsets[s]..offsets[s+1]).
struct AdjacencyList {
  std::vector<int64_t> offsets{0};
  std::vector<int32_t> indices;

  int64_t num_segments() const { return static_cast<int64_t>(offsets.size()) - 1; }
  int64_t size(int64_t s) const { return offsets[s + 1] - offsets[s]; }
  std::span<const int32_t> segment(int64_t s) const {
    return {indices.data() + offsets[s], static_cast<size_t>(size(s))};
  }
  void push_segment(std::span<const int32_t> members) {
    indices.insert(indices.end(), members.begin(), members.end());
    offsets.push_back(static_cast<int64_t>(indices.size()));
  }
  bool operator==(const AdjacencyList&) const = default;
};

// Bidirectional incidence index. edge_members[j] lists the nodes of
// hyperedge j (sorted ascending); node_memberships is its exact transpose.
struct Hypergraph {
  int64_t num_nodes = 0;
  int64_t num_edges = 0;
  AdjacencyList edge_members;
  AdjacencyList node_memberships;

  // Validates ranges, non-emptiness and duplicates; sorts members ascending
  // and builds the transpose index.
  static Hypergraph from_edges(int64_t num_nodes,
                               std::vector<std::vector<int32_t>> edges);

  // Appends one singleton hyperedge {i} per node after the existing edges.
  Hypergraph with_self_loops() const;

  // Nodes contained in no hyperedge.
  std::vector<int32_t> isolated_nodes() const;

  bool operator==(const Hypergraph&) const = default;
};

// Transpose of a segment list with `num_targets` possible index values.
AdjacencyList transpose_adjacency(const AdjacencyList& a, int64_t num_targets);

struct Splits {
  std::vector<uint8_t> train, val, test;
  bool operator==(const Splits&) const = default;
};

struct Dataset {
  Hypergraph graph;
  int64_t feature_dim = 0;
  int64_t num_classes = 0;
  std::vector<Real> features;  // num_nodes x feature_dim, row-major
  std::vector<int32_t> labels;
  Splits splits;
  bool has_splits = false;

  std::span<const Real> feature_row(int64_t i) const {
    return {features.data() + i * feature_dim, static_cast<size_t>(feature_dim)};
  }
  bool operator==(const Dataset&) const = default;
};

// Canonical JSON dataset format: keys num_nodes, features, labels, edges,
// optional splits ({train, val, test} index arrays). UTF-8; NaN/Inf rejected.
Dataset load_canonical(const std::string& path, bool allow_isolated = false);
Dataset parse_canonical(const std::string& text, bool allow_isolated = false);
void save_canonical(const Dataset& ds, const std::string& path);
std::string serialize_canonical(const Dataset& ds);

// Reproducible disjoint masks with sizes floor(r0*n) / floor(r1*n) / rest.
Splits random_split(int64_t n, std::array<double, 3> ratios, uint64_t seed);

// Two Gaussian feature clusters with class-pure hyperedges plus an optional
// fraction of mixed edges. noise = 0 makes the classes exactly separable.
Dataset synth_two_community(int64_t n_per_class, int64_t edges_per_class,
                            int64_t dim, double noise, uint64_t seed,
                            double mixed_fraction = 0.0);

// Node labels carry no information pointwise or through neighbourhood means;
// only the spread of a hyperedge's features separates the classes. Each
// hyperedge is a disjoint block of `edge_size` nodes placed around a random
// centre, members empirically centred so the edge mean equals the centre
// exactly; class 0 scatters with sigma 0.1, class 1 with sigma 1.0. Splits
// are drawn per edge so held-out edges have unseen centres.
Dataset synth_spread_dataset(int64_t n_edges, int64_t edge_size, int64_t dim,
                             uint64_t seed);

constexpr double kSpreadSigmaSmall = 0.1;
constexpr double kSpreadSigmaLarge = 1.0;
constexpr double kSpreadCentreSigma = 4.0;

}  // namespace whnn

#endif  // WHNN_HYPERGRAPH_HPP
