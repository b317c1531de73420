#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "whnn/hypergraph.hpp"

using namespace whnn;

namespace {

std::string tiny_dataset_json() {
  return R"({
    "num_nodes": 3,
    "features": [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]],
    "labels": [0, 1, 0],
    "edges": [[0, 1], [1, 2]]
  })";
}

}  // namespace

TEST_CASE("load builds the transpose index") {
  Dataset ds = parse_canonical(tiny_dataset_json());
  CHECK(ds.graph.num_nodes == 3);
  CHECK(ds.graph.num_edges == 2);
  CHECK(ds.feature_dim == 2);
  CHECK(ds.num_classes == 2);
  // node_memberships = [[0],[0,1],[1]]
  auto& nm = ds.graph.node_memberships;
  CHECK(nm.size(0) == 1);
  CHECK(nm.segment(0)[0] == 0);
  CHECK(nm.size(1) == 2);
  CHECK(nm.segment(1)[0] == 0);
  CHECK(nm.segment(1)[1] == 1);
  CHECK(nm.size(2) == 1);
  CHECK(nm.segment(2)[0] == 1);
}

TEST_CASE("validation failures carry the offending record") {
  SUBCASE("node index out of range") {
    std::string txt = R"({"num_nodes": 3, "features": [[0],[0],[0]],
      "labels": [0,0,1], "edges": [[0,5]]})";
    CHECK_THROWS_WITH_AS(parse_canonical(txt),
                         "edge 0: node index 5 out of range [0, 3)", std::runtime_error);
  }
  SUBCASE("empty hyperedge") {
    std::string txt = R"({"num_nodes": 2, "features": [[0],[0]],
      "labels": [0,1], "edges": [[0,1],[]]})";
    CHECK_THROWS_WITH_AS(parse_canonical(txt), "edge 1: empty hyperedge",
                         std::runtime_error);
  }
  SUBCASE("duplicate node within an edge") {
    std::string txt = R"({"num_nodes": 2, "features": [[0],[0]],
      "labels": [0,1], "edges": [[1,0,1]]})";
    CHECK_THROWS_WITH_AS(parse_canonical(txt), "edge 0: duplicate node 1",
                         std::runtime_error);
  }
  SUBCASE("feature dimension mismatch") {
    std::string txt = R"({"num_nodes": 2, "features": [[0,1],[2]],
      "labels": [0,1], "edges": [[0,1]]})";
    CHECK_THROWS(parse_canonical(txt));
  }
  SUBCASE("parse failure") { CHECK_THROWS(parse_canonical("{not json")); }
  SUBCASE("non-finite feature rejected") {
    std::string txt = R"({"num_nodes": 1, "features": [[1e999]],
      "labels": [0], "edges": [[0]]})";
    CHECK_THROWS(parse_canonical(txt));
  }
  SUBCASE("isolated node rejected unless allowed") {
    std::string txt = R"({"num_nodes": 3, "features": [[0],[0],[0]],
      "labels": [0,0,1], "edges": [[0,1]]})";
    CHECK_THROWS(parse_canonical(txt, /*allow_isolated=*/false));
    Dataset ds = parse_canonical(txt, /*allow_isolated=*/true);
    CHECK(ds.graph.isolated_nodes() == std::vector<int32_t>{2});
  }
}

TEST_CASE("self loops append singletons after existing edges") {
  Hypergraph h = Hypergraph::from_edges(2, {{0, 1}});
  Hypergraph s = h.with_self_loops();
  CHECK(s.num_edges == 3);
  CHECK(s.edge_members.size(0) == 2);
  CHECK(s.edge_members.segment(1)[0] == 0);
  CHECK(s.edge_members.segment(2)[0] == 1);
  // applying twice is not idempotent by design: M = M0 + 2N
  CHECK(s.with_self_loops().num_edges == 1 + 2 * 2);
}

TEST_CASE("neighbourhood views") {
  Hypergraph h = Hypergraph::from_edges(2, {{0, 1}, {1}});
  CHECK(h.edge_members.size(0) == 2);
  CHECK(h.node_memberships.size(0) == 1);
  CHECK(h.node_memberships.size(1) == 2);

  Hypergraph single = Hypergraph::from_edges(1, {{0}});
  CHECK(single.node_memberships.size(0) == 1);

  Hypergraph chain = Hypergraph::from_edges(4, {{0, 1}, {1, 2}, {2, 3}});
  auto n2 = chain.node_memberships.segment(2);
  CHECK(n2.size() == 2);
  CHECK(n2[0] == 1);
  CHECK(n2[1] == 2);
}

TEST_CASE("transpose round-trip and incidence conservation on random graphs") {
  Rng rng(211);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t n = 2 + rng.uniform_int(199);
    int64_t m = 1 + rng.uniform_int(400);
    std::vector<std::vector<int32_t>> edges(m);
    for (auto& e : edges) {
      int64_t k = 1 + rng.uniform_int(std::min<int64_t>(n, 6));
      while (static_cast<int64_t>(e.size()) < k) {
        int32_t v = static_cast<int32_t>(rng.uniform_int(n));
        if (std::find(e.begin(), e.end(), v) == e.end()) e.push_back(v);
      }
    }
    Hypergraph h = Hypergraph::from_edges(n, edges);
    // transpose(transpose(edge_members)) == edge_members, exactly
    AdjacencyList back = transpose_adjacency(h.node_memberships, h.num_edges);
    CHECK(back == h.edge_members);
    // sum over edges of |e| equals sum over nodes of |N_v(i)|
    CHECK(h.edge_members.indices.size() == h.node_memberships.indices.size());
  }
}

TEST_CASE("save/load round trip is the identity") {
  Dataset ds = parse_canonical(tiny_dataset_json());
  ds.splits = random_split(3, {0.5, 0.25, 0.25}, 9);
  ds.has_splits = true;
  std::string path = std::filesystem::temp_directory_path() / "whnn_roundtrip.json";
  save_canonical(ds, path);
  Dataset ds2 = load_canonical(path);
  CHECK(ds == ds2);
  std::remove(path.c_str());
}

TEST_CASE("random splits") {
  SUBCASE("deterministic under the seed") {
    CHECK(random_split(100, {0.5, 0.25, 0.25}, 7) == random_split(100, {0.5, 0.25, 0.25}, 7));
  }
  SUBCASE("sizes follow the floor/remainder rule") {
    auto count = [](const std::vector<uint8_t>& m) {
      int64_t c = 0;
      for (uint8_t x : m) c += x;
      return c;
    };
    Splits s100 = random_split(100, {0.5, 0.25, 0.25}, 1);
    CHECK(count(s100.train) == 50);
    CHECK(count(s100.val) == 25);
    CHECK(count(s100.test) == 25);
    Splits s101 = random_split(101, {0.5, 0.25, 0.25}, 1);
    CHECK(count(s101.train) == 50);
    CHECK(count(s101.val) == 25);
    CHECK(count(s101.test) == 26);
  }
  SUBCASE("masks are disjoint and cover all nodes") {
    Splits s = random_split(137, {0.5, 0.25, 0.25}, 3);
    for (int64_t i = 0; i < 137; ++i)
      CHECK(s.train[i] + s.val[i] + s.test[i] == 1);
  }
  SUBCASE("ratios must sum to one") {
    CHECK_THROWS(random_split(10, {0.5, 0.3, 0.3}, 1));
  }
}

TEST_CASE("two-community generator") {
  SUBCASE("deterministic under the seed") {
    Dataset a = synth_two_community(30, 6, 4, 0.1, 5);
    Dataset b = synth_two_community(30, 6, 4, 0.1, 5);
    CHECK(serialize_canonical(a) == serialize_canonical(b));
  }
  SUBCASE("zero noise collapses each class to a point") {
    Dataset ds = synth_two_community(20, 4, 4, 0.0, 5);
    for (int64_t i = 1; i < 20; ++i)
      for (int64_t d = 0; d < 4; ++d)
        CHECK(ds.features[i * 4 + d] == ds.features[d]);
    // classes are distinct
    CHECK(ds.features[0] != ds.features[20 * 4]);
    // edges are class-pure
    for (int64_t e = 0; e < ds.graph.num_edges; ++e) {
      auto seg = ds.graph.edge_members.segment(e);
      for (int32_t v : seg) CHECK(ds.labels[v] == ds.labels[seg[0]]);
    }
  }
  SUBCASE("mixed fraction 1.0 destroys edge purity") {
    Dataset ds = synth_two_community(40, 8, 4, 0.0, 5, /*mixed_fraction=*/1.0);
    int impure = 0;
    for (int64_t e = 0; e < ds.graph.num_edges; ++e) {
      auto seg = ds.graph.edge_members.segment(e);
      bool pure = true;
      for (int32_t v : seg) pure &= ds.labels[v] == ds.labels[seg[0]];
      impure += pure ? 0 : 1;
    }
    CHECK(impure > 0);
  }
  SUBCASE("no isolated nodes") {
    Dataset ds = synth_two_community(25, 5, 3, 0.2, 11);
    CHECK(ds.graph.isolated_nodes().empty());
  }
}

TEST_CASE("spread generator: variance separates, means do not") {
  Dataset ds = synth_spread_dataset(40, 16, 8, 3);
  SUBCASE("deterministic under the seed") {
    Dataset b = synth_spread_dataset(40, 16, 8, 3);
    CHECK(serialize_canonical(ds) == serialize_canonical(b));
  }
  SUBCASE("per-edge sample variance separates the classes with margin") {
    double max0 = 0, min1 = 1e100;
    for (int64_t e = 0; e < ds.graph.num_edges; ++e) {
      auto seg = ds.graph.edge_members.segment(e);
      std::vector<double> mean(8, 0);
      for (int32_t v : seg)
        for (int64_t d = 0; d < 8; ++d) mean[d] += ds.features[v * 8 + d];
      for (double& m : mean) m /= static_cast<double>(seg.size());
      double var = 0;
      for (int32_t v : seg)
        for (int64_t d = 0; d < 8; ++d) {
          double diff = ds.features[v * 8 + d] - mean[d];
          var += diff * diff;
        }
      var /= static_cast<double>(seg.size());
      if (ds.labels[seg[0]] == 0)
        max0 = std::max(max0, var);
      else
        min1 = std::min(min1, var);
    }
    CHECK(max0 * 10 < min1);  // sigma ratio 10 -> variance ratio 100
  }
  SUBCASE("per-edge mean distribution is class-independent by construction") {
    // Edge means equal the sampled centres exactly; their per-class second
    // moments must agree within Monte Carlo error.
    double m0 = 0, m1 = 0;
    int64_t c0 = 0, c1 = 0;
    for (int64_t e = 0; e < ds.graph.num_edges; ++e) {
      auto seg = ds.graph.edge_members.segment(e);
      double norm2 = 0;
      for (int64_t d = 0; d < 8; ++d) {
        double mu = 0;
        for (int32_t v : seg) mu += ds.features[v * 8 + d];
        mu /= static_cast<double>(seg.size());
        norm2 += mu * mu;
      }
      if (ds.labels[seg[0]] == 0) {
        m0 += norm2;
        ++c0;
      } else {
        m1 += norm2;
        ++c1;
      }
    }
    m0 /= c0;
    m1 /= c1;
    CHECK(std::abs(m0 - m1) / std::max(m0, m1) < 0.5);
  }
  SUBCASE("splits are edge-aligned") {
    for (int64_t e = 0; e < ds.graph.num_edges; ++e) {
      auto seg = ds.graph.edge_members.segment(e);
      for (int32_t v : seg) {
        CHECK(ds.splits.train[v] == ds.splits.train[seg[0]]);
        CHECK(ds.splits.val[v] == ds.splits.val[seg[0]]);
        CHECK(ds.splits.test[v] == ds.splits.test[seg[0]]);
      }
    }
  }
  SUBCASE("edge_size below 4 is rejected") {
    CHECK_THROWS(synth_spread_dataset(10, 3, 4, 1));
  }
}
