#include "whnn/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace whnn {

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels,
                     const std::vector<uint8_t>& mask) {
  return masked_cross_entropy(logits, labels, mask);
}

double accuracy(std::span<const Real> logits, int64_t n, int64_t classes,
                const std::vector<int32_t>& labels, const std::vector<uint8_t>& mask) {
  int64_t hits = 0, total = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++total;
    int64_t best = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (logits[i * classes + c] > logits[i * classes + best]) best = c;
    if (best == labels[i]) ++hits;
  }
  if (total == 0) throw std::invalid_argument("evaluate: empty mask");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double evaluate(const WhnnModel& model, const Dataset& ds, const Hypergraph& graph,
                const std::vector<uint8_t>& mask) {
  Tape tape;
  ForwardCtx ctx{/*train=*/false, nullptr};
  Tensor logits = model.forward(tape, ds.features, ds.graph.num_nodes, graph, ctx);
  return accuracy(logits.values(), ds.graph.num_nodes, model.num_classes(), ds.labels,
                  mask);
}

Metrics train_model(const Dataset& ds, const TrainConfig& cfg, WhnnModel* out_model) {
  cfg.validate();
  if (!ds.has_splits) throw std::invalid_argument("train: dataset has no splits");
  Hypergraph graph = prepare_graph(ds.graph, cfg.model);

  WhnnModel model(cfg.model, ds.feature_dim, ds.num_classes, cfg.seed);
  Adam opt(model.trainable_parameters(), AdamConfig{.lr = cfg.lr});
  Rng dropout_rng = Rng::stream(cfg.seed, "dropout");

  Metrics metrics;
  metrics.best_val_acc = -1.0;
  int64_t n = ds.graph.num_nodes;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    {
      Tape tape;
      ForwardCtx ctx{/*train=*/true, &dropout_rng};
      Tensor logits = model.forward(tape, ds.features, n, graph, ctx);
      Tensor loss = cross_entropy(logits, ds.labels, ds.splits.train);
      rec.loss = loss.scalar();
      if (!std::isfinite(rec.loss)) {
        std::string op = tape.first_nonfinite_op();
        throw TrainingDiverged(op.empty() ? "cross_entropy" : op);
      }
      tape.backward(loss);
      opt.step();
    }
    {
      Tape tape;
      ForwardCtx ctx{/*train=*/false, nullptr};
      Tensor logits = model.forward(tape, ds.features, n, graph, ctx);
      auto lv = logits.values();
      rec.train_acc = accuracy(lv, n, ds.num_classes, ds.labels, ds.splits.train);
      rec.val_acc = accuracy(lv, n, ds.num_classes, ds.labels, ds.splits.val);
      rec.test_acc = accuracy(lv, n, ds.num_classes, ds.labels, ds.splits.test);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // Earliest epoch wins on validation ties.
    if (rec.val_acc > metrics.best_val_acc) {
      metrics.best_val_acc = rec.val_acc;
      metrics.best_epoch = epoch;
      metrics.test_at_best = rec.test_acc;
    }
    metrics.epochs.push_back(rec);
  }
  double total = 0;
  for (const auto& e : metrics.epochs) total += e.seconds;
  metrics.secs_per_epoch = total / static_cast<double>(metrics.epochs.size());
  if (out_model) *out_model = std::move(model);
  return metrics;
}

// ---- Search ------------------------------------------------------------------

SearchSpace SearchSpace::paper() { return SearchSpace{}; }

SearchSpace SearchSpace::desk() {
  SearchSpace s;
  s.hidden = {16, 32};
  s.cls_hidden = {16, 32};
  s.num_ref = {5, 10};
  s.dropout = {0.0, 0.2};
  s.in_dropout = {0.0, 0.2};
  return s;
}

namespace {

template <typename T>
T pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(v.size())))];
}

int env_workers(int requested) {
  if (const char* env = std::getenv("WHNN_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) return std::min(requested, cap);
  }
  return requested;
}

// Runs jobs [0, count) on up to `workers` threads; each job is independent
// and results are merged by index, so parallelism never changes the output.
void parallel_for(int count, int workers, const std::function<void(int)>& job) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) job(i);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

ModelConfig SearchSpace::sample(const ModelConfig& base, Rng& rng) const {
  ModelConfig c = base;
  c.num_ref = pick(num_ref, rng);
  c.learnable_W = pick(learnable_W, rng) != 0;
  c.heads = pick(heads, rng);
  c.mlp_layers = pick(mlp_layers, rng);
  c.hidden = pick(hidden, rng);
  c.mlp2_layers = pick(mlp2_layers, rng);
  c.cls_layers = pick(cls_layers, rng);
  c.cls_hidden = pick(cls_hidden, rng);
  c.self_loops = pick(self_loops, rng) != 0;
  c.dropout = pick(dropout, rng);
  c.in_dropout = pick(in_dropout, rng);
  while (c.hidden % c.heads != 0) c.heads = pick(heads, rng);
  return c;
}

SearchResult random_search(const Dataset& ds, const TrainConfig& base,
                           const SearchSpace& space, int trials, uint64_t base_seed,
                           int workers) {
  if (trials < 1) throw std::invalid_argument("random_search: need at least one trial");
  // Sample all configs up front so the trial sequence is independent of the
  // worker schedule.
  std::vector<TrialResult> results(static_cast<size_t>(trials));
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::stream(base_seed, "search", static_cast<uint64_t>(t));
    results[t].trial = t;
    results[t].seed = Rng::stream(base_seed, "trial-seed", static_cast<uint64_t>(t)).next_u64();
    results[t].config = space.sample(base.model, rng);
  }
  parallel_for(trials, env_workers(workers), [&](int t) {
    TrainConfig cfg = base;
    cfg.model = results[t].config;
    cfg.seed = results[t].seed;
    results[t].metrics = train_model(ds, cfg);
  });
  std::stable_sort(results.begin(), results.end(),
                   [](const TrialResult& a, const TrialResult& b) {
                     return a.metrics.best_val_acc > b.metrics.best_val_acc;
                   });
  SearchResult out;
  out.best = results.front().config;
  out.trials = std::move(results);
  return out;
}

// ---- Ablation ------------------------------------------------------------------

std::string AblationCell::label() const {
  if (aggregator == AggregatorKind::Swp) return learnable_W ? "LPSWE" : "FPSWE";
  return to_string(aggregator);
}

std::vector<AblationCell> ablation_run(const Dataset& ds, const TrainConfig& base,
                                       const std::vector<EncoderKind>& encoders,
                                       const std::vector<std::string>& aggregators,
                                       int repeats, int workers) {
  std::vector<AblationCell> cells;
  for (EncoderKind enc : encoders)
    for (const std::string& agg : aggregators) {
      AblationCell cell;
      cell.encoder = enc;
      if (agg == "FPSWE" || agg == "LPSWE") {
        cell.aggregator = AggregatorKind::Swp;
        cell.learnable_W = agg == "LPSWE";
      } else {
        cell.aggregator = aggregator_from_string(agg);
        cell.learnable_W = false;
      }
      cell.runs.resize(static_cast<size_t>(repeats));
      cells.push_back(std::move(cell));
    }

  int total = static_cast<int>(cells.size()) * repeats;
  parallel_for(total, env_workers(workers), [&](int i) {
    int ci = i / repeats, rep = i % repeats;
    AblationCell& cell = cells[ci];
    TrainConfig cfg = base;
    cfg.model.encoder = cell.encoder;
    cfg.model.aggregator = cell.aggregator;
    cfg.model.learnable_W = cell.learnable_W;
    // Repeat r uses one shared seed across all cells: FPSWE and LPSWE start
    // from identical parameters and differ only in trainability.
    cfg.seed = Rng::stream(base.seed, "ablation-repeat", static_cast<uint64_t>(rep)).next_u64();
    TrialResult& r = cell.runs[rep];
    r.trial = rep;
    r.seed = cfg.seed;
    r.config = cfg.model;
    r.metrics = train_model(ds, cfg);
  });

  for (AblationCell& cell : cells) {
    double mean = 0;
    for (const auto& r : cell.runs) mean += r.metrics.test_at_best;
    mean /= static_cast<double>(cell.runs.size());
    double var = 0;
    for (const auto& r : cell.runs) {
      double d = r.metrics.test_at_best - mean;
      var += d * d;
    }
    cell.mean_test = mean;
    cell.std_test = cell.runs.size() > 1
                        ? std::sqrt(var / static_cast<double>(cell.runs.size() - 1))
                        : 0.0;
  }
  return cells;
}

// ---- CSV ---------------------------------------------------------------------

std::string metrics_csv_header() {
  return "trial,seed,encoder,aggregator,epoch_best,val_acc,test_acc,secs_per_epoch,"
         "num_ref,learnable_W,heads,MLP_layers,MLP_hid,MLP2_layers,Cls_layers,Cls_hid,"
         "self_loops,dropout,in_dropout";
}

std::string metrics_csv_row(const TrialResult& t) {
  std::ostringstream os;
  const ModelConfig& c = t.config;
  os << t.trial << ',' << t.seed << ',' << to_string(c.encoder) << ','
     << c.aggregator_label() << ',' << t.metrics.best_epoch << ','
     << t.metrics.best_val_acc << ',' << t.metrics.test_at_best << ','
     << t.metrics.secs_per_epoch << ',' << c.num_ref << ',' << (c.learnable_W ? 1 : 0)
     << ',' << c.heads << ',' << c.mlp_layers << ',' << c.hidden << ','
     << c.mlp2_layers << ',' << c.cls_layers << ',' << c.cls_hidden << ','
     << (c.self_loops ? 1 : 0) << ',' << c.dropout << ',' << c.in_dropout;
  return os.str();
}

void write_text_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write file: " + tmp);
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace whnn
