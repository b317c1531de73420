#ifndef WHNN_TRAIN_HPP
#define WHNN_TRAIN_HPP

#include <optional>
#include <string>
#include <vector>

#include "whnn/hypergraph.hpp"
#include "whnn/model.hpp"

namespace whnn {

struct TrainConfig {
  int epochs = 500;
  double lr = 0.001;
  uint64_t seed = 1;
  ModelConfig model;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (lr <= 0) throw std::invalid_argument("train: lr must be positive");
    model.validate();
  }
};

struct EpochRecord {
  double loss = 0;
  double train_acc = 0, val_acc = 0, test_acc = 0;
  double seconds = 0;
};

struct Metrics {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;           // earliest epoch attaining the max val accuracy
  double best_val_acc = 0;
  double test_at_best = 0;      // test accuracy at best_epoch
  double secs_per_epoch = 0;
};

// Raised when the loss goes non-finite; carries the op that produced it.
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& op)
      : std::runtime_error("training diverged: first non-finite value produced by op '" +
                           op + "'"),
        op_name(op) {}
  std::string op_name;
};

// Mean masked cross entropy; thin wrapper kept for call sites and tests.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels,
                     const std::vector<uint8_t>& mask);

// Argmax accuracy over the mask; argmax ties break towards the lowest class.
double evaluate(const WhnnModel& model, const Dataset& ds, const Hypergraph& graph,
                const std::vector<uint8_t>& mask);
double accuracy(std::span<const Real> logits, int64_t n, int64_t classes,
                const std::vector<int32_t>& labels, const std::vector<uint8_t>& mask);

// Full-batch Adam training with best-validation model selection. Fully
// deterministic given (dataset, config). If `out_model` is given, it receives
// the final-epoch model.
Metrics train_model(const Dataset& ds, const TrainConfig& cfg,
                    WhnnModel* out_model = nullptr);

// ---- Hyperparameter search --------------------------------------------------

struct SearchSpace {
  std::vector<int64_t> num_ref = {5, 10, 25, 50};
  std::vector<uint8_t> learnable_W = {0, 1};
  std::vector<int> heads = {1, 2, 4};
  std::vector<int> mlp_layers = {0, 1, 2};
  std::vector<int64_t> hidden = {128, 256, 512};
  std::vector<int> mlp2_layers = {0, 1};
  std::vector<int> cls_layers = {1, 2};
  std::vector<int64_t> cls_hidden = {96, 128, 256};
  std::vector<uint8_t> self_loops = {0, 1};
  std::vector<double> dropout = {0.5, 0.6, 0.7};
  std::vector<double> in_dropout = {0.2, 0.5, 0.6, 0.7};

  // The published search space; base values come from `base`.
  static SearchSpace paper();
  // A small space suitable for desk-scale data.
  static SearchSpace desk();

  ModelConfig sample(const ModelConfig& base, Rng& rng) const;
};

struct TrialResult {
  int trial = 0;
  uint64_t seed = 0;
  ModelConfig config;
  Metrics metrics;
};

struct SearchResult {
  std::vector<TrialResult> trials;  // sorted by val accuracy, descending
  ModelConfig best;
};

SearchResult random_search(const Dataset& ds, const TrainConfig& base,
                           const SearchSpace& space, int trials, uint64_t base_seed,
                           int workers = 1);

// ---- Ablation grid ----------------------------------------------------------

struct AblationCell {
  EncoderKind encoder;
  AggregatorKind aggregator;
  bool learnable_W = false;
  std::vector<TrialResult> runs;
  double mean_test = 0, std_test = 0;
  std::string label() const;
};

// Encoder x aggregator grid with a shared fixed architecture; per repeat all
// cells share the same seed so FPSWE/LPSWE start from identical parameters.
std::vector<AblationCell> ablation_run(const Dataset& ds, const TrainConfig& base,
                                       const std::vector<EncoderKind>& encoders,
                                       const std::vector<std::string>& aggregators,
                                       int repeats, int workers = 1);

// ---- CSV output ---------------------------------------------------------------

std::string metrics_csv_header();
std::string metrics_csv_row(const TrialResult& t);
void write_text_atomic(const std::string& path, const std::string& content);

}  // namespace whnn

#endif  // WHNN_TRAIN_HPP
