#ifndef WHNN_NN_HPP
#define WHNN_NN_HPP

#include <memory>
#include <string>
#include <vector>

#include "whnn/tensor.hpp"

namespace whnn {

// Owns every Parameter of a model; modules hold raw pointers into it.
class ParamStore {
 public:
  Parameter& create(const std::string& name, Shape shape) {
    params_.push_back(std::make_unique<Parameter>(name, shape));
    return *params_.back();
  }
  Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Parameter*> trainable() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }
  void zero_grads() const {
    for (const auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Uniform in +-sqrt(1/fan_in); fan_in is the weight's input dimension (rows).
inline void init_linear(Parameter& p, Rng& rng) {
  double bound = std::sqrt(1.0 / static_cast<double>(p.shape.rows));
  for (Real& v : p.value) v = rng.uniform(-bound, bound);
}

inline void init_zeros(Parameter& p) { std::fill(p.value.begin(), p.value.end(), 0.0); }

inline void init_ones(Parameter& p) { std::fill(p.value.begin(), p.value.end(), 1.0); }

// Columns drawn iid standard Gaussian then normalised to unit Euclidean norm.
inline void init_unit_columns(Parameter& p, Rng& rng) {
  int64_t rows = p.shape.rows, cols = p.shape.cols;
  for (int64_t c = 0; c < cols; ++c) {
    double norm = 0;
    do {
      norm = 0;
      for (int64_t r = 0; r < rows; ++r) {
        double g = rng.normal();
        p.value[r * cols + c] = g;
        norm += g * g;
      }
    } while (norm == 0);
    norm = std::sqrt(norm);
    for (int64_t r = 0; r < rows; ++r) p.value[r * cols + c] /= norm;
  }
}

// Per-forward state: training mode plus the seeded dropout stream.
struct ForwardCtx {
  bool train = false;
  Rng* dropout_rng = nullptr;
};

inline Tensor maybe_dropout(Tensor x, double rate, const ForwardCtx& ctx) {
  if (!ctx.train || rate <= 0.0) return x;
  return dropout(x, rate, *ctx.dropout_rng);
}

// Stack of Linear layers with ReLU + dropout between them. 0 layers is the
// identity map. `final_activation` controls ReLU/dropout after the last
// linear (off for classifier heads); optional layer norm caps the stack.
struct Mlp {
  std::vector<Parameter*> weights;
  std::vector<Parameter*> biases;  // entries may be null when bias disabled
  Parameter* ln_gain = nullptr;
  Parameter* ln_bias = nullptr;
  bool final_activation = true;
  double dropout_rate = 0.0;

  static Mlp build(ParamStore& store, const std::string& prefix, int layers,
                   int64_t in_dim, int64_t hidden, int64_t out_dim, Rng& rng,
                   bool final_activation, bool layer_norm, bool bias,
                   double dropout_rate);

  Tensor forward(Tape& tape, Tensor x, const ForwardCtx& ctx) const;
  bool is_identity() const { return weights.empty() && ln_gain == nullptr; }
};

// Multihead attention block: LN(Q + MHA(Q, K, K)) followed by
// LN(h + FF(h)). Operates on block-diagonal groups: `q_rows` query rows of
// block i attend to `k_rows` key rows of block i.
struct AttentionBlock {
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Parameter* ln1_gain = nullptr;
  Parameter* ln1_bias = nullptr;
  Parameter* ln2_gain = nullptr;
  Parameter* ln2_bias = nullptr;
  Mlp ff;
  int heads = 1;
  double dropout_rate = 0.0;

  static AttentionBlock build(ParamStore& store, const std::string& prefix,
                              int64_t dim, int heads, Rng& rng, double dropout_rate);

  Tensor apply(Tape& tape, Tensor queries, Tensor keys, int64_t q_rows,
               int64_t k_rows, const ForwardCtx& ctx) const;
};

}  // namespace whnn

#endif  // WHNN_NN_HPP
