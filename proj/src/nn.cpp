#include "whnn/nn.hpp"

#include <cmath>

namespace whnn {

Mlp Mlp::build(ParamStore& store, const std::string& prefix, int layers,
               int64_t in_dim, int64_t hidden, int64_t out_dim, Rng& rng,
               bool final_activation, bool layer_norm, bool bias,
               double dropout_rate) {
  Mlp m;
  m.final_activation = final_activation;
  m.dropout_rate = dropout_rate;
  int64_t d = in_dim;
  for (int l = 0; l < layers; ++l) {
    int64_t out = l + 1 == layers ? out_dim : hidden;
    Parameter& w = store.create(prefix + ".w" + std::to_string(l), Shape{d, out});
    init_linear(w, rng);
    m.weights.push_back(&w);
    if (bias) {
      Parameter& b = store.create(prefix + ".b" + std::to_string(l), Shape{1, out});
      init_zeros(b);
      m.biases.push_back(&b);
    } else {
      m.biases.push_back(nullptr);
    }
    d = out;
  }
  if (layer_norm && layers > 0) {
    Parameter& g = store.create(prefix + ".ln_gain", Shape{1, d});
    Parameter& b = store.create(prefix + ".ln_bias", Shape{1, d});
    init_ones(g);
    init_zeros(b);
    m.ln_gain = &g;
    m.ln_bias = &b;
  }
  return m;
}

Tensor Mlp::forward(Tape& tape, Tensor x, const ForwardCtx& ctx) const {
  for (size_t l = 0; l < weights.size(); ++l) {
    x = matmul(x, tape.leaf(*weights[l]));
    if (biases[l]) x = add_rowvec(x, tape.leaf(*biases[l]));
    bool activate = final_activation || l + 1 < weights.size();
    if (activate) {
      x = relu(x);
      x = maybe_dropout(x, dropout_rate, ctx);
    }
  }
  if (ln_gain) x = layer_norm_rows(x, tape.leaf(*ln_gain), tape.leaf(*ln_bias));
  return x;
}

AttentionBlock AttentionBlock::build(ParamStore& store, const std::string& prefix,
                                     int64_t dim, int heads, Rng& rng,
                                     double dropout_rate) {
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("attention: heads must divide the hidden dimension");
  AttentionBlock b;
  b.heads = heads;
  b.dropout_rate = dropout_rate;
  for (auto [name, slot] : {std::pair{"wq", &b.wq}, {"wk", &b.wk}, {"wv", &b.wv}}) {
    Parameter& p = store.create(prefix + "." + name, Shape{dim, dim});
    init_linear(p, rng);
    *slot = &p;
  }
  auto make_ln = [&](const char* name, Parameter*& gain, Parameter*& bias) {
    Parameter& g = store.create(prefix + "." + name + std::string("_gain"), Shape{1, dim});
    Parameter& bb = store.create(prefix + "." + name + std::string("_bias"), Shape{1, dim});
    init_ones(g);
    init_zeros(bb);
    gain = &g;
    bias = &bb;
  };
  make_ln("ln1", b.ln1_gain, b.ln1_bias);
  make_ln("ln2", b.ln2_gain, b.ln2_bias);
  b.ff = Mlp::build(store, prefix + ".ff", 1, dim, dim, dim, rng,
                    /*final_activation=*/true, /*layer_norm=*/false, /*bias=*/true,
                    dropout_rate);
  return b;
}

Tensor AttentionBlock::apply(Tape& tape, Tensor queries, Tensor keys, int64_t q_rows,
                             int64_t k_rows, const ForwardCtx& ctx) const {
  int64_t dim = queries.cols();
  int64_t dh = dim / heads;
  Real scl = 1.0 / std::sqrt(static_cast<Real>(dh));

  Tensor q_all = matmul(queries, tape.leaf(*wq));
  Tensor k_all = matmul(keys, tape.leaf(*wk));
  Tensor v_all = matmul(keys, tape.leaf(*wv));

  Tensor ctx_out;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q_all : slice_cols(q_all, h * dh, dh);
    Tensor kh = heads == 1 ? k_all : slice_cols(k_all, h * dh, dh);
    Tensor vh = heads == 1 ? v_all : slice_cols(v_all, h * dh, dh);
    Tensor scores = scale(blocked_matmul_nt(qh, kh, q_rows, k_rows), scl);
    Tensor attn = softmax_rows(scores);
    attn = maybe_dropout(attn, dropout_rate, ctx);
    Tensor ch = blocked_matmul_nn(attn, vh, q_rows, k_rows);
    ctx_out = h == 0 ? ch : concat_cols(ctx_out, ch);
  }

  Tensor z = layer_norm_rows(add(queries, ctx_out), tape.leaf(*ln1_gain),
                             tape.leaf(*ln1_bias));
  Tensor f = ff.forward(tape, z, ctx);
  return layer_norm_rows(add(z, f), tape.leaf(*ln2_gain), tape.leaf(*ln2_bias));
}

}  // namespace whnn
