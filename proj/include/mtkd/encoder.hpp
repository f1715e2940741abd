#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtkd/errors.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/tape.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

// Reserved token ids. Sequences are prepended with the cls token so the
// cls pooling baseline has something to read; pad is id 0.
constexpr std::size_t kPadId = 0;
constexpr std::size_t kClsId = 1;
constexpr std::size_t kSepId = 2;
constexpr std::size_t kFirstContentId = 3;

enum class Activation { Gelu, Relu };
enum class PoolMode { Attentive, Average, Max, Cls };

struct EncoderConfig {
  std::size_t vocab_size = 100;
  std::size_t max_seq_len = 16;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t num_layers = 4;
  double dropout = 0.1;
  Activation activation = Activation::Gelu;
  bool truncate_over_length = true;

  void validate() const {
    if (hidden_dim % num_heads != 0)
      throw ConfigError("hidden_dim must be divisible by num_heads");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (vocab_size <= kFirstContentId) throw ConfigError("vocab_size too small");
  }
};

template <typename S>
struct EncoderLayerParams {
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> w1, b1, w2, b2;
  TensorT<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq); f(prefix + ".bq", bq);
    f(prefix + ".wk", wk); f(prefix + ".bk", bk);
    f(prefix + ".wv", wv); f(prefix + ".bv", bv);
    f(prefix + ".wo", wo); f(prefix + ".bo", bo);
    f(prefix + ".w1", w1); f(prefix + ".b1", b1);
    f(prefix + ".w2", w2); f(prefix + ".b2", b2);
    f(prefix + ".ln1_gain", ln1_gain); f(prefix + ".ln1_bias", ln1_bias);
    f(prefix + ".ln2_gain", ln2_gain); f(prefix + ".ln2_bias", ln2_bias);
  }
};

// Post-layer-norm transformer encoder parameters (BERT ordering), with
// learned positional embeddings.
template <typename S>
struct EncoderParams {
  EncoderConfig cfg;
  TensorT<S> tok_emb;  // V×d
  TensorT<S> pos_emb;  // L×d
  std::vector<EncoderLayerParams<S>> layers;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng, double std_dev = 0.02) {
    EncoderParams p;
    p.cfg = cfg;
    const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim;
    p.tok_emb = TensorT<S>::gaussian({cfg.vocab_size, d}, rng, std_dev);
    p.pos_emb = TensorT<S>::gaussian({cfg.max_seq_len, d}, rng, std_dev);
    p.layers.resize(cfg.num_layers);
    for (auto& l : p.layers) {
      l.wq = TensorT<S>::gaussian({d, d}, rng, std_dev);
      l.bq = TensorT<S>::zeros({d});
      l.wk = TensorT<S>::gaussian({d, d}, rng, std_dev);
      l.bk = TensorT<S>::zeros({d});
      l.wv = TensorT<S>::gaussian({d, d}, rng, std_dev);
      l.bv = TensorT<S>::zeros({d});
      l.wo = TensorT<S>::gaussian({d, d}, rng, std_dev);
      l.bo = TensorT<S>::zeros({d});
      l.w1 = TensorT<S>::gaussian({d, f}, rng, std_dev);
      l.b1 = TensorT<S>::zeros({f});
      l.w2 = TensorT<S>::gaussian({f, d}, rng, std_dev);
      l.b2 = TensorT<S>::zeros({d});
      l.ln1_gain = TensorT<S>::full({d}, S(1));
      l.ln1_bias = TensorT<S>::zeros({d});
      l.ln2_gain = TensorT<S>::full({d}, S(1));
      l.ln2_bias = TensorT<S>::zeros({d});
    }
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".tok_emb", tok_emb);
    f(prefix + ".pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit(prefix + ".layer" + std::to_string(i), f);
  }

  void collect(std::vector<TensorT<S>*>& out) {
    visit("", [&](const std::string&, TensorT<S>& t) { out.push_back(&t); });
  }

  void set_requires_grad(bool rg) {
    visit("", [rg](const std::string&, TensorT<S>& t) { t.set_requires_grad(rg); });
  }
};

// Additive-attention pooler: score_i = u · tanh(W h_i + b).
template <typename S>
struct AttentivePooler {
  TensorT<S> w;  // d×q
  TensorT<S> b;  // q
  TensorT<S> u;  // q×1

  static AttentivePooler init(std::size_t d, std::size_t q, Rng& rng, double std_dev = 0.02) {
    AttentivePooler p;
    p.w = TensorT<S>::gaussian({d, q}, rng, std_dev);
    p.b = TensorT<S>::zeros({q});
    p.u = TensorT<S>::gaussian({q, 1}, rng, std_dev);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
    f(prefix + ".u", u);
  }

  void collect(std::vector<TensorT<S>*>& out) { out.push_back(&w); out.push_back(&b); out.push_back(&u); }
  void set_requires_grad(bool rg) { w.set_requires_grad(rg); b.set_requires_grad(rg); u.set_requires_grad(rg); }
};

template <typename S>
struct ClassifierHead {
  TensorT<S> w;  // d×C
  TensorT<S> b;  // C

  static ClassifierHead init(std::size_t d, std::size_t classes, Rng& rng, double std_dev = 0.02) {
    if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
    ClassifierHead h;
    h.w = TensorT<S>::gaussian({d, classes}, rng, std_dev);
    h.b = TensorT<S>::zeros({classes});
    return h;
  }

  std::size_t num_classes() const { return b.numel(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }

  void collect(std::vector<TensorT<S>*>& out) { out.push_back(&w); out.push_back(&b); }
  void set_requires_grad(bool rg) { w.set_requires_grad(rg); b.set_requires_grad(rg); }
};

// Per-layer hidden states for one example: entry 0 is the embedding output,
// entry i is the output of transformer layer i.
template <typename S>
struct LayerStack {
  std::vector<Var<S>> hidden;
  std::vector<std::uint8_t> mask;
  std::size_t num_layers() const { return hidden.size() - 1; }
  Var<S> top() const { return hidden.back(); }
};

// Forward pass for one (padded) example. Padding keys are masked out of
// attention; their rows still carry values but are excluded downstream.
template <typename S>
LayerStack<S> encode(Tape<S>& tape, EncoderParams<S>& params,
                     std::vector<std::size_t> ids, std::vector<std::uint8_t> mask,
                     bool train = false, Rng* rng = nullptr) {
  const EncoderConfig& cfg = params.cfg;
  const std::size_t d = cfg.hidden_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = d / heads;
  if (ids.size() != mask.size()) throw DimensionError("encode: ids/mask length mismatch");
  if (ids.size() > cfg.max_seq_len) {
    if (!cfg.truncate_over_length)
      throw InputError("encode: sequence longer than max_seq_len");
    ids.resize(cfg.max_seq_len);
    mask.resize(cfg.max_seq_len);
  }
  for (std::size_t id : ids)
    if (id >= cfg.vocab_size)
      throw InputError("encode: token id " + std::to_string(id) + " out of vocabulary");
  const std::size_t len = ids.size();
  const double droprate = train ? cfg.dropout : 0.0;
  if (droprate > 0.0 && rng == nullptr) throw ContractError("encode: dropout needs an rng");

  auto tok = tape.param(params.tok_emb);
  auto pos = tape.param(params.pos_emb);
  std::vector<std::size_t> iota(len);
  for (std::size_t i = 0; i < len; ++i) iota[i] = i;
  auto x = tape.add(tape.gather_rows(tok, ids), tape.gather_rows(pos, iota));
  if (droprate > 0.0) x = tape.dropout(x, droprate, *rng);

  LayerStack<S> stack;
  stack.mask = mask;
  stack.hidden.push_back(x);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (auto& l : params.layers) {
    auto q = tape.add_rowvec(tape.matmul(x, tape.param(l.wq)), tape.param(l.bq));
    auto k = tape.add_rowvec(tape.matmul(x, tape.param(l.wk)), tape.param(l.bk));
    auto v = tape.add_rowvec(tape.matmul(x, tape.param(l.wv)), tape.param(l.bv));
    std::vector<Var<S>> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = tape.slice_cols(q, h * dh, dh);
      auto kh = tape.slice_cols(k, h * dh, dh);
      auto vh = tape.slice_cols(v, h * dh, dh);
      auto scores = tape.scale(tape.matmul_nt(qh, kh), scale);
      auto attn = tape.softmax_rows(scores, 1.0, &mask);
      ctx.push_back(tape.matmul(attn, vh));
    }
    auto merged = heads == 1 ? ctx[0] : tape.concat_cols(ctx);
    auto attn_out = tape.add_rowvec(tape.matmul(merged, tape.param(l.wo)), tape.param(l.bo));
    if (droprate > 0.0) attn_out = tape.dropout(attn_out, droprate, *rng);
    x = tape.layer_norm(tape.add(x, attn_out), tape.param(l.ln1_gain), tape.param(l.ln1_bias));

    auto h1 = tape.add_rowvec(tape.matmul(x, tape.param(l.w1)), tape.param(l.b1));
    auto act = cfg.activation == Activation::Gelu ? tape.gelu_(h1) : tape.relu_(h1);
    auto ffn_out = tape.add_rowvec(tape.matmul(act, tape.param(l.w2)), tape.param(l.b2));
    if (droprate > 0.0) ffn_out = tape.dropout(ffn_out, droprate, *rng);
    x = tape.layer_norm(tape.add(x, ffn_out), tape.param(l.ln2_gain), tape.param(l.ln2_bias));
    stack.hidden.push_back(x);
  }
  return stack;
}

// Attention-weighted sum of unmasked hidden rows; returns a 1×d Var.
template <typename S>
Var<S> attentive_pool(Tape<S>& tape, Var<S> h_top, AttentivePooler<S>& pooler,
                      const std::vector<std::uint8_t>& mask) {
  bool any = false;
  for (auto m : mask) any = any || m;
  if (!any) throw InputError("attentive_pool: all positions masked");
  auto proj = tape.tanh_(tape.add_rowvec(tape.matmul(h_top, tape.param(pooler.w)),
                                         tape.param(pooler.b)));
  auto scores = tape.transpose(tape.matmul(proj, tape.param(pooler.u)));  // 1×L
  auto alpha = tape.softmax_rows(scores, 1.0, &mask);
  return tape.matmul(alpha, h_top);
}

template <typename S>
struct ClassifyResult {
  Var<S> logits;
  Var<S> probs;
};

template <typename S>
ClassifyResult<S> classify(Tape<S>& tape, Var<S> pooled, ClassifierHead<S>& head,
                           double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("classify: temperature must be > 0");
  auto logits = tape.add_rowvec(tape.matmul(pooled, tape.param(head.w)), tape.param(head.b));
  auto probs = tape.softmax_rows(logits, temperature);
  return {logits, probs};
}

// average / max / cls pooling baselines.
template <typename S>
Var<S> pool_baseline(Tape<S>& tape, Var<S> h_top, const std::vector<std::uint8_t>& mask,
                     PoolMode mode) {
  bool any = false;
  for (auto m : mask) any = any || m;
  if (!any) throw InputError("pool_baseline: all positions masked");
  switch (mode) {
    case PoolMode::Average: return tape.mean_rows_masked(h_top, mask);
    case PoolMode::Max: return tape.max_rows_masked(h_top, mask);
    case PoolMode::Cls: return tape.slice_rows(h_top, 0, 1);
    default: throw ContractError("pool_baseline: use attentive_pool for attentive mode");
  }
}

template <typename S>
Var<S> pool(Tape<S>& tape, Var<S> h_top, AttentivePooler<S>& pooler,
            const std::vector<std::uint8_t>& mask, PoolMode mode) {
  return mode == PoolMode::Attentive ? attentive_pool(tape, h_top, pooler, mask)
                                     : pool_baseline(tape, h_top, mask, mode);
}

}  // namespace mtkd
