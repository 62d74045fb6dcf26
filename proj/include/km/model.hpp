#pragma once

// Decoder-only transformer: pre-norm blocks, learned positional embeddings,
// GELU MLP, tied input/output embedding. Every linear layer accepts additive
// low-rank contributions at forward time, so adapters never touch the base
// weights and unplugging is exact by construction.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "km/common.hpp"
#include "km/random.hpp"
#include "km/serialize.hpp"
#include "km/tensor.hpp"
#include "km/tokenizer.hpp"

namespace km {

struct ModelConfig {
  int64_t vocab_size = 512;
  int64_t d_model = 128;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t max_seq_len = 512;
  int64_t float_width = 8 * sizeof(real);

  int64_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(vocab_size > 0 && d_model > 0 && n_layers > 0 && n_heads > 0 && d_ff > 0,
            "model config: all dimensions must be positive");
    require(d_model % n_heads == 0, "model config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " +
                                        std::to_string(n_heads));
    require(max_seq_len >= 2, "model config: max_seq_len must be at least 2");
    require(float_width == 8 * sizeof(real),
            "model config: float_width " + std::to_string(float_width) +
                " does not match this build's " + std::to_string(8 * sizeof(real)) + "-bit storage");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},
            {"n_layers", n_layers},     {"n_heads", n_heads},
            {"d_ff", d_ff},             {"max_seq_len", max_seq_len},
            {"float_width", float_width}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.d_ff = j.at("d_ff").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.float_width = j.at("float_width").get<int64_t>();
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Canonical names of the LoRA-targetable linears, in layer order.
inline std::vector<std::string> target_layers(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* t : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"})
      names.push_back(p + t);
  }
  return names;
}

// [d_out, d_in] of a target layer.
inline std::pair<int64_t, int64_t> target_dims(const ModelConfig& cfg,
                                               const std::string& name) {
  if (name.ends_with("mlp.up")) return {cfg.d_ff, cfg.d_model};
  if (name.ends_with("mlp.down")) return {cfg.d_model, cfg.d_ff};
  return {cfg.d_model, cfg.d_model};
}

// One low-rank additive term for a linear layer: x → gate · (alpha/r) · x B Aᵀ.
// gate is an optional scalar tensor (the per-layer w of the learned
// combination); when undefined the term is applied with weight 1.
struct AdapterContribution {
  Tensor a;      // [d_out, r]
  Tensor b;      // [d_in, r]
  double scale;  // alpha / r
  Tensor gate;
};

struct AdapterStack {
  std::unordered_map<std::string, std::vector<AdapterContribution>> layers;
  bool empty() const { return layers.empty(); }
};

struct ForwardOutput {
  Tensor logits;                      // [seq_len, vocab]
  std::vector<Tensor> hidden_states;  // block outputs (post-residual), one per layer
};

class Model {
 public:
  ModelConfig config;
  Tokenizer tokenizer;

  Tensor tok_emb;  // [vocab, d_model], tied with the output head
  Tensor pos_emb;  // [max_seq_len, d_model]
  Tensor ln_f_g, ln_f_b;
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;  // [d_out, d_in]
    Tensor ln2_g, ln2_b;
    Tensor w_up, w_down;
  };
  std::vector<Block> blocks;

  Model(ModelConfig cfg, Tokenizer tok, uint64_t seed)
      : config(cfg), tokenizer(std::move(tok)) {
    config.validate();
    require(tokenizer.vocab_size() <= config.vocab_size,
            "model config: vocab_size " + std::to_string(config.vocab_size) +
                " smaller than tokenizer's " + std::to_string(tokenizer.vocab_size()));
    Rng root(seed);
    const double demb = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double dff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    auto gauss = [&](std::vector<int64_t> shape, double stddev, const std::string& name) {
      Rng r = root.fork(name);
      return Tensor::gaussian(std::move(shape), stddev, r);
    };
    tok_emb = gauss({config.vocab_size, config.d_model}, 0.05, "tok_emb");
    pos_emb = gauss({config.max_seq_len, config.d_model}, 0.02, "pos_emb");
    ln_f_g = Tensor::full({config.d_model}, 1.0);
    ln_f_b = Tensor::zeros({config.d_model});
    for (int64_t l = 0; l < config.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Block b;
      b.ln1_g = Tensor::full({config.d_model}, 1.0);
      b.ln1_b = Tensor::zeros({config.d_model});
      b.wq = gauss({config.d_model, config.d_model}, demb, p + "attn.q");
      b.wk = gauss({config.d_model, config.d_model}, demb, p + "attn.k");
      b.wv = gauss({config.d_model, config.d_model}, demb, p + "attn.v");
      b.wo = gauss({config.d_model, config.d_model}, demb * resid, p + "attn.o");
      b.ln2_g = Tensor::full({config.d_model}, 1.0);
      b.ln2_b = Tensor::zeros({config.d_model});
      b.w_up = gauss({config.d_ff, config.d_model}, demb, p + "mlp.up");
      b.w_down = gauss({config.d_model, config.d_ff}, dff * resid, p + "mlp.down");
      blocks.push_back(std::move(b));
    }
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out{{"tok_emb", tok_emb},
                                 {"pos_emb", pos_emb},
                                 {"ln_f.gain", ln_f_g},
                                 {"ln_f.bias", ln_f_b}};
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const Block& b = blocks[l];
      out.push_back({p + "ln1.gain", b.ln1_g});
      out.push_back({p + "ln1.bias", b.ln1_b});
      out.push_back({p + "attn.q", b.wq});
      out.push_back({p + "attn.k", b.wk});
      out.push_back({p + "attn.v", b.wv});
      out.push_back({p + "attn.o", b.wo});
      out.push_back({p + "ln2.gain", b.ln2_g});
      out.push_back({p + "ln2.bias", b.ln2_b});
      out.push_back({p + "mlp.up", b.w_up});
      out.push_back({p + "mlp.down", b.w_down});
    }
    return out;
  }

  void set_requires_grad(bool rg) {
    for (auto& nt : named_parameters()) nt.tensor.set_requires_grad(rg);
  }

  ForwardOutput forward(const std::vector<int>& tokens,
                        const AdapterStack& stack = {}) const {
    require(!tokens.empty(), "forward: empty token sequence");
    if (static_cast<int64_t>(tokens.size()) > config.max_seq_len)
      fail("forward: sequence length " + std::to_string(tokens.size()) +
           " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    validate_stack(stack);

    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t dh = config.head_dim();

    Tensor x = add(take_rows(tok_emb, tokens), slice(pos_emb, 0, T, 0, config.d_model));
    Tensor mask = causal_mask(T);

    ForwardOutput out;
    for (size_t l = 0; l < blocks.size(); ++l) {
      const Block& b = blocks[l];
      const std::string p = "layers." + std::to_string(l) + ".";

      Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
      Tensor q = linear(h, b.wq, p + "attn.q", stack);
      Tensor k = linear(h, b.wk, p + "attn.k", stack);
      Tensor v = linear(h, b.wv, p + "attn.v", stack);

      std::vector<Tensor> heads;
      for (int64_t i = 0; i < config.n_heads; ++i) {
        Tensor qh = slice(q, 0, T, i * dh, (i + 1) * dh);
        Tensor kh = slice(k, 0, T, i * dh, (i + 1) * dh);
        Tensor vh = slice(v, 0, T, i * dh, (i + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
        Tensor attn = softmax(add(scores, mask), 1.0);
        heads.push_back(matmul(attn, vh));
      }
      Tensor ctx = config.n_heads == 1 ? heads[0] : concat(heads, 1);
      x = add(x, linear(ctx, b.wo, p + "attn.o", stack));

      Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
      Tensor up = gelu(linear(h2, b.w_up, p + "mlp.up", stack));
      x = add(x, linear(up, b.w_down, p + "mlp.down", stack));
      out.hidden_states.push_back(x);
    }

    Tensor xf = layer_norm(x, ln_f_g, ln_f_b);
    out.logits = matmul(xf, transpose(tok_emb));
    return out;
  }

  // Sum and per-token log p(continuation[i] | prefix ++ continuation[<i]).
  std::pair<double, std::vector<double>> score_continuation(
      const std::vector<int>& prefix, const std::vector<int>& continuation,
      const AdapterStack& stack = {}) const {
    require(!prefix.empty(), "score_continuation: empty prefix");
    require(!continuation.empty(), "score_continuation: empty continuation");
    NoGradGuard ng;
    std::vector<int> tokens = prefix;
    tokens.insert(tokens.end(), continuation.begin(), continuation.end());
    Tensor ls = log_softmax(forward(tokens, stack).logits);
    std::vector<double> per_token;
    double total = 0;
    for (size_t i = 0; i < continuation.size(); ++i) {
      const int64_t row = static_cast<int64_t>(prefix.size() + i) - 1;
      double lp = ls.at(row, continuation[i]);
      per_token.push_back(lp);
      total += lp;
    }
    return {total, per_token};
  }

  // Step-by-step argmax continuation; ties break to the lowest token id, eos
  // stops decoding and is not returned.
  std::vector<int> greedy_decode(const std::vector<int>& prefix, int max_new,
                                 const AdapterStack& stack = {}) const {
    require(!prefix.empty(), "greedy_decode: empty prefix");
    NoGradGuard ng;
    std::vector<int> tokens = prefix;
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
      if (static_cast<int64_t>(tokens.size()) >= config.max_seq_len) break;
      Tensor logits = forward(tokens, stack).logits;
      const int64_t last = logits.rows() - 1;
      int best = 0;
      for (int64_t j = 1; j < logits.cols(); ++j)
        if (logits.at(last, j) > logits.at(last, best)) best = static_cast<int>(j);
      if (best == tokenizer.eos_id()) break;
      generated.push_back(best);
      tokens.push_back(best);
    }
    return generated;
  }

  void save(const fs::path& dir) {
    nlohmann::json extra;
    extra["kind"] = "model-checkpoint";
    extra["config"] = config.to_json();
    extra["tokenizer"] = tokenizer.to_json();
    save_bundle(dir, named_parameters(), extra);
  }

  static Model load(const fs::path& dir) {
    Bundle bundle = load_bundle(dir);
    if (bundle.extra.value("kind", "") != "model-checkpoint")
      fail("model load: " + dir.string() + " is not a model checkpoint");
    Model m(ModelConfig::from_json(bundle.extra.at("config")),
            Tokenizer::from_json(bundle.extra.at("tokenizer")), 0);
    for (auto& nt : m.named_parameters()) {
      const Tensor& src = bundle.at(nt.name);
      if (src.shape() != nt.tensor.shape())
        fail("model load: tensor '" + nt.name + "' has shape " + shape_str(src.shape()) +
             ", expected " + shape_str(nt.tensor.shape()));
      nt.tensor.data() = src.data();
    }
    return m;
  }

 private:
  Tensor linear(const Tensor& x, const Tensor& w, const std::string& name,
                const AdapterStack& stack) const {
    Tensor y = matmul(x, transpose(w));
    auto it = stack.layers.find(name);
    if (it == stack.layers.end()) return y;
    for (const auto& c : it->second) {
      Tensor delta = scale(matmul(matmul(x, c.b), transpose(c.a)), c.scale);
      if (c.gate.defined()) delta = mul(delta, c.gate);
      y = add(y, delta);
    }
    return y;
  }

  Tensor causal_mask(int64_t T) const {
    Tensor m = Tensor::zeros({T, T});
    for (int64_t i = 0; i < T; ++i)
      for (int64_t j = i + 1; j < T; ++j)
        m.data()[static_cast<size_t>(i * T + j)] = static_cast<real>(kMaskValue);
    return m;
  }

  void validate_stack(const AdapterStack& stack) const {
    if (stack.empty()) return;
    std::unordered_set<std::string> known;
    for (const auto& name : target_layers(config)) known.insert(name);
    for (const auto& [name, _] : stack.layers)
      if (!known.count(name))
        fail("adapter stack targets unknown layer '" + name + "'");
  }
};

}  // namespace km
