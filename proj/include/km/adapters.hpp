#pragma once

// LoRA adapters, Knowledge Modules (one adapter per document), Knowledge
// Extractors (a shared adapter plus per-layer combination weights), and the
// resolution of both into an AdapterStack the model can apply. Deltas are
// never merged into base weights, so attaching and detaching are exact.

#include <ctime>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "km/common.hpp"
#include "km/model.hpp"
#include "km/random.hpp"
#include "km/serialize.hpp"
#include "km/tensor.hpp"

namespace km {

struct LoraAdapter {
  int64_t rank = 0;
  double alpha = 0;
  std::vector<std::string> layers;  // canonical order (target_layers order)
  std::unordered_map<std::string, Tensor> a_by_layer;  // [d_out, rank]
  std::unordered_map<std::string, Tensor> b_by_layer;  // [d_in, rank]

  double scale() const { return alpha / static_cast<double>(rank); }

  Tensor& a(const std::string& layer) { return lookup(a_by_layer, layer); }
  Tensor& b(const std::string& layer) { return lookup(b_by_layer, layer); }
  const Tensor& a(const std::string& layer) const { return lookup(a_by_layer, layer); }
  const Tensor& b(const std::string& layer) const { return lookup(b_by_layer, layer); }

  // a,b interleaved in layer order; the canonical parameter list for training
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers) {
      out.push_back(a(l));
      out.push_back(b(l));
    }
    return out;
  }

  void set_requires_grad(bool rg) {
    for (auto& t : parameters()) t.set_requires_grad(rg);
  }

 private:
  static Tensor& lookup(std::unordered_map<std::string, Tensor>& m,
                        const std::string& layer) {
    auto it = m.find(layer);
    if (it == m.end()) fail("adapter has no layer '" + layer + "'");
    return it->second;
  }
  static const Tensor& lookup(const std::unordered_map<std::string, Tensor>& m,
                              const std::string& layer) {
    auto it = m.find(layer);
    if (it == m.end()) fail("adapter has no layer '" + layer + "'");
    return it->second;
  }
};

struct KnowledgeModule {
  std::string doc_id;
  LoraAdapter adapter;
  nlohmann::json metadata;  // loss kind, steps, seed, creation time
};

// Per-layer combination weights (w_M, w_E) of the learned two-adapter merge;
// both start at 1.0 and train jointly with the extractor's own matrices.
struct KnowledgeExtractor {
  LoraAdapter adapter;
  std::unordered_map<std::string, Tensor> w_km;  // scalar per layer
  std::unordered_map<std::string, Tensor> w_ke;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out = adapter.parameters();
    for (const auto& l : adapter.layers) {
      out.push_back(w_km.at(l));
      out.push_back(w_ke.at(l));
    }
    return out;
  }

  void set_requires_grad(bool rg) {
    for (auto& t : parameters()) t.set_requires_grad(rg);
  }
};

inline LoraAdapter init_lora(const ModelConfig& cfg, int64_t rank, double alpha,
                             uint64_t seed) {
  require(rank >= 1, "init_lora: rank must be at least 1");
  LoraAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.layers = target_layers(cfg);
  Rng root(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  for (const auto& layer : ad.layers) {
    auto [d_out, d_in] = target_dims(cfg, layer);
    if (rank > std::min(d_out, d_in))
      fail("init_lora: rank " + std::to_string(rank) + " exceeds min dim " +
           std::to_string(std::min(d_out, d_in)) + " of layer '" + layer + "'");
    Rng r = root.fork(layer);
    ad.a_by_layer[layer] = Tensor::gaussian({d_out, rank}, stddev, r);
    ad.b_by_layer[layer] = Tensor::zeros({d_in, rank});  // fresh adapter is an identity
  }
  return ad;
}

inline KnowledgeExtractor init_ke(const ModelConfig& cfg, int64_t rank, double alpha,
                                  uint64_t seed) {
  KnowledgeExtractor ke;
  ke.adapter = init_lora(cfg, rank, alpha, seed);
  for (const auto& layer : ke.adapter.layers) {
    ke.w_km[layer] = Tensor::scalar(1.0);
    ke.w_ke[layer] = Tensor::scalar(1.0);
  }
  return ke;
}

inline AdapterStack single_stack(const LoraAdapter& ad) {
  AdapterStack stack;
  for (const auto& layer : ad.layers)
    stack.layers[layer].push_back({ad.a(layer), ad.b(layer), ad.scale(), Tensor{}});
  return stack;
}

namespace detail {
inline void require_same_layers(const std::vector<std::string>& km_layers,
                                const std::vector<std::string>& ke_layers) {
  std::unordered_map<std::string, int> seen;
  for (const auto& l : km_layers) seen[l] |= 1;
  for (const auto& l : ke_layers) seen[l] |= 2;
  std::string km_only, ke_only;
  for (const auto& [l, mask] : seen) {
    if (mask == 1) km_only += (km_only.empty() ? "" : ", ") + l;
    if (mask == 2) ke_only += (ke_only.empty() ? "" : ", ") + l;
  }
  if (!km_only.empty() || !ke_only.empty())
    fail("combine: adapters target different layers (KM only: [" + km_only +
         "], KE only: [" + ke_only + "])");
}
}  // namespace detail

// Eq.-style learned combination: per layer, w_M·ΔKM + w_E·ΔKE. The returned
// stack shares the extractor's tensors, so it stays differentiable w.r.t. the
// extractor and the weights during KE training.
inline AdapterStack combine(const KnowledgeModule& km, const KnowledgeExtractor& ke) {
  detail::require_same_layers(km.adapter.layers, ke.adapter.layers);
  AdapterStack stack;
  for (const auto& layer : km.adapter.layers) {
    auto& contribs = stack.layers[layer];
    contribs.push_back({km.adapter.a(layer), km.adapter.b(layer), km.adapter.scale(),
                        ke.w_km.at(layer)});
    contribs.push_back({ke.adapter.a(layer), ke.adapter.b(layer), ke.adapter.scale(),
                        ke.w_ke.at(layer)});
  }
  return stack;
}

// Extractor without a module: [θ_KE]_w alone, still gated by w_E.
inline AdapterStack ke_stack(const KnowledgeExtractor& ke) {
  AdapterStack stack;
  for (const auto& layer : ke.adapter.layers)
    stack.layers[layer].push_back(
        {ke.adapter.a(layer), ke.adapter.b(layer), ke.adapter.scale(), ke.w_ke.at(layer)});
  return stack;
}

// Resolved delta matrix [d_out, d_in] a stack applies to one layer; mirrors
// the forward-time math (gate · scale · A·Bᵀ summed over contributions).
inline Tensor stack_delta(const AdapterStack& stack, const std::string& layer,
                          int64_t d_out, int64_t d_in) {
  NoGradGuard ng;
  Tensor total = Tensor::zeros({d_out, d_in});
  auto it = stack.layers.find(layer);
  if (it == stack.layers.end()) return total;
  for (const auto& c : it->second) {
    Tensor delta = scale(matmul(c.a, transpose(c.b)), c.scale);
    if (c.gate.defined()) delta = mul(delta, c.gate);
    total = add(total, delta);
  }
  return total;
}

// --- adapter (de)serialization over the bundle format ---

namespace detail {
inline std::vector<NamedTensor> adapter_tensors(const LoraAdapter& ad) {
  std::vector<NamedTensor> out;
  for (const auto& layer : ad.layers) {
    out.push_back({layer + ".a", ad.a(layer)});
    out.push_back({layer + ".b", ad.b(layer)});
  }
  return out;
}

inline nlohmann::json adapter_header(const LoraAdapter& ad) {
  return {{"rank", ad.rank}, {"alpha", ad.alpha}, {"layers", ad.layers}};
}

inline LoraAdapter adapter_from_bundle(const Bundle& bundle, const nlohmann::json& header) {
  LoraAdapter ad;
  ad.rank = header.at("rank").get<int64_t>();
  ad.alpha = header.at("alpha").get<double>();
  ad.layers = header.at("layers").get<std::vector<std::string>>();
  for (const auto& layer : ad.layers) {
    ad.a_by_layer[layer] = bundle.at(layer + ".a");
    ad.b_by_layer[layer] = bundle.at(layer + ".b");
  }
  return ad;
}
}  // namespace detail

inline void save_km(const fs::path& dir, const KnowledgeModule& km) {
  nlohmann::json extra = detail::adapter_header(km.adapter);
  extra["kind"] = "knowledge-module";
  extra["doc_id"] = km.doc_id;
  extra["metadata"] = km.metadata;
  save_bundle(dir, detail::adapter_tensors(km.adapter), extra);
}

inline KnowledgeModule load_km(const fs::path& dir) {
  Bundle bundle = load_bundle(dir);
  if (bundle.extra.value("kind", "") != "knowledge-module")
    fail("load_km: " + dir.string() + " is not a knowledge module");
  KnowledgeModule km;
  km.doc_id = bundle.extra.at("doc_id").get<std::string>();
  km.metadata = bundle.extra.value("metadata", nlohmann::json::object());
  km.adapter = detail::adapter_from_bundle(bundle, bundle.extra);
  return km;
}

inline void save_ke(const fs::path& dir, const KnowledgeExtractor& ke) {
  nlohmann::json extra = detail::adapter_header(ke.adapter);
  extra["kind"] = "knowledge-extractor";
  auto tensors = detail::adapter_tensors(ke.adapter);
  for (const auto& layer : ke.adapter.layers) {
    tensors.push_back({layer + ".w_km", ke.w_km.at(layer)});
    tensors.push_back({layer + ".w_ke", ke.w_ke.at(layer)});
  }
  save_bundle(dir, tensors, extra);
}

inline KnowledgeExtractor load_ke(const fs::path& dir) {
  Bundle bundle = load_bundle(dir);
  if (bundle.extra.value("kind", "") != "knowledge-extractor")
    fail("load_ke: " + dir.string() + " is not a knowledge extractor");
  KnowledgeExtractor ke;
  ke.adapter = detail::adapter_from_bundle(bundle, bundle.extra);
  for (const auto& layer : ke.adapter.layers) {
    ke.w_km[layer] = bundle.at(layer + ".w_km");
    ke.w_ke[layer] = bundle.at(layer + ".w_ke");
  }
  return ke;
}

}  // namespace km
