#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "km/adapters.hpp"
#include "km/registry.hpp"

using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using km::AdapterStack;
using km::KnowledgeExtractor;
using km::KnowledgeModule;
using km::LoraAdapter;
using km::Model;
using km::ModelConfig;
using km::real;
using km::Registry;
using km::Rng;
using km::Tensor;
using km::Tokenizer;

namespace {

ModelConfig small_config(int64_t vocab, int64_t d_model, int64_t n_layers,
                         int64_t n_heads, int64_t d_ff, int64_t max_seq) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.d_ff = d_ff;
  cfg.max_seq_len = max_seq;
  return cfg;
}

std::filesystem::path fresh_dir(const std::string& leaf) {
  auto dir = std::filesystem::temp_directory_path() / leaf;
  std::filesystem::remove_all(dir);
  return dir;
}

Model toy_model(const ModelConfig& cfg, uint64_t seed) {
  return Model(cfg, Tokenizer::from_corpus({"a b c d e"}), seed);
}

// B starts at zero by design; tests that need a visible delta fill it in.
void randomize_b(LoraAdapter& ad, uint64_t seed) {
  Rng rng(seed);
  for (const auto& layer : ad.layers)
    for (real& v : ad.b(layer).data()) v = static_cast<real>(rng.next_gaussian() * 0.1);
}

Tensor deep_copy(const Tensor& t) { return Tensor::from(t.shape(), t.data()); }

LoraAdapter one_layer_adapter(double alpha, const Tensor& a, const Tensor& b) {
  LoraAdapter ad;
  ad.rank = 1;
  ad.alpha = alpha;
  ad.layers = {"layers.0.attn.q"};
  ad.a_by_layer["layers.0.attn.q"] = a;
  ad.b_by_layer["layers.0.attn.q"] = b;
  return ad;
}

KnowledgeModule make_km(const std::string& doc_id, const ModelConfig& cfg,
                        uint64_t seed) {
  KnowledgeModule km;
  km.doc_id = doc_id;
  km.adapter = km::init_lora(cfg, 2, 4.0, seed);
  randomize_b(km.adapter, seed * 31 + 1);
  km.metadata = {{"loss", "ddcd"}, {"steps", 300}, {"seed", seed}};
  return km;
}

}  // namespace

TEST_CASE("fresh adapter is an exact identity on logits and hidden states") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  Model m = toy_model(cfg, 5);
  LoraAdapter ad = km::init_lora(cfg, 2, 4.0, 9);

  REQUIRE(ad.layers == km::target_layers(cfg));
  for (const auto& layer : ad.layers) {
    for (real v : ad.b(layer).data()) REQUIRE(v == 0);
    Tensor delta = km::stack_delta(km::single_stack(ad), layer,
                                   km::target_dims(cfg, layer).first,
                                   km::target_dims(cfg, layer).second);
    for (real v : delta.data()) REQUIRE(v == 0);
  }

  const std::vector<int> tokens = {1, 4, 5, 6, 7};
  auto base = m.forward(tokens);
  auto adapted = m.forward(tokens, km::single_stack(ad));
  REQUIRE(adapted.logits.data() == base.logits.data());
  REQUIRE(adapted.hidden_states.size() == base.hidden_states.size());
  for (size_t i = 0; i < base.hidden_states.size(); ++i)
    REQUIRE(adapted.hidden_states[i].data() == base.hidden_states[i].data());

  // a freshly combined module + extractor is equally inert
  KnowledgeModule fresh{"doc", km::init_lora(cfg, 2, 4.0, 1), {}};
  auto combined = m.forward(tokens, km::combine(fresh, km::init_ke(cfg, 2, 4.0, 2)));
  REQUIRE(combined.logits.data() == base.logits.data());
}

TEST_CASE("attaching and detaching an adapter leaves the base model bit-identical") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  Model m = toy_model(cfg, 5);
  LoraAdapter ad = km::init_lora(cfg, 2, 4.0, 9);
  randomize_b(ad, 77);

  const std::vector<int> tokens = {1, 4, 5, 6};
  auto base = m.forward(tokens);
  auto adapted = m.forward(tokens, km::single_stack(ad));
  REQUIRE(adapted.logits.data() != base.logits.data());

  auto adapted_again = m.forward(tokens, km::single_stack(ad));
  REQUIRE(adapted_again.logits.data() == adapted.logits.data());

  auto detached = m.forward(tokens);
  REQUIRE(detached.logits.data() == base.logits.data());
  for (size_t i = 0; i < base.hidden_states.size(); ++i)
    REQUIRE(detached.hidden_states[i].data() == base.hidden_states[i].data());
}

TEST_CASE("adapter initialization is seed-deterministic") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  LoraAdapter x = km::init_lora(cfg, 2, 4.0, 7);
  LoraAdapter y = km::init_lora(cfg, 2, 4.0, 7);
  LoraAdapter z = km::init_lora(cfg, 2, 4.0, 8);

  bool any_diff = false;
  for (const auto& layer : x.layers) {
    REQUIRE(x.a(layer).data() == y.a(layer).data());
    if (x.a(layer).data() != z.a(layer).data()) any_diff = true;
  }
  REQUIRE(any_diff);
}

TEST_CASE("init_lora rejects invalid ranks") {
  ModelConfig cfg = small_config(16, 4, 1, 1, 8, 16);
  REQUIRE_THROWS_WITH(km::init_lora(cfg, 0, 4.0, 1), ContainsSubstring("at least 1"));
  // min(d_out, d_in) over attn targets is d_model = 4
  REQUIRE_THROWS_WITH(km::init_lora(cfg, 8, 4.0, 1),
                      ContainsSubstring("rank 8") && ContainsSubstring("layers.0"));
}

TEST_CASE("combined delta matches explicit matrix arithmetic on one layer") {
  // alpha 4, rank 1 => scale 4
  // KM: A=[1,2]^T, B=[3,5]^T  => delta_M = 4*A*B^T = [[12,20],[24,40]]
  // KE: A=[-1,.5]^T, B=[2,-4]^T => delta_E = [[-8,16],[4,-8]]
  // weights (0.5, 2): 0.5*delta_M + 2*delta_E = [[-10,42],[20,4]]
  KnowledgeModule km_mod;
  km_mod.doc_id = "doc";
  km_mod.adapter = one_layer_adapter(4.0, Tensor::from({2, 1}, {1, 2}),
                                     Tensor::from({2, 1}, {3, 5}));
  KnowledgeExtractor ke;
  ke.adapter = one_layer_adapter(4.0, Tensor::from({2, 1}, {-1, 0.5}),
                                 Tensor::from({2, 1}, {2, -4}));
  ke.w_km["layers.0.attn.q"] = Tensor::scalar(0.5);
  ke.w_ke["layers.0.attn.q"] = Tensor::scalar(2.0);

  Tensor delta = km::stack_delta(km::combine(km_mod, ke), "layers.0.attn.q", 2, 2);
  REQUIRE(delta.data() == std::vector<real>{-10, 42, 20, 4});
}

TEST_CASE("combination weights act linearly on the resolved deltas") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  KnowledgeModule km_mod = make_km("doc", cfg, 3);
  KnowledgeExtractor ke = km::init_ke(cfg, 2, 4.0, 4);
  randomize_b(ke.adapter, 99);

  auto deltas = [&](const AdapterStack& stack, const std::string& layer) {
    auto [d_out, d_in] = km::target_dims(cfg, layer);
    return km::stack_delta(stack, layer, d_out, d_in).data();
  };

  for (const auto& layer : ke.adapter.layers) {
    ke.w_km[layer].data()[0] = 1;
    ke.w_ke[layer].data()[0] = 0;
  }
  for (const auto& layer : ke.adapter.layers)
    REQUIRE(deltas(km::combine(km_mod, ke), layer) ==
            deltas(km::single_stack(km_mod.adapter), layer));

  for (const auto& layer : ke.adapter.layers) {
    ke.w_km[layer].data()[0] = 0;
    ke.w_ke[layer].data()[0] = 1;
  }
  for (const auto& layer : ke.adapter.layers)
    REQUIRE(deltas(km::combine(km_mod, ke), layer) ==
            deltas(km::single_stack(ke.adapter), layer));

  for (const auto& layer : ke.adapter.layers) ke.w_ke[layer].data()[0] = 0;
  for (const auto& layer : ke.adapter.layers)
    for (real v : deltas(km::combine(km_mod, ke), layer)) REQUIRE(v == 0);
}

TEST_CASE("doubling alpha while halving A leaves the delta unchanged") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  LoraAdapter ad = km::init_lora(cfg, 2, 4.0, 11);
  randomize_b(ad, 12);

  LoraAdapter rescaled;
  rescaled.rank = ad.rank;
  rescaled.alpha = ad.alpha * 2;
  rescaled.layers = ad.layers;
  for (const auto& layer : ad.layers) {
    Tensor half = deep_copy(ad.a(layer));
    for (real& v : half.data()) v /= 2;
    rescaled.a_by_layer[layer] = half;
    rescaled.b_by_layer[layer] = ad.b(layer);
  }

  for (const auto& layer : ad.layers) {
    auto [d_out, d_in] = km::target_dims(cfg, layer);
    Tensor lhs = km::stack_delta(km::single_stack(ad), layer, d_out, d_in);
    Tensor rhs = km::stack_delta(km::single_stack(rescaled), layer, d_out, d_in);
    for (int64_t i = 0; i < lhs.numel(); ++i) {
      double a = lhs.data()[static_cast<size_t>(i)];
      double b = rhs.data()[static_cast<size_t>(i)];
      REQUIRE_THAT(a, WithinAbs(b, 1e-6 * std::max(1.0, std::abs(b))));
    }
  }
}

TEST_CASE("gradients flow through the combined stack to the extractor only") {
  ModelConfig cfg = small_config(16, 8, 1, 2, 16, 16);
  Model m = toy_model(cfg, 5);
  m.set_requires_grad(false);
  KnowledgeModule km_mod = make_km("doc", cfg, 3);
  KnowledgeExtractor ke = km::init_ke(cfg, 2, 4.0, 4);
  randomize_b(ke.adapter, 99);
  km_mod.adapter.set_requires_grad(false);
  ke.set_requires_grad(true);

  const std::vector<int> tokens = {1, 4, 5, 6};
  auto out = m.forward(tokens, km::combine(km_mod, ke));
  Tensor loss = km::cross_entropy(km::slice_rows(out.logits, 0, 3), {4, 5, 6});
  km::backward(loss);

  for (const auto& layer : ke.adapter.layers) {
    REQUIRE(ke.adapter.a(layer).has_grad());
    REQUIRE(ke.adapter.b(layer).has_grad());
    REQUIRE(ke.w_km.at(layer).has_grad());
    REQUIRE(ke.w_ke.at(layer).has_grad());
    REQUIRE_FALSE(km_mod.adapter.a(layer).has_grad());
    REQUIRE_FALSE(km_mod.adapter.b(layer).has_grad());
  }
  // the gates multiply non-zero deltas, so their gradients should be live
  bool any_gate_grad = false;
  for (const auto& layer : ke.adapter.layers)
    if (ke.w_km.at(layer).grad()[0] != 0 || ke.w_ke.at(layer).grad()[0] != 0)
      any_gate_grad = true;
  REQUIRE(any_gate_grad);
}

TEST_CASE("combine rejects adapters with mismatched layers") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  KnowledgeModule km_mod = make_km("doc", cfg, 3);
  KnowledgeExtractor ke = km::init_ke(cfg, 2, 4.0, 4);
  ke.adapter.layers.pop_back();  // drop layers.1.mlp.down from the extractor

  REQUIRE_THROWS_WITH(km::combine(km_mod, ke),
                      ContainsSubstring("different layers") &&
                          ContainsSubstring("layers.1.mlp.down"));
}

TEST_CASE("knowledge modules round-trip through the registry bit-exactly") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  Model m = toy_model(cfg, 5);
  Registry reg(fresh_dir("km-registry-roundtrip"));

  KnowledgeModule km_mod = make_km("doc-001", cfg, 3);
  reg.put(km_mod, false, "desk");
  KnowledgeModule back = reg.get("doc-001");

  CHECK(back.doc_id == "doc-001");
  CHECK(back.adapter.rank == km_mod.adapter.rank);
  CHECK(back.adapter.alpha == km_mod.adapter.alpha);
  REQUIRE(back.adapter.layers == km_mod.adapter.layers);
  for (const auto& layer : km_mod.adapter.layers) {
    REQUIRE(back.adapter.a(layer).data() == km_mod.adapter.a(layer).data());
    REQUIRE(back.adapter.b(layer).data() == km_mod.adapter.b(layer).data());
  }
  CHECK(back.metadata.at("loss") == "ddcd");
  CHECK(back.metadata.at("steps") == 300);
  CHECK(back.metadata.at("owner") == "desk");
  CHECK(reg.inspect("doc-001").at("metadata").at("owner") == "desk");

  const std::vector<int> tokens = {1, 4, 5, 6};
  auto original = m.forward(tokens, km::single_stack(km_mod.adapter));
  auto loaded = m.forward(tokens, km::single_stack(back.adapter));
  REQUIRE(loaded.logits.data() == original.logits.data());
}

TEST_CASE("registry enforces unique doc ids unless overwrite is requested") {
  ModelConfig cfg = small_config(16, 8, 1, 2, 16, 16);
  Registry reg(fresh_dir("km-registry-unique"));

  KnowledgeModule first = make_km("doc", cfg, 3);
  reg.put(first);
  REQUIRE_THROWS_WITH(reg.put(make_km("doc", cfg, 4)),
                      ContainsSubstring("already exists"));

  KnowledgeModule second = make_km("doc", cfg, 4);
  reg.put(second, /*overwrite=*/true);
  KnowledgeModule back = reg.get("doc");
  const std::string layer = second.adapter.layers.front();
  REQUIRE(back.adapter.a(layer).data() == second.adapter.a(layer).data());
  REQUIRE(back.adapter.a(layer).data() != first.adapter.a(layer).data());
}

TEST_CASE("registry errors on unknown or malformed doc ids") {
  Registry reg(fresh_dir("km-registry-errors"));
  REQUIRE_THROWS_WITH(reg.get("nope"), ContainsSubstring("no knowledge module 'nope'"));
  REQUIRE_THROWS_WITH(reg.remove("nope"), ContainsSubstring("no knowledge module"));

  ModelConfig cfg = small_config(16, 8, 1, 2, 16, 16);
  KnowledgeModule km_mod = make_km("", cfg, 3);
  REQUIRE_THROWS_WITH(reg.put(km_mod), ContainsSubstring("must not be empty"));
  km_mod.doc_id = "../evil";
  REQUIRE_THROWS_WITH(reg.put(km_mod), ContainsSubstring("start with a letter"));
  km_mod.doc_id = "a/b";
  REQUIRE_THROWS_WITH(reg.put(km_mod), ContainsSubstring("unsupported character"));
}

TEST_CASE("deleting one module leaves the others untouched") {
  ModelConfig cfg = small_config(16, 8, 1, 2, 16, 16);
  Registry reg(fresh_dir("km-registry-delete"));

  KnowledgeModule a = make_km("doc-a", cfg, 1);
  KnowledgeModule b = make_km("doc-b", cfg, 2);
  KnowledgeModule c = make_km("doc-c", cfg, 3);
  for (const auto* km_mod : {&a, &b, &c}) reg.put(*km_mod);

  reg.remove("doc-b");
  REQUIRE(reg.list() == std::vector<std::string>{"doc-a", "doc-c"});
  REQUIRE_THROWS_WITH(reg.get("doc-b"), ContainsSubstring("no knowledge module"));
  for (const auto* km_mod : {&a, &c}) {
    KnowledgeModule back = reg.get(km_mod->doc_id);
    for (const auto& layer : km_mod->adapter.layers)
      REQUIRE(back.adapter.b(layer).data() == km_mod->adapter.b(layer).data());
  }
}

TEST_CASE("registry listing is sorted and skips stray entries") {
  ModelConfig cfg = small_config(16, 8, 1, 2, 16, 16);
  Registry reg(fresh_dir("km-registry-list"));
  for (const char* id : {"zeta", "alpha", "mid"}) reg.put(make_km(id, cfg, 1));

  std::ofstream(reg.root() / "stray.txt") << "not a module\n";
  std::filesystem::create_directories(reg.root() / ".tmp-stuff");
  std::filesystem::create_directories(reg.root() / "empty-dir");

  REQUIRE(reg.list() == std::vector<std::string>{"alpha", "mid", "zeta"});
}

TEST_CASE("extractors round-trip with their combination weights") {
  ModelConfig cfg = small_config(16, 8, 2, 2, 16, 16);
  KnowledgeExtractor ke = km::init_ke(cfg, 2, 4.0, 4);
  randomize_b(ke.adapter, 99);
  ke.w_km["layers.0.attn.q"].data()[0] = static_cast<real>(0.25);
  ke.w_ke["layers.1.mlp.up"].data()[0] = static_cast<real>(-1.5);

  auto dir = fresh_dir("km-ke-roundtrip");
  km::save_ke(dir, ke);
  KnowledgeExtractor back = km::load_ke(dir);

  REQUIRE(back.adapter.layers == ke.adapter.layers);
  for (const auto& layer : ke.adapter.layers) {
    REQUIRE(back.adapter.a(layer).data() == ke.adapter.a(layer).data());
    REQUIRE(back.adapter.b(layer).data() == ke.adapter.b(layer).data());
    REQUIRE(back.w_km.at(layer).data() == ke.w_km.at(layer).data());
    REQUIRE(back.w_ke.at(layer).data() == ke.w_ke.at(layer).data());
  }

  REQUIRE_THROWS_WITH(km::load_km(dir), ContainsSubstring("not a knowledge module"));
  auto km_dir = fresh_dir("km-km-kind");
  km::save_km(km_dir, make_km("doc", cfg, 3));
  REQUIRE_THROWS_WITH(km::load_ke(km_dir), ContainsSubstring("not a knowledge extractor"));
}
