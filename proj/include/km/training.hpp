#pragma once

// Optimization: Adam with a cosine schedule and global-norm clipping, the
// per-document KM training loop under each objective, multi-task KE training
// with frozen KMs, parallel KM jobs, and base-model pretraining. The base
// model is never touched by adapter training; checksums enforce that.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "km/adapters.hpp"
#include "km/distill.hpp"
#include "km/model.hpp"
#include "km/synthdata.hpp"

namespace km {

enum class Objective { kLm, kLmSynth, kDdcd, kSdcd, kPit };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::kLm: return "lm";
    case Objective::kLmSynth: return "lm-synth";
    case Objective::kDdcd: return "ddcd";
    case Objective::kSdcd: return "sdcd";
    case Objective::kPit: return "pit";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "lm") return Objective::kLm;
  if (s == "lm-synth") return Objective::kLmSynth;
  if (s == "ddcd") return Objective::kDdcd;
  if (s == "sdcd") return Objective::kSdcd;
  if (s == "pit") return Objective::kPit;
  fail("unknown objective '" + s + "' (expected lm, lm-synth, ddcd, sdcd, or pit)");
}

struct TrainConfig {
  double lr = 1e-3;
  int64_t steps = 300;     // scaled-down defaults; see paper_train_config()
  int64_t batch_size = 4;
  std::string schedule = "cosine";
  int64_t rank = 4;
  double alpha = 4.0;
  Objective objective = Objective::kDdcd;
  DcdConfig dcd;
  bool concat_samples = false;  // sdcd: pack samples up to the context budget
  int64_t chunk_len = 0;        // 0: half the model's max_seq_len
  uint64_t seed = 0;

  void validate() const {
    require(lr > 0, "train config: lr must be positive");
    require(steps >= 0, "train config: steps must be non-negative");
    require(batch_size >= 1, "train config: batch_size must be at least 1");
    require(schedule == "cosine",
            "train config: unknown schedule '" + schedule + "'");
    require(rank >= 1, "train config: rank must be at least 1");
  }
};

// The full-scale recipe: rank 16, alpha 16, lr 1e-3, 1500 steps, batch 8.
inline TrainConfig paper_train_config() {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.steps = 1500;
  cfg.batch_size = 8;
  cfg.rank = 16;
  cfg.alpha = 16.0;
  return cfg;
}

inline double cosine_lr(int64_t step, int64_t total_steps, double lr_max) {
  require(total_steps >= 1, "cosine_lr: total_steps must be positive");
  require(step >= 0 && step <= total_steps,
          "cosine_lr: step out of [0, total_steps]");
  const double pi = 3.14159265358979323846;
  return lr_max * 0.5 *
         (1.0 + std::cos(pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

inline constexpr double kClipNorm = 1.0;

// Adam over a fixed parameter list. Gradients are read from a GradSink (the
// per-item double accumulators), divided by the batch size, and clipped to a
// global L2 norm, so one optimizer step is a deterministic function of the
// batch's items in order.
class Adam {
 public:
  explicit Adam(const std::vector<Tensor>& params, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params) {
      const size_t n = static_cast<size_t>(p.numel());
      slots_.push_back({p, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
    }
  }

  void step(const GradSink& sink, double lr, double denom = 1.0,
            double max_norm = kClipNorm) {
    ++t_;
    std::vector<const std::vector<double>*> grads(slots_.size(), nullptr);
    double sq = 0.0;
    for (size_t i = 0; i < slots_.size(); ++i) {
      auto it = sink.entries().find(slots_[i].param.node().get());
      if (it == sink.entries().end()) continue;
      grads[i] = &it->second;
      for (double g : it->second) {
        const double gg = g / denom;
        sq += gg * gg;
      }
    }
    double scale = 1.0 / denom;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) scale *= max_norm / norm;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < slots_.size(); ++i) {
      Slot& s = slots_[i];
      std::vector<real>& p = s.param.data();
      for (size_t j = 0; j < p.size(); ++j) {
        const double g = grads[i] ? (*grads[i])[j] * scale : 0.0;
        s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g;
        s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
        const double update = lr * (s.m[j] / bc1) / (std::sqrt(s.v[j] / bc2) + eps_);
        p[j] = static_cast<real>(static_cast<double>(p[j]) - update);
      }
    }
  }

  int64_t step_count() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Immutability checksums.

namespace detail {

inline uint64_t fnv1a(uint64_t h, const void* p, size_t n) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t tensor_checksum(uint64_t h, const Tensor& t) {
  return fnv1a(h, t.data().data(), t.data().size() * sizeof(real));
}

}  // namespace detail

inline uint64_t parameters_checksum(const Model& model) {
  uint64_t h = 1469598103934665603ull;
  for (const NamedTensor& nt : model.named_parameters())
    h = detail::tensor_checksum(h, nt.tensor);
  return h;
}

inline uint64_t adapter_checksum(const LoraAdapter& adapter) {
  uint64_t h = 1469598103934665603ull;
  for (const std::string& layer : adapter.layers) {
    h = detail::tensor_checksum(h, adapter.a(layer));
    h = detail::tensor_checksum(h, adapter.b(layer));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Shared training loop.

namespace detail {

// One trainable item: either a next-token window or a distillation batch with
// its teacher outputs precomputed (the teacher never changes during a run).
struct TrainItem {
  bool distill = false;
  DistillationBatch batch;
  ForwardOutput teacher;
  std::vector<int> input;
  std::vector<int> targets;
  std::vector<bool> mask;
};

inline void append_lm_windows(const std::vector<int>& stream, int64_t max_seq_len,
                              int bos, std::vector<TrainItem>& items) {
  const int64_t w = max_seq_len - 1;
  const int64_t n = static_cast<int64_t>(stream.size());
  for (int64_t s = 0; s < n; s += w) {
    TrainItem item;
    const int64_t end = std::min(n, s + w);
    item.input.push_back(bos);
    item.input.insert(item.input.end(), stream.begin() + s, stream.begin() + end);
    item.targets.assign(stream.begin() + s, stream.begin() + end);
    item.mask.assign(item.targets.size(), true);
    items.push_back(std::move(item));
  }
}

// Mean loss over a seeded shuffle of items, Adam + cosine schedule, loss
// curve out. `item_loss` must build a fresh graph each call.
inline std::vector<double> adam_loop(const std::string& who, int64_t n_items,
                                     const TrainConfig& cfg,
                                     const std::vector<Tensor>& params,
                                     const std::function<Tensor(int64_t)>& item_loss,
                                     const std::function<std::string()>& diagnose) {
  require(n_items >= 1, who + ": nothing to train on");
  for (const Tensor& p : params) {
    Tensor t = p;
    t.set_requires_grad(true);
  }
  Adam opt(params);
  Rng order(Rng(cfg.seed).fork("order").next_u64());
  std::vector<int64_t> perm(static_cast<size_t>(n_items));
  std::iota(perm.begin(), perm.end(), 0);
  order.shuffle(perm);
  size_t cursor = 0;

  std::vector<double> curve;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(step, cfg.steps, cfg.lr);
    GradSink sink;
    double total = 0.0;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == perm.size()) {
        order.shuffle(perm);
        cursor = 0;
      }
      Tensor loss = item_loss(perm[cursor++]);
      total += loss.value();
      backward(loss, &sink);
    }
    total /= static_cast<double>(cfg.batch_size);
    if (!std::isfinite(total))
      fail(who + ": non-finite loss at step " + std::to_string(step) +
           (diagnose ? " (" + diagnose() + ")" : ""));
    opt.step(sink, lr, cfg.batch_size, kClipNorm);
    curve.push_back(total);
  }

  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
    t.set_requires_grad(false);
  }
  return curve;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// KM training.

struct KmTrainResult {
  KnowledgeModule km;
  std::vector<double> curve;
};

inline KmTrainResult train_km(const Document& doc,
                              const std::vector<SyntheticSample>& samples,
                              const TrainConfig& cfg, const Model& model) {
  cfg.validate();
  require(!doc.tokens.empty(), "train_km: document has no tokens");
  const uint64_t base_sum = parameters_checksum(model);
  const int bos = model.tokenizer.bos_id();
  const int64_t max_len = model.config.max_seq_len;
  const int64_t chunk_len = cfg.chunk_len > 0 ? cfg.chunk_len : max_len / 2;
  require(chunk_len + 1 <= max_len,
          "train_km: chunk length plus BOS exceeds the model's max_seq_len");

  KmTrainResult result;
  result.km.doc_id = doc.doc_id;
  result.km.adapter = init_lora(model.config, cfg.rank, cfg.alpha, cfg.seed);
  result.km.metadata = {{"objective", to_string(cfg.objective)},
                        {"steps", cfg.steps},
                        {"rank", cfg.rank},
                        {"alpha", cfg.alpha},
                        {"seed", cfg.seed}};
  if (cfg.steps == 0) return result;  // fresh adapter: exact identity

  // Build the item list for the objective.
  std::vector<detail::TrainItem> items;
  if (cfg.objective == Objective::kLm) {
    detail::append_lm_windows(doc.tokens, max_len, bos, items);
  } else if (cfg.objective == Objective::kLmSynth) {
    // Next-token prediction on the synthetic samples themselves: the same
    // student windows sdcd uses, but with the sample tokens as targets
    // instead of a context-conditioned teacher's distributions.
    require(!samples.empty(), "train_km: lm-synth requires synthetic samples");
    for (const SyntheticSample& s : samples) {
      detail::TrainItem item;
      const int64_t keep =
          std::min<int64_t>(max_len - 1, static_cast<int64_t>(s.tokens.size()));
      item.input.push_back(bos);
      item.input.insert(item.input.end(), s.tokens.begin(), s.tokens.begin() + keep);
      item.targets.assign(s.tokens.begin(), s.tokens.begin() + keep);
      item.mask.assign(item.targets.size(), true);
      items.push_back(std::move(item));
    }
  } else if (cfg.objective == Objective::kPit) {
    // Task data in front of the document, then plain next-token prediction.
    std::vector<int> stream;
    for (const SyntheticSample& s : samples)
      if (s.kind == SampleKind::kQa)
        stream.insert(stream.end(), s.tokens.begin(), s.tokens.end());
    require(!stream.empty(), "train_km: pit requires qa samples");
    stream.insert(stream.end(), doc.tokens.begin(), doc.tokens.end());
    detail::append_lm_windows(stream, max_len, bos, items);
  } else if (cfg.objective == Objective::kDdcd) {
    for (DistillationBatch& b : build_ddcd_batches(doc.tokens, chunk_len, bos, cfg.seed)) {
      detail::TrainItem item;
      item.distill = true;
      item.batch = std::move(b);
      items.push_back(std::move(item));
    }
  } else {  // sdcd
    require(!samples.empty(), "train_km: sdcd requires synthetic samples");
    std::vector<Chunk> chunks = chunk_document(doc, chunk_len);
    const int64_t budget = max_len - chunk_len - 1;  // teacher = bos ++ chunk ++ target
    require(budget >= 1, "train_km: chunk length leaves no room for targets");
    std::unordered_map<int64_t, std::vector<SyntheticSample>> by_chunk;
    for (const SyntheticSample& s : samples) {
      if (s.kind == SampleKind::kEntigraph) {
        // Where the sample came from is unknown, so the teacher sees the
        // whole document (capped at the context window).
        detail::TrainItem item;
        item.distill = true;
        int64_t room = max_len - 1 - static_cast<int64_t>(s.tokens.size());
        require(room >= 1, "train_km: entigraph sample from doc '" + s.doc_id +
                               "' does not fit the context window");
        int64_t ctx = std::min<int64_t>(room, static_cast<int64_t>(doc.tokens.size()));
        item.batch.teacher_tokens.push_back(bos);
        item.batch.teacher_tokens.insert(item.batch.teacher_tokens.end(),
                                         doc.tokens.begin(), doc.tokens.begin() + ctx);
        item.batch.teacher_tokens.insert(item.batch.teacher_tokens.end(),
                                         s.tokens.begin(), s.tokens.end());
        item.batch.student_tokens.push_back(bos);
        item.batch.student_tokens.insert(item.batch.student_tokens.end(),
                                         s.tokens.begin(), s.tokens.end());
        item.batch.teacher_target_offset = ctx + 1;
        item.batch.target_len = static_cast<int64_t>(s.tokens.size());
        validate_batch(item.batch);
        items.push_back(std::move(item));
      } else {
        by_chunk[s.chunk_index].push_back(s);
      }
    }
    int truncation_warnings = 0;
    for (const Chunk& c : chunks) {
      auto it = by_chunk.find(c.index);
      if (it == by_chunk.end()) continue;
      for (DistillationBatch& b :
           build_sdcd_batches(c, it->second, cfg.concat_samples, budget, bos,
                              &truncation_warnings)) {
        detail::TrainItem item;
        item.distill = true;
        item.batch = std::move(b);
        items.push_back(std::move(item));
      }
    }
  }

  // Teacher outputs are fixed for the whole run; compute them once.
  {
    NoGradGuard ng;
    for (detail::TrainItem& item : items)
      if (item.distill) item.teacher = model.forward(item.batch.teacher_tokens);
  }

  AdapterStack stack = single_stack(result.km.adapter);
  DcdTerms last;
  auto item_loss = [&](int64_t i) {
    detail::TrainItem& item = items[static_cast<size_t>(i)];
    if (item.distill) {
      ForwardOutput out = model.forward(item.batch.student_tokens, stack);
      last = dcd_loss(item.teacher, out, item.batch, cfg.dcd);
      return last.loss;
    }
    ForwardOutput out = model.forward(item.input, stack);
    const int64_t n = static_cast<int64_t>(item.targets.size());
    return lm_loss(slice_rows(out.logits, 0, n), item.targets, item.mask);
  };
  auto diagnose = [&]() {
    return "kl=" + std::to_string(last.kl) + ", hidden=" + std::to_string(last.hidden);
  };

  result.curve = detail::adam_loop(
      "train_km", static_cast<int64_t>(items.size()), cfg,
      result.km.adapter.parameters(), item_loss,
      cfg.objective == Objective::kDdcd || cfg.objective == Objective::kSdcd
          ? std::function<std::string()>(diagnose)
          : nullptr);

  if (parameters_checksum(model) != base_sum)
    fail("train_km: base model parameters changed during training");
  return result;
}

// ---------------------------------------------------------------------------
// KE training.

struct TaskExample {
  std::string question;
  std::string answer;
  std::string doc_id;
};

// Optional per-example context tokens (retrieved passages) placed between BOS
// and the question.
using ContextFn = std::function<std::vector<int>(const TaskExample&)>;

struct KeTrainResult {
  KnowledgeExtractor ke;
  std::vector<double> curve;
  int context_truncations = 0;
};

// Trains a KE (and its combination gates) by answer NLL across tasks, with
// every KM frozen. An empty `kms` map trains the KE alone (the fine-tuned
// RAG baseline); otherwise each example's doc_id must have a KM.
inline KeTrainResult train_ke(const std::vector<TaskExample>& dataset,
                              const std::unordered_map<std::string, KnowledgeModule>& kms,
                              const TrainConfig& cfg, const Model& model,
                              const ContextFn& context = nullptr) {
  cfg.validate();
  require(!dataset.empty(), "train_ke: empty dataset");
  for (const TaskExample& ex : dataset)
    require(kms.empty() || kms.count(ex.doc_id) > 0,
            "train_ke: no knowledge module for doc '" + ex.doc_id + "'");

  const uint64_t base_sum = parameters_checksum(model);
  std::unordered_map<std::string, uint64_t> km_sums;
  for (const auto& [doc_id, km] : kms) km_sums[doc_id] = adapter_checksum(km.adapter);

  KeTrainResult result;
  result.ke = init_ke(model.config, cfg.rank, cfg.alpha, cfg.seed);

  std::unordered_map<std::string, AdapterStack> stacks;
  for (const auto& [doc_id, km] : kms) stacks[doc_id] = combine(km, result.ke);
  AdapterStack alone = ke_stack(result.ke);

  const int bos = model.tokenizer.bos_id();
  const int64_t max_len = model.config.max_seq_len;
  struct KeItem {
    std::vector<int> input;
    std::vector<int> targets;
    std::vector<bool> mask;
    const AdapterStack* stack;
  };
  std::vector<KeItem> items;
  for (const TaskExample& ex : dataset) {
    std::vector<int> q = model.tokenizer.encode(ex.question);
    std::vector<int> a = model.tokenizer.encode(ex.answer);
    require(!a.empty(), "train_ke: answer '" + ex.answer + "' encodes to no tokens");
    std::vector<int> ctx = context ? context(ex) : std::vector<int>{};
    const int64_t room = max_len - 1 - static_cast<int64_t>(q.size() + a.size());
    require(room >= 0, "train_ke: question and answer for doc '" + ex.doc_id +
                           "' exceed max_seq_len");
    if (static_cast<int64_t>(ctx.size()) > room) {
      ctx.resize(static_cast<size_t>(room));
      ++result.context_truncations;
    }
    KeItem item;
    item.input.push_back(bos);
    item.input.insert(item.input.end(), ctx.begin(), ctx.end());
    item.input.insert(item.input.end(), q.begin(), q.end());
    item.input.insert(item.input.end(), a.begin(), a.end());
    item.targets.assign(item.input.begin() + 1, item.input.end());
    item.mask.assign(item.targets.size(), false);
    for (size_t i = item.targets.size() - a.size(); i < item.targets.size(); ++i)
      item.mask[i] = true;
    item.stack = kms.empty() ? &alone : &stacks.at(ex.doc_id);
    items.push_back(std::move(item));
  }

  auto item_loss = [&](int64_t i) {
    const KeItem& item = items[static_cast<size_t>(i)];
    ForwardOutput out = model.forward(item.input, *item.stack);
    const int64_t n = static_cast<int64_t>(item.targets.size());
    return lm_loss(slice_rows(out.logits, 0, n), item.targets, item.mask);
  };
  result.curve = detail::adam_loop("train_ke", static_cast<int64_t>(items.size()),
                                   cfg, result.ke.parameters(), item_loss, nullptr);

  if (parameters_checksum(model) != base_sum)
    fail("train_ke: base model parameters changed during training");
  for (const auto& [doc_id, km] : kms)
    if (adapter_checksum(km.adapter) != km_sums.at(doc_id))
      fail("train_ke: knowledge module '" + doc_id + "' changed during training");
  return result;
}

// ---------------------------------------------------------------------------
// Parallel KM jobs.

struct ParallelTrainOutcome {
  std::vector<KnowledgeModule> kms;             // successful jobs, input order
  std::vector<std::vector<double>> curves;      // parallel to kms
  std::vector<std::pair<std::string, std::string>> failures;  // doc_id, error
};

// Trains one KM per document. Jobs are independent: each derives its seed
// from (cfg.seed, doc_id), so the result is bit-identical at any parallelism.
// A failing job is reported without disturbing the others.
inline ParallelTrainOutcome parallel_train_kms(
    const std::vector<Document>& docs,
    const std::unordered_map<std::string, std::vector<SyntheticSample>>& samples,
    const TrainConfig& cfg, const Model& model, int64_t parallelism) {
  cfg.validate();
  require(parallelism >= 1, "parallel_train_kms: parallelism must be at least 1");

  std::vector<std::optional<KmTrainResult>> results(docs.size());
  std::vector<std::string> errors(docs.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (size_t i = next.fetch_add(1); i < docs.size(); i = next.fetch_add(1)) {
      try {
        TrainConfig job_cfg = cfg;
        job_cfg.seed = Rng(cfg.seed).fork(docs[i].doc_id).next_u64();
        auto it = samples.find(docs[i].doc_id);
        results[i] = train_km(
            docs[i], it == samples.end() ? std::vector<SyntheticSample>{} : it->second,
            job_cfg, model);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };

  const size_t n_threads =
      std::min<size_t>(static_cast<size_t>(parallelism), docs.size());
  std::vector<std::thread> pool;
  for (size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  ParallelTrainOutcome outcome;
  for (size_t i = 0; i < docs.size(); ++i) {
    if (results[i].has_value()) {
      outcome.kms.push_back(std::move(results[i]->km));
      outcome.curves.push_back(std::move(results[i]->curve));
    } else {
      outcome.failures.emplace_back(docs[i].doc_id, errors[i]);
    }
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Base-model pretraining (the `init-model` path).

inline std::vector<double> pretrain_lm(Model& model, const std::vector<Document>& docs,
                                       int64_t steps, int64_t batch_size, double lr,
                                       uint64_t seed) {
  std::vector<detail::TrainItem> items;
  for (const Document& doc : docs)
    detail::append_lm_windows(doc.tokens, model.config.max_seq_len,
                              model.tokenizer.bos_id(), items);

  std::vector<Tensor> params;
  for (auto& nt : model.named_parameters()) params.push_back(nt.tensor);

  TrainConfig cfg;
  cfg.lr = lr;
  cfg.steps = steps;
  cfg.batch_size = batch_size;
  cfg.seed = seed;
  auto item_loss = [&](int64_t i) {
    const detail::TrainItem& item = items[static_cast<size_t>(i)];
    ForwardOutput out = model.forward(item.input);
    const int64_t n = static_cast<int64_t>(item.targets.size());
    return lm_loss(slice_rows(out.logits, 0, n), item.targets, item.mask);
  };
  return detail::adam_loop("pretrain", static_cast<int64_t>(items.size()), cfg,
                           params, item_loss, nullptr);
}

inline void write_loss_curve(const fs::path& path, const std::vector<double>& curve) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_loss_curve: cannot open " + path.string());
  out << "step,loss\n";
  out.precision(17);
  for (size_t i = 0; i < curve.size(); ++i) out << i << "," << curve[i] << "\n";
  require(out.good(), "write_loss_curve: write to " + path.string() + " failed");
}

}  // namespace km
