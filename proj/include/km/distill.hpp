#pragma once

// Training objectives: plain next-token loss, the general deep context
// distillation loss (forward KL on logits plus normalized L1 on hidden
// states), and the batch builders that pair a context-bearing teacher input
// with a context-free student input over the same target span.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "km/common.hpp"
#include "km/model.hpp"
#include "km/random.hpp"
#include "km/synthdata.hpp"
#include "km/tensor.hpp"

namespace km {

struct DistillationBatch {
  std::vector<int> teacher_tokens;  // bos ++ context ++ target
  std::vector<int> student_tokens;  // BOS ++ target
  int64_t target_len = 0;
  int64_t teacher_target_offset = 0;
};

inline void validate_batch(const DistillationBatch& b) {
  require(b.target_len >= 1, "distillation batch: target span is empty");
  require(b.teacher_target_offset >= 1,
          "distillation batch: teacher has no position predicting the first target token");
  require(static_cast<int64_t>(b.student_tokens.size()) == b.target_len + 1,
          "distillation batch: student tokens must be BOS ++ target");
  require(b.teacher_target_offset + b.target_len ==
              static_cast<int64_t>(b.teacher_tokens.size()),
          "distillation batch: teacher tokens must end with the target span");
  for (int64_t i = 0; i < b.target_len; ++i)
    require(b.student_tokens[static_cast<size_t>(i + 1)] ==
                b.teacher_tokens[static_cast<size_t>(b.teacher_target_offset + i)],
            "distillation batch: target ids differ between teacher and student");
}

struct DcdConfig {
  bool use_kl = true;
  bool use_hidden = true;
  double tau = 1.0;
  std::vector<int> layers;  // hidden-loss layer indices; empty means all
};

struct DcdTerms {
  Tensor loss;  // scalar, differentiable w.r.t. the student graph
  double kl = 0;
  double hidden = 0;
  int zero_norm_warnings = 0;
};

// Mean NLL over the masked prediction positions; logits row i predicts
// targets[i].
inline Tensor lm_loss(const Tensor& logits, const std::vector<int>& targets,
                      const std::vector<bool>& mask) {
  require(static_cast<int64_t>(targets.size()) == logits.rows(),
          "lm_loss: need one target per logits row");
  require(targets.size() == mask.size(), "lm_loss: mask and targets must align");
  std::vector<int> positions;
  std::vector<int> picked;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      positions.push_back(static_cast<int>(i));
      picked.push_back(targets[i]);
    }
  require(!positions.empty(), "lm_loss: mask selects no positions");
  if (positions.size() == targets.size()) return cross_entropy(logits, targets);
  return cross_entropy(take_rows(logits, positions), picked);
}

inline DcdTerms dcd_loss(const ForwardOutput& teacher_out, const ForwardOutput& student_out,
                         const DistillationBatch& batch, const DcdConfig& cfg) {
  require(cfg.use_kl || cfg.use_hidden,
          "dcd_loss: at least one of the KL and hidden terms must be enabled");
  require(cfg.tau >= 0, "dcd_loss: temperature must be >= 0");
  validate_batch(batch);
  const int64_t len = batch.target_len;
  const int64_t off = batch.teacher_target_offset;
  require(teacher_out.logits.rows() == static_cast<int64_t>(batch.teacher_tokens.size()),
          "dcd_loss: teacher output does not match teacher_tokens");
  require(student_out.logits.rows() == static_cast<int64_t>(batch.student_tokens.size()),
          "dcd_loss: student output does not match student_tokens");

  DcdTerms terms;
  Tensor total;

  if (cfg.use_kl) {
    // Teacher distribution is a constant; only log softmax of the student
    // carries gradient. Computing the teacher's log-probs through the same
    // log_softmax kernel keeps self-distillation at exactly zero.
    Tensor t_logp;
    {
      NoGradGuard ng;
      Tensor rows = slice_rows(teacher_out.logits, off - 1, off - 1 + len);
      t_logp = log_softmax(cfg.tau == 1.0 ? rows : scale(rows, 1.0 / cfg.tau));
    }
    Tensor s_logp = log_softmax(slice_rows(student_out.logits, 0, len));
    Tensor kl_t;
    if (cfg.tau == 0.0) {
      // one-hot teacher: KL collapses to NLL at the teacher argmax
      std::vector<int> argmax(static_cast<size_t>(len));
      const auto& td = teacher_out.logits.data();
      const int64_t v = teacher_out.logits.cols();
      for (int64_t i = 0; i < len; ++i) {
        const real* row = td.data() + (off - 1 + i) * v;
        int best = 0;
        for (int64_t j = 1; j < v; ++j)
          if (row[j] > row[best]) best = static_cast<int>(j);
        argmax[static_cast<size_t>(i)] = best;
      }
      kl_t = scale(sum(take_per_row(s_logp, argmax)), -1.0 / static_cast<double>(len));
    } else {
      Tensor p = Tensor::zeros(t_logp.shape());
      for (size_t i = 0; i < p.data().size(); ++i)
        p.data()[i] = static_cast<real>(std::exp(static_cast<double>(t_logp.data()[i])));
      kl_t = scale(sum(mul(p, sub(t_logp, s_logp))), 1.0 / static_cast<double>(len));
    }
    terms.kl = kl_t.value();
    total = kl_t;
  }

  if (cfg.use_hidden) {
    std::vector<int> layers = cfg.layers;
    if (layers.empty())
      for (size_t l = 0; l < teacher_out.hidden_states.size(); ++l)
        layers.push_back(static_cast<int>(l));
    Tensor hidden_total;
    for (int l : layers) {
      require(l >= 0 && l < static_cast<int>(teacher_out.hidden_states.size()) &&
                  l < static_cast<int>(student_out.hidden_states.size()),
              "dcd_loss: hidden layer index " + std::to_string(l) + " out of range");
      Tensor h_t;
      {
        NoGradGuard ng;
        h_t = slice_rows(teacher_out.hidden_states[static_cast<size_t>(l)], off, off + len);
      }
      Tensor h_s = slice_rows(student_out.hidden_states[static_cast<size_t>(l)], 1, 1 + len);
      // per-position 1/Z with Z = L1 norm of the teacher state at that position
      Tensor inv_z = Tensor::zeros({len, 1});
      const int64_t d = h_t.cols();
      for (int64_t i = 0; i < len; ++i) {
        double z = 0;
        for (int64_t j = 0; j < d; ++j)
          z += std::fabs(static_cast<double>(h_t.data()[static_cast<size_t>(i * d + j)]));
        if (z < 1e-8) {
          z = 1e-8;
          ++terms.zero_norm_warnings;
        }
        inv_z.data()[static_cast<size_t>(i)] = static_cast<real>(1.0 / z);
      }
      Tensor term = scale(sum(mul(abs(sub(h_s, h_t)), inv_z)), 1.0 / static_cast<double>(len));
      hidden_total = hidden_total.defined() ? add(hidden_total, term) : term;
    }
    terms.hidden = hidden_total.value();
    total = total.defined() ? add(total, hidden_total) : hidden_total;
  }

  terms.loss = total;
  return terms;
}

// Document DCD: partition the document into non-overlapping chunks, visit
// them in a seeded order, and split each into contiguous halves — the first
// half is context the student must do without.
inline std::vector<DistillationBatch> build_ddcd_batches(const std::vector<int>& doc,
                                                         int64_t chunk_len, int bos_id,
                                                         uint64_t seed) {
  require(chunk_len >= 2, "build_ddcd_batches: chunk length must be at least 2");
  require(doc.size() >= 2, "build_ddcd_batches: document has fewer than 2 tokens");
  std::vector<int64_t> starts;
  for (int64_t s = 0; s + 2 <= static_cast<int64_t>(doc.size()); s += chunk_len)
    starts.push_back(s);
  Rng rng(seed);
  rng.shuffle(starts);

  std::vector<DistillationBatch> batches;
  for (int64_t s : starts) {
    const int64_t end = std::min<int64_t>(static_cast<int64_t>(doc.size()), s + chunk_len);
    const int64_t half = (end - s) / 2;
    DistillationBatch b;
    // The teacher gets the same sequence convention the model was trained
    // with (BOS first); without it, absolute-position models are queried
    // off-distribution and the distilled targets are noise.
    b.teacher_tokens.push_back(bos_id);
    b.teacher_tokens.insert(b.teacher_tokens.end(), doc.begin() + s, doc.begin() + end);
    b.student_tokens.push_back(bos_id);
    b.student_tokens.insert(b.student_tokens.end(), doc.begin() + s + half, doc.begin() + end);
    b.target_len = end - s - half;
    b.teacher_target_offset = half + 1;
    validate_batch(b);
    batches.push_back(std::move(b));
  }
  return batches;
}

// Synthetic DCD: the chunk is the teacher's context, a synthetic sample (or a
// greedily packed run of them) is the shared target.
inline std::vector<DistillationBatch> build_sdcd_batches(
    const Chunk& chunk, const std::vector<SyntheticSample>& samples, bool concat,
    int64_t context_budget, int bos_id, int* truncation_warnings = nullptr) {
  require(!chunk.tokens.empty(), "build_sdcd_batches: chunk has no tokens");
  require(context_budget >= 1, "build_sdcd_batches: context budget must be positive");
  for (const auto& s : samples) {
    require(s.doc_id == chunk.doc_id && s.chunk_index == chunk.index,
            "build_sdcd_batches: sample from (" + s.doc_id + ", chunk " +
                std::to_string(s.chunk_index) + ") does not belong to this chunk");
    require(!s.tokens.empty(), "build_sdcd_batches: sample has no tokens");
  }

  // each group becomes one batch; greedy first-fit packing when concatenating
  std::vector<std::vector<int>> groups;
  std::vector<int64_t> group_len;
  for (const auto& s : samples) {
    std::vector<int> tokens = s.tokens;
    if (static_cast<int64_t>(tokens.size()) > context_budget) {
      tokens.resize(static_cast<size_t>(context_budget));
      if (truncation_warnings) ++*truncation_warnings;
      groups.push_back(std::move(tokens));
      group_len.push_back(context_budget);
      continue;
    }
    if (concat) {
      bool placed = false;
      for (size_t g = 0; g < groups.size(); ++g) {
        if (group_len[g] + static_cast<int64_t>(tokens.size()) <= context_budget) {
          groups[g].insert(groups[g].end(), tokens.begin(), tokens.end());
          group_len[g] += static_cast<int64_t>(tokens.size());
          placed = true;
          break;
        }
      }
      if (placed) continue;
    }
    group_len.push_back(static_cast<int64_t>(tokens.size()));
    groups.push_back(std::move(tokens));
  }

  std::vector<DistillationBatch> batches;
  for (const auto& target : groups) {
    DistillationBatch b;
    // BOS first, as in every other forward pass (see build_ddcd_batches).
    b.teacher_tokens.push_back(bos_id);
    b.teacher_tokens.insert(b.teacher_tokens.end(), chunk.tokens.begin(), chunk.tokens.end());
    b.teacher_tokens.insert(b.teacher_tokens.end(), target.begin(), target.end());
    b.student_tokens.push_back(bos_id);
    b.student_tokens.insert(b.student_tokens.end(), target.begin(), target.end());
    b.target_len = static_cast<int64_t>(target.size());
    b.teacher_target_offset = static_cast<int64_t>(chunk.tokens.size()) + 1;
    validate_batch(b);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace km
