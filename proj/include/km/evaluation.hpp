#pragma once

// Evaluation harness: multi-reference Rouge-L, 4-way multiple-choice accuracy
// with length-normalized continuation scoring, token-cost accounting, and the
// ablation drivers (loss terms, temperature, synthetic-data volume). Scoring
// is pure and fans out over questions; reports are assembled by question id,
// so results are bit-identical at any parallelism.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "km/adapters.hpp"
#include "km/model.hpp"
#include "km/retrieval.hpp"
#include "km/synthdata.hpp"
#include "km/training.hpp"

namespace km {

// ---------------------------------------------------------------------------
// Rouge-L

namespace detail {

inline std::vector<std::string> rouge_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!word.empty()) out.push_back(std::move(word)), word.clear();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

inline size_t lcs_length(const std::vector<std::string>& a,
                         const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), curr(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j)
      curr[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], curr[j - 1]);
    std::swap(prev, curr);
  }
  return prev[b.size()];
}

}  // namespace detail

// Max over references of the LCS F1 (lowercase whitespace tokens, no
// stemming, beta = 1).
inline double rouge_l(const std::string& hypothesis,
                      const std::vector<std::string>& references) {
  require(!references.empty(), "rouge_l: at least one reference required");
  const std::vector<std::string> hyp = detail::rouge_tokens(hypothesis);
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const std::string& reference : references) {
    const std::vector<std::string> ref = detail::rouge_tokens(reference);
    if (ref.empty()) continue;
    const double lcs = static_cast<double>(detail::lcs_length(hyp, ref));
    const double p = lcs / static_cast<double>(hyp.size());
    const double r = lcs / static_cast<double>(ref.size());
    if (p + r > 0.0) best = std::max(best, 2.0 * p * r / (p + r));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Settings

enum class Book { kClosed, kOpen };
enum class StackKind { kBase, kKm, kKmKe, kRag, kRagKm, kRagKe, kRagKmKe };

inline std::string to_string(Book b) { return b == Book::kClosed ? "closed" : "open"; }

inline std::string to_string(StackKind s) {
  switch (s) {
    case StackKind::kBase: return "base";
    case StackKind::kKm: return "km";
    case StackKind::kKmKe: return "km+ke";
    case StackKind::kRag: return "rag";
    case StackKind::kRagKm: return "rag+km";
    case StackKind::kRagKe: return "rag+ke";
    case StackKind::kRagKmKe: return "rag+km+ke";
  }
  fail("unreachable stack kind");
}

inline Book book_from_string(const std::string& s) {
  if (s == "closed") return Book::kClosed;
  if (s == "open") return Book::kOpen;
  fail("unknown book setting '" + s + "' (expected closed or open)");
}

inline StackKind stack_from_string(const std::string& s) {
  for (StackKind k : {StackKind::kBase, StackKind::kKm, StackKind::kKmKe,
                      StackKind::kRag, StackKind::kRagKm, StackKind::kRagKe,
                      StackKind::kRagKmKe})
    if (to_string(k) == s) return k;
  fail("unknown stack '" + s +
       "' (expected base, km, km+ke, rag, rag+km, rag+ke, or rag+km+ke)");
}

inline bool uses_rag(StackKind s) {
  return s == StackKind::kRag || s == StackKind::kRagKm || s == StackKind::kRagKe ||
         s == StackKind::kRagKmKe;
}
inline bool uses_km(StackKind s) {
  return s == StackKind::kKm || s == StackKind::kKmKe || s == StackKind::kRagKm ||
         s == StackKind::kRagKmKe;
}
inline bool uses_ke(StackKind s) {
  return s == StackKind::kKmKe || s == StackKind::kRagKe || s == StackKind::kRagKmKe;
}

struct EvalSetting {
  Book book = Book::kClosed;
  StackKind stack = StackKind::kBase;
  int64_t rag_k = kDefaultTopK;

  void validate() const {
    if (book == Book::kClosed && uses_rag(stack))
      fail("eval setting: closed book forbids rag stacks (got '" +
           km::to_string(stack) + "')");
    if (uses_rag(stack))
      require(rag_k >= 1, "eval setting: rag_k must be at least 1");
  }

  std::string label() const {
    std::string out = km::to_string(book) + "/" + km::to_string(stack);
    if (uses_rag(stack)) out += "@k=" + std::to_string(rag_k);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Continuation scoring and multiple choice

// Mean log-probability per continuation token given [BOS ++ context].
// Double-precision log-sum-exp keeps option ties exact and order-stable.
inline double score_continuation(const std::vector<int>& context,
                                 const std::vector<int>& continuation,
                                 const Model& model, const AdapterStack& stack = {}) {
  require(!continuation.empty(), "score_continuation: empty continuation");
  std::vector<int> input;
  input.reserve(1 + context.size() + continuation.size());
  input.push_back(model.tokenizer.bos_id());
  input.insert(input.end(), context.begin(), context.end());
  input.insert(input.end(), continuation.begin(), continuation.end());

  NoGradGuard ng;
  ForwardOutput out = model.forward(input, stack);
  const int64_t vocab = out.logits.shape()[1];
  double total = 0.0;
  const size_t first = 1 + context.size();  // index of the first continuation token
  for (size_t pos = first; pos < input.size(); ++pos) {
    const real* row = out.logits.data().data() + (pos - 1) * vocab;
    double max_logit = row[0];
    for (int64_t v = 1; v < vocab; ++v) max_logit = std::max<double>(max_logit, row[v]);
    double sum = 0.0;
    for (int64_t v = 0; v < vocab; ++v)
      sum += std::exp(static_cast<double>(row[v]) - max_logit);
    total += static_cast<double>(row[input[pos]]) - max_logit - std::log(sum);
  }
  return total / static_cast<double>(continuation.size());
}

struct McItem {
  std::vector<int> context;                // tokens placed before each option
  std::vector<std::vector<int>> options;   // exactly 4
  int gold = 0;
  const AdapterStack* stack = nullptr;     // null → bare model
};

// Argmax of length-normalized option scores; exact ties go to the lowest
// option index.
inline int predict_mc(const McItem& item, const Model& model) {
  require(item.options.size() == 4, "mc: exactly 4 options required");
  static const AdapterStack kNoStack;
  const AdapterStack& stack = item.stack ? *item.stack : kNoStack;
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) {
    const double s = score_continuation(item.context, item.options[static_cast<size_t>(i)],
                                        model, stack);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

inline double mc_accuracy(const std::vector<McItem>& items, const Model& model,
                          std::vector<int>* predictions = nullptr,
                          int parallelism = 1) {
  require(!items.empty(), "mc_accuracy: no questions");
  require(parallelism >= 1, "mc_accuracy: parallelism must be at least 1");
  std::vector<int> preds(items.size(), -1);
  std::atomic<size_t> cursor{0};
  auto worker = [&] {
    while (true) {
      const size_t i = cursor.fetch_add(1);
      if (i >= items.size()) return;
      preds[i] = predict_mc(items[i], model);
    }
  };
  if (parallelism == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const size_t n = std::min<size_t>(static_cast<size_t>(parallelism), items.size());
    for (size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  size_t correct = 0;
  for (size_t i = 0; i < items.size(); ++i)
    if (preds[i] == items[i].gold) ++correct;
  if (predictions) *predictions = std::move(preds);
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------
// Reports

struct QuestionRecord {
  int64_t id = 0;  // position in the evaluated question list
  std::string doc_id;
  int predicted = 0;
  int gold = 0;
  bool correct = false;
  int64_t context_tokens = 0;
  std::vector<int64_t> passage_ids;  // rag stacks only
};

struct EvalReport {
  std::string method;
  std::string metric;  // "accuracy" | "rouge_l"
  double value = 0.0;
  double token_cost = 0.0;  // mean context tokens per answer
  std::vector<QuestionRecord> records;
};

inline nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json j;
  j["method"] = report.method;
  j["metric"] = report.metric;
  j["value"] = report.value;
  j["token_cost"] = report.token_cost;
  j["records"] = nlohmann::json::array();
  for (const QuestionRecord& r : report.records) {
    nlohmann::json q;
    q["id"] = r.id;
    q["doc_id"] = r.doc_id;
    q["predicted"] = r.predicted;
    q["gold"] = r.gold;
    q["correct"] = r.correct;
    q["context_tokens"] = r.context_tokens;
    if (!r.passage_ids.empty()) q["passages"] = r.passage_ids;
    j["records"].push_back(q);
  }
  return j;
}

inline void save_report(const fs::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("save_report: cannot write " + path.string());
  out << to_json(report).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Corpus splits (document level; the extractor never trains on dev/test docs)

struct CorpusSplit {
  std::vector<size_t> train, dev, test;
};

inline CorpusSplit split_corpus(size_t n_docs, size_t n_dev, size_t n_test,
                                uint64_t seed) {
  require(n_dev + n_test < n_docs,
          "split_corpus: dev+test must leave at least one training document");
  std::vector<size_t> order(n_docs);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng(seed).shuffle(order);
  CorpusSplit split;
  split.dev.assign(order.begin(), order.begin() + static_cast<int64_t>(n_dev));
  split.test.assign(order.begin() + static_cast<int64_t>(n_dev),
                    order.begin() + static_cast<int64_t>(n_dev + n_test));
  split.train.assign(order.begin() + static_cast<int64_t>(n_dev + n_test), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.dev.begin(), split.dev.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// ---------------------------------------------------------------------------
// Full evaluation

inline EvalReport run_eval(const FactCorpus& corpus,
                           const std::vector<size_t>& doc_indices,
                           const EvalSetting& setting,
                           const std::unordered_map<std::string, KnowledgeModule>& kms,
                           const KnowledgeExtractor* ke, const PassageIndex* index,
                           const Model& model, const Tokenizer& tok,
                           int parallelism = 1) {
  setting.validate();
  require(!doc_indices.empty(), "eval: no documents selected");

  // Reject missing pieces before any model call.
  for (size_t d : doc_indices) {
    require(d < corpus.documents.size(), "eval: document index out of range");
    const std::string& doc_id = corpus.documents[d].doc_id;
    if (uses_km(setting.stack) && kms.find(doc_id) == kms.end())
      fail("eval: stack '" + to_string(setting.stack) +
           "' requires a knowledge module for doc '" + doc_id + "'");
    if (uses_rag(setting.stack) && (!index || !index->has(doc_id)))
      fail("eval: stack '" + to_string(setting.stack) +
           "' requires a passage index for doc '" + doc_id + "'");
  }
  if (uses_ke(setting.stack) && !ke)
    fail("eval: stack '" + to_string(setting.stack) + "' requires an extractor");

  // One adapter stack per document, shared across its questions.
  std::unordered_map<std::string, AdapterStack> stacks;
  for (size_t d : doc_indices) {
    const std::string& doc_id = corpus.documents[d].doc_id;
    if (stacks.count(doc_id)) continue;
    switch (setting.stack) {
      case StackKind::kBase:
      case StackKind::kRag:
        break;
      case StackKind::kKm:
      case StackKind::kRagKm:
        stacks[doc_id] = single_stack(kms.at(doc_id).adapter);
        break;
      case StackKind::kKmKe:
      case StackKind::kRagKmKe:
        stacks[doc_id] = combine(kms.at(doc_id), *ke);
        break;
      case StackKind::kRagKe:
        stacks[doc_id] = ke_stack(*ke);
        break;
    }
  }

  std::vector<McItem> items;
  std::vector<QuestionRecord> records;
  for (size_t d : doc_indices) {
    const std::string& doc_id = corpus.documents[d].doc_id;
    for (const GoldQuestion& q : corpus.gold[d]) {
      McItem item;
      const std::vector<int> question = tok.encode(q.question);
      QuestionRecord rec;
      rec.id = static_cast<int64_t>(records.size());
      rec.doc_id = doc_id;
      rec.gold = q.correct;
      if (uses_rag(setting.stack)) {
        for (const Passage& p :
             top_k(question, *index, doc_id, setting.rag_k, model)) {
          item.context.insert(item.context.end(), p.tokens.begin(), p.tokens.end());
          item.context.push_back(tok.eos_id());
          rec.passage_ids.push_back(p.index);
        }
      }
      item.context.insert(item.context.end(), question.begin(), question.end());
      rec.context_tokens = static_cast<int64_t>(item.context.size());

      // Keep the question end if a long rag block would overflow the window;
      // the longest option still has to fit after the context.
      size_t longest = 0;
      for (const std::string& opt : q.options)
        longest = std::max(longest, tok.encode(opt).size());
      const size_t budget =
          static_cast<size_t>(model.config.max_seq_len) - 1 - longest;
      if (item.context.size() > budget)
        item.context.erase(item.context.begin(),
                           item.context.end() - static_cast<int64_t>(budget));

      for (const std::string& opt : q.options) item.options.push_back(tok.encode(opt));
      item.gold = q.correct;
      auto it = stacks.find(doc_id);
      item.stack = it == stacks.end() ? nullptr : &it->second;
      items.push_back(std::move(item));
      records.push_back(std::move(rec));
    }
  }

  std::vector<int> predictions;
  EvalReport report;
  report.method = setting.label();
  report.metric = "accuracy";
  report.value = mc_accuracy(items, model, &predictions, parallelism);
  double cost = 0.0;
  for (size_t i = 0; i < records.size(); ++i) {
    records[i].predicted = predictions[i];
    records[i].correct = predictions[i] == records[i].gold;
    cost += static_cast<double>(records[i].context_tokens);
  }
  report.token_cost = cost / static_cast<double>(records.size());
  report.records = std::move(records);
  return report;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationCell {
  std::string label;
  TrainConfig train;
  int64_t max_summaries = -1;  // cap on summary samples per doc; -1 → all
};

inline std::vector<AblationCell> tau_cells(const TrainConfig& base,
                                           const std::vector<double>& taus) {
  std::vector<AblationCell> cells;
  for (double tau : taus) {
    AblationCell cell;
    std::ostringstream label;
    label << "tau=" << tau;
    cell.label = label.str();
    cell.train = base;
    cell.train.dcd.tau = tau;
    cells.push_back(std::move(cell));
  }
  return cells;
}

inline std::vector<AblationCell> loss_cells(const TrainConfig& base) {
  std::vector<AblationCell> cells(3);
  cells[0].label = "kl+l1";
  cells[0].train = base;
  cells[0].train.dcd.use_kl = true;
  cells[0].train.dcd.use_hidden = true;
  cells[1].label = "kl_only";
  cells[1].train = base;
  cells[1].train.dcd.use_kl = true;
  cells[1].train.dcd.use_hidden = false;
  cells[2].label = "l1_only";
  cells[2].train = base;
  cells[2].train.dcd.use_kl = false;
  cells[2].train.dcd.use_hidden = true;
  return cells;
}

inline std::vector<AblationCell> data_cells(const TrainConfig& base,
                                            const std::vector<int64_t>& counts) {
  std::vector<AblationCell> cells;
  for (int64_t count : counts) {
    AblationCell cell;
    cell.label = "summaries=" + std::to_string(count);
    cell.train = base;
    cell.max_summaries = count;
    cells.push_back(std::move(cell));
  }
  return cells;
}

// Trains per-document KMs for every cell (same seeds across cells, so the
// varied factor is the only difference) and evaluates each resulting set.
inline std::vector<EvalReport> ablation_suite(
    const FactCorpus& corpus,
    const std::unordered_map<std::string, std::vector<SyntheticSample>>& samples,
    const std::vector<AblationCell>& cells, const EvalSetting& setting,
    const Model& model, const Tokenizer& tok, int parallelism = 1) {
  require(!cells.empty(), "ablation_suite: empty grid");
  std::vector<size_t> all_docs(corpus.documents.size());
  std::iota(all_docs.begin(), all_docs.end(), size_t{0});

  std::vector<EvalReport> reports;
  for (const AblationCell& cell : cells) {
    std::unordered_map<std::string, std::vector<SyntheticSample>> capped;
    for (const auto& [doc_id, list] : samples) {
      std::vector<SyntheticSample>& kept = capped[doc_id];
      int64_t summaries = 0;
      for (const SyntheticSample& s : list) {
        if (s.kind == SampleKind::kSummary) {
          if (cell.max_summaries >= 0 && summaries >= cell.max_summaries) continue;
          ++summaries;
        }
        kept.push_back(s);
      }
    }
    ParallelTrainOutcome outcome =
        parallel_train_kms(corpus.documents, capped, cell.train, model, parallelism);
    if (!outcome.failures.empty())
      fail("ablation_suite: cell '" + cell.label + "' failed on doc '" +
           outcome.failures[0].first + "': " + outcome.failures[0].second);
    std::unordered_map<std::string, KnowledgeModule> kms;
    for (KnowledgeModule& m : outcome.kms) kms.emplace(m.doc_id, std::move(m));
    EvalReport report = run_eval(corpus, all_docs, setting, kms, nullptr, nullptr,
                                 model, tok, parallelism);
    report.method = cell.label;
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace km
