#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "catch_amalgamated.hpp"
#include "km/evaluation.hpp"

using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using km::AdapterStack;
using km::Book;
using km::EvalReport;
using km::EvalSetting;
using km::KnowledgeModule;
using km::McItem;
using km::Model;
using km::ModelConfig;
using km::real;
using km::StackKind;
using km::Tokenizer;
using km::TrainConfig;

namespace {

const std::vector<std::string> kEntities = {
    "alice", "bob",  "carol", "dave", "erin", "frank",
    "grace", "heidi", "ivan", "judy", "karl", "lena"};

struct Desk {
  km::FactCorpus corpus;
  Tokenizer tok;
  Model model;
};

Desk make_desk(uint64_t seed, int64_t n_docs = 2, int64_t facts = 6) {
  km::FactCorpus corpus = km::build_fact_corpus(n_docs, facts, kEntities, seed);
  Tokenizer tok = Tokenizer::from_corpus(km::corpus_texts(corpus));
  km::tokenize_documents(corpus, tok);
  ModelConfig cfg;
  cfg.vocab_size = tok.vocab_size();
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 32;
  return Desk{std::move(corpus), tok, Model(cfg, tok, 700 + seed)};
}

void zero_parameters(Model& model) {
  for (auto& nt : model.named_parameters())
    std::fill(nt.tensor.data().begin(), nt.tensor.data().end(), real(0));
}

// Memoized recursion, deliberately a different algorithm shape than the
// two-row iterative table inside rouge_l.
size_t lcs_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b,
                  size_t i, size_t j, std::map<std::pair<size_t, size_t>, size_t>& memo) {
  if (i == a.size() || j == b.size()) return 0;
  auto key = std::make_pair(i, j);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;
  size_t best;
  if (a[i] == b[j]) {
    best = 1 + lcs_oracle(a, b, i + 1, j + 1, memo);
  } else {
    best = std::max(lcs_oracle(a, b, i + 1, j, memo), lcs_oracle(a, b, i, j + 1, memo));
  }
  memo[key] = best;
  return best;
}

double rouge_oracle(const std::string& hyp, const std::vector<std::string>& refs) {
  auto h = km::detail::rouge_tokens(hyp);
  if (h.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref_text : refs) {
    auto r = km::detail::rouge_tokens(ref_text);
    if (r.empty()) continue;
    std::map<std::pair<size_t, size_t>, size_t> memo;
    const double lcs = static_cast<double>(lcs_oracle(h, r, 0, 0, memo));
    const double p = lcs / static_cast<double>(h.size());
    const double rr = lcs / static_cast<double>(r.size());
    if (p + rr > 0) best = std::max(best, 2.0 * p * rr / (p + rr));
  }
  return best;
}

std::string random_words(km::Rng& rng, size_t max_len) {
  const size_t len = rng.next_below(max_len + 1);
  std::string out;
  for (size_t i = 0; i < len; ++i) {
    if (i) out += ' ';
    out += 'w';
    out += static_cast<char>('0' + rng.next_below(5));
  }
  return out;
}

}  // namespace

TEST_CASE("rouge-l matches hand-derived values") {
  REQUIRE(km::rouge_l("the cat sat", {"the cat sat"}) == 1.0);
  REQUIRE_THAT(km::rouge_l("the cat the mat", {"the cat sat on the mat"}),
               WithinAbs(0.8, 1e-12));
  REQUIRE(km::rouge_l("alpha beta", {"gamma delta"}) == 0.0);
  REQUIRE(km::rouge_l("", {"the cat"}) == 0.0);
  REQUIRE(km::rouge_l("the cat", {""}) == 0.0);
  REQUIRE_THROWS_WITH(km::rouge_l("x", {}),
                      ContainsSubstring("at least one reference"));

  // Tokenization folds case and arbitrary whitespace.
  REQUIRE(km::rouge_l("The  CAT\tsat\n", {"the cat sat"}) == 1.0);

  // Multi-reference takes the best match and never loses by adding one.
  const double one = km::rouge_l("a b c", {"a x y"});
  const double two = km::rouge_l("a b c", {"a x y", "a b z"});
  REQUIRE(two >= one);
  REQUIRE_THAT(two, WithinAbs(2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0), 1e-12));
}

TEST_CASE("rouge-l agrees with a brute-force lcs oracle on 1000 random pairs") {
  km::Rng rng(4242);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string hyp = random_words(rng, 12);
    std::vector<std::string> refs;
    const size_t n_refs = 1 + rng.next_below(3);
    for (size_t r = 0; r < n_refs; ++r) refs.push_back(random_words(rng, 12));
    INFO("hyp='" << hyp << "' refs=" << refs.size());
    REQUIRE_THAT(km::rouge_l(hyp, refs), WithinAbs(rouge_oracle(hyp, refs), 1e-12));
  }
}

TEST_CASE("appending a reference never lowers rouge-l") {
  km::Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::string hyp = random_words(rng, 10);
    std::vector<std::string> refs = {random_words(rng, 10)};
    double prev = km::rouge_l(hyp, refs);
    for (int add = 0; add < 3; ++add) {
      refs.push_back(random_words(rng, 10));
      const double next = km::rouge_l(hyp, refs);
      REQUIRE(next >= prev);
      prev = next;
    }
  }
}

TEST_CASE("eval settings validate and label themselves") {
  EvalSetting closed_km{Book::kClosed, StackKind::kKmKe, 5};
  REQUIRE_NOTHROW(closed_km.validate());
  REQUIRE(closed_km.label() == "closed/km+ke");

  EvalSetting open_rag{Book::kOpen, StackKind::kRagKmKe, 2};
  REQUIRE_NOTHROW(open_rag.validate());
  REQUIRE(open_rag.label() == "open/rag+km+ke@k=2");

  EvalSetting bad{Book::kClosed, StackKind::kRag, 5};
  REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("closed book forbids rag"));
  EvalSetting zero_k{Book::kOpen, StackKind::kRagKe, 0};
  REQUIRE_THROWS_WITH(zero_k.validate(), ContainsSubstring("rag_k must be at least 1"));

  for (StackKind k : {StackKind::kBase, StackKind::kKm, StackKind::kKmKe,
                      StackKind::kRag, StackKind::kRagKm, StackKind::kRagKe,
                      StackKind::kRagKmKe})
    REQUIRE(km::stack_from_string(km::to_string(k)) == k);
  REQUIRE_THROWS_WITH(km::stack_from_string("km+rag"), ContainsSubstring("unknown stack"));
  REQUIRE(km::book_from_string("open") == Book::kOpen);
  REQUIRE_THROWS_WITH(km::book_from_string("ajar"), ContainsSubstring("unknown book"));
}

TEST_CASE("continuation scores match a hand log-softmax") {
  Desk desk = make_desk(3);
  const std::vector<int> ctx = {4, 5};
  const std::vector<int> cont = {6, 4, 7};
  std::vector<int> input = {desk.tok.bos_id(), 4, 5, 6, 4, 7};

  km::NoGradGuard ng;
  km::ForwardOutput out = desk.model.forward(input);
  const int64_t vocab = out.logits.shape()[1];
  double total = 0.0;
  for (size_t pos = 3; pos < input.size(); ++pos) {
    const real* row = out.logits.data().data() + (pos - 1) * vocab;
    double mx = row[0];
    for (int64_t v = 1; v < vocab; ++v) mx = std::max<double>(mx, row[v]);
    double lse = 0.0;
    for (int64_t v = 0; v < vocab; ++v) lse += std::exp(row[v] - mx);
    total += row[input[pos]] - mx - std::log(lse);
  }
  REQUIRE_THAT(km::score_continuation(ctx, cont, desk.model),
               WithinAbs(total / 3.0, 1e-9));
  REQUIRE_THROWS_WITH(km::score_continuation(ctx, {}, desk.model),
                      ContainsSubstring("empty continuation"));
}

TEST_CASE("a uniform-logit model scores at chance over 1000 questions") {
  Tokenizer tok = Tokenizer::from_corpus({"a b c d"});
  ModelConfig cfg;
  cfg.vocab_size = tok.vocab_size();
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 8;
  cfg.max_seq_len = 16;
  Model model(cfg, tok, 1);
  zero_parameters(model);

  // Every option of every length scores exactly log(1/vocab) per token...
  REQUIRE_THAT(km::score_continuation({4, 5}, {6, 7, 4}, model),
               WithinAbs(-std::log(static_cast<double>(cfg.vocab_size)), 1e-6));

  // ...so every question ties and the tie rule predicts option 0; accuracy
  // is then the rate at which the gold index lands on 0, binomial around 1/4.
  km::Rng rng(1234);
  std::vector<McItem> items;
  for (int i = 0; i < 1000; ++i) {
    McItem item;
    item.context = {4, static_cast<int>(4 + rng.next_below(4))};
    for (int o = 0; o < 4; ++o)
      item.options.push_back(
          {static_cast<int>(4 + rng.next_below(4)),
           static_cast<int>(4 + rng.next_below(4))});
    item.gold = static_cast<int>(rng.next_below(4));
    items.push_back(std::move(item));
  }
  std::vector<int> preds;
  const double acc = km::mc_accuracy(items, model, &preds);
  for (int p : preds) REQUIRE(p == 0);
  // 99% binomial interval: 0.25 +- 2.576*sqrt(0.25*0.75/1000)
  REQUIRE(acc > 0.25 - 0.0353);
  REQUIRE(acc < 0.25 + 0.0353);

  McItem bad;
  bad.context = {4};
  bad.options = {{4}, {5}, {6}};
  bad.gold = 0;
  REQUIRE_THROWS_WITH(km::predict_mc(bad, model),
                      ContainsSubstring("exactly 4 options"));
}

TEST_CASE("tie-free predictions follow any option permutation") {
  Desk desk = make_desk(5);
  km::Rng rng(55);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    McItem item;
    item.context = {4, static_cast<int>(4 + rng.next_below(8))};
    std::vector<double> scores;
    for (int o = 0; o < 4; ++o) {
      std::vector<int> opt;
      for (int t = 0; t < 3; ++t)
        opt.push_back(static_cast<int>(4 + rng.next_below(desk.tok.vocab_size() - 4)));
      item.options.push_back(opt);
    }
    for (int o = 0; o < 4; ++o)
      scores.push_back(km::score_continuation(item.context, item.options[o], desk.model));
    std::sort(scores.begin(), scores.end());
    if (std::adjacent_find(scores.begin(), scores.end()) != scores.end()) continue;

    const int before = km::predict_mc(item, desk.model);
    McItem rotated = item;
    for (int o = 0; o < 4; ++o) rotated.options[o] = item.options[(o + 1) % 4];
    const int after = km::predict_mc(rotated, desk.model);
    REQUIRE((after + 1) % 4 == before);
    ++checked;
  }
  REQUIRE(checked >= 45);  // genuine ties should be vanishingly rare
}

TEST_CASE("corpus splits are disjoint, exhaustive, and seeded") {
  km::CorpusSplit s = km::split_corpus(10, 2, 3, 7);
  REQUIRE(s.train.size() == 5);
  REQUIRE(s.dev.size() == 2);
  REQUIRE(s.test.size() == 3);
  std::vector<size_t> all;
  for (auto* part : {&s.train, &s.dev, &s.test})
    all.insert(all.end(), part->begin(), part->end());
  std::sort(all.begin(), all.end());
  std::vector<size_t> want(10);
  std::iota(want.begin(), want.end(), size_t{0});
  REQUIRE(all == want);

  km::CorpusSplit again = km::split_corpus(10, 2, 3, 7);
  REQUIRE(again.train == s.train);
  REQUIRE(again.test == s.test);
  REQUIRE_THROWS_WITH(km::split_corpus(4, 2, 2, 1),
                      ContainsSubstring("at least one training document"));
}

TEST_CASE("run_eval wires stacks, costs, and records together") {
  Desk desk = make_desk(8, 2, 6);
  std::vector<size_t> docs = {0, 1};
  TrainConfig zero = TrainConfig{};
  zero.steps = 0;
  zero.rank = 2;
  std::unordered_map<std::string, KnowledgeModule> zero_kms;
  for (const km::Document& doc : desk.corpus.documents)
    zero_kms[doc.doc_id] = km::train_km(doc, {}, zero, desk.model).km;

  SECTION("zero-init kms reproduce base predictions exactly") {
    EvalSetting base{Book::kClosed, StackKind::kBase, 5};
    EvalSetting with_km{Book::kClosed, StackKind::kKm, 5};
    EvalReport a = km::run_eval(desk.corpus, docs, base, {}, nullptr, nullptr,
                                desk.model, desk.tok);
    EvalReport b = km::run_eval(desk.corpus, docs, with_km, zero_kms, nullptr,
                                nullptr, desk.model, desk.tok);
    REQUIRE(a.value == b.value);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i)
      REQUIRE(a.records[i].predicted == b.records[i].predicted);
    REQUIRE(a.method == "closed/base");
    REQUIRE(b.method == "closed/km");
  }

  SECTION("closed-book token cost is the mean question length") {
    EvalSetting base{Book::kClosed, StackKind::kBase, 5};
    EvalReport r = km::run_eval(desk.corpus, docs, base, {}, nullptr, nullptr,
                                desk.model, desk.tok);
    double want = 0.0;
    size_t n = 0;
    for (size_t d : docs)
      for (const km::GoldQuestion& q : desk.corpus.gold[d]) {
        want += static_cast<double>(desk.tok.encode(q.question).size());
        ++n;
      }
    REQUIRE(r.records.size() == n);
    REQUIRE_THAT(r.token_cost, WithinAbs(want / static_cast<double>(n), 1e-12));
    for (const auto& rec : r.records) REQUIRE(rec.passage_ids.empty());
  }

  SECTION("rag stacks count passages plus separators and log passage ids") {
    km::PassageIndex index = km::build_index(desk.corpus.documents, desk.model, 8);
    EvalSetting rag{Book::kOpen, StackKind::kRag, 2};
    EvalReport r = km::run_eval(desk.corpus, docs, rag, {}, nullptr, &index,
                                desk.model, desk.tok);
    REQUIRE(r.method == "open/rag@k=2");
    std::vector<int64_t> qlens;  // flat, in the same doc-then-question order
    for (size_t d : docs)
      for (const km::GoldQuestion& q : desk.corpus.gold[d])
        qlens.push_back(static_cast<int64_t>(desk.tok.encode(q.question).size()));
    REQUIRE(r.records.size() == qlens.size());
    for (const auto& rec : r.records) {
      REQUIRE(rec.passage_ids.size() == 2);
      int64_t want = qlens[static_cast<size_t>(rec.id)];
      for (int64_t pid : rec.passage_ids)  // passage tokens plus one separator each
        want += static_cast<int64_t>(
            index.passages(rec.doc_id)[static_cast<size_t>(pid)].tokens.size()) + 1;
      REQUIRE(rec.context_tokens == want);
      REQUIRE(rec.context_tokens <= 2 * 8 + 2 + qlens[static_cast<size_t>(rec.id)]);
    }
  }

  SECTION("missing pieces are rejected by name before evaluation") {
    EvalSetting with_km{Book::kClosed, StackKind::kKm, 5};
    std::unordered_map<std::string, KnowledgeModule> partial;
    partial["doc-0"] = zero_kms.at("doc-0");
    REQUIRE_THROWS_WITH(km::run_eval(desk.corpus, docs, with_km, partial, nullptr,
                                     nullptr, desk.model, desk.tok),
                        ContainsSubstring("knowledge module for doc 'doc-1'"));

    EvalSetting kmke{Book::kClosed, StackKind::kKmKe, 5};
    REQUIRE_THROWS_WITH(km::run_eval(desk.corpus, docs, kmke, zero_kms, nullptr,
                                     nullptr, desk.model, desk.tok),
                        ContainsSubstring("requires an extractor"));

    EvalSetting rag{Book::kOpen, StackKind::kRag, 2};
    REQUIRE_THROWS_WITH(km::run_eval(desk.corpus, docs, rag, {}, nullptr, nullptr,
                                     desk.model, desk.tok),
                        ContainsSubstring("requires a passage index"));
  }

  SECTION("reports are bit-identical across reruns and parallelism") {
    km::PassageIndex index = km::build_index(desk.corpus.documents, desk.model, 8);
    TrainConfig quick = TrainConfig{};
    quick.steps = 5;
    quick.rank = 2;
    quick.seed = 3;
    std::vector<km::TaskExample> dataset;
    for (size_t d : docs)
      for (const km::GoldQuestion& q : desk.corpus.gold[d])
        dataset.push_back({q.question, q.answer(), desk.corpus.documents[d].doc_id});
    km::KnowledgeExtractor ke = km::train_ke(dataset, zero_kms, quick, desk.model).ke;

    EvalSetting full{Book::kOpen, StackKind::kRagKmKe, 2};
    EvalReport r1 = km::run_eval(desk.corpus, docs, full, zero_kms, &ke, &index,
                                 desk.model, desk.tok, 1);
    EvalReport r4 = km::run_eval(desk.corpus, docs, full, zero_kms, &ke, &index,
                                 desk.model, desk.tok, 4);
    REQUIRE(km::to_json(r1).dump() == km::to_json(r4).dump());
    REQUIRE(r1.value >= 0.0);
    REQUIRE(r1.value <= 1.0);
  }

  SECTION("reports serialize to json on disk") {
    EvalSetting base{Book::kClosed, StackKind::kBase, 5};
    EvalReport r = km::run_eval(desk.corpus, docs, base, {}, nullptr, nullptr,
                                desk.model, desk.tok);
    km::fs::path path = km::fs::temp_directory_path() / "km-test-report.json";
    km::save_report(path, r);
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in);
    REQUIRE(j.at("method") == "closed/base");
    REQUIRE(j.at("metric") == "accuracy");
    REQUIRE(j.at("records").size() == r.records.size());
    REQUIRE(j.at("value").get<double>() == r.value);
    km::fs::remove(path);
  }
}

TEST_CASE("ablation grids vary exactly one factor per cell") {
  TrainConfig base = TrainConfig{};
  base.steps = 3;
  base.rank = 2;
  base.seed = 11;

  auto taus = km::tau_cells(base, {1.0, 0.1, 0.001, 0.0});
  REQUIRE(taus.size() == 4);
  REQUIRE(taus[0].label == "tau=1");
  REQUIRE(taus[1].label == "tau=0.1");
  REQUIRE(taus[2].label == "tau=0.001");
  REQUIRE(taus[3].label == "tau=0");
  for (const auto& cell : taus) {
    REQUIRE(cell.train.dcd.use_kl == base.dcd.use_kl);
    REQUIRE(cell.train.dcd.use_hidden == base.dcd.use_hidden);
    REQUIRE(cell.train.seed == base.seed);
  }

  auto losses = km::loss_cells(base);
  REQUIRE(losses.size() == 3);
  REQUIRE(losses[0].label == "kl+l1");
  REQUIRE(losses[1].label == "kl_only");
  REQUIRE(losses[2].label == "l1_only");
  REQUIRE(losses[0].train.dcd.use_kl == losses[1].train.dcd.use_kl);
  REQUIRE(losses[0].train.dcd.use_hidden != losses[1].train.dcd.use_hidden);
  REQUIRE(losses[0].train.dcd.tau == losses[1].train.dcd.tau);
  REQUIRE(losses[2].train.dcd.use_kl == false);
  REQUIRE(losses[2].train.dcd.use_hidden == true);

  auto data = km::data_cells(base, {2, 4, 8, 16});
  REQUIRE(data.size() == 4);
  REQUIRE(data[0].label == "summaries=2");
  REQUIRE(data[3].label == "summaries=16");
  REQUIRE(data[0].max_summaries == 2);
  for (const auto& cell : data) REQUIRE(cell.train.seed == base.seed);
}

TEST_CASE("the ablation driver trains and reports one cell per grid entry") {
  Desk desk = make_desk(12, 2, 6);
  TrainConfig base = TrainConfig{};
  base.steps = 3;
  base.rank = 2;
  base.seed = 5;
  base.objective = km::Objective::kDdcd;

  auto cells = km::loss_cells(base);
  cells.resize(2);
  EvalSetting setting{Book::kClosed, StackKind::kKm, 5};
  auto reports = km::ablation_suite(desk.corpus, {}, cells, setting, desk.model,
                                    desk.tok, 2);
  REQUIRE(reports.size() == 2);
  REQUIRE(reports[0].method == "kl+l1");
  REQUIRE(reports[1].method == "kl_only");
  for (const EvalReport& r : reports) {
    REQUIRE(r.value >= 0.0);
    REQUIRE(r.value <= 1.0);
    REQUIRE(r.records.size() == 12);
  }

  auto again = km::ablation_suite(desk.corpus, {}, cells, setting, desk.model,
                                  desk.tok, 1);
  REQUIRE(km::to_json(reports[0]).dump() == km::to_json(again[0]).dump());
  REQUIRE(km::to_json(reports[1]).dump() == km::to_json(again[1]).dump());
}
