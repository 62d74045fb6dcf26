// km: one binary wiring the whole pipeline — corpus building, synthetic data
// generation, KM/KE training, passage indexing, evaluation, ablation grids,
// and the KM registry. Every command writes a run.json manifest into its
// output directory. Options resolve as CLI flag > --config file > default.

#include <cstdint>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "km/cli.hpp"
#include "km/evaluation.hpp"
#include "km/registry.hpp"
#include "km/retrieval.hpp"
#include "km/synthdata.hpp"
#include "km/training.hpp"

namespace {

using km::ConfigBinder;
using km::fs::path;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  for (char c : csv) {
    if (c == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else {
      item.push_back(c);
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

// Doc selection: empty selector means every document, otherwise a comma list
// of doc ids that must all exist.
std::vector<size_t> select_docs(const km::FactCorpus& corpus, const std::string& csv) {
  std::vector<size_t> indices;
  if (csv.empty()) {
    for (size_t i = 0; i < corpus.documents.size(); ++i) indices.push_back(i);
    return indices;
  }
  std::unordered_map<std::string, size_t> by_id;
  for (size_t i = 0; i < corpus.documents.size(); ++i)
    by_id[corpus.documents[i].doc_id] = i;
  for (const std::string& id : split_list(csv)) {
    auto it = by_id.find(id);
    if (it == by_id.end()) km::fail("unknown doc '" + id + "' in --docs");
    indices.push_back(it->second);
  }
  return indices;
}

path default_path(const std::string& ws, const std::string& given,
                  const std::string& leaf) {
  return given.empty() ? path(ws) / leaf : path(given);
}

km::FactCorpus load_tokenized_corpus(const path& corpus_dir, const km::Tokenizer& tok) {
  km::FactCorpus corpus = km::load_corpus(corpus_dir);
  km::tokenize_documents(corpus, tok);
  return corpus;
}

// Shared flags for every command that runs the KM/KE optimizer.
struct TrainFlags {
  km::TrainConfig cfg;
  std::string objective = "ddcd";
  double tau = 1.0;
  bool no_kl = false;
  bool no_hidden = false;

  void add_to(CLI::App* cmd, ConfigBinder& binder) {
    binder.bind(cmd->add_option("--steps", cfg.steps, "optimizer steps"), cfg.steps);
    binder.bind(cmd->add_option("--batch-size", cfg.batch_size, "items per step"),
                cfg.batch_size);
    binder.bind(cmd->add_option("--lr", cfg.lr, "peak learning rate"), cfg.lr);
    binder.bind(cmd->add_option("--schedule", cfg.schedule, "cosine|constant"),
                cfg.schedule);
    binder.bind(cmd->add_option("--rank", cfg.rank, "lora rank"), cfg.rank);
    binder.bind(cmd->add_option("--alpha", cfg.alpha, "lora alpha"), cfg.alpha);
    binder.bind(cmd->add_option("--objective", objective, "lm|ddcd|sdcd|pit"),
                objective);
    binder.bind(cmd->add_option("--tau", tau, "distillation temperature"), tau);
    binder.bind(cmd->add_flag("--no-kl", no_kl, "drop the kl term"), no_kl);
    binder.bind(cmd->add_flag("--no-hidden", no_hidden, "drop the hidden-l1 term"),
                no_hidden);
    binder.bind(cmd->add_option("--chunk-len", cfg.chunk_len,
                                "dcd chunk length (0 = max_seq_len/2)"),
                cfg.chunk_len);
    binder.bind(cmd->add_option("--seed", cfg.seed, "training seed"), cfg.seed);
  }

  km::TrainConfig resolve() {
    cfg.objective = km::objective_from_string(objective);
    cfg.dcd.tau = tau;
    cfg.dcd.use_kl = !no_kl;
    cfg.dcd.use_hidden = !no_hidden;
    cfg.validate();
    return cfg;
  }
};

struct CommandContext {
  std::string name;
  CLI::App* app = nullptr;
  ConfigBinder binder;
  std::function<int()> run;
};

int run_corpus(const std::string& ws, const std::string& out, int64_t docs,
               int64_t facts, int64_t entities, uint64_t seed, ConfigBinder& binder) {
  km::WallClock clock;
  const path out_dir = default_path(ws, out, "corpus");
  km::FactCorpus corpus =
      km::build_fact_corpus(docs, facts, km::default_entities(entities), seed);
  km::save_corpus(out_dir, corpus);
  km::write_run_manifest(out_dir, {"corpus", binder.resolved(), seed, {},
                                   {out_dir.string()}, clock.seconds()});
  size_t questions = 0;
  for (const auto& g : corpus.gold) questions += g.size();
  std::cout << "corpus docs=" << corpus.documents.size() << " questions=" << questions
            << " out=" << out_dir.string() << "\n";
  return 0;
}

int run_init_model(const std::string& ws, const std::string& corpus_dir,
                   const std::string& out, km::ModelConfig cfg, uint64_t seed,
                   int64_t pretrain_steps, int64_t pretrain_batch, double pretrain_lr,
                   int64_t hold_out, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path out_dir = default_path(ws, out, "model");
  km::FactCorpus corpus = km::load_corpus(in_dir);
  km::Tokenizer tok = km::Tokenizer::from_corpus(km::corpus_texts(corpus));
  cfg.vocab_size = tok.vocab_size();
  cfg.validate();
  km::Model model(cfg, tok, seed);
  if (pretrain_steps > 0) {
    km::tokenize_documents(corpus, tok);
    std::vector<km::Document> train_docs = corpus.documents;
    km::require(hold_out >= 0 &&
                hold_out < static_cast<int64_t>(corpus.documents.size()),
            "init-model: --hold-out must leave at least one pretraining document");
    train_docs.resize(corpus.documents.size() - static_cast<size_t>(hold_out));
    auto curve =
        km::pretrain_lm(model, train_docs, pretrain_steps, pretrain_batch, pretrain_lr, seed);
    km::write_loss_curve(out_dir / "pretrain_curve.csv", curve);
    std::cout << "pretrain first=" << curve.front() << " last=" << curve.back() << "\n";
  }
  model.save(out_dir);
  km::write_run_manifest(out_dir, {"init-model", binder.resolved(), seed,
                                   {in_dir.string()}, {out_dir.string()},
                                   clock.seconds()});
  std::cout << "model vocab=" << cfg.vocab_size << " params at " << out_dir.string()
            << "\n";
  return 0;
}

int run_synth(const std::string& ws, const std::string& corpus_dir,
              const std::string& model_dir, const std::string& out,
              const std::string& kinds_csv, int64_t count, int64_t chunk_len,
              const std::string& generator, const std::string& ingest,
              const std::string& docs_csv, uint64_t seed, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  const path out_dir = default_path(ws, out, "samples");
  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);
  km::fs::create_directories(out_dir);

  if (!ingest.empty()) {
    // Entigraph-style samples are produced elsewhere and only ingested.
    const std::vector<size_t> docs = select_docs(corpus, docs_csv);
    km::require(docs.size() == 1, "synth --ingest: select exactly one doc via --docs");
    const std::string& doc_id = corpus.documents[docs[0]].doc_id;
    auto samples = km::load_samples(ingest, doc_id, model.tokenizer);
    km::save_samples(out_dir / (doc_id + ".jsonl"), samples);
    km::write_run_manifest(out_dir, {"synth", binder.resolved(), seed,
                                     {in_dir.string(), ingest},
                                     {out_dir.string()}, clock.seconds()});
    std::cout << "synth ingested=" << samples.size() << " doc=" << doc_id << "\n";
    return 0;
  }

  km::TemplateGenerator template_gen;
  std::unique_ptr<km::HttpGeneratorClient> http_gen;
  km::GeneratorClient* gen = &template_gen;
  if (generator == "http") {
    http_gen = std::make_unique<km::HttpGeneratorClient>(km::HttpGeneratorClient::from_env());
    gen = http_gen.get();
  } else if (generator != "template") {
    km::fail("synth: unknown generator '" + generator + "' (template or http)");
  }

  const int64_t effective_chunk =
      chunk_len > 0 ? chunk_len : model.config.max_seq_len / 2;
  size_t total = 0;
  for (size_t d : select_docs(corpus, docs_csv)) {
    const km::Document& doc = corpus.documents[d];
    std::vector<km::SyntheticSample> samples;
    for (const km::Chunk& chunk : km::chunk_document(doc, effective_chunk)) {
      for (const std::string& kind_name : split_list(kinds_csv)) {
        const km::SampleKind kind = km::sample_kind_from_string(kind_name);
        const uint64_t chunk_seed =
            km::Rng(seed).fork(doc.doc_id).fork(static_cast<uint64_t>(chunk.index))
                .next_u64();
        auto generated =
            km::generate_samples(chunk, model.tokenizer, kind, count, *gen, chunk_seed);
        samples.insert(samples.end(), generated.begin(), generated.end());
      }
    }
    km::save_samples(out_dir / (doc.doc_id + ".jsonl"), samples);
    total += samples.size();
  }
  km::write_run_manifest(out_dir, {"synth", binder.resolved(), seed,
                                   {in_dir.string(), mdl_dir.string()},
                                   {out_dir.string()}, clock.seconds()});
  std::cout << "synth samples=" << total << " out=" << out_dir.string() << "\n";
  return 0;
}

int run_train_km(const std::string& ws, const std::string& corpus_dir,
                 const std::string& model_dir, const std::string& samples_dir,
                 const std::string& out, const std::string& docs_csv,
                 int64_t parallelism, TrainFlags& flags, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  const path smp_dir = default_path(ws, samples_dir, "samples");
  const path out_dir = default_path(ws, out, "kms");
  const km::TrainConfig cfg = flags.resolve();

  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);

  std::vector<km::Document> docs;
  std::unordered_map<std::string, std::vector<km::SyntheticSample>> samples;
  for (size_t d : select_docs(corpus, docs_csv)) {
    const km::Document& doc = corpus.documents[d];
    docs.push_back(doc);
    const path sample_file = smp_dir / (doc.doc_id + ".jsonl");
    if (km::fs::exists(sample_file))
      samples[doc.doc_id] = km::load_samples(sample_file, doc.doc_id, model.tokenizer);
  }

  km::ParallelTrainOutcome outcome =
      km::parallel_train_kms(docs, samples, cfg, model, static_cast<int>(parallelism));
  km::Registry registry(out_dir);
  const std::string owner = std::string("train-km objective=") + km::to_string(cfg.objective) +
                            " seed=" + std::to_string(cfg.seed);
  for (size_t i = 0; i < outcome.kms.size(); ++i) {
    registry.put(outcome.kms[i], /*overwrite=*/true, owner);
    km::write_loss_curve(out_dir / "curves" / (outcome.kms[i].doc_id + ".csv"),
                         outcome.curves[i]);
  }
  km::write_run_manifest(out_dir, {"train-km", binder.resolved(), cfg.seed,
                                   {in_dir.string(), mdl_dir.string(), smp_dir.string()},
                                   {out_dir.string()}, clock.seconds()});
  std::cout << "train-km trained=" << outcome.kms.size()
            << " failed=" << outcome.failures.size() << " out=" << out_dir.string()
            << "\n";
  for (const auto& [doc_id, what] : outcome.failures)
    std::cerr << "error: train-km " << doc_id << ": " << what << "\n";
  return outcome.failures.empty() ? 0 : 1;
}

int run_train_ke(const std::string& ws, const std::string& corpus_dir,
                 const std::string& model_dir, const std::string& kms_dir,
                 const std::string& out, const std::string& train_docs_csv,
                 const std::string& context, const std::string& index_dir,
                 int64_t rag_k, bool no_kms, TrainFlags& flags, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  const path kms_root = default_path(ws, kms_dir, "kms");
  const path out_dir = default_path(ws, out, "kes/ke");
  const km::TrainConfig cfg = flags.resolve();

  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);
  const std::vector<size_t> train_docs = select_docs(corpus, train_docs_csv);

  std::vector<km::TaskExample> dataset;
  for (size_t d : train_docs)
    for (const km::GoldQuestion& q : corpus.gold[d])
      dataset.push_back({q.question, q.answer(), corpus.documents[d].doc_id});

  std::unordered_map<std::string, km::KnowledgeModule> kms;
  if (!no_kms) {
    km::Registry registry(kms_root);
    for (size_t d : train_docs) {
      const std::string& doc_id = corpus.documents[d].doc_id;
      kms.emplace(doc_id, registry.get(doc_id));
    }
  }

  km::PassageIndex index;
  km::ContextFn context_fn = nullptr;
  if (context == "rag") {
    index = km::load_index(default_path(ws, index_dir, "indexes"));
    context_fn = [&](const km::TaskExample& ex) {
      return km::rag_context(model.tokenizer.encode(ex.question), index, ex.doc_id,
                             rag_k, model, model.tokenizer.eos_id());
    };
  } else if (context != "none") {
    km::fail("train-ke: unknown context '" + context + "' (none or rag)");
  }

  km::KeTrainResult result = km::train_ke(dataset, kms, cfg, model, context_fn);
  km::save_ke(out_dir, result.ke);
  km::write_loss_curve(out_dir / "curve.csv", result.curve);
  km::write_run_manifest(out_dir, {"train-ke", binder.resolved(), cfg.seed,
                                   {in_dir.string(), mdl_dir.string(), kms_root.string()},
                                   {out_dir.string()}, clock.seconds()});
  std::cout << "train-ke examples=" << dataset.size()
            << " truncations=" << result.context_truncations
            << " out=" << out_dir.string() << "\n";
  return 0;
}

int run_index(const std::string& ws, const std::string& corpus_dir,
              const std::string& model_dir, const std::string& out,
              const std::string& docs_csv, int64_t passage_len, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  const path out_dir = default_path(ws, out, "indexes");
  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);
  std::vector<km::Document> docs;
  for (size_t d : select_docs(corpus, docs_csv)) docs.push_back(corpus.documents[d]);
  km::PassageIndex index = km::build_index(docs, model, passage_len);
  km::save_index(out_dir, index);
  size_t passages = 0;
  for (const std::string& id : index.doc_ids()) passages += index.passages(id).size();
  km::write_run_manifest(out_dir, {"index", binder.resolved(), 0,
                                   {in_dir.string(), mdl_dir.string()},
                                   {out_dir.string()}, clock.seconds()});
  std::cout << "index docs=" << index.doc_ids().size() << " passages=" << passages
            << " out=" << out_dir.string() << "\n";
  return 0;
}

int run_eval_cmd(const std::string& ws, const std::string& corpus_dir,
                 const std::string& model_dir, const std::string& kms_dir,
                 const std::string& ke_dir, const std::string& index_dir,
                 const std::string& setting_name, const std::string& stack_name,
                 int64_t rag_k, const std::string& docs_csv, const std::string& report,
                 int64_t parallelism, ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);
  const std::vector<size_t> docs = select_docs(corpus, docs_csv);

  km::EvalSetting setting;
  setting.book = km::book_from_string(setting_name);
  setting.stack = km::stack_from_string(stack_name);
  setting.rag_k = rag_k;
  setting.validate();

  std::unordered_map<std::string, km::KnowledgeModule> kms;
  if (km::uses_km(setting.stack)) {
    km::Registry registry(default_path(ws, kms_dir, "kms"));
    for (size_t d : docs) {
      const std::string& doc_id = corpus.documents[d].doc_id;
      kms.emplace(doc_id, registry.get(doc_id));
    }
  }
  km::KnowledgeExtractor ke;
  if (km::uses_ke(setting.stack)) ke = km::load_ke(default_path(ws, ke_dir, "kes/ke"));
  km::PassageIndex index;
  if (km::uses_rag(setting.stack))
    index = km::load_index(default_path(ws, index_dir, "indexes"));

  km::EvalReport result = km::run_eval(
      corpus, docs, setting, kms, km::uses_ke(setting.stack) ? &ke : nullptr,
      km::uses_rag(setting.stack) ? &index : nullptr, model, model.tokenizer,
      static_cast<int>(parallelism));

  const path report_path =
      report.empty() ? path(ws) / "reports" / (result.method + ".json")
                     : path(report);
  km::fs::create_directories(report_path.parent_path());
  km::save_report(report_path, result);
  km::write_run_manifest(report_path.parent_path(),
                         {"eval", binder.resolved(), 0,
                          {in_dir.string(), mdl_dir.string()},
                          {report_path.string()}, clock.seconds()});
  std::cout << "eval method=" << result.method << " value=" << result.value
            << " token_cost=" << result.token_cost
            << " questions=" << result.records.size() << "\n";
  return 0;
}

int run_ablate(const std::string& ws, const std::string& corpus_dir,
               const std::string& model_dir, const std::string& samples_dir,
               const std::string& out, const std::string& grid,
               const std::string& stack_name, int64_t parallelism, TrainFlags& flags,
               ConfigBinder& binder) {
  km::WallClock clock;
  const path in_dir = default_path(ws, corpus_dir, "corpus");
  const path mdl_dir = default_path(ws, model_dir, "model");
  const path smp_dir = default_path(ws, samples_dir, "samples");
  const path out_dir = default_path(ws, out, "reports/ablation");
  const km::TrainConfig base = flags.resolve();

  km::Model model = km::Model::load(mdl_dir);
  km::FactCorpus corpus = load_tokenized_corpus(in_dir, model.tokenizer);

  std::unordered_map<std::string, std::vector<km::SyntheticSample>> samples;
  for (const km::Document& doc : corpus.documents) {
    const path sample_file = smp_dir / (doc.doc_id + ".jsonl");
    if (km::fs::exists(sample_file))
      samples[doc.doc_id] = km::load_samples(sample_file, doc.doc_id, model.tokenizer);
  }

  std::vector<km::AblationCell> cells;
  if (grid == "tau") {
    cells = km::tau_cells(base, {1.0, 0.1, 0.001, 0.0});
  } else if (grid == "loss") {
    cells = km::loss_cells(base);
  } else if (grid == "data") {
    cells = km::data_cells(base, {2, 4, 8, 16});
  } else {
    km::fail("ablate: unknown grid '" + grid + "' (tau, loss, or data)");
  }

  km::EvalSetting setting;
  setting.stack = km::stack_from_string(stack_name);
  setting.validate();
  auto reports = km::ablation_suite(corpus, samples, cells, setting, model,
                                    model.tokenizer, static_cast<int>(parallelism));
  km::fs::create_directories(out_dir);
  for (const km::EvalReport& r : reports) {
    km::save_report(out_dir / (r.method + ".json"), r);
    std::cout << "ablate cell=" << r.method << " value=" << r.value << "\n";
  }
  km::write_run_manifest(out_dir, {"ablate", binder.resolved(), base.seed,
                                   {in_dir.string(), mdl_dir.string(), smp_dir.string()},
                                   {out_dir.string()}, clock.seconds()});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge modules: document adapters, distillation, retrieval"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "json config file (sections per subcommand)");

  std::vector<std::unique_ptr<CommandContext>> commands;
  auto make = [&](const std::string& name, const std::string& desc) -> CommandContext& {
    commands.push_back(std::make_unique<CommandContext>());
    CommandContext& ctx = *commands.back();
    ctx.name = name;
    ctx.app = app.add_subcommand(name, desc);
    ctx.app->fallthrough();  // lets --config appear after the subcommand name
    return ctx;
  };

  // corpus -------------------------------------------------------------
  {
    auto& ctx = make("corpus", "build a planted-fact corpus with gold questions");
    auto ws = std::make_shared<std::string>("ws");
    auto out = std::make_shared<std::string>();
    auto docs = std::make_shared<int64_t>(10);
    auto facts = std::make_shared<int64_t>(8);
    auto entities = std::make_shared<int64_t>(80);
    auto seed = std::make_shared<uint64_t>(0);
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "corpus directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--docs", *docs, "number of documents"), *docs);
    ctx.binder.bind(ctx.app->add_option("--facts", *facts, "facts per document"),
                    *facts);
    ctx.binder.bind(ctx.app->add_option("--entities", *entities, "entity vocabulary"),
                    *entities);
    ctx.binder.bind(ctx.app->add_option("--seed", *seed, "corpus seed"), *seed);
    ctx.run = [=, &ctx] {
      return run_corpus(*ws, *out, *docs, *facts, *entities, *seed, ctx.binder);
    };
  }

  // init-model ----------------------------------------------------------
  {
    auto& ctx = make("init-model", "initialize (and optionally pretrain) a model");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto cfg = std::make_shared<km::ModelConfig>();
    auto seed = std::make_shared<uint64_t>(0);
    auto steps = std::make_shared<int64_t>(0);
    auto batch = std::make_shared<int64_t>(8);
    auto lr = std::make_shared<double>(3e-3);
    auto hold_out = std::make_shared<int64_t>(0);
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "model directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--d-model", cfg->d_model, "embedding width"),
                    cfg->d_model);
    ctx.binder.bind(ctx.app->add_option("--n-layers", cfg->n_layers, "blocks"),
                    cfg->n_layers);
    ctx.binder.bind(ctx.app->add_option("--n-heads", cfg->n_heads, "attention heads"),
                    cfg->n_heads);
    ctx.binder.bind(ctx.app->add_option("--d-ff", cfg->d_ff, "mlp width"), cfg->d_ff);
    ctx.binder.bind(ctx.app->add_option("--max-seq", cfg->max_seq_len, "context size"),
                    cfg->max_seq_len);
    ctx.binder.bind(ctx.app->add_option("--seed", *seed, "init seed"), *seed);
    ctx.binder.bind(
        ctx.app->add_option("--pretrain-steps", *steps, "lm pretraining steps"),
        *steps);
    ctx.binder.bind(ctx.app->add_option("--pretrain-batch", *batch, "pretrain batch"),
                    *batch);
    ctx.binder.bind(ctx.app->add_option("--pretrain-lr", *lr, "pretrain peak lr"), *lr);
    ctx.binder.bind(ctx.app->add_option("--hold-out", *hold_out,
                                        "exclude the last N docs from pretraining"),
                    *hold_out);
    ctx.run = [=, &ctx] {
      return run_init_model(*ws, *corpus, *out, *cfg, *seed, *steps, *batch, *lr,
                            *hold_out, ctx.binder);
    };
  }

  // synth ---------------------------------------------------------------
  {
    auto& ctx = make("synth", "generate synthetic samples per document chunk");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto kinds = std::make_shared<std::string>("summary,qa");
    auto count = std::make_shared<int64_t>(4);
    auto chunk_len = std::make_shared<int64_t>(0);
    auto generator = std::make_shared<std::string>("template");
    auto ingest = std::make_shared<std::string>();
    auto docs = std::make_shared<std::string>();
    auto seed = std::make_shared<uint64_t>(0);
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "samples directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--kinds", *kinds, "comma list: summary,qa"),
                    *kinds);
    ctx.binder.bind(ctx.app->add_option("--count", *count, "samples per chunk per kind"),
                    *count);
    ctx.binder.bind(ctx.app->add_option("--chunk-len", *chunk_len,
                                        "chunk length (0 = max_seq_len/2)"),
                    *chunk_len);
    ctx.binder.bind(ctx.app->add_option("--generator", *generator, "template|http"),
                    *generator);
    ctx.binder.bind(
        ctx.app->add_option("--ingest", *ingest, "entigraph jsonl file to ingest"),
        *ingest);
    ctx.binder.bind(ctx.app->add_option("--docs", *docs, "comma list (default all)"),
                    *docs);
    ctx.binder.bind(ctx.app->add_option("--seed", *seed, "generation seed"), *seed);
    ctx.run = [=, &ctx] {
      return run_synth(*ws, *corpus, *model, *out, *kinds, *count, *chunk_len,
                       *generator, *ingest, *docs, *seed, ctx.binder);
    };
  }

  // train-km ------------------------------------------------------------
  {
    auto& ctx = make("train-km", "train one knowledge module per document");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto samples = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto docs = std::make_shared<std::string>();
    auto parallelism = std::make_shared<int64_t>(1);
    auto flags = std::make_shared<TrainFlags>();
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--samples", *samples, "samples directory"),
                    *samples);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "km registry directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--docs", *docs, "comma list (default all)"),
                    *docs);
    ctx.binder.bind(
        ctx.app->add_option("--parallelism", *parallelism, "worker threads"),
        *parallelism);
    flags->add_to(ctx.app, ctx.binder);
    ctx.run = [=, &ctx] {
      return run_train_km(*ws, *corpus, *model, *samples, *out, *docs, *parallelism,
                          *flags, ctx.binder);
    };
  }

  // train-ke ------------------------------------------------------------
  {
    auto& ctx = make("train-ke", "train a knowledge extractor over many kms");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto kms = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto train_docs = std::make_shared<std::string>();
    auto context = std::make_shared<std::string>("none");
    auto index = std::make_shared<std::string>();
    auto rag_k = std::make_shared<int64_t>(km::kDefaultTopK);
    auto no_kms = std::make_shared<bool>(false);
    auto flags = std::make_shared<TrainFlags>();
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--kms", *kms, "km registry directory"), *kms);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "ke output directory"), *out);
    ctx.binder.bind(
        ctx.app->add_option("--train-docs", *train_docs, "comma list (default all)"),
        *train_docs);
    ctx.binder.bind(ctx.app->add_option("--context", *context, "none|rag"), *context);
    ctx.binder.bind(ctx.app->add_option("--index", *index, "passage index directory"),
                    *index);
    ctx.binder.bind(ctx.app->add_option("--rag-k", *rag_k, "passages per question"),
                    *rag_k);
    ctx.binder.bind(
        ctx.app->add_flag("--no-kms", *no_kms, "train the extractor without kms"),
        *no_kms);
    flags->add_to(ctx.app, ctx.binder);
    ctx.run = [=, &ctx] {
      return run_train_ke(*ws, *corpus, *model, *kms, *out, *train_docs, *context,
                          *index, *rag_k, *no_kms, *flags, ctx.binder);
    };
  }

  // index ---------------------------------------------------------------
  {
    auto& ctx = make("index", "split and embed passages per document");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto docs = std::make_shared<std::string>();
    auto passage_len = std::make_shared<int64_t>(km::kDefaultPassageLen);
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "index directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--docs", *docs, "comma list (default all)"),
                    *docs);
    ctx.binder.bind(
        ctx.app->add_option("--passage-len", *passage_len, "tokens per passage"),
        *passage_len);
    ctx.run = [=, &ctx] {
      return run_index(*ws, *corpus, *model, *out, *docs, *passage_len, ctx.binder);
    };
  }

  // eval ----------------------------------------------------------------
  {
    auto& ctx = make("eval", "closed/open-book multiple-choice evaluation");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto kms = std::make_shared<std::string>();
    auto ke = std::make_shared<std::string>();
    auto index = std::make_shared<std::string>();
    auto setting = std::make_shared<std::string>("closed");
    auto stack = std::make_shared<std::string>("base");
    auto rag_k = std::make_shared<int64_t>(km::kDefaultTopK);
    auto docs = std::make_shared<std::string>();
    auto report = std::make_shared<std::string>();
    auto parallelism = std::make_shared<int64_t>(1);
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--kms", *kms, "km registry directory"), *kms);
    ctx.binder.bind(ctx.app->add_option("--ke", *ke, "ke directory"), *ke);
    ctx.binder.bind(ctx.app->add_option("--index", *index, "passage index directory"),
                    *index);
    ctx.binder.bind(ctx.app->add_option("--setting", *setting, "closed|open"),
                    *setting);
    ctx.binder.bind(ctx.app->add_option("--stack", *stack,
                                        "base|km|km+ke|rag|rag+km|rag+ke|rag+km+ke"),
                    *stack);
    ctx.binder.bind(ctx.app->add_option("--rag-k", *rag_k, "passages per question"),
                    *rag_k);
    ctx.binder.bind(ctx.app->add_option("--docs", *docs, "comma list (default all)"),
                    *docs);
    ctx.binder.bind(ctx.app->add_option("--report", *report, "report json path"),
                    *report);
    ctx.binder.bind(
        ctx.app->add_option("--parallelism", *parallelism, "worker threads"),
        *parallelism);
    ctx.run = [=, &ctx] {
      return run_eval_cmd(*ws, *corpus, *model, *kms, *ke, *index, *setting, *stack,
                          *rag_k, *docs, *report, *parallelism, ctx.binder);
    };
  }

  // ablate --------------------------------------------------------------
  {
    auto& ctx = make("ablate", "run a tau/loss/data ablation grid");
    auto ws = std::make_shared<std::string>("ws");
    auto corpus = std::make_shared<std::string>();
    auto model = std::make_shared<std::string>();
    auto samples = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto grid = std::make_shared<std::string>("loss");
    auto stack = std::make_shared<std::string>("km");
    auto parallelism = std::make_shared<int64_t>(1);
    auto flags = std::make_shared<TrainFlags>();
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--corpus", *corpus, "corpus directory"),
                    *corpus);
    ctx.binder.bind(ctx.app->add_option("--model", *model, "model directory"), *model);
    ctx.binder.bind(ctx.app->add_option("--samples", *samples, "samples directory"),
                    *samples);
    ctx.binder.bind(ctx.app->add_option("--out", *out, "reports directory"), *out);
    ctx.binder.bind(ctx.app->add_option("--grid", *grid, "tau|loss|data"), *grid);
    ctx.binder.bind(ctx.app->add_option("--stack", *stack, "eval stack"), *stack);
    ctx.binder.bind(
        ctx.app->add_option("--parallelism", *parallelism, "worker threads"),
        *parallelism);
    flags->add_to(ctx.app, ctx.binder);
    ctx.run = [=, &ctx] {
      return run_ablate(*ws, *corpus, *model, *samples, *out, *grid, *stack,
                        *parallelism, *flags, ctx.binder);
    };
  }

  // registry ------------------------------------------------------------
  {
    auto& ctx = make("registry", "list, inspect, or delete stored kms");
    ctx.app->require_subcommand(1);
    auto ws = std::make_shared<std::string>("ws");
    auto kms = std::make_shared<std::string>();
    auto doc = std::make_shared<std::string>();
    ctx.binder.bind(ctx.app->add_option("--workspace", *ws, "workspace root"), *ws);
    ctx.binder.bind(ctx.app->add_option("--kms", *kms, "km registry directory"), *kms);
    CLI::App* list = ctx.app->add_subcommand("list", "print stored doc ids");
    CLI::App* inspect = ctx.app->add_subcommand("inspect", "print a km's manifest");
    CLI::App* del = ctx.app->add_subcommand("delete", "remove a km");
    for (CLI::App* sub : {list, inspect, del})
      sub->fallthrough();  // accept --workspace/--kms after the verb too
    inspect->add_option("--doc", *doc, "doc id")->required();
    del->add_option("--doc", *doc, "doc id")->required();
    ctx.run = [=, &ctx] {
      km::Registry registry(default_path(*ws, *kms, "kms"));
      if (ctx.app->got_subcommand("list")) {
        for (const std::string& id : registry.list()) std::cout << id << "\n";
      } else if (ctx.app->got_subcommand("inspect")) {
        std::cout << registry.inspect(*doc).dump(2) << "\n";
      } else {
        registry.remove(*doc);
        std::cout << "deleted " << *doc << "\n";
      }
      return 0;
    };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n"
              << "run 'km --help' for usage\n";
    return 2;
  }

  try {
    nlohmann::json config = nlohmann::json::object();
    if (!config_path.empty()) config = km::load_config_file(config_path);
    for (const auto& ctx : commands) {
      if (!app.got_subcommand(ctx->app)) continue;
      if (config.contains(ctx->name)) {
        ctx->binder.reject_unknown_keys(config.at(ctx->name));
        ctx->binder.apply(config.at(ctx->name));
      }
      return ctx->run();
    }
    km::fail("no subcommand selected");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
