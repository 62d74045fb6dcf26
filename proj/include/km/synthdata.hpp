#pragma once

// Corpus plumbing: documents, their non-overlapping chunks, and the synthetic
// samples (summaries / QA pairs / ingested entigraph text) generated from a
// chunk. The generator clients and the planted-fact corpus builder live here
// too, so everything that fabricates text is in one place.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "km/common.hpp"
#include "km/random.hpp"
#include "km/tokenizer.hpp"

namespace km {

namespace fs = std::filesystem;

enum class SampleKind { kSummary, kQa, kEntigraph };

inline const char* to_string(SampleKind k) {
  switch (k) {
    case SampleKind::kSummary: return "summary";
    case SampleKind::kQa: return "qa";
    case SampleKind::kEntigraph: return "entigraph";
  }
  return "?";
}

inline SampleKind sample_kind_from_string(const std::string& s) {
  if (s == "summary") return SampleKind::kSummary;
  if (s == "qa") return SampleKind::kQa;
  if (s == "entigraph") return SampleKind::kEntigraph;
  fail("unknown sample kind '" + s + "' (expected summary, qa, or entigraph)");
}

struct Document {
  std::string doc_id;
  std::string text;
  std::vector<int> tokens;  // tokenizer.encode(text)
};

struct Chunk {
  std::string doc_id;
  int64_t index = 0;
  std::vector<int> tokens;
};

struct SyntheticSample {
  SampleKind kind = SampleKind::kSummary;
  std::string doc_id;  // source chunk
  int64_t chunk_index = 0;
  std::string text;
  std::vector<int> tokens;  // encode(text)
  int64_t qa_split = -1;    // qa only: token index where the answer begins
};

struct GoldQuestion {
  std::string question;
  std::vector<std::string> options;  // 4 options, exactly one correct
  int correct = 0;

  const std::string& answer() const { return options[static_cast<size_t>(correct)]; }
};

struct FactCorpus {
  std::vector<Document> documents;
  std::vector<std::vector<GoldQuestion>> gold;  // parallel to documents
};

inline std::vector<Chunk> chunk_document(const Document& doc, int64_t chunk_len) {
  require(chunk_len >= 2, "chunk_document: chunk length must be at least 2");
  std::vector<Chunk> chunks;
  const int64_t n = static_cast<int64_t>(doc.tokens.size());
  for (int64_t start = 0; start < n; start += chunk_len) {
    Chunk c;
    c.doc_id = doc.doc_id;
    c.index = static_cast<int64_t>(chunks.size());
    const int64_t end = std::min(n, start + chunk_len);
    c.tokens.assign(doc.tokens.begin() + start, doc.tokens.begin() + end);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// ---------------------------------------------------------------------------
// Generation prompts. The wording (including the characters/4 word target and
// the loose question/answer tags) is fixed; clients fill in the text.

inline std::string summary_prompt(const std::string& text) {
  // Word target is characters / 4 — a deliberate heuristic, not a typo.
  int64_t words = static_cast<int64_t>(text.size()) / 4;
  return "Summarize the following text in around " + std::to_string(words) +
         " words without omitting any important details.\n"
         "The summary should be grammatically correct and summarize all the "
         "different sections in the text\n\n"
         "********** Text **********\n" +
         text + "\n**************************\n";
}

inline std::string qa_prompt(const std::string& text, int64_t num_questions) {
  return "Create " + std::to_string(num_questions) +
         " questions that can be answerable from the following text, along "
         "with their answers.\n"
         "Strive to generate challenging questions that require aggregating "
         "information across the provided text.\n"
         "Focus on different sections of the text to increase diversity of "
         "the generated questions. Format your answer as follows:\n\n"
         "<question id=1> QUESTION 1 HERE <question>\n"
         "<answer id=1> ANSWER 1 HERE <answer>\n"
         "<question id=2> QUESTION 2 HERE <question>\n"
         "<answer id=2> ANSWER 2 HERE <answer>\n\n"
         "********** Text **********\n" +
         text + "\n**************************\n";
}

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Pulls the document text back out of a prompt built above.
inline std::string prompt_text(const std::string& prompt) {
  const std::string open = "********** Text **********\n";
  const std::string close = "\n**************************";
  size_t b = prompt.find(open);
  size_t e = prompt.rfind(close);
  require(b != std::string::npos && e != std::string::npos && b + open.size() <= e,
          "generator: prompt has no text section");
  b += open.size();
  return prompt.substr(b, e - b);
}

}  // namespace detail

// Parses a question/answer completion. Tolerant by design: tags may or may
// not close, ids and spacing are ignored, unknown angle-bracket runs are kept
// as content. A pair is emitted for every answer tag that follows a question
// tag.
inline std::vector<std::pair<std::string, std::string>> parse_qa_block(
    const std::string& completion) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string question, current;
  bool in_question = false, in_answer = false;

  auto flush = [&]() {
    current = detail::trim(current);
    if (in_question) {
      question = current;
    } else if (in_answer && !question.empty()) {
      pairs.emplace_back(question, current);
      question.clear();
    }
    current.clear();
  };

  size_t i = 0;
  while (i < completion.size()) {
    size_t lt = completion.find('<', i);
    size_t gt = lt == std::string::npos ? std::string::npos
                                        : completion.find('>', lt);
    if (gt == std::string::npos) {
      current += completion.substr(i);
      break;
    }
    current += completion.substr(i, lt - i);
    std::string tag = completion.substr(lt + 1, gt - lt - 1);
    bool q = tag.find("question") != std::string::npos;
    bool a = tag.find("answer") != std::string::npos;
    bool opener = tag.find("id") != std::string::npos;
    if (q || a) {
      flush();
      in_question = q && opener;
      in_answer = a && opener;
    } else {
      current += completion.substr(lt, gt - lt + 1);  // not ours; keep it
    }
    i = gt + 1;
  }
  flush();
  return pairs;
}

// ---------------------------------------------------------------------------
// Generator clients.

class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  // Returns the raw completion for a prompt. `seed` distinguishes repeated
  // requests for the same prompt; clients may ignore it. Throws on failure.
  virtual std::string complete(const std::string& prompt, uint64_t seed) = 0;
};

// Deterministic stand-in for an external model, used by tests and offline
// runs. Output is a pure function of (prompt, seed). Question/answer pairs
// are read off planted fact sentences of the form
// "the <attribute> of <entity> is <value> .". Summaries restate the text in
// one of a few seeded styles — a compressive sentence selection, the same
// selection with fact sentences inverted to lead with their value, or a
// single-fact self-test — so a larger summary budget per chunk covers
// genuinely more surface variety, not more copies of one rendering.
class TemplateGenerator : public GeneratorClient {
 public:
  std::string complete(const std::string& prompt, uint64_t seed) override {
    std::string text = detail::prompt_text(prompt);
    if (prompt.rfind("Summarize", 0) == 0) return summarize(text, seed);
    if (prompt.rfind("Create", 0) == 0) return answer_questions(text, seed);
    fail("template generator: unrecognized prompt");
  }

 private:
  static std::vector<std::string> sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    size_t i = 0;
    while (i < text.size()) {
      size_t dot = text.find('.', i);
      if (dot == std::string::npos) {
        cur = detail::trim(text.substr(i));
        if (!cur.empty()) out.push_back(cur + " .");
        break;
      }
      cur = detail::trim(text.substr(i, dot - i));
      if (!cur.empty()) out.push_back(cur + " .");
      i = dot + 1;
    }
    return out;
  }

  // Splits a planted-fact sentence "the <attr> of <subject> is <value> ."
  // into its content words; returns false for any other sentence shape.
  static bool parse_fact(const std::string& sent, std::string* attr,
                         std::string* subject, std::string* value) {
    std::vector<std::string> w;
    std::string word;
    for (char c : sent + " ") {
      if (c == ' ') {
        if (!word.empty()) w.push_back(word);
        word.clear();
      } else {
        word += c;
      }
    }
    if (w.size() != 7 || w[0] != "the" || w[2] != "of" || w[4] != "is" ||
        w[6] != ".")
      return false;
    *attr = w[1];
    *subject = w[3];
    *value = w[5];
    return true;
  }

  static std::string summarize(const std::string& text, uint64_t seed) {
    std::vector<std::string> sents = sentences(text);
    require(!sents.empty(), "template generator: text has no sentences");
    // A restatement adds nothing to a summary; keep one mention.
    std::vector<std::string> distinct;
    for (const std::string& s : sents)
      if (std::find(distinct.begin(), distinct.end(), s) == distinct.end())
        distinct.push_back(s);

    Rng rng(seed);
    const uint64_t style = rng.next_below(4);  // 0,1 select; 2 invert; 3 recap
    std::string attr, subject, value;

    if (style == 3) {
      std::vector<std::string> facts;
      for (const std::string& s : distinct)
        if (parse_fact(s, &attr, &subject, &value)) facts.push_back(s);
      if (!facts.empty()) {
        parse_fact(facts[rng.next_below(facts.size())], &attr, &subject, &value);
        return "what is the " + attr + " of " + subject + " ? " + value + " .";
      }
      // nothing fact-shaped to quiz; fall through to a plain selection
    }

    rng.shuffle(distinct);
    size_t keep = (distinct.size() + 1) / 2;  // roughly the requested compression
    std::string out;
    for (size_t i = 0; i < keep; ++i) {
      std::string sent = distinct[i];
      if (style == 2 && parse_fact(sent, &attr, &subject, &value))
        sent = value + " is the " + attr + " of " + subject + " .";
      if (i) out += " ";
      out += sent;
    }
    return out;
  }

  // "the <attribute> of <subject> is <value> ." -> (question, value)
  static std::string answer_questions(const std::string& text, uint64_t seed) {
    std::vector<std::pair<std::string, std::string>> facts;
    std::string attr, subject, value;
    for (const std::string& sent : sentences(text)) {
      if (!parse_fact(sent, &attr, &subject, &value)) continue;
      std::pair<std::string, std::string> fact{
          "what is the " + attr + " of " + subject + " ?", value};
      // a fact restated in the text is still one question
      if (std::find(facts.begin(), facts.end(), fact) == facts.end())
        facts.push_back(std::move(fact));
    }
    require(!facts.empty(), "template generator: text has no fact sentences");
    Rng rng(seed);
    rng.shuffle(facts);
    std::string out;
    for (size_t i = 0; i < facts.size(); ++i) {
      std::string id = std::to_string(i + 1);
      out += "<question id=" + id + "> " + facts[i].first + " <question>\n";
      out += "<answer id=" + id + "> " + facts[i].second + " <answer>\n";
    }
    return out;
  }
};

// Client for an OpenAI-style chat-completions endpoint (e.g. a local serving
// stack). Plain HTTP only — point it at an internal host. Configured from the
// environment:
//   KM_GENERATOR_ENDPOINT  http://host:port (path defaults to
//                          /v1/chat/completions)
//   KM_GENERATOR_API_KEY   optional bearer token
//   KM_GENERATOR_MODEL     model name sent in the request body
class HttpGeneratorClient : public GeneratorClient {
 public:
  HttpGeneratorClient(std::string endpoint, std::string api_key, std::string model)
      : api_key_(std::move(api_key)), model_(std::move(model)) {
    require(endpoint.rfind("http://", 0) == 0,
            "http generator: endpoint must start with http://");
    std::string rest = endpoint.substr(7);
    size_t slash = rest.find('/');
    host_ = "http://" + (slash == std::string::npos ? rest : rest.substr(0, slash));
    path_ = slash == std::string::npos ? "/v1/chat/completions" : rest.substr(slash);
  }

  static HttpGeneratorClient from_env() {
    const char* endpoint = std::getenv("KM_GENERATOR_ENDPOINT");
    require(endpoint != nullptr,
            "http generator: KM_GENERATOR_ENDPOINT is not set");
    const char* key = std::getenv("KM_GENERATOR_API_KEY");
    const char* model = std::getenv("KM_GENERATOR_MODEL");
    return HttpGeneratorClient(endpoint, key ? key : "",
                               model ? model : "default");
  }

  std::string complete(const std::string& prompt, uint64_t seed) override {
    httplib::Client client(host_);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!api_key_.empty())
      headers.emplace("Authorization", "Bearer " + api_key_);
    nlohmann::json body = {
        {"model", model_},
        {"seed", seed},
        {"messages", {{{"role", "user"}, {"content", prompt}}}},
    };
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) fail("http generator: request to " + host_ + " failed");
    if (res->status != 200)
      fail("http generator: " + host_ + " returned status " +
           std::to_string(res->status));
    nlohmann::json j = nlohmann::json::parse(res->body);
    // Accept both chat and legacy completion shapes.
    if (j.contains("choices") && !j["choices"].empty()) {
      const nlohmann::json& c = j["choices"][0];
      if (c.contains("message")) return c["message"].value("content", "");
      if (c.contains("text")) return c["text"].get<std::string>();
    }
    if (j.contains("text")) return j["text"].get<std::string>();
    fail("http generator: response has no completion text");
  }

 private:
  std::string host_, path_, api_key_, model_;
};

// ---------------------------------------------------------------------------
// Sample generation.

// Produces `count` samples of `kind` from one chunk. External failures are
// retried twice with backoff before being surfaced with the chunk id.
// Entigraph samples are ingested from files (see load_samples), never
// generated here.
inline std::vector<SyntheticSample> generate_samples(const Chunk& chunk,
                                                     const Tokenizer& tok,
                                                     SampleKind kind, int64_t count,
                                                     GeneratorClient& generator,
                                                     uint64_t seed) {
  require(count >= 1, "generate_samples: count must be at least 1");
  require(!chunk.tokens.empty(), "generate_samples: chunk has no tokens");
  require(kind != SampleKind::kEntigraph,
          "generate_samples: entigraph samples are ingested, not generated");
  const std::string text = tok.decode(chunk.tokens);

  auto attempt = [&]() {
    std::vector<SyntheticSample> samples;
    if (kind == SampleKind::kSummary) {
      for (int64_t i = 0; i < count; ++i) {
        SyntheticSample s;
        s.kind = kind;
        s.doc_id = chunk.doc_id;
        s.chunk_index = chunk.index;
        s.text = generator.complete(summary_prompt(text),
                                    Rng(seed).fork(static_cast<uint64_t>(i)).next_u64());
        s.tokens = tok.encode(s.text);
        samples.push_back(std::move(s));
      }
      return samples;
    }
    std::string completion = generator.complete(qa_prompt(text, count), seed);
    auto pairs = parse_qa_block(completion);
    require(static_cast<int64_t>(pairs.size()) >= count,
            "generate_samples: completion held " + std::to_string(pairs.size()) +
                " question/answer pairs, need " + std::to_string(count));
    for (int64_t i = 0; i < count; ++i) {
      SyntheticSample s;
      s.kind = kind;
      s.doc_id = chunk.doc_id;
      s.chunk_index = chunk.index;
      s.text = pairs[static_cast<size_t>(i)].first + " " +
               pairs[static_cast<size_t>(i)].second;
      s.tokens = tok.encode(s.text);
      s.qa_split =
          static_cast<int64_t>(tok.encode(pairs[static_cast<size_t>(i)].first).size());
      samples.push_back(std::move(s));
    }
    return samples;
  };

  std::string last_error;
  for (int tries = 0; tries < 3; ++tries) {
    if (tries > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(250 << (tries - 1)));
    try {
      return attempt();
    } catch (const std::exception& e) {
      last_error = e.what();
    }
  }
  fail("generate_samples: giving up on doc '" + chunk.doc_id + "' chunk " +
       std::to_string(chunk.index) + ": " + last_error);
}

// ---------------------------------------------------------------------------
// JSONL sample store, one file per document.

inline void save_samples(const fs::path& path,
                         const std::vector<SyntheticSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "save_samples: cannot open " + path.string());
  for (const SyntheticSample& s : samples) {
    nlohmann::json line = {{"kind", to_string(s.kind)},
                           {"chunk_index", s.chunk_index},
                           {"text", s.text},
                           {"qa_split", s.qa_split}};
    out << line.dump() << "\n";
  }
  require(out.good(), "save_samples: write to " + path.string() + " failed");
}

// Loads a document's samples, re-encoding text with the given tokenizer.
// This is also the entigraph ingestion path: lines with kind "entigraph"
// come from externally produced files.
inline std::vector<SyntheticSample> load_samples(const fs::path& path,
                                                 const std::string& doc_id,
                                                 const Tokenizer& tok) {
  std::ifstream in(path);
  require(in.good(), "load_samples: cannot open " + path.string());
  std::vector<SyntheticSample> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SyntheticSample s;
    s.kind = sample_kind_from_string(j.at("kind").get<std::string>());
    s.doc_id = doc_id;
    s.chunk_index = j.value("chunk_index", int64_t{0});
    s.text = j.at("text").get<std::string>();
    s.tokens = tok.encode(s.text);
    s.qa_split = j.value("qa_split", int64_t{-1});
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Planted-fact corpus.

namespace detail {

// Relations hold between two entities so that answer options can be drawn
// from the same entity pool as the subjects.
inline const std::vector<std::string>& fact_attributes() {
  static const std::vector<std::string> kAttributes = {
      "partner", "rival", "mentor", "neighbor",
      "advisor", "backer", "tenant", "patron"};
  return kAttributes;
}

}  // namespace detail

// Builds `n_docs` documents of templated prose over planted
// (entity, attribute, value) facts, with one 4-way gold question per fact.
// Each pair of statements is restated once (see below), giving documents the
// internal redundancy of real prose. The entity vocabulary is split into
// disjoint per-document pools, so no answer from one document appears in
// another's text. Tokens are left empty; encode once a tokenizer over the
// corpus exists.
inline FactCorpus build_fact_corpus(int64_t n_docs, int64_t facts_per_doc,
                                    const std::vector<std::string>& entities,
                                    uint64_t seed) {
  require(n_docs >= 1, "build_fact_corpus: need at least one document");
  require(facts_per_doc >= 4,
          "build_fact_corpus: need at least 4 facts per document for 4-way questions");
  const int64_t pool = static_cast<int64_t>(entities.size()) / n_docs;
  require(pool >= 4,
          "build_fact_corpus: entity vocabulary too small for distinct "
          "distractors (need 4 entities per document, have " +
              std::to_string(pool) + ")");
  const auto& attrs = detail::fact_attributes();
  require(facts_per_doc <= pool * static_cast<int64_t>(attrs.size()),
          "build_fact_corpus: entity vocabulary too small for " +
              std::to_string(facts_per_doc) + " distinct facts per document");
  std::vector<std::string> sorted = entities;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
          "build_fact_corpus: entity vocabulary has duplicates");

  Rng root(seed);
  FactCorpus corpus;
  for (int64_t d = 0; d < n_docs; ++d) {
    Rng rng = root.fork(static_cast<uint64_t>(d));
    std::vector<std::string> slice(
        entities.begin() + d * pool, entities.begin() + (d + 1) * pool);

    // Distinct (subject, attribute) pairs keep every fact uniquely entailed.
    std::vector<std::pair<int64_t, int64_t>> keys;
    for (int64_t s = 0; s < pool; ++s)
      for (int64_t a = 0; a < static_cast<int64_t>(attrs.size()); ++a)
        keys.emplace_back(s, a);
    rng.shuffle(keys);
    keys.resize(static_cast<size_t>(facts_per_doc));

    Document doc;
    doc.doc_id = "doc-" + std::to_string(d);
    std::vector<GoldQuestion> gold;
    std::vector<std::string> stated;
    for (const auto& [s, a] : keys) {
      const std::string& subject = slice[static_cast<size_t>(s)];
      const std::string& attr = attrs[static_cast<size_t>(a)];
      const std::string& value = slice[rng.next_below(static_cast<uint64_t>(pool))];
      stated.push_back("the " + attr + " of " + subject + " is " + value + " .");

      GoldQuestion q;
      q.question = "what is the " + attr + " of " + subject + " ?";
      std::vector<std::string> wrong;
      for (const std::string& e : slice)
        if (e != value) wrong.push_back(e);
      rng.shuffle(wrong);
      wrong.resize(3);
      q.correct = static_cast<int>(rng.next_below(4));
      q.options = wrong;
      q.options.insert(q.options.begin() + q.correct, value);
      gold.push_back(std::move(q));
    }
    // Prose restates each pair of statements once, block by block:
    // [f0 f1 f0 f1][f2 f3 f2 f3]... Like real prose, a document repeats
    // itself, so its own earlier text supports predicting what comes later.
    for (size_t b = 0; b < stated.size(); b += 2) {
      const size_t e = std::min(b + 2, stated.size());
      for (int rep = 0; rep < 2; ++rep)
        for (size_t i = b; i < e; ++i) {
          if (!doc.text.empty()) doc.text += " ";
          doc.text += stated[i];
        }
    }
    corpus.documents.push_back(std::move(doc));
    corpus.gold.push_back(std::move(gold));
  }
  return corpus;
}

// Every string the desk experiments tokenize: document prose plus the gold
// questions. Building the tokenizer over this set keeps question words like
// "what" in-vocabulary.
inline std::vector<std::string> corpus_texts(const FactCorpus& corpus) {
  std::vector<std::string> texts;
  for (const Document& doc : corpus.documents) texts.push_back(doc.text);
  for (const auto& doc_gold : corpus.gold)
    for (const GoldQuestion& q : doc_gold) texts.push_back(q.question);
  return texts;
}

inline void tokenize_documents(FactCorpus& corpus, const Tokenizer& tok) {
  for (Document& doc : corpus.documents) doc.tokens = tok.encode(doc.text);
}

// Deterministic synthetic entity names: syllable pairs first, then triples,
// always the same prefix of the same master list for a given n. None of them
// collide with the fixed attribute or question words.
inline std::vector<std::string> default_entities(int64_t n) {
  static const std::vector<std::string> onsets = {"ba", "ce", "di", "fo", "gu", "ha",
                                                  "jo", "ki", "lu", "me", "no", "pa"};
  static const std::vector<std::string> codas = {"ral", "sim", "ton", "ver", "lin",
                                                 "dor", "mak", "nes", "pol", "rud",
                                                 "set", "vim"};
  const int64_t pairs = static_cast<int64_t>(onsets.size() * codas.size());
  const int64_t triples = pairs * static_cast<int64_t>(onsets.size());
  require(n >= 1 && n <= pairs + triples,
          "default_entities: n out of range [1, " + std::to_string(pairs + triples) + "]");
  std::vector<std::string> names;
  for (const std::string& a : onsets)
    for (const std::string& b : codas) {
      if (static_cast<int64_t>(names.size()) == n) return names;
      names.push_back(a + b);
    }
  for (const std::string& a : onsets)
    for (const std::string& m : onsets)
      for (const std::string& b : codas) {
        if (static_cast<int64_t>(names.size()) == n) return names;
        names.push_back(a + m + b);
      }
  return names;
}

// Corpus on disk: documents.jsonl + gold.jsonl, one object per line. Tokens
// are not stored; re-encode after loading once a tokenizer exists.
inline void save_corpus(const fs::path& dir, const FactCorpus& corpus) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "documents.jsonl", std::ios::trunc);
    if (!out) fail("save_corpus: cannot write " + (dir / "documents.jsonl").string());
    for (const Document& doc : corpus.documents) {
      nlohmann::json j;
      j["doc_id"] = doc.doc_id;
      j["text"] = doc.text;
      out << j.dump() << "\n";
    }
  }
  std::ofstream out(dir / "gold.jsonl", std::ios::trunc);
  if (!out) fail("save_corpus: cannot write " + (dir / "gold.jsonl").string());
  for (size_t d = 0; d < corpus.documents.size(); ++d)
    for (const GoldQuestion& q : corpus.gold[d]) {
      nlohmann::json j;
      j["doc_id"] = corpus.documents[d].doc_id;
      j["question"] = q.question;
      j["options"] = q.options;
      j["correct"] = q.correct;
      out << j.dump() << "\n";
    }
}

inline FactCorpus load_corpus(const fs::path& dir) {
  FactCorpus corpus;
  std::unordered_map<std::string, size_t> position;
  {
    std::ifstream in(dir / "documents.jsonl");
    if (!in) fail("load_corpus: cannot read " + (dir / "documents.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      Document doc;
      doc.doc_id = j.at("doc_id").get<std::string>();
      doc.text = j.at("text").get<std::string>();
      if (position.count(doc.doc_id))
        fail("load_corpus: duplicate doc_id '" + doc.doc_id + "'");
      position[doc.doc_id] = corpus.documents.size();
      corpus.documents.push_back(std::move(doc));
    }
  }
  corpus.gold.resize(corpus.documents.size());
  std::ifstream in(dir / "gold.jsonl");
  if (!in) fail("load_corpus: cannot read " + (dir / "gold.jsonl").string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    const std::string doc_id = j.at("doc_id").get<std::string>();
    auto it = position.find(doc_id);
    if (it == position.end())
      fail("load_corpus: gold question for unknown doc '" + doc_id + "'");
    GoldQuestion q;
    q.question = j.at("question").get<std::string>();
    q.options = j.at("options").get<std::vector<std::string>>();
    q.correct = j.at("correct").get<int>();
    require(q.options.size() == 4, "load_corpus: questions must have 4 options");
    require(q.correct >= 0 && q.correct < 4, "load_corpus: correct index out of range");
    corpus.gold[it->second].push_back(std::move(q));
  }
  return corpus;
}

}  // namespace km
