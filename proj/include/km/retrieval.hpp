#pragma once

// RAG-lite, within-document retrieval. Documents are split into fixed-length
// passages, each embedded by mean-pooling the base model's last block output
// (no adapters attached, so rankings do not depend on which KM is loaded),
// and queries rank passages of one document by cosine similarity. There is
// deliberately no cross-document search and no ANN structure: documents at
// this scale hold a handful of passages, so ranking is an exact sort.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "km/model.hpp"
#include "km/serialize.hpp"
#include "km/synthdata.hpp"

namespace km {

inline constexpr int64_t kDefaultPassageLen = 256;
inline constexpr int64_t kDefaultTopK = 5;

struct Passage {
  std::string doc_id;
  int64_t index = 0;
  std::vector<int> tokens;
  std::vector<real> embedding;  // unit L2 norm
};

// Ordered, non-overlapping partition of the document's token stream. The
// final passage keeps whatever remainder is left, so concatenating the
// pieces reproduces the document exactly.
inline std::vector<Passage> split_passages(const Document& doc, int64_t passage_len) {
  require(passage_len >= 1, "split_passages: passage_len must be at least 1");
  std::vector<Passage> out;
  const int64_t total = static_cast<int64_t>(doc.tokens.size());
  for (int64_t start = 0; start < total; start += passage_len) {
    Passage p;
    p.doc_id = doc.doc_id;
    p.index = static_cast<int64_t>(out.size());
    const int64_t stop = std::min(start + passage_len, total);
    p.tokens.assign(doc.tokens.begin() + start, doc.tokens.begin() + stop);
    out.push_back(std::move(p));
  }
  return out;
}

// Mean of the last block's hidden states over positions, L2-normalized.
// Runs the bare model: adapters would make the index depend on training.
inline std::vector<real> embed(const std::vector<int>& tokens, const Model& model) {
  require(!tokens.empty(), "embed: tokens must be non-empty");
  NoGradGuard ng;
  ForwardOutput out = model.forward(tokens);
  const Tensor& hidden = out.hidden_states.back();  // [seq_len, d_model]
  const int64_t seq = hidden.shape()[0];
  const int64_t dim = hidden.shape()[1];
  std::vector<double> mean(static_cast<size_t>(dim), 0.0);
  for (int64_t t = 0; t < seq; ++t)
    for (int64_t d = 0; d < dim; ++d)
      mean[static_cast<size_t>(d)] += hidden.data()[static_cast<size_t>(t * dim + d)];
  double norm_sq = 0.0;
  for (double& v : mean) {
    v /= static_cast<double>(seq);
    norm_sq += v * v;
  }
  const double norm = std::sqrt(norm_sq);
  require(norm > 0.0, "embed: zero-norm hidden state");
  std::vector<real> unit(static_cast<size_t>(dim));
  for (size_t d = 0; d < unit.size(); ++d)
    unit[d] = static_cast<real>(mean[d] / norm);
  return unit;
}

inline double cosine(const std::vector<real>& a, const std::vector<real>& b) {
  require(a.size() == b.size(), "cosine: dimension mismatch");
  double dot = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return dot;  // inputs are unit vectors
}

class PassageIndex {
 public:
  void add(std::string doc_id, std::vector<Passage> passages) {
    require(docs_.find(doc_id) == docs_.end(),
            "index: doc '" + doc_id + "' already indexed");
    docs_.emplace(std::move(doc_id), std::move(passages));
  }

  bool has(const std::string& doc_id) const { return docs_.count(doc_id) > 0; }

  const std::vector<Passage>& passages(const std::string& doc_id) const {
    auto it = docs_.find(doc_id);
    if (it == docs_.end()) fail("index: unknown doc '" + doc_id + "'");
    return it->second;
  }

  std::vector<std::string> doc_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : docs_) ids.push_back(id);
    return ids;
  }

 private:
  std::map<std::string, std::vector<Passage>> docs_;
};

inline std::vector<Passage> index_document(const Document& doc, const Model& model,
                                           int64_t passage_len) {
  std::vector<Passage> passages = split_passages(doc, passage_len);
  for (Passage& p : passages) p.embedding = embed(p.tokens, model);
  return passages;
}

inline PassageIndex build_index(const std::vector<Document>& docs, const Model& model,
                                int64_t passage_len) {
  PassageIndex index;
  for (const Document& doc : docs)
    index.add(doc.doc_id, index_document(doc, model, passage_len));
  return index;
}

// Top-k passages of one document by cosine against a pre-computed question
// embedding, descending, ties broken toward the lower passage index.
inline std::vector<Passage> top_k_by_embedding(const std::vector<real>& question,
                                               const PassageIndex& index,
                                               const std::string& doc_id, int64_t k) {
  require(k >= 1, "top_k: k must be at least 1");
  const std::vector<Passage>& candidates = index.passages(doc_id);
  std::vector<std::pair<double, int64_t>> ranked;  // (cosine, passage index)
  for (const Passage& p : candidates)
    ranked.emplace_back(cosine(question, p.embedding), p.index);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const size_t take = std::min<size_t>(ranked.size(), static_cast<size_t>(k));
  std::vector<Passage> out;
  for (size_t i = 0; i < take; ++i)
    out.push_back(candidates[static_cast<size_t>(ranked[i].second)]);
  return out;
}

inline std::vector<Passage> top_k(const std::vector<int>& question_tokens,
                                  const PassageIndex& index, const std::string& doc_id,
                                  int64_t k, const Model& model) {
  return top_k_by_embedding(embed(question_tokens, model), index, doc_id, k);
}

// Retrieved context block for prompting: passages in rank order, a separator
// token after each one, so the question can be appended directly.
inline std::vector<int> rag_context(const std::vector<int>& question_tokens,
                                    const PassageIndex& index, const std::string& doc_id,
                                    int64_t k, const Model& model, int sep_id) {
  std::vector<int> out;
  for (const Passage& p : top_k(question_tokens, index, doc_id, k, model)) {
    out.insert(out.end(), p.tokens.begin(), p.tokens.end());
    out.push_back(sep_id);
  }
  return out;
}

// One bundle per document: the embedding matrix as a tensor, token lists in
// the manifest. Bit-exact round trip (embeddings travel as raw scalars).
inline void save_index(const fs::path& dir, const PassageIndex& index) {
  for (const std::string& doc_id : index.doc_ids()) {
    const std::vector<Passage>& passages = index.passages(doc_id);
    const int64_t n = static_cast<int64_t>(passages.size());
    const int64_t dim =
        passages.empty() ? 0 : static_cast<int64_t>(passages[0].embedding.size());
    Tensor embeddings = Tensor::zeros({n, dim});
    nlohmann::json token_lists = nlohmann::json::array();
    for (const Passage& p : passages) {
      require(static_cast<int64_t>(p.embedding.size()) == dim,
              "save_index: ragged embedding dimensions");
      std::copy(p.embedding.begin(), p.embedding.end(),
                embeddings.data().begin() + p.index * dim);
      token_lists.push_back(p.tokens);
    }
    nlohmann::json extra;
    extra["kind"] = "passage-index";
    extra["doc_id"] = doc_id;
    extra["passages"] = token_lists;
    save_bundle(dir / doc_id, {{"embeddings", embeddings}}, extra);
  }
}

inline PassageIndex load_index(const fs::path& dir) {
  PassageIndex index;
  std::vector<fs::path> doc_dirs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && bundle_exists(entry.path()))
      doc_dirs.push_back(entry.path());
  std::sort(doc_dirs.begin(), doc_dirs.end());
  for (const fs::path& doc_dir : doc_dirs) {
    Bundle bundle = load_bundle(doc_dir);
    if (bundle.extra.value("kind", "") != "passage-index")
      fail("load_index: " + doc_dir.string() + " is not a passage index");
    const std::string doc_id = bundle.extra.at("doc_id").get<std::string>();
    const Tensor& embeddings = bundle.at("embeddings");
    const int64_t dim = embeddings.shape()[1];
    std::vector<Passage> passages;
    for (const auto& tokens : bundle.extra.at("passages")) {
      Passage p;
      p.doc_id = doc_id;
      p.index = static_cast<int64_t>(passages.size());
      p.tokens = tokens.get<std::vector<int>>();
      p.embedding.assign(embeddings.data().begin() + p.index * dim,
                         embeddings.data().begin() + (p.index + 1) * dim);
      passages.push_back(std::move(p));
    }
    index.add(doc_id, std::move(passages));
  }
  return index;
}

}  // namespace km
