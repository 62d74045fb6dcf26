#pragma once

// Two tokenizer modes: byte-level (every byte is an id, lossless round-trip)
// and whitespace (vocabulary discovered from a corpus, unknowns map to unk).
// Special ids live above the byte range in byte mode and at the bottom of the
// vocabulary in whitespace mode.

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "km/common.hpp"

namespace km {

enum class TokenizerMode { kByte, kWhitespace };

class Tokenizer {
 public:
  static Tokenizer byte_level() {
    Tokenizer t;
    t.mode_ = TokenizerMode::kByte;
    t.bos_ = 256;
    t.eos_ = 257;
    t.pad_ = 258;
    t.unk_ = 259;  // unused in byte mode; kept so ids mean the same thing everywhere
    t.vocab_size_ = 260;
    return t;
  }

  static Tokenizer whitespace(std::vector<std::string> words) {
    Tokenizer t;
    t.mode_ = TokenizerMode::kWhitespace;
    t.pad_ = 0;
    t.bos_ = 1;
    t.eos_ = 2;
    t.unk_ = 3;
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    t.words_ = std::move(words);
    for (size_t i = 0; i < t.words_.size(); ++i)
      t.word_ids_[t.words_[i]] = static_cast<int>(i) + 4;
    t.vocab_size_ = static_cast<int>(t.words_.size()) + 4;
    return t;
  }

  // Whitespace vocabulary discovered from raw texts; sorted so ids are
  // independent of document order.
  static Tokenizer from_corpus(const std::vector<std::string>& texts) {
    std::set<std::string> seen;
    for (const auto& text : texts) {
      std::istringstream in(text);
      std::string w;
      while (in >> w) seen.insert(w);
    }
    return whitespace(std::vector<std::string>(seen.begin(), seen.end()));
  }

  std::vector<int> encode(const std::string& text, bool add_bos = false,
                          bool add_eos = false) const {
    std::vector<int> ids;
    if (add_bos) ids.push_back(bos_);
    if (mode_ == TokenizerMode::kByte) {
      for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    } else {
      std::istringstream in(text);
      std::string w;
      while (in >> w) {
        auto it = word_ids_.find(w);
        ids.push_back(it == word_ids_.end() ? unk_ : it->second);
      }
    }
    if (add_eos) ids.push_back(eos_);
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == bos_ || id == eos_ || id == pad_ || (mode_ == TokenizerMode::kWhitespace && id == unk_))
        continue;
      if (mode_ == TokenizerMode::kByte) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
      } else {
        int w = id - 4;
        if (w >= 0 && w < static_cast<int>(words_.size())) {
          if (!out.empty()) out.push_back(' ');
          out += words_[static_cast<size_t>(w)];
        }
      }
    }
    return out;
  }

  TokenizerMode mode() const { return mode_; }
  int vocab_size() const { return vocab_size_; }
  int bos_id() const { return bos_; }
  int eos_id() const { return eos_; }
  int pad_id() const { return pad_; }
  int unk_id() const { return unk_; }
  const std::vector<std::string>& words() const { return words_; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode_ == TokenizerMode::kByte ? "byte" : "whitespace";
    if (mode_ == TokenizerMode::kWhitespace) j["words"] = words_;
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "byte") return byte_level();
    if (mode == "whitespace")
      return whitespace(j.at("words").get<std::vector<std::string>>());
    throw std::invalid_argument("tokenizer: unknown mode '" + mode + "'");
  }

 private:
  TokenizerMode mode_ = TokenizerMode::kByte;
  int vocab_size_ = 0;
  int bos_ = 0, eos_ = 0, pad_ = 0, unk_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> word_ids_;
};

}  // namespace km
