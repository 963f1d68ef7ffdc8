#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "bitemp/errors.hpp"

namespace bitemp {

// Lowercase, whitespace split, terminal punctuation stripped from each word.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && std::ispunct(static_cast<unsigned char>(cur.back()))) cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) flush();
    else cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  flush();
  return out;
}

inline std::string normalize_text(const std::string& text) {
  std::string out;
  for (const auto& w : tokenize(text)) out += (out.empty() ? "" : " ") + w;
  return out;
}

class Vocabulary {
 public:
  static constexpr int pad = 0;
  static constexpr int start = 1;
  static constexpr int end = 2;
  static constexpr int unk = 3;
  static constexpr int num_specials = 4;

  Vocabulary() { reset_specials(); }

  // Words with count >= min_freq, ordered by (count desc, word asc).
  static Vocabulary build(const std::vector<std::string>& captions, int min_freq = 5) {
    if (captions.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, int> counts;
    for (const auto& c : captions)
      for (auto& w : tokenize(c)) ++counts[w];
    std::vector<std::pair<std::string, int>> kept;
    for (auto& [w, n] : counts)
      if (n >= min_freq) kept.emplace_back(w, n);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    v.min_freq_ = min_freq;
    for (auto& [w, n] : kept) v.push(w);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens, int min_freq = 5) {
    Vocabulary v;
    v.min_freq_ = min_freq;
    for (const auto& t : tokens) {
      if (v.token_to_id_.count(t)) throw ValidationError("duplicate vocabulary token '" + t + "'");
      v.push(t);
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }
  int min_freq() const { return min_freq_; }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk : it->second;
  }
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  // Non-special tokens in id order.
  std::vector<std::string> tokens() const {
    return {id_to_token_.begin() + num_specials, id_to_token_.end()};
  }

  // [start, body..., end, pad...] of exactly max_len ids; the body is cut to
  // max_len - 2 words.
  std::vector<int> encode(const std::string& text, std::size_t max_len) const {
    if (max_len < 3) throw ConfigError("encode: max_len must be at least 3");
    std::vector<int> ids{start};
    for (const auto& w : tokenize(text)) {
      if (ids.size() + 1 >= max_len) break;
      ids.push_back(id(w));
    }
    ids.push_back(end);
    ids.resize(max_len, pad);
    return ids;
  }

  // Body words only; decoding stops at the first end token.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      if (t == end) break;
      if (t == start || t == pad) continue;
      out += (out.empty() ? "" : " ") + token(t);
    }
    return out;
  }

  // One non-special token per line; line k holds id k + 4.
  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocabulary file " + path);
    for (std::size_t i = num_specials; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read vocabulary file " + path);
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw ParseError(path + ":" + std::to_string(toks.size() + 1) + ": empty token line");
      toks.push_back(line);
    }
    return from_tokens(toks);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  void reset_specials() {
    id_to_token_ = {"<pad>", "<start>", "<end>", "<unk>"};
    token_to_id_.clear();
    for (int i = 0; i < num_specials; ++i) token_to_id_[id_to_token_[static_cast<std::size_t>(i)]] = i;
  }
  void push(const std::string& w) {
    token_to_id_[w] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(w);
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  int min_freq_ = 5;
};

}  // namespace bitemp
