#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bitemp/errors.hpp"

// Retrieval and caption-quality metrics. All scores are on a x100 scale.
// Caption metrics follow the usual COCO caption-evaluation conventions; input
// sentences are split on whitespace, so pass them already normalized.
namespace bitemp::metrics {

// --- retrieval -------------------------------------------------------------

// Ranks shorter than k count the missing slots as misses.
inline std::size_t hits_at_k(const std::vector<std::int64_t>& ranked, const std::set<std::int64_t>& relevant,
                             std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += relevant.count(ranked[i]);
  return hits;
}

inline double precision_at_k(const std::vector<std::int64_t>& ranked, const std::set<std::int64_t>& relevant,
                             std::size_t k) {
  if (k == 0) throw ConfigError("precision_at_k: k must be at least 1");
  return 100.0 * static_cast<double>(hits_at_k(ranked, relevant, k)) / static_cast<double>(k);
}

inline double recall_at_k(const std::vector<std::int64_t>& ranked, const std::set<std::int64_t>& relevant,
                          std::size_t k) {
  if (k == 0) throw ConfigError("recall_at_k: k must be at least 1");
  if (relevant.empty()) throw ValidationError("recall_at_k: empty relevant set");
  return 100.0 * static_cast<double>(hits_at_k(ranked, relevant, k)) / static_cast<double>(relevant.size());
}

inline double reciprocal_rank_at_k(const std::vector<std::int64_t>& ranked, const std::set<std::int64_t>& relevant,
                                   std::size_t k) {
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i)
    if (relevant.count(ranked[i])) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

inline double mrr_at_k(const std::vector<std::vector<std::int64_t>>& ranked,
                       const std::vector<std::set<std::int64_t>>& relevant, std::size_t k) {
  if (ranked.empty() || ranked.size() != relevant.size())
    throw ValidationError("mrr_at_k: need one relevance set per query and at least one query");
  if (k == 0) throw ConfigError("mrr_at_k: k must be at least 1");
  double s = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) s += reciprocal_rank_at_k(ranked[q], relevant[q], k);
  return 100.0 * s / static_cast<double>(ranked.size());
}

// --- caption quality -------------------------------------------------------

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, int>;

inline NGramCounts ngram_counts(const std::vector<std::string>& w, std::size_t max_n) {
  NGramCounts c;
  for (std::size_t n = 1; n <= max_n; ++n)
    for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[NGram(w.begin() + static_cast<std::ptrdiff_t>(i),
                                                             w.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

// Corpus BLEU-1..4: clipped n-gram counts summed over the corpus, reference
// length = closest reference length per sentence (shorter wins a tie).
inline std::array<double, 4> bleu(const std::vector<std::string>& candidates,
                                  const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw ValidationError("bleu: candidate/reference count mismatch");
  constexpr double tiny = 1e-15, small = 1e-9;
  double testlen = 0, reflen = 0;
  std::array<double, 4> guess{}, correct{};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto cw = words(candidates[i]);
    NGramCounts maxref;
    std::size_t best_len = 0;
    long best_diff = -1;
    for (const auto& r : references[i]) {
      const auto rw = words(r);
      const long diff = std::labs(static_cast<long>(rw.size()) - static_cast<long>(cw.size()));
      if (best_diff < 0 || diff < best_diff || (diff == best_diff && rw.size() < best_len)) {
        best_diff = diff;
        best_len = rw.size();
      }
      for (const auto& [g, c] : ngram_counts(rw, 4)) maxref[g] = std::max(maxref[g], c);
    }
    testlen += static_cast<double>(cw.size());
    reflen += static_cast<double>(best_len);
    for (std::size_t k = 0; k < 4; ++k) guess[k] += static_cast<double>(std::max<long>(0, long(cw.size()) - long(k)));
    for (const auto& [g, c] : ngram_counts(cw, 4)) {
      auto it = maxref.find(g);
      if (it != maxref.end()) correct[g.size() - 1] += std::min(c, it->second);
    }
  }
  std::array<double, 4> out{};
  if (testlen == 0) return out;
  double prod = 1;
  const double ratio = (testlen + tiny) / (reflen + small);
  for (std::size_t k = 0; k < 4; ++k) {
    prod *= (correct[k] + tiny) / (guess[k] + small);
    double b = std::pow(prod, 1.0 / static_cast<double>(k + 1));
    if (ratio < 1) b *= std::exp(1.0 - 1.0 / ratio);
    out[k] = 100.0 * b;
  }
  return out;
}

inline double bleu_n(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references,
                     int n) {
  if (n < 1 || n > 4) throw ConfigError("bleu_n: n must lie in 1..4");
  return bleu(candidates, references)[static_cast<std::size_t>(n - 1)];
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS F-measure with beta = 1.2; precision and recall each take their best
// value across the references before they are combined.
inline double rouge_l(const std::string& candidate, const std::vector<std::string>& references) {
  constexpr double beta = 1.2;
  const auto cw = words(candidate);
  if (cw.empty() || references.empty()) return 0.0;
  double pmax = 0, rmax = 0;
  for (const auto& r : references) {
    const auto rw = words(r);
    if (rw.empty()) continue;
    const double l = static_cast<double>(lcs_length(cw, rw));
    pmax = std::max(pmax, l / static_cast<double>(cw.size()));
    rmax = std::max(rmax, l / static_cast<double>(rw.size()));
  }
  if (pmax == 0 || rmax == 0) return 0.0;
  return 100.0 * (1 + beta * beta) * pmax * rmax / (rmax + beta * beta * pmax);
}

inline double rouge_l_corpus(const std::vector<std::string>& candidates,
                             const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw ValidationError("rouge_l: candidate/reference count mismatch");
  if (candidates.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += rouge_l(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

// CIDEr-D: tf-idf n-gram vectors (n = 1..4), clipped candidate weights,
// Gaussian length penalty (sigma 6), x10. Document frequencies come from the
// reference sets, so a corpus needs at least two items.
inline double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) throw ValidationError("cider: candidate/reference count mismatch");
  if (candidates.size() < 2) throw ValidationError("cider: needs a corpus of at least 2 items");
  constexpr std::size_t N = 4;
  constexpr double sigma = 6.0;

  std::vector<std::vector<NGramCounts>> crefs(references.size());
  std::map<NGram, double> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::set<NGram> seen;
    for (const auto& r : references[i]) {
      crefs[i].push_back(ngram_counts(words(r), N));
      for (const auto& [g, c] : crefs[i].back()) seen.insert(g);
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double ref_len = std::log(static_cast<double>(references.size()));

  struct Vec {
    std::array<std::map<NGram, double>, N> v;
    std::array<double, N> norm{};
    double length = 0;  // bigram count
  };
  auto to_vec = [&](const NGramCounts& cnts) {
    Vec out;
    for (const auto& [g, tf] : cnts) {
      auto it = df.find(g);
      const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const std::size_t n = g.size() - 1;
      const double w = static_cast<double>(tf) * (ref_len - d);
      out.v[n][g] = w;
      out.norm[n] += w * w;
      if (n == 1) out.length += tf;
    }
    for (auto& x : out.norm) x = std::sqrt(x);
    return out;
  };

  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Vec h = to_vec(ngram_counts(words(candidates[i]), N));
    std::array<double, N> score{};
    for (const auto& rc : crefs[i]) {
      const Vec r = to_vec(rc);
      const double delta = h.length - r.length;
      for (std::size_t n = 0; n < N; ++n) {
        double val = 0;
        for (const auto& [g, hw] : h.v[n]) {
          auto it = r.v[n].find(g);
          if (it != r.v[n].end()) val += std::min(hw, it->second) * it->second;
        }
        if (h.norm[n] != 0 && r.norm[n] != 0) val /= h.norm[n] * r.norm[n];
        score[n] += val * std::exp(-(delta * delta) / (2 * sigma * sigma));
      }
    }
    double avg = 0;
    for (double s : score) avg += s;
    avg /= static_cast<double>(N);
    if (!references[i].empty()) avg /= static_cast<double>(references[i].size());
    total += avg * 10.0;
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

}  // namespace bitemp::metrics
