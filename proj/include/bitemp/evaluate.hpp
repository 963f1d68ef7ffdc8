#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bitemp/metrics.hpp"
#include "bitemp/model.hpp"
#include "bitemp/objective.hpp"

namespace bitemp {

using RelevanceSet = std::set<std::int64_t>;

// Relevant items for query caption q_i: its own pair plus every pair with a
// caption whose similarity to q_i reaches theta.
inline std::vector<RelevanceSet> relevance_sets(const std::vector<std::string>& queries,
                                                const std::vector<std::int64_t>& query_ids,
                                                const std::vector<std::vector<std::string>>& item_captions,
                                                const std::vector<std::int64_t>& item_ids, double theta,
                                                const SimilarityProvider& provider = BowSimilarity()) {
  if (queries.size() != query_ids.size() || item_captions.size() != item_ids.size())
    throw ShapeError("relevance_sets: ids do not match captions");
  std::vector<std::string> flat;
  for (const auto& caps : item_captions) flat.insert(flat.end(), caps.begin(), caps.end());
  const auto item_vecs = compute_similarity_embeddings(flat, provider);
  const auto query_vecs = compute_similarity_embeddings(queries, provider);
  std::vector<RelevanceSet> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    out[q].insert(query_ids[q]);
    std::size_t off = 0;
    for (std::size_t j = 0; j < item_captions.size(); ++j) {
      for (std::size_t c = 0; c < item_captions[j].size(); ++c)
        if (cosine(query_vecs[q], item_vecs[off + c]) >= theta) {
          out[q].insert(item_ids[j]);
          break;
        }
      off += item_captions[j].size();
    }
  }
  return out;
}

inline std::vector<RelevanceSet> relevance_sets(const std::vector<Sample>& samples, double theta,
                                                const SimilarityProvider& provider = BowSimilarity()) {
  std::vector<std::string> queries;
  std::vector<std::int64_t> ids;
  std::vector<std::vector<std::string>> caps;
  for (const auto& s : samples) {
    queries.push_back(s.captions.at(0));
    ids.push_back(s.pair.pair_id);
    caps.push_back(s.captions);
  }
  return relevance_sets(queries, ids, caps, ids, theta, provider);
}

// Items ordered by descending cosine (rows are unit vectors); ties go to the
// smaller pair id.
template <typename T>
std::vector<std::vector<std::int64_t>> rank_items(const Tensor<T>& queries, const Tensor<T>& items,
                                                  const std::vector<std::int64_t>& item_ids,
                                                  std::vector<std::vector<double>>* scores = nullptr) {
  require_shape(items.rows() == item_ids.size() && queries.cols() == items.cols(), "rank_items: shape mismatch");
  const RowMat<T> sim = queries.mat() * items.mat().transpose();
  std::vector<std::vector<std::int64_t>> out(queries.rows());
  if (scores) scores->assign(queries.rows(), {});
  std::vector<std::size_t> order(item_ids.size());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const T sa = sim(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(a));
      const T sb = sim(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(b));
      return sa != sb ? sa > sb : item_ids[a] < item_ids[b];
    });
    for (std::size_t i : order) {
      out[q].push_back(item_ids[i]);
      if (scores) (*scores)[q].push_back(static_cast<double>(sim(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i))));
    }
  }
  return out;
}

struct RetrievalScores {
  double precision = 0, recall = 0, mrr = 0;
};

struct EvalReport {
  std::map<std::size_t, RetrievalScores> retrieval;  // by k
  bool has_captioning = false;
  std::array<double, 4> bleu{};
  double rouge_l = 0, cider = 0;
  std::size_t exact_match = 0, items = 0;

  // One "key: value" line per metric, x100 with 2 decimals.
  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    for (const auto& [k, r] : retrieval)
      os << "P@" << k << ": " << r.precision << "\nR@" << k << ": " << r.recall << "\nMRR@" << k << ": " << r.mrr
         << '\n';
    if (has_captioning) {
      for (std::size_t n = 0; n < 4; ++n) os << "BLEU-" << n + 1 << ": " << bleu[n] << '\n';
      os << "ROUGE-L: " << rouge_l << "\nCIDEr: " << cider << '\n';
    }
    return os.str();
  }
};

// Retrieval metrics from precomputed rankings.
inline std::map<std::size_t, RetrievalScores> score_rankings(const std::vector<std::vector<std::int64_t>>& ranked,
                                                             const std::vector<RelevanceSet>& relevant,
                                                             const std::vector<std::size_t>& ks) {
  std::map<std::size_t, RetrievalScores> out;
  const double q = static_cast<double>(ranked.size());
  for (std::size_t k : ks) {
    RetrievalScores r;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      r.precision += metrics::precision_at_k(ranked[i], relevant[i], k) / q;
      r.recall += metrics::recall_at_k(ranked[i], relevant[i], k) / q;
    }
    r.mrr = metrics::mrr_at_k(ranked, relevant, k);
    out[k] = r;
  }
  return out;
}

// Text-to-image retrieval: caption 0 of every item queries all items.
template <typename T>
std::map<std::size_t, RetrievalScores> evaluate_retrieval(const Model<T>& model, const std::vector<Sample>& samples,
                                                          double theta, const std::vector<std::size_t>& ks) {
  if (samples.empty()) throw ValidationError("evaluate_retrieval: empty dataset");
  std::vector<const ImagePair*> pairs;
  std::vector<std::string> queries;
  std::vector<std::int64_t> ids;
  for (const auto& s : samples) {
    pairs.push_back(&s.pair);
    queries.push_back(s.captions.at(0));
    ids.push_back(s.pair.pair_id);
  }
  const auto ranked = rank_items(embed_captions(model, queries), embed_pairs(model, pairs), ids);
  return score_rankings(ranked, relevance_sets(samples, theta), ks);
}

struct CaptionEval {
  std::vector<std::string> generated;
  std::array<double, 4> bleu{};
  double rouge_l = 0, cider = 0;
  std::size_t exact_match = 0;
};

inline CaptionEval score_captions(std::vector<std::string> generated, const std::vector<Sample>& samples) {
  CaptionEval ev;
  std::vector<std::vector<std::string>> refs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<std::string> r;
    for (const auto& c : samples[i].captions) r.push_back(normalize_text(c));
    if (std::find(r.begin(), r.end(), normalize_text(generated[i])) != r.end()) ++ev.exact_match;
    refs.push_back(std::move(r));
  }
  ev.bleu = metrics::bleu(generated, refs);
  ev.rouge_l = metrics::rouge_l_corpus(generated, refs);
  ev.cider = generated.size() >= 2 ? metrics::cider(generated, refs) : 0.0;
  ev.generated = std::move(generated);
  return ev;
}

// Greedy captions scored against all five references.
template <typename T>
CaptionEval evaluate_captioning(const Model<T>& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ValidationError("evaluate_captioning: empty dataset");
  std::vector<const ImagePair*> pairs;
  for (const auto& s : samples) pairs.push_back(&s.pair);
  return score_captions(generate_captions(model, pairs), samples);
}

}  // namespace bitemp
