#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "bitemp/ops.hpp"
#include "bitemp/vocab.hpp"

namespace bitemp {

enum class FnMode { none, fne, fna };

inline const char* to_string(FnMode m) {
  switch (m) {
    case FnMode::none: return "none";
    case FnMode::fne: return "fne";
    case FnMode::fna: return "fna";
  }
  return "none";
}

inline FnMode parse_fn_mode(const std::string& s) {
  if (s == "none") return FnMode::none;
  if (s == "fne") return FnMode::fne;
  if (s == "fna") return FnMode::fna;
  throw ConfigError("unknown false-negative mode '" + s + "' (expected none, fne or fna)");
}

struct LossConfig {
  double tau = 0.01;
  double theta = 1.0;
  FnMode mode = FnMode::none;
  double lambda = 1.0;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(theta > 0.0 && theta <= 1.0)) throw ConfigError("theta must lie in (0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Caption similarity

// Sparse embedding: sorted (term, weight) entries. Cosine is computed from the
// raw weights, so integer-count vectors that are equal (or proportional) give
// exactly 1.0.
struct SimVector {
  std::vector<std::pair<std::string, double>> entries;

  double squared_norm() const {
    double s = 0;
    for (const auto& e : entries) s += e.second * e.second;
    return s;
  }

  // Unit-norm copy of the weights, in entry order.
  std::vector<double> unit_weights() const {
    const double n = std::sqrt(squared_norm());
    std::vector<double> out;
    for (const auto& e : entries) out.push_back(n > 0 ? e.second / n : 0.0);
    return out;
  }

  friend bool operator==(const SimVector&, const SimVector&) = default;
};

inline double cosine(const SimVector& a, const SimVector& b) {
  double dot = 0;
  auto i = a.entries.begin();
  auto j = b.entries.begin();
  while (i != a.entries.end() && j != b.entries.end()) {
    if (i->first < j->first) ++i;
    else if (j->first < i->first) ++j;
    else {
      dot += i->second * j->second;
      ++i;
      ++j;
    }
  }
  const double den = std::sqrt(a.squared_norm() * b.squared_norm());
  if (den == 0.0) return 0.0;
  return std::clamp(dot / den, -1.0, 1.0);
}

class SimilarityProvider {
 public:
  virtual ~SimilarityProvider() = default;
  virtual SimVector embed(const std::string& text) const = 0;
  virtual std::string name() const = 0;
};

// Bag of content words (stopwords removed), counts as weights.
class BowSimilarity final : public SimilarityProvider {
 public:
  BowSimilarity()
      : stop_{"a",    "an",   "the",  "is",   "are", "was",  "were", "be", "been", "being", "has", "have",
              "had",  "at",   "in",   "on",   "of",  "to",   "there", "scene", "as", "and",   "with", "this",
              "that", "it",   "its",  "from", "by",  "into", "for"} {}

  explicit BowSimilarity(std::set<std::string> stopwords) : stop_(std::move(stopwords)) {}

  SimVector embed(const std::string& text) const override {
    std::map<std::string, double> counts;
    for (const auto& w : tokenize(text))
      if (!stop_.count(w)) counts[w] += 1.0;
    SimVector v;
    v.entries.assign(counts.begin(), counts.end());
    return v;
  }

  std::string name() const override { return "bow"; }
  const std::set<std::string>& stopwords() const { return stop_; }

 private:
  std::set<std::string> stop_;
};

// Memoizes provider outputs per caption text; safe for concurrent readers.
class SimilarityCache {
 public:
  explicit SimilarityCache(std::shared_ptr<const SimilarityProvider> provider) : provider_(std::move(provider)) {}

  const SimVector& get(const std::string& text) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(text);
    if (it == cache_.end()) it = cache_.emplace(text, provider_->embed(text)).first;
    return it->second;
  }

  std::vector<SimVector> embed_all(const std::vector<std::string>& texts) const {
    std::vector<SimVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(get(t));
    return out;
  }

  const SimilarityProvider& provider() const { return *provider_; }

 private:
  std::shared_ptr<const SimilarityProvider> provider_;
  mutable std::mutex mu_;
  mutable std::unordered_map<std::string, SimVector> cache_;
};

inline std::vector<SimVector> compute_similarity_embeddings(const std::vector<std::string>& captions,
                                                            const SimilarityProvider& provider = BowSimilarity()) {
  std::unordered_map<std::string, SimVector> memo;
  std::vector<SimVector> out;
  out.reserve(captions.size());
  for (const auto& c : captions) {
    auto it = memo.find(c);
    if (it == memo.end()) it = memo.emplace(c, provider.embed(c)).first;
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive label assignment

enum class PairStatus : std::uint8_t { negative = 0, positive = 1, excluded = 2 };

struct PairLabelMatrix {
  std::size_t n = 0;
  std::vector<PairStatus> status;  // row-major n x n; row = image pair, col = caption

  PairLabelMatrix() = default;
  explicit PairLabelMatrix(std::size_t size) : n(size), status(size * size, PairStatus::negative) {}

  PairStatus operator()(std::size_t i, std::size_t j) const { return status[i * n + j]; }
  PairStatus& operator()(std::size_t i, std::size_t j) { return status[i * n + j]; }

  std::size_t count(PairStatus s) const { return static_cast<std::size_t>(std::count(status.begin(), status.end(), s)); }
  friend bool operator==(const PairLabelMatrix&, const PairLabelMatrix&) = default;
};

// Base rule: positive iff same pair label. A detected false negative
// (different labels, caption similarity >= theta) is excluded under FNE and
// promoted to positive under FNA.
inline PairLabelMatrix build_pair_labels(const std::vector<std::int64_t>& labels, const std::vector<SimVector>& t,
                                         double theta, FnMode mode) {
  if (labels.size() != t.size())
    throw ShapeError("build_pair_labels: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(t.size()) + " caption embeddings");
  const std::size_t n = labels.size();
  PairLabelMatrix m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (labels[i] == labels[j]) {
        m(i, j) = PairStatus::positive;
        continue;
      }
      if (mode == FnMode::none || i == j) continue;
      if (cosine(t[i], t[j]) >= theta) m(i, j) = mode == FnMode::fne ? PairStatus::excluded : PairStatus::positive;
    }
  return m;
}

// Largest caption similarity between entries with different pair labels.
inline double max_off_diagonal_similarity(const std::vector<std::int64_t>& labels, const std::vector<SimVector>& t) {
  double best = -1.0;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = 0; j < t.size(); ++j)
      if (labels[i] != labels[j]) best = std::max(best, cosine(t[i], t[j]));
  return best;
}

namespace ag {

// Symmetric multi-positive InfoNCE on already-normalized rows e {N, D},
// s {N, D}. Excluded pairs leave both the numerator set and the denominator.
template <typename T>
Var<T> info_nce_normalized(Tape<T>& tape, const Var<T>& e, const Var<T>& s, const PairLabelMatrix& labels, double tau) {
  const std::size_t n = e->value.rows(), d = e->value.cols();
  require_shape(s->value.rows() == n && s->value.cols() == d && labels.n == n,
                "info_nce: " + shape_str(e->value.shape) + " vs " + shape_str(s->value.shape) + " with " +
                    std::to_string(labels.n) + " labels");
  if (!(tau > 0)) throw ConfigError("info_nce: tau must be positive");
  const T unit_tol = sizeof(T) >= 8 ? T(1e-9) : T(1e-4);
  for (const auto* v : {&e, &s})
    for (std::size_t r = 0; r < n; ++r) {
      T sq = 0;
      for (std::size_t j = 0; j < d; ++j) sq += (*v)->value.at(r, j) * (*v)->value.at(r, j);
      if (std::abs(std::sqrt(sq) - T(1)) > unit_tol)
        throw NumericError("info_nce: embedding row " + std::to_string(r) + " is not unit norm");
    }

  RowMat<T> sim = (e->value.mat() * s->value.mat().transpose()) / T(tau);
  auto dsim = std::make_shared<RowMat<T>>(RowMat<T>::Zero(n, n));
  T total = 0;
  // dir 0: rows (image -> caption), dir 1: columns (caption -> image)
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t a = 0; a < n; ++a) {
      auto at = [&](std::size_t b) -> T { return dir == 0 ? sim(a, b) : sim(b, a); };
      auto st = [&](std::size_t b) { return dir == 0 ? labels(a, b) : labels(b, a); };
      std::size_t npos = 0;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t b = 0; b < n; ++b) {
        if (st(b) == PairStatus::positive) ++npos;
        if (st(b) != PairStatus::excluded) mx = std::max(mx, at(b));
      }
      if (npos == 0)
        throw DegenerateBatchError("info_nce: " + std::string(dir == 0 ? "row " : "column ") + std::to_string(a) +
                                   " has no positive pair");
      T z = 0;
      for (std::size_t b = 0; b < n; ++b)
        if (st(b) != PairStatus::excluded) z += std::exp(at(b) - mx);
      const T lz = mx + std::log(z);
      T pos_sum = 0;
      for (std::size_t b = 0; b < n; ++b)
        if (st(b) == PairStatus::positive) pos_sum += at(b);
      total += lz - pos_sum / T(npos);
      for (std::size_t b = 0; b < n; ++b) {
        T g = 0;
        if (st(b) != PairStatus::excluded) g += std::exp(at(b) - lz);
        if (st(b) == PairStatus::positive) g -= T(1) / T(npos);
        (dir == 0 ? (*dsim)(a, b) : (*dsim)(b, a)) += g / T(n);
      }
    }
  Tensor<T> out(Shape{1});
  out[0] = total / T(n);
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&e, &s}));
  if (o->requires_grad) {
    tape.record([e, s, o, dsim, tau] {
      if (!o->has_grad()) return;
      const T k = o->grad[0] / T(tau);
      if (e->requires_grad) e->grad_mat().noalias() += k * (*dsim) * s->value.mat();
      if (s->requires_grad) s->grad_mat().noalias() += k * dsim->transpose() * e->value.mat();
    });
  }
  return o;
}

// Normalizes e and s row-wise, then applies the symmetric InfoNCE loss.
template <typename T>
Var<T> info_nce(Tape<T>& tape, const Var<T>& e, const Var<T>& s, const PairLabelMatrix& labels, double tau) {
  return info_nce_normalized(tape, normalize_rows(tape, e), normalize_rows(tape, s), labels, tau);
}

// Teacher-forced caption NLL: logits {B, n, V} at position i predict token
// i + 1 of ids {B, n}; positions whose target is pad are masked out.
template <typename T>
Var<T> caption_loss(Tape<T>& tape, const Var<T>& logits, const std::vector<int>& ids, int pad_id = Vocabulary::pad) {
  const std::size_t rows = logits->value.rows();
  require_shape(ids.size() == rows, "caption_loss: ids do not match logits rows");
  const auto& sh = logits->value.shape;
  require_shape(sh.size() == 3, "caption_loss: logits must be {B,n,V}");
  const std::size_t n = sh[1];
  std::vector<int> targets(rows, -1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (r % n == n - 1) continue;
    const int t = ids[r + 1];
    targets[r] = t == pad_id ? -1 : t;
  }
  return cross_entropy(tape, logits, targets);
}

// L = L_cap + lambda * L_con
template <typename T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& cap, const Var<T>& con, double lambda) {
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
  return add(tape, cap, scale(tape, con, T(lambda)));
}

}  // namespace ag

// Value-only convenience wrapper.
template <typename T>
double info_nce_value(const Tensor<T>& e, const Tensor<T>& s, const PairLabelMatrix& labels, double tau) {
  ag::Tape<T> tape;
  tape.set_grad_enabled(false);
  auto l = ag::info_nce(tape, tape.constant(e), tape.constant(s), labels, tau);
  return static_cast<double>(l->value[0]);
}

}  // namespace bitemp
