#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bitemp/evaluate.hpp"
#include "bitemp/model.hpp"
#include "bitemp/objective.hpp"
#include "bitemp/optim.hpp"

namespace bitemp {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double target_lr = 1e-4;
  double warmup_fraction = 0.05;
  AdamWConfig adam;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t hard_negatives = 0;  // m per anchor, 0 = off
  LossConfig loss;
  BackboneFinetune finetune = BackboneFinetune::full;
  std::size_t max_steps = 0;  // 0 = no cap
  std::size_t eval_batch = 64;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (!(target_lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) throw ConfigError("warmup fraction must lie in [0,1]");
    if (hard_negatives + 1 > batch_size)
      throw ConfigError("batch size " + std::to_string(batch_size) + " cannot hold an anchor and " +
                        std::to_string(hard_negatives) + " hard negatives");
    loss.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_r5 = 0, lr = 0;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_r5"] = r.val_r5;
  j["lr"] = r.lr;
  return j;
}

template <typename T>
struct BatchLoss {
  ag::Var<T> total, caption, contrastive;
};

// Caption similarity vectors for every (item, caption), used to flag false
// negatives inside a batch.
inline std::vector<std::vector<SimVector>> caption_similarity_table(const std::vector<Sample>& samples,
                                                                    const SimilarityProvider& provider = BowSimilarity()) {
  std::vector<std::vector<SimVector>> out;
  for (const auto& s : samples) out.push_back(compute_similarity_embeddings(s.captions, provider));
  return out;
}

// Forward pass and joint loss for one batch.
template <typename T>
BatchLoss<T> batch_loss(ag::Tape<T>& tape, const Model<T>& model, const std::vector<Sample>& samples,
                        const std::vector<std::vector<SimVector>>& sims, const Batch& batch, const LossConfig& loss) {
  std::vector<const ImagePair*> pairs;
  std::vector<std::string> texts;
  std::vector<std::int64_t> labels;
  std::vector<SimVector> t;
  for (const auto& e : batch) {
    const auto& s = samples.at(e.item);
    pairs.push_back(&s.pair);
    texts.push_back(s.captions.at(e.caption));
    labels.push_back(s.pair.pair_id);
    t.push_back(sims.at(e.item).at(e.caption));
  }
  auto [before, after] = image_tensors<T>(pairs);
  auto enc = model.encoder().encode(tape, before, after);
  const auto tb = encode_captions(model.vocab(), texts, model.config().decoder.max_len);
  auto st = model.decoder().unimodal_forward(tape, model.decoder().embed_tokens(tape, tb.ids, tb.batch), tb.lengths);
  auto logits = model.decoder().multimodal_forward(tape, st.s_seq, enc.e_cap);
  auto cap = ag::caption_loss(tape, logits, tb.ids);
  const auto pl = build_pair_labels(labels, t, loss.theta, loss.mode);
  ag::Var<T> con;
  if (loss.lambda > 0) {
    con = ag::info_nce(tape, enc.e_con, st.s_end, pl, loss.tau);
  } else {
    // reported only; no gradient reaches the contrastive path
    con = tape.constant(Tensor<T>(Shape{1}, {static_cast<T>(
                                                 info_nce_value(enc.e_con->value, st.s_end->value, pl, loss.tau))}));
  }
  return {ag::total_loss(tape, cap, con, loss.lambda), cap, con};
}

// Fixed, order-preserving batches using caption 0 (validation / reporting).
inline std::vector<Batch> eval_batches(std::size_t n, std::size_t batch_size) {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    Batch b;
    for (std::size_t j = i; j < std::min(n, i + batch_size); ++j) b.push_back({j, 0, true});
    if (b.size() == 1 && !out.empty()) out.back().push_back(b.front());
    else out.push_back(std::move(b));
  }
  return out;
}

struct DatasetLoss {
  double total = 0, caption = 0, contrastive = 0;
};

template <typename T>
DatasetLoss dataset_loss(const Model<T>& model, const std::vector<Sample>& samples, const LossConfig& loss,
                         std::size_t batch_size) {
  const auto sims = caption_similarity_table(samples);
  DatasetLoss out;
  const auto batches = eval_batches(samples.size(), batch_size);
  for (const auto& b : batches) {
    ag::Tape<T> tape;
    tape.set_grad_enabled(false);
    auto l = batch_loss(tape, model, samples, sims, b, loss);
    out.total += static_cast<double>(l.total->value[0]);
    out.caption += static_cast<double>(l.caption->value[0]);
    out.contrastive += static_cast<double>(l.contrastive->value[0]);
  }
  const double nb = static_cast<double>(batches.size());
  out.total /= nb;
  out.caption /= nb;
  out.contrastive /= nb;
  return out;
}

// For every anchor (caption 0 as query) the m most similar image pairs that
// are not relevant to it. Exhaustive; ties go to the smaller pair id.
template <typename T>
HardNegativePlan mine_hard_negatives(const Tensor<T>& query_emb, const Tensor<T>& item_emb,
                                     const std::vector<Sample>& samples, std::size_t m, double theta) {
  if (m == 0 || m >= samples.size()) throw ConfigError("hard-negative count must lie in [1, dataset size)");
  std::vector<std::int64_t> ids;
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ids.push_back(samples[i].pair.pair_id);
    index[ids.back()] = i;
  }
  const auto ranked = rank_items(query_emb, item_emb, ids);
  const auto rel = relevance_sets(samples, theta);
  HardNegativePlan plan;
  plan.negatives.resize(samples.size());
  for (std::size_t a = 0; a < samples.size(); ++a)
    for (std::int64_t id : ranked[a]) {
      if (plan.negatives[a].size() >= m) break;
      if (!rel[a].count(id)) plan.negatives[a].push_back(index.at(id));
    }
  return plan;
}

template <typename T>
HardNegativePlan mine_hard_negatives(const Model<T>& model, const std::vector<Sample>& samples, std::size_t m,
                                     double theta) {
  if (m == 0) throw ConfigError("hard-negative count must be at least 1");
  if (m >= samples.size())
    throw ConfigError("hard-negative count " + std::to_string(m) + " must be smaller than the dataset (" +
                      std::to_string(samples.size()) + ")");
  std::vector<const ImagePair*> pairs;
  std::vector<std::string> queries;
  for (const auto& s : samples) {
    pairs.push_back(&s.pair);
    queries.push_back(s.captions.at(0));
  }
  return mine_hard_negatives(embed_captions(model, queries), embed_pairs(model, pairs), samples, m, theta);
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size, std::size_t m) {
  const std::size_t per = m == 0 ? batch_size : std::max<std::size_t>(1, batch_size / (1 + m));
  std::size_t nb = (n + per - 1) / per;
  if (nb > 1 && n % per == 1) --nb;
  return std::max<std::size_t>(1, nb);
}

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::size_t steps = 0;
};

struct TrainOutput {
  std::string run_dir;  // empty: nothing written
  bool quiet = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Joint training. The model ends up holding the parameters of the epoch with
// the lowest validation loss (training loss when val is empty).
template <typename T>
TrainResult train(Model<T>& model, const TrainConfig& cfg, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainOutput& out = {}) {
  cfg.validate();
  if (train_set.size() < 2) throw ValidationError("training needs at least 2 items");
  model.apply_finetune(cfg.finetune);
  AdamW<T> opt(model.params(), cfg.adam);
  const auto sims = caption_similarity_table(train_set);

  std::size_t total_steps = cfg.epochs * batches_per_epoch(train_set.size(), cfg.batch_size, cfg.hard_negatives);
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
  const auto warmup = static_cast<std::size_t>(std::lround(cfg.warmup_fraction * static_cast<double>(total_steps)));

  std::ofstream log_os;
  if (!out.run_dir.empty()) {
    std::filesystem::create_directories(out.run_dir);
    log_os.open(std::filesystem::path(out.run_dir) / "metrics.jsonl");
    if (!log_os) throw IoError("cannot write metrics log in " + out.run_dir);
  }

  TrainResult res;
  std::vector<Tensor<T>> best;
  bool have_best = false;
  std::size_t step = 0;
  double lr = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && (cfg.max_steps == 0 || step < cfg.max_steps); ++epoch) {
    HardNegativePlan plan;
    if (cfg.hard_negatives > 0) plan = mine_hard_negatives(model, train_set, cfg.hard_negatives, cfg.loss.theta);
    const auto batches = make_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch, &plan);
    double sum = 0;
    std::size_t nb = 0;
    for (const auto& b : batches) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      model.params().zero_grad();
      ag::Tape<T> tape;
      auto l = batch_loss(tape, model, train_set, sims, b, cfg.loss);
      const double v = static_cast<double>(l.total->value[0]);
      if (!std::isfinite(v)) {
        nlohmann::json dump;
        dump["epoch"] = epoch;
        dump["step"] = step;
        dump["caption_loss"] = static_cast<double>(l.caption->value[0]);
        dump["contrastive_loss"] = static_cast<double>(l.contrastive->value[0]);
        for (const auto& e : b)
          dump["batch"].push_back({{"pair_id", train_set[e.item].pair.pair_id},
                                   {"caption", train_set[e.item].captions[e.caption]}});
        std::string where;
        if (!out.run_dir.empty()) {
          where = (std::filesystem::path(out.run_dir) / "nan_batch.json").string();
          std::ofstream(where) << dump.dump(2) << '\n';
        }
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           (where.empty() ? ": " + dump.dump() : "; batch dumped to " + where));
      }
      tape.backward(l.total);
      clip_grad_norm(model.params(), cfg.clip_norm);
      lr = lr_schedule(step + 1, warmup, cfg.target_lr);
      opt.step(lr);
      sum += v;
      ++nb;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = nb ? sum / static_cast<double>(nb) : 0.0;
    rec.lr = lr;
    const auto& sel = val_set.empty() ? train_set : val_set;
    rec.val_loss = dataset_loss(model, sel, cfg.loss, cfg.eval_batch).total;
    rec.val_r5 = evaluate_retrieval(model, sel, cfg.loss.theta, {5}).at(5).recall;
    res.log.push_back(rec);
    if (log_os) log_os << to_json(rec).dump() << '\n' << std::flush;
    if (out.on_epoch) out.on_epoch(rec);
    if (!have_best || rec.val_loss <= res.best_val_loss) {
      have_best = true;
      res.best_val_loss = rec.val_loss;
      res.best_epoch = rec.epoch;
      best.clear();
      for (const auto& p : model.params().all()) best.push_back(p.var->value);
    }
  }
  res.steps = step;
  for (std::size_t i = 0; i < best.size(); ++i) model.params().all()[i].var->value = best[i];
  if (!out.run_dir.empty())
    save_checkpoint(model, (std::filesystem::path(out.run_dir) / "best.ckpt").string(),
                    {{"best_epoch", res.best_epoch}, {"best_val_loss", res.best_val_loss}, {"steps", res.steps}});
  return res;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// gradient is ~0 from turning rounding noise into a huge relative error:
// attention key biases, for one, have an identically zero gradient while the
// central difference of an O(10) loss at h = 1e-5 carries ~1e-10 of noise.
// Below the floor the check is effectively absolute (floor * tolerance).
inline constexpr double kGradCheckFloor = 1e-4;

inline double relative_error(double a, double n, double floor = kGradCheckFloor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences of loss_fn at the given (param, index) coordinates.
template <typename LossFn>
GradCheckReport gradient_check(const std::vector<std::pair<std::string, ag::Var<double>>>& params,
                               const std::vector<std::pair<std::size_t, std::size_t>>& coords, LossFn&& loss_fn,
                               double h = 1e-5, double floor = kGradCheckFloor) {
  for (const auto& [n, v] : params)
    if (v->requires_grad) v->grad = Tensor<double>();
  {
    ag::Tape<double> tape;
    auto l = loss_fn(tape);
    tape.backward(l);
  }
  GradCheckReport rep;
  for (const auto& [pi, idx] : coords) {
    const auto& [name, v] = params.at(pi);
    const double analytic = v->has_grad() ? v->grad[idx] : 0.0;
    const double orig = v->value[idx];
    auto eval = [&](double x) {
      v->value[idx] = x;
      ag::Tape<double> tape;
      tape.set_grad_enabled(false);
      return loss_fn(tape)->value[0];
    };
    const double numeric = (eval(orig + h) - eval(orig - h)) / (2 * h);
    v->value[idx] = orig;
    GradCheckEntry e{name, idx, analytic, numeric, relative_error(analytic, numeric, floor)};
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    rep.entries.push_back(e);
  }
  return rep;
}

// Samples `count` coordinates over the model's trainable parameters (cycling
// through parameters so every module is covered) and checks the joint loss
// on one batch.
inline GradCheckReport finite_difference_check(Model<double>& model, const std::vector<Sample>& samples,
                                               const LossConfig& loss, std::size_t count, std::uint64_t seed,
                                               double h = 1e-5, double floor = kGradCheckFloor) {
  const auto sims = caption_similarity_table(samples);
  Batch batch;
  for (std::size_t i = 0; i < samples.size(); ++i) batch.push_back({i, i % samples[i].captions.size(), true});
  std::vector<std::pair<std::string, ag::Var<double>>> params;
  for (const auto& p : model.params().all()) params.emplace_back(p.name, p.var);
  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::vector<std::size_t> order(params.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t pi = order[c % order.size()];
    coords.emplace_back(pi, rng.below(params[pi].second->value.size()));
  }
  return gradient_check(params, coords,
                        [&](ag::Tape<double>& tape) { return batch_loss(tape, model, samples, sims, batch, loss).total; },
                        h, floor);
}

}  // namespace bitemp
