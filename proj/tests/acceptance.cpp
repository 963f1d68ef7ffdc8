// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria 1-5 and 9 are properties of the implementation and decide the exit
// code. Criteria 6-8 compare trained models against each other; their lines
// are reported as measured but do not change the exit code (see README).

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <set>

#include <json.hpp>

#include "bitemp/trainer.hpp"

using namespace bitemp;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::ofstream report_file;  // optional copy of every line, see main

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (report_file) report_file << line << std::endl;
}

bool report(int id, bool ok, const std::string& what, const std::string& detail) {
  emit(std::string(ok ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + ": " + what + " (" + detail + ")");
  return ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.encoder.image_size = 32;
  mc.encoder.backbone_channels = {4, 6, 8};
  mc.encoder.dim = 8;
  mc.encoder.heads = 2;
  mc.encoder.hsa_layers = 1;
  mc.encoder.ffn_dim = 12;
  mc.encoder.res_width = 6;
  mc.encoder.pool_heads = 2;
  mc.decoder.dim = 8;
  mc.decoder.heads = 2;
  mc.decoder.unimodal_layers = 1;
  mc.decoder.multimodal_layers = 1;
  mc.decoder.ffn_dim = 12;
  mc.decoder.max_len = 16;
  return mc;
}

// Model used for every training run below.
ModelConfig desk_config() {
  ModelConfig mc;
  mc.encoder.image_size = 32;
  mc.encoder.backbone_channels = {8, 16, 32};
  mc.encoder.dim = 32;
  mc.encoder.heads = 4;
  mc.encoder.hsa_layers = 1;
  mc.encoder.ffn_dim = 64;
  mc.encoder.res_width = 16;
  mc.encoder.pool_heads = 4;
  mc.decoder.dim = 32;
  mc.decoder.heads = 4;
  mc.decoder.unimodal_layers = 1;
  mc.decoder.multimodal_layers = 1;
  mc.decoder.ffn_dim = 64;
  mc.decoder.max_len = 20;
  return mc;
}

GeneratorConfig small_images() {
  GeneratorConfig g;
  g.image_size = 32;
  return g;
}

Vocabulary vocab_of(const std::vector<Sample>& samples) {
  std::vector<std::string> caps;
  for (const auto& s : samples) caps.insert(caps.end(), s.captions.begin(), s.captions.end());
  return Vocabulary::build(caps, 1);
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// ---------------------------------------------------------------------------

// Central differences at step 1e-5. A coordinate whose +-h window contains a
// ReLU kink gives a one-sided mix there; it is recognised by agreeing with the
// analytic value at a 100x smaller step, skipped, and replaced by a fresh one.
struct GradSuiteResult {
  std::size_t checked = 0, kinks = 0;
  double worst = 0;
  std::set<std::string> prefixes;
};

void check_mode(Model<double>& model, const std::vector<Sample>& samples, FnMode mode, Rng& rng,
                GradSuiteResult& out) {
  LossConfig loss;
  loss.tau = 0.1;
  loss.theta = 0.5;  // low enough that false negatives occur in this batch
  loss.mode = mode;
  const auto sims = caption_similarity_table(samples);
  Batch batch;
  for (std::size_t i = 0; i < samples.size(); ++i) batch.push_back({i, i % samples[i].captions.size(), true});
  auto value = [&] {
    ag::Tape<double> tape;
    tape.set_grad_enabled(false);
    return batch_loss(tape, model, samples, sims, batch, loss).total->value[0];
  };
  const auto params = model.params().all();
  for (const auto& p : params) p.var->grad = Tensor<double>();
  {
    ag::Tape<double> tape;
    auto l = batch_loss(tape, model, samples, sims, batch, loss).total;
    tape.backward(l);
  }
  std::size_t done = 0;
  while (done < 40) {
    const auto& p = params[rng.below(params.size())];
    const std::size_t idx = rng.below(p.var->value.size());
    const double analytic = p.var->has_grad() ? p.var->grad[idx] : 0.0;
    const double orig = p.var->value[idx];
    auto central = [&](double h) {
      p.var->value[idx] = orig + h;
      const double up = value();
      p.var->value[idx] = orig - h;
      const double down = value();
      p.var->value[idx] = orig;
      return (up - down) / (2 * h);
    };
    double err = relative_error(analytic, central(1e-5));
    if (err > 1e-5 && relative_error(analytic, central(1e-7)) <= 1e-6) {
      ++out.kinks;
      continue;
    }
    out.worst = std::max(out.worst, err);
    out.prefixes.insert(p.name.substr(0, 4));
    ++out.checked;
    ++done;
  }
}

bool gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(11);
  auto samples = to_samples(generate_corpus(6, 11, small_images()));
  for (auto& s : samples)  // continuous pixels keep ReLU inputs off exact zeros
    for (auto* img : {&s.pair.before, &s.pair.after})
      for (auto& v : img->pixels) v = static_cast<float>(rng.uniform(0, 1));
  Model<double> model(tiny_config(), vocab_of(samples), 12);
  // Zero-initialised biases put every unit fed by an all-zero patch exactly on
  // its ReLU kink; check at a generic point instead.
  for (const auto& p : model.params().all())
    for (auto& v : p.var->value.data) v += rng.uniform(-0.05, 0.05);
  GradSuiteResult res;
  for (auto mode : {FnMode::none, FnMode::fne, FnMode::fna}) check_mode(model, samples, mode, rng, res);
  const double secs = seconds_since(t0);
  const bool ok = res.checked >= 100 && res.worst <= 1e-5 && res.prefixes.count("enc.") &&
                  res.prefixes.count("dec.") && secs < 120;
  return report(1, ok, "gradient suite",
                fmt("%zu coordinates over 3 modes, max rel err %.2e, %zu kink coordinates replaced, %.1fs",
                    res.checked, res.worst, res.kinks, secs));
}

bool causality_suite() {
  Rng rng(21);
  const auto samples = to_samples(generate_corpus(4, 22, small_images()));
  Model<double> model(tiny_config(), vocab_of(samples), 23);
  const int vocab = static_cast<int>(model.vocab().size());
  double worst = 0;
  bool changed_after = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 3 + rng.below(13);
    const std::size_t i = rng.below(len - 1);
    std::vector<int> a(len), b;
    for (auto& id : a) id = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(vocab - 1)));
    b = a;
    for (std::size_t j = i + 1; j < len; ++j) b[j] = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(vocab - 1)));
    b[i + 1] = a[i + 1] % (vocab - 1) + 1;
    const auto before = random_tensor<double>({1, 32, 32, 3}, rng, 0, 1);
    const auto after = random_tensor<double>({1, 32, 32, 3}, rng, 0, 1);
    ag::Tape<double> tape;
    tape.set_grad_enabled(false);
    const auto enc = model.encoder().encode(tape, before, after);
    auto logits = [&](const std::vector<int>& ids) {
      auto st = model.decoder().unimodal_forward(tape, model.decoder().embed_tokens(tape, ids, 1), {len});
      return model.decoder().multimodal_forward(tape, st.s_seq, enc.e_cap)->value;
    };
    const auto la = logits(a), lb = logits(b);
    for (std::size_t r = 0; r <= i; ++r)
      for (std::size_t v = 0; v < la.cols(); ++v) worst = std::max(worst, std::abs(la.at(r, v) - lb.at(r, v)));
    bool moved = false;
    for (std::size_t v = 0; v < la.cols(); ++v) moved |= la.at(i + 1, v) != lb.at(i + 1, v);
    changed_after &= moved;
  }
  return report(2, worst <= 1e-6 && changed_after, "causality",
                fmt("50 inputs, max change before the edit %.2e", worst));
}

bool loss_equivalence() {
  Rng rng(31);
  std::vector<std::string> pool;
  for (const auto& f : change_facts())
    for (const auto& c : caption_templates(f)) pool.push_back(c);
  for (const auto& c : caption_templates(SceneSpec{})) pool.push_back(c);
  double worst = 0;
  std::size_t batches = 0;
  while (batches < 100) {
    const std::size_t n = 2 + rng.below(31);
    std::vector<std::string> caps;
    std::vector<std::int64_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
      caps.push_back(pool[rng.below(pool.size())]);
      labels.push_back(static_cast<std::int64_t>(i));
    }
    const auto t = compute_similarity_embeddings(caps);
    const double top = max_off_diagonal_similarity(labels, t);
    if (top >= 1.0) continue;  // identical meanings: no threshold can sit above
    const double theta = 0.5 * (top + 1.0);
    const auto e = random_tensor<double>({n, 16}, rng), s = random_tensor<double>({n, 16}, rng);
    std::vector<double> vals;
    for (auto mode : {FnMode::none, FnMode::fne, FnMode::fna}) {
      ag::Tape<double> tape;
      tape.set_grad_enabled(false);
      vals.push_back(
          ag::info_nce(tape, tape.constant(e), tape.constant(s), build_pair_labels(labels, t, theta, mode), 0.05)
              ->value[0]);
    }
    worst = std::max({worst, std::abs(vals[0] - vals[1]), std::abs(vals[0] - vals[2])});
    ++batches;
  }
  return report(3, worst <= 1e-6, "loss equivalence above threshold",
                fmt("100 batches, max disagreement %.2e", worst));
}

bool metric_oracle() {
  Rng rng(41);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<std::int64_t> ranked(n);
    for (std::size_t i = 0; i < n; ++i) ranked[i] = static_cast<std::int64_t>(i) * 7 + 3;
    rng.shuffle(ranked);
    std::set<std::int64_t> rel{ranked[rng.below(n)]};
    for (auto id : ranked)
      if (rng.bernoulli(0.25)) rel.insert(id);
    const std::size_t k = 1 + rng.below(n + 3);
    double hits = 0, rr = 0;
    for (std::size_t i = 0; i < std::min(n, k); ++i)
      if (rel.count(ranked[i])) {
        ++hits;
        if (rr == 0) rr = 1.0 / static_cast<double>(i + 1);
      }
    const double p = 100.0 * hits / static_cast<double>(k), r = 100.0 * hits / static_cast<double>(rel.size()),
                 mrr = 100.0 * rr;
    mismatches += metrics::precision_at_k(ranked, rel, k) != p;
    mismatches += metrics::recall_at_k(ranked, rel, k) != r;
    mismatches += metrics::mrr_at_k({ranked}, {rel}, k) != mrr;
  }

  std::ifstream is(std::string(BITEMP_FIXTURE_DIR) + "/caption_metrics.json");
  if (!is) return report(4, false, "metric oracles", "caption fixture missing");
  const auto doc = nlohmann::json::parse(is);
  double worst_text = 0, worst_cider = 0;
  for (const auto& c : doc["cases"]) {
    const auto cands = c["candidates"].get<std::vector<std::string>>();
    const auto refs = c["references"].get<std::vector<std::vector<std::string>>>();
    const auto b = metrics::bleu(cands, refs);
    for (std::size_t n = 0; n < 4; ++n) worst_text = std::max(worst_text, std::abs(b[n] / 100 - c["bleu"][n].get<double>()));
    worst_text = std::max(worst_text, std::abs(metrics::rouge_l_corpus(cands, refs) / 100 - c["rouge_l"].get<double>()));
    worst_cider = std::max(worst_cider, std::abs(metrics::cider(cands, refs) / 100 - c["cider"].get<double>()));
  }
  const bool ok = mismatches == 0 && doc["cases"].size() >= 20 && worst_text <= 1e-4 && worst_cider <= 1e-3;
  return report(4, ok, "metric oracles",
                fmt("1000 retrieval instances, %zu mismatches; %zu caption cases, BLEU/ROUGE-L %.1e, CIDEr %.1e",
                    mismatches, doc["cases"].size(), worst_text, worst_cider));
}

bool overfit_smoke() {
  const auto t0 = Clock::now();
  auto g = small_images();
  g.no_change_fraction = 0;
  g.duplicate_rate = 0;
  g.paraphrase_count = 1;
  std::vector<Sample> items;
  std::set<std::string> seen;
  for (auto& s : to_samples(generate_corpus(64, 51, g)))
    if (items.size() < 16 && seen.insert(s.captions[0]).second) items.push_back(std::move(s));

  Model<float> model(desk_config(), vocab_of(items), 52);
  TrainConfig tc;
  tc.epochs = 500;
  tc.max_steps = 500;
  tc.batch_size = 16;
  tc.target_lr = 1e-3;
  tc.seed = 53;
  tc.loss.tau = 0.1;
  const auto res = train(model, tc, items, items);
  const auto loss = dataset_loss(model, items, tc.loss, 16);
  const auto cap = evaluate_captioning(model, items);
  const auto ret = evaluate_retrieval(model, items, tc.loss.theta, {1});
  const double secs = seconds_since(t0);
  const bool ok = res.steps <= 500 && secs <= 300 && loss.caption < 0.1 && cap.exact_match >= 14 &&
                  ret.at(1).recall == 100.0 && ret.at(1).mrr == 100.0;
  return report(5, ok, "overfit 16 items",
                fmt("%zu steps, %.0fs, caption loss %.4f, exact %zu/16, R@1 %.1f, MRR@1 %.1f", res.steps, secs,
                    loss.caption, cap.exact_match, ret.at(1).recall, ret.at(1).mrr));
}

// ---------------------------------------------------------------------------
// Trained comparisons

struct RunMetrics {
  double r5 = 0, bleu4 = 0, cider = 0;
};

struct DeskData {
  std::vector<Sample> train, test;
};

DeskData desk_data(int seed) {
  // 512 training pairs, 10% of change pairs duplicated; a held-out set from
  // an unrelated seed.
  const auto g = small_images();
  return {to_samples(generate_corpus(512, 1000 + seed, g)), to_samples(generate_corpus(256, 5000 + seed, g, 100000))};
}

constexpr std::size_t kDeskEpochs = 200;

// Hard-negative batches carry fewer anchors, so an epoch has more steps; the
// step cap keeps every run at the same number of updates.
RunMetrics desk_run(const DeskData& d, int seed, FnMode mode, double lambda, std::size_t hard_negatives) {
  Model<float> model(desk_config(), vocab_of(d.train), static_cast<std::uint64_t>(seed));
  TrainConfig tc;
  tc.epochs = kDeskEpochs;
  tc.batch_size = 32;
  tc.max_steps = kDeskEpochs * batches_per_epoch(d.train.size(), tc.batch_size, 0);
  tc.target_lr = 1e-3;
  tc.seed = static_cast<std::uint64_t>(seed);
  tc.hard_negatives = hard_negatives;
  tc.loss.mode = mode;
  tc.loss.theta = 1.0;
  tc.loss.tau = 0.01;
  tc.loss.lambda = lambda;
  const auto res = train(model, tc, d.train, d.test);
  RunMetrics m;
  m.r5 = evaluate_retrieval(model, d.test, 1.0, {5}).at(5).recall;
  const auto cap = evaluate_captioning(model, d.test);
  m.bleu4 = cap.bleu[3];
  m.cider = cap.cider;
  emit(fmt("  seed %d %-4s lambda=%g m=%zu: %zu steps, R@5 %.2f BLEU-4 %.2f CIDEr %.2f", seed, to_string(mode), lambda,
           hard_negatives, res.steps, m.r5, m.bleu4, m.cider));
  return m;
}

void trained_comparisons() {
  const auto t0 = Clock::now();
  const std::vector<int> seeds{1, 2, 3};
  std::map<FnMode, std::vector<RunMetrics>> base;
  std::vector<RunMetrics> hard, no_contrast;
  for (int seed : seeds) {
    const auto d = desk_data(seed);
    for (auto mode : {FnMode::none, FnMode::fne, FnMode::fna}) base[mode].push_back(desk_run(d, seed, mode, 1.0, 0));
  }
  const double table_secs = seconds_since(t0);
  for (int seed : seeds) {
    const auto d = desk_data(seed);
    hard.push_back(desk_run(d, seed, FnMode::fna, 1.0, 4));
    no_contrast.push_back(desk_run(d, seed, FnMode::fna, 0.0, 0));
  }

  auto mean = [](const std::vector<RunMetrics>& v, double RunMetrics::*f) {
    double s = 0;
    for (const auto& m : v) s += m.*f;
    return s / static_cast<double>(v.size());
  };
  const double fna = mean(base[FnMode::fna], &RunMetrics::r5), fne = mean(base[FnMode::fne], &RunMetrics::r5),
               none = mean(base[FnMode::none], &RunMetrics::r5);
  const double b_fna = mean(base[FnMode::fna], &RunMetrics::bleu4), b_none = mean(base[FnMode::none], &RunMetrics::bleu4);
  const bool bleu_close = std::abs(b_fna - b_none) <= 0.1 * b_none;
  report(6, fna > fne && fna > none && bleu_close && table_secs <= 1800, "false-negative mode ordering",
         fmt("mean R@5 fna %.2f, fne %.2f, none %.2f; BLEU-4 fna %.2f vs none %.2f; %.0fs", fna, fne, none, b_fna,
             b_none, table_secs));

  int hn_ok = 0, lam_ok = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    hn_ok += hard[i].r5 <= base[FnMode::fna][i].r5;
    lam_ok += base[FnMode::fna][i].bleu4 >= no_contrast[i].bleu4 && base[FnMode::fna][i].cider >= no_contrast[i].cider;
  }
  report(7, hn_ok >= 2, "hard negatives do not help", fmt("R@5 with m=4 <= without on %d of 3 seeds", hn_ok));
  report(8, lam_ok >= 2, "joint loss helps captioning (soft)",
         fmt("lambda=1 BLEU-4 and CIDEr >= lambda=0 on %d of 3 seeds", lam_ok));
}

bool determinism() {
  auto run = [](const std::string& dir) {
    const auto samples = to_samples(generate_corpus(48, 61, small_images()));
    Model<float> model(tiny_config(), vocab_of(samples), 62);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.target_lr = 1e-3;
    tc.seed = 63;
    tc.hard_negatives = 1;
    tc.loss.mode = FnMode::fna;
    tc.loss.tau = 0.1;
    std::filesystem::remove_all(dir);
    train(model, tc, samples, samples, {dir, true, {}});
    std::ifstream is(std::filesystem::path(dir) / "metrics.jsonl", std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  const auto base = std::filesystem::temp_directory_path() / "bitemp_acceptance";
  const auto a = run((base / "a").string());
  // Shift the heap so the second run's buffers land at different addresses.
  std::vector<std::unique_ptr<char[]>> junk;
  for (std::size_t i = 0; i < 999; ++i) junk.emplace_back(new char[8 * (i % 13) + 3]);
  const auto b = run((base / "b").string());
  return report(9, !a.empty() && a == b, "determinism", fmt("two seeded runs, %zu-byte logs identical: %s", a.size(),
                                                             a == b ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) report_file.open(argv[1]);
  bool ok = true;
  ok &= gradient_suite();
  ok &= causality_suite();
  ok &= loss_equivalence();
  ok &= metric_oracle();
  ok &= overfit_smoke();
  ok &= determinism();
  trained_comparisons();
  return ok ? 0 : 1;
}
