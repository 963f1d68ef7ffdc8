// bitemp: dataset generation, training, evaluation and inference.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "bitemp/config.hpp"
#include "bitemp/evaluate.hpp"
#include "bitemp/trainer.hpp"

namespace fs = std::filesystem;
using namespace bitemp;

namespace {

int exit_code(const Error& e) {
  const std::string c = e.category();
  if (c == "config") return 3;
  if (c == "io") return 4;
  if (c == "parse") return 5;
  if (c == "version") return 6;
  if (c == "validation" || c == "degenerate-batch") return 7;
  if (c == "shape" || c == "index") return 8;
  if (c == "numeric") return 9;
  return 1;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(tok, &pos);
      if (pos != tok.size() || v < 1) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("--k expects a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("--k needs at least one value");
  return out;
}

std::size_t parse_hard_negatives(const std::string& s) {
  if (s == "off" || s == "0") return 0;
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos == s.size() && v > 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ConfigError("--hard-negatives expects a positive count or 'off', got '" + s + "'");
}

// Flags shared by every command that touches hyperparameters.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau, theta, lambda;
  std::optional<std::string> fn_mode, hard_negatives, finetune, ks;
  std::optional<std::size_t> epochs, batch_size;

  void add(CLI::App* app, bool training) {
    app->add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "random seed");
    app->add_option("--theta", theta, "caption-similarity threshold for merged relevance / false negatives");
    app->add_option("--k", ks, "comma-separated cutoffs, e.g. 1,5,10");
    if (!training) return;
    app->add_option("--tau", tau, "contrastive temperature");
    app->add_option("--lambda", lambda, "contrastive loss weight");
    app->add_option("--fn-mode", fn_mode, "false-negative handling")->check(CLI::IsMember({"none", "fne", "fna"}));
    app->add_option("--hard-negatives", hard_negatives, "mined negatives per anchor, or off");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch_size, "batch size");
    app->add_option("--backbone-finetune", finetune, "backbone policy")
        ->check(CLI::IsMember({"frozen", "last2", "full"}));
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
    auto& t = c.train;
    if (seed) {
      t.seed = *seed;
      c.dataset_seed = *seed;
    }
    if (tau) t.loss.tau = *tau;
    if (theta) t.loss.theta = *theta;
    if (lambda) t.loss.lambda = *lambda;
    if (fn_mode) {
      t.loss.mode = parse_fn_mode(*fn_mode);
      if (t.loss.mode != FnMode::none && !theta)
        throw ConfigError("--fn-mode " + *fn_mode + " requires --theta");
    }
    if (hard_negatives) t.hard_negatives = parse_hard_negatives(*hard_negatives);
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (finetune) t.finetune = parse_finetune(*finetune);
    if (ks) c.ks = parse_ks(*ks);
    t.validate();
    c.generator.validate();
    return c;
  }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << s;
}

std::vector<Sample> load_split(const std::string& data_dir, const std::string& split) {
  const fs::path path = fs::path(data_dir) / (split + ".jsonl");
  return load_samples(load_manifest(path.string()), data_dir);
}

// --- gen-data --------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  const auto items = generate_corpus(cfg.dataset_size, cfg.dataset_seed, cfg.generator);

  // 80/10/10 split over a seeded permutation
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.dataset_seed, 0x5971));
  rng.shuffle(order);
  const std::size_t n_train = items.size() * 8 / 10, n_val = items.size() / 10;
  DatasetManifest splits[3];
  splits[0].split = Split::train;
  splits[1].split = Split::val;
  splits[2].split = Split::test;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& it = items[order[r]];
    char name[64];
    std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(it.pair.pair_id));
    ManifestItem mi;
    mi.pair_id = it.pair.pair_id;
    mi.before = std::string("images/") + name + "_before.ppm";
    mi.after = std::string("images/") + name + "_after.ppm";
    mi.captions = it.captions;
    write_ppm((root / mi.before).string(), it.pair.before);
    write_ppm((root / mi.after).string(), it.pair.after);
    const int s = r < n_train ? 0 : r < n_train + n_val ? 1 : 2;
    splits[s].items.push_back(std::move(mi));
  }
  for (auto& m : splits) {
    std::sort(m.items.begin(), m.items.end(), [](const auto& a, const auto& b) { return a.pair_id < b.pair_id; });
    write_manifest(m, (root / (std::string(to_string(m.split)) + ".jsonl")).string());
  }
  std::ofstream dup(root / "duplicates.jsonl");
  for (const auto& g : duplicate_groups(
           items, [](const GeneratedItem& i) { return i.pair.pair_id; },
           [](const GeneratedItem& i) { return i.captions; }))
    dup << nlohmann::json{{"pair_ids", g}}.dump() << '\n';
  write_text(root / "generator.json", to_json(cfg).dump(2) + "\n");
  std::cout << "wrote " << items.size() << " pairs to " << out_dir << " (" << splits[0].items.size() << " train, "
            << splits[1].items.size() << " val, " << splits[2].items.size() << " test)\n";
}

// --- train -----------------------------------------------------------------

void cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
  const auto train_set = load_split(data_dir, "train");
  const auto val_set = load_split(data_dir, "val");
  if (train_set.empty()) throw ValidationError("training split is empty");
  std::vector<std::string> caps;
  for (const auto& s : train_set) caps.insert(caps.end(), s.captions.begin(), s.captions.end());
  auto vocab = Vocabulary::build(caps, cfg.vocab_min_freq);
  ModelConfig mc = cfg.model;
  mc.encoder.image_size = train_set.front().pair.before.height;

  fs::create_directories(out_dir);
  auto echo = to_json(cfg);
  echo["model"] = nlohmann::json(mc);
  echo["data"] = fs::absolute(data_dir).string();
  write_text(fs::path(out_dir) / "config.json", echo.dump(2) + "\n");
  vocab.save((fs::path(out_dir) / "vocab.txt").string());

  Model<float> model(mc, vocab, cfg.train.seed);
  TrainOutput out;
  out.run_dir = out_dir;
  out.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << "  train " << std::fixed << std::setprecision(4) << r.train_loss << "  val "
              << r.val_loss << "  val R@5 " << std::setprecision(2) << r.val_r5 << std::endl;
  };
  const auto res = train(model, cfg.train, train_set, val_set, out);
  std::cout << "best epoch " << res.best_epoch << " (val loss " << res.best_val_loss << "), checkpoint "
            << (fs::path(out_dir) / "best.ckpt").string() << "\n";
}

// --- evaluation --------------------------------------------------------------

void emit_report(const EvalReport& rep, const std::string& out_path) {
  const auto text = rep.to_text();
  std::cout << text;
  if (!out_path.empty()) write_text(out_path, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-temporal change captioning and text-to-change retrieval"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, evr_o, evc_o, ret_o;
  std::string out_dir, data_dir, checkpoint, split = "test", report_out, query, before_path, after_path;
  std::optional<std::size_t> n_items;
  std::size_t top_k = 5;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_o.add(gen, false);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--n", n_items, "number of image pairs");

  auto* tr = app.add_subcommand("train", "train a model");
  train_o.add(tr, true);
  tr->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out_dir, "run directory")->required();

  auto* evr = app.add_subcommand("eval-retrieval", "retrieval metrics on a split");
  evr_o.add(evr, false);
  auto* evc = app.add_subcommand("eval-caption", "captioning metrics on a split");
  evc_o.add(evc, false);
  for (auto* sc : {evr, evc}) {
    sc->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    sc->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    sc->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    sc->add_option("--out", report_out, "also write the report here");
  }

  auto* ret = app.add_subcommand("retrieve", "rank image pairs for a text query");
  ret_o.add(ret, false);
  ret->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  ret->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ret->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ret->add_option("--query", query, "query caption")->required();
  ret->add_option("--top", top_k, "results to print");

  auto* cap = app.add_subcommand("caption", "describe the change between two images");
  cap->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  cap->add_option("--before", before_path, "earlier image (PPM)")->required()->check(CLI::ExistingFile);
  cap->add_option("--after", after_path, "later image (PPM)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = gen_o.resolve();
      if (n_items) cfg.dataset_size = *n_items;
      cmd_gen_data(cfg, out_dir);
    } else if (*tr) {
      cmd_train(train_o.resolve(), data_dir, out_dir);
    } else if (*evr) {
      const auto cfg = evr_o.resolve();
      auto model = load_checkpoint<float>(checkpoint);
      const auto samples = load_split(data_dir, split);
      EvalReport rep;
      rep.retrieval = evaluate_retrieval(*model, samples, cfg.train.loss.theta, cfg.ks);
      emit_report(rep, report_out);
    } else if (*evc) {
      auto model = load_checkpoint<float>(checkpoint);
      const auto samples = load_split(data_dir, split);
      const auto ev = evaluate_captioning(*model, samples);
      EvalReport rep;
      rep.has_captioning = true;
      rep.bleu = ev.bleu;
      rep.rouge_l = ev.rouge_l;
      rep.cider = ev.cider;
      emit_report(rep, report_out);
    } else if (*ret) {
      auto model = load_checkpoint<float>(checkpoint);
      const auto samples = load_split(data_dir, split);
      std::vector<const ImagePair*> pairs;
      std::vector<std::int64_t> ids;
      for (const auto& s : samples) {
        pairs.push_back(&s.pair);
        ids.push_back(s.pair.pair_id);
      }
      std::vector<std::vector<double>> scores;
      const auto ranked = rank_items(embed_captions(*model, {query}), embed_pairs(*model, pairs), ids, &scores);
      for (std::size_t i = 0; i < std::min(top_k, ranked[0].size()); ++i)
        std::cout << i + 1 << '\t' << ranked[0][i] << '\t' << std::fixed << std::setprecision(4) << scores[0][i]
                  << '\n';
    } else if (*cap) {
      auto model = load_checkpoint<float>(checkpoint);
      ImagePair p;
      p.before = read_ppm(before_path);
      p.after = read_ppm(after_path);
      p.validate();
      std::cout << generate_captions(*model, {&p}).front() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error (" << e.category() << "): " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
