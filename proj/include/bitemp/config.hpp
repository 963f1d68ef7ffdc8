#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bitemp/dataset.hpp"
#include "bitemp/model.hpp"
#include "bitemp/trainer.hpp"

namespace bitemp {

// Everything a run needs, loadable from a JSON file. Missing keys keep their
// defaults; unknown keys are rejected so typos do not pass silently.
struct RunConfig {
  GeneratorConfig generator;
  std::size_t dataset_size = 1000;
  std::uint64_t dataset_seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::size_t> ks{1, 5, 10};
  int vocab_min_freq = 5;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const auto& g = c.generator;
  j["generator"] = {{"image_size", g.image_size},         {"no_change_fraction", g.no_change_fraction},
                    {"duplicate_rate", g.duplicate_rate}, {"paraphrase_count", g.paraphrase_count},
                    {"max_distractors", g.max_distractors}, {"noise", g.noise}};
  j["dataset_size"] = c.dataset_size;
  j["dataset_seed"] = c.dataset_seed;
  j["model"] = nlohmann::json(c.model);
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"target_lr", t.target_lr},
                {"warmup_fraction", t.warmup_fraction},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"clip_norm", t.clip_norm},
                {"seed", t.seed},
                {"hard_negatives", t.hard_negatives},
                {"backbone_finetune", to_string(t.finetune)},
                {"max_steps", t.max_steps},
                {"eval_batch", t.eval_batch}};
  j["loss"] = {{"tau", t.loss.tau}, {"theta", t.loss.theta}, {"fn_mode", to_string(t.loss.mode)}, {"lambda", t.loss.lambda}};
  j["ks"] = c.ks;
  j["vocab_min_freq"] = c.vocab_min_freq;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::check_keys(j, {"generator", "dataset_size", "dataset_seed", "model", "train", "loss", "ks", "vocab_min_freq"},
                       "config");
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      detail::check_keys(g, {"image_size", "no_change_fraction", "duplicate_rate", "paraphrase_count", "max_distractors",
                             "noise"},
                         "config.generator");
      auto& o = c.generator;
      o.image_size = g.value("image_size", o.image_size);
      o.no_change_fraction = g.value("no_change_fraction", o.no_change_fraction);
      o.duplicate_rate = g.value("duplicate_rate", o.duplicate_rate);
      o.paraphrase_count = g.value("paraphrase_count", o.paraphrase_count);
      o.max_distractors = g.value("max_distractors", o.max_distractors);
      o.noise = g.value("noise", o.noise);
    }
    c.dataset_size = j.value("dataset_size", c.dataset_size);
    c.dataset_seed = j.value("dataset_seed", c.dataset_seed);
    if (j.contains("model")) {
      detail::check_keys(j["model"], {"encoder", "decoder"}, "config.model");
      c.model = j["model"].get<ModelConfig>();
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      detail::check_keys(t, {"epochs", "batch_size", "target_lr", "warmup_fraction", "beta1", "beta2", "eps",
                             "weight_decay", "clip_norm", "seed", "hard_negatives", "backbone_finetune", "max_steps",
                             "eval_batch"},
                         "config.train");
      auto& o = c.train;
      o.epochs = t.value("epochs", o.epochs);
      o.batch_size = t.value("batch_size", o.batch_size);
      o.target_lr = t.value("target_lr", o.target_lr);
      o.warmup_fraction = t.value("warmup_fraction", o.warmup_fraction);
      o.adam.beta1 = t.value("beta1", o.adam.beta1);
      o.adam.beta2 = t.value("beta2", o.adam.beta2);
      o.adam.eps = t.value("eps", o.adam.eps);
      o.adam.weight_decay = t.value("weight_decay", o.adam.weight_decay);
      o.clip_norm = t.value("clip_norm", o.clip_norm);
      o.seed = t.value("seed", o.seed);
      o.hard_negatives = t.value("hard_negatives", o.hard_negatives);
      if (t.contains("backbone_finetune")) o.finetune = parse_finetune(t["backbone_finetune"].get<std::string>());
      o.max_steps = t.value("max_steps", o.max_steps);
      o.eval_batch = t.value("eval_batch", o.eval_batch);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      detail::check_keys(l, {"tau", "theta", "fn_mode", "lambda"}, "config.loss");
      auto& o = c.train.loss;
      o.tau = l.value("tau", o.tau);
      o.theta = l.value("theta", o.theta);
      o.lambda = l.value("lambda", o.lambda);
      if (l.contains("fn_mode")) o.mode = parse_fn_mode(l["fn_mode"].get<std::string>());
    }
    c.ks = j.value("ks", c.ks);
    c.vocab_min_freq = j.value("vocab_min_freq", c.vocab_min_freq);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace bitemp
