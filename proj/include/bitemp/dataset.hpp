#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bitemp/errors.hpp"
#include "bitemp/rng.hpp"
#include "bitemp/tensor.hpp"
#include "bitemp/vocab.hpp"

namespace bitemp {

inline constexpr std::size_t kCaptionsPerItem = 5;

// ---------------------------------------------------------------------------
// Images

// 8-bit RGB image held as floats k/255 in HWC order, so a lossless save/load
// reproduces it exactly.
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0.0f) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline float quantize_unit(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

struct ImagePair {
  Image before, after;
  std::int64_t pair_id = 0;

  void validate() const {
    if (before.height != after.height || before.width != after.width)
      throw ShapeError("image pair " + std::to_string(pair_id) + ": before/after dimensions differ");
    for (const auto* im : {&before, &after})
      for (float v : im->pixels)
        if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("image pair " + std::to_string(pair_id) + ": pixel outside [0,1]");
  }
  friend bool operator==(const ImagePair&, const ImagePair&) = default;
};

// Binary PPM (P6, maxval 255).
inline void write_ppm(const std::string& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image " + path);
  os << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  std::vector<unsigned char> buf(im.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<unsigned char>(std::lround(im.pixels[i] * 255.0f));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write to image " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read image " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw ParseError(path + ": not a binary PPM (P6) file");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ParseError(path + ": malformed PPM header");
  }
  if (maxval != 255) throw ParseError(path + ": only 8-bit PPM is supported");
  Image im(h, w);
  std::vector<unsigned char> buf(h * w * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw ParseError(path + ": truncated pixel data");
  for (std::size_t i = 0; i < buf.size(); ++i) im.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  return im;
}

// ---------------------------------------------------------------------------
// Scene specification and captions

enum class ChangeKind { none, add_building, add_road, remove_building };
enum class Location { top_left, top, top_right, left, center, right, bottom_left, bottom, bottom_right };
enum class Color { red, blue, white, yellow, orange };

inline constexpr std::array<const char*, 9> kLocationNames{"top left", "top",    "top right",
                                                          "left",     "center", "right",
                                                          "bottom left", "bottom", "bottom right"};
inline constexpr std::array<const char*, 5> kColorNames{"red", "blue", "white", "yellow", "orange"};
inline constexpr std::array<std::array<double, 3>, 5> kColorRgb{{{0.85, 0.12, 0.10},
                                                                 {0.12, 0.25, 0.90},
                                                                 {0.95, 0.95, 0.95},
                                                                 {0.95, 0.85, 0.10},
                                                                 {0.98, 0.55, 0.05}}};

inline const char* to_string(ChangeKind k) {
  switch (k) {
    case ChangeKind::none: return "none";
    case ChangeKind::add_building: return "add_building";
    case ChangeKind::add_road: return "add_road";
    case ChangeKind::remove_building: return "remove_building";
  }
  return "none";
}

struct SceneSpec {
  std::uint64_t seed = 0;
  ChangeKind change_kind = ChangeKind::none;
  Location location = Location::center;
  int object_count = 1;  // [1, 3]; roads always 1
  Color color = Color::red;

  // Caption-determining fields only (seed excluded).
  auto fact() const { return std::tuple(change_kind, location, object_count, color); }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct GeneratorConfig {
  std::size_t image_size = 64;
  double no_change_fraction = 0.5;
  double duplicate_rate = 0.1;  // share of change pairs that copy an earlier fact verbatim
  std::size_t paraphrase_count = 5;  // distinct templates among the 5 captions
  int max_distractors = 2;  // static gray buildings present in both images
  double noise = 0.04;

  void validate() const {
    if (image_size < 32) throw ConfigError("generator: image size must be at least 32, got " + std::to_string(image_size));
    if (!(no_change_fraction >= 0.0 && no_change_fraction <= 1.0))
      throw ConfigError("generator: no_change_fraction must lie in [0,1]");
    if (!(duplicate_rate >= 0.0 && duplicate_rate <= 1.0)) throw ConfigError("generator: duplicate_rate must lie in [0,1]");
    if (paraphrase_count < 1 || paraphrase_count > kCaptionsPerItem)
      throw ConfigError("generator: paraphrase_count must lie in [1,5]");
    if (max_distractors < 0) throw ConfigError("generator: max_distractors must be non-negative");
  }
};

// Five paraphrases of the scene's single fact. Paraphrases of one fact share
// their content words, so they differ only in stopwords and word order.
inline std::array<std::string, kCaptionsPerItem> caption_templates(const SceneSpec& s) {
  if (s.change_kind == ChangeKind::none)
    return {"there is no change", "there is no change in the scene", "no change in the scene",
            "the scene has no change", "there has been no change in the scene"};
  const bool road = s.change_kind == ChangeKind::add_road;
  const int count = road ? 1 : s.object_count;
  const std::string det = count == 1 ? "a" : count == 2 ? "two" : "three";
  const std::string noun = std::string(road ? "road" : "building") + (count > 1 ? "s" : "");
  const std::string be = count > 1 ? "are" : "is";
  const std::string have = count > 1 ? "have" : "has";
  const std::string verb = s.change_kind == ChangeKind::remove_building ? "demolished" : "built";
  const std::string col = kColorNames[static_cast<std::size_t>(s.color)];
  const std::string loc = kLocationNames[static_cast<std::size_t>(s.location)];
  const std::string obj = det + " " + col + " " + noun;
  return {obj + " " + be + " " + verb + " at the " + loc,
          "at the " + loc + " " + obj + " " + be + " " + verb,
          obj + " " + have + " been " + verb + " in the " + loc,
          "there " + be + " " + obj + " " + verb + " on the " + loc,
          "in the " + loc + " of the scene " + obj + " " + be + " " + verb};
}

inline std::vector<std::string> scene_captions(const SceneSpec& s, std::size_t paraphrase_count) {
  const auto all = caption_templates(s);
  std::vector<std::string> out;
  for (std::size_t k = 0; k < kCaptionsPerItem; ++k) out.push_back(all[k % paraphrase_count]);
  return out;
}

namespace detail {

struct Rect {
  long y0, x0, y1, x1;  // half-open
};

inline void paint(Image& im, const Rect& r, const std::array<double, 3>& rgb, Rng& rng, double jitter) {
  for (long y = std::max(0L, r.y0); y < std::min<long>(static_cast<long>(im.height), r.y1); ++y)
    for (long x = std::max(0L, r.x0); x < std::min<long>(static_cast<long>(im.width), r.x1); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        im.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            quantize_unit(rgb[c] + rng.uniform(-jitter, jitter));
}

inline Rect cell_rect(Location loc, std::size_t size) {
  const long cell = static_cast<long>(size / 3);
  const long r = static_cast<long>(loc) / 3, c = static_cast<long>(loc) % 3;
  return {r * cell, c * cell, (r + 1) * cell, (c + 1) * cell};
}

// Building footprints inside a cell: up to three side-by-side slots.
inline std::vector<Rect> building_rects(Location loc, int count, std::size_t size, Rng& rng) {
  const Rect cell = cell_rect(loc, size);
  const long span = cell.x1 - cell.x0;
  const long side = std::max(3L, static_cast<long>(std::lround(span * 0.26)));
  std::vector<Rect> out;
  const double slots[3][3] = {{0.37, 0, 0}, {0.14, 0.6, 0}, {0.04, 0.37, 0.70}};
  for (int i = 0; i < count; ++i) {
    const long x0 = cell.x0 + static_cast<long>(std::lround(slots[count - 1][i] * span)) +
                    static_cast<long>(rng.below(2));
    const long y0 = cell.y0 + static_cast<long>(std::lround(span * 0.3)) + static_cast<long>(rng.below(3)) - 1;
    out.push_back({y0, x0, y0 + side, x0 + side});
  }
  return out;
}

inline Rect road_rect(Location loc, std::size_t size) {
  const Rect cell = cell_rect(loc, size);
  const long thick = std::max(2L, static_cast<long>(size / 16));
  const long mid = (cell.y0 + cell.y1) / 2;
  return {mid - thick / 2, cell.x0, mid - thick / 2 + thick, cell.x1};
}

}  // namespace detail

// Deterministic in (spec, config).
inline std::pair<ImagePair, std::vector<std::string>> generate_scene(const SceneSpec& spec, const GeneratorConfig& cfg,
                                                                     std::int64_t pair_id = 0) {
  cfg.validate();
  if (spec.object_count < 1 || spec.object_count > 3) throw ConfigError("scene: object_count must lie in [1,3]");
  const std::size_t S = cfg.image_size;
  Rng rng(mix_seed(spec.seed, 0x5CE4E));

  Image bg(S, S);
  const double base[3] = {0.30 + 0.08 * rng.uniform(), 0.40 + 0.08 * rng.uniform(), 0.22 + 0.06 * rng.uniform()};
  const double fx = rng.uniform(0.05, 0.25), fy = rng.uniform(0.05, 0.25);
  const double ph1 = rng.uniform(0, 6.283), ph2 = rng.uniform(0, 6.283);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double tex = 0.05 * std::sin(fx * double(x) + ph1) * std::sin(fy * double(y) + ph2);
      for (std::size_t c = 0; c < 3; ++c) bg.at(y, x, c) = quantize_unit(base[c] + tex + rng.uniform(-cfg.noise, cfg.noise));
    }

  // Static distractors avoid the change cell.
  const int n_distract = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_distractors) + 1));
  for (int d = 0; d < n_distract; ++d) {
    auto loc = static_cast<Location>(rng.below(9));
    if (spec.change_kind != ChangeKind::none && loc == spec.location) continue;
    const double g = 0.5 + 0.1 * rng.uniform();
    for (const auto& r : detail::building_rects(loc, 1, S, rng)) detail::paint(bg, r, {g, g, g}, rng, 0.02);
  }

  ImagePair pair;
  pair.pair_id = pair_id;
  pair.before = bg;
  pair.after = bg;
  const auto rgb = kColorRgb[static_cast<std::size_t>(spec.color)];
  switch (spec.change_kind) {
    case ChangeKind::none:
      break;
    case ChangeKind::add_building:
      for (const auto& r : detail::building_rects(spec.location, spec.object_count, S, rng))
        detail::paint(pair.after, r, rgb, rng, 0.03);
      break;
    case ChangeKind::remove_building:
      for (const auto& r : detail::building_rects(spec.location, spec.object_count, S, rng))
        detail::paint(pair.before, r, rgb, rng, 0.03);
      break;
    case ChangeKind::add_road:
      detail::paint(pair.after, detail::road_rect(spec.location, S), rgb, rng, 0.02);
      break;
  }
  return {std::move(pair), scene_captions(spec, cfg.paraphrase_count)};
}

struct GeneratedItem {
  SceneSpec spec;
  ImagePair pair;
  std::vector<std::string> captions;
};

// All distinct change facts in a fixed enumeration order.
inline std::vector<SceneSpec> change_facts() {
  std::vector<SceneSpec> out;
  for (auto kind : {ChangeKind::add_building, ChangeKind::remove_building, ChangeKind::add_road})
    for (int loc = 0; loc < 9; ++loc)
      for (int col = 0; col < static_cast<int>(kColorNames.size()); ++col)
        for (int cnt = 1; cnt <= (kind == ChangeKind::add_road ? 1 : 3); ++cnt) {
          SceneSpec s;
          s.change_kind = kind;
          s.location = static_cast<Location>(loc);
          s.color = static_cast<Color>(col);
          s.object_count = cnt;
          out.push_back(s);
        }
  return out;
}

// Scene specs for a corpus of n pairs. Change facts are dealt from a seeded
// permutation (no natural repeats until it is exhausted); a duplicate_rate
// share of change pairs instead copies an earlier change pair's fact.
inline std::vector<SceneSpec> plan_corpus(std::size_t n, std::uint64_t seed, const GeneratorConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xC0A9));
  auto facts = change_facts();
  rng.shuffle(facts);
  std::size_t next_fact = 0;
  std::vector<std::size_t> change_idx;
  std::vector<SceneSpec> specs(n);
  for (std::size_t i = 0; i < n; ++i) {
    SceneSpec s;
    if (!rng.bernoulli(cfg.no_change_fraction)) {
      if (!change_idx.empty() && rng.bernoulli(cfg.duplicate_rate)) {
        s = specs[change_idx[rng.below(change_idx.size())]];
      } else {
        s = facts[next_fact % facts.size()];
        ++next_fact;
      }
      change_idx.push_back(i);
    }
    s.seed = mix_seed(seed, i + 1);
    specs[i] = s;
  }
  return specs;
}

inline std::vector<GeneratedItem> generate_corpus(std::size_t n, std::uint64_t seed, const GeneratorConfig& cfg,
                                                  std::int64_t first_pair_id = 0) {
  std::vector<GeneratedItem> out;
  out.reserve(n);
  const auto specs = plan_corpus(n, seed, cfg);
  for (std::size_t i = 0; i < n; ++i) {
    auto [pair, caps] = generate_scene(specs[i], cfg, first_pair_id + static_cast<std::int64_t>(i));
    out.push_back({specs[i], std::move(pair), std::move(caps)});
  }
  return out;
}

// Groups (size >= 2) of pair ids whose caption sets are verbatim identical
// after normalization; sorted for determinism.
template <typename Item, typename IdFn, typename CapFn>
std::vector<std::vector<std::int64_t>> duplicate_groups(const std::vector<Item>& items, IdFn id_of, CapFn caps_of) {
  std::map<std::set<std::string>, std::vector<std::int64_t>> by_caps;
  for (const auto& it : items) {
    std::set<std::string> key;
    for (const auto& c : caps_of(it)) key.insert(normalize_text(c));
    by_caps[key].push_back(id_of(it));
  }
  std::vector<std::vector<std::int64_t>> out;
  for (auto& [k, ids] : by_caps)
    if (ids.size() > 1) {
      std::sort(ids.begin(), ids.end());
      out.push_back(ids);
    }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

struct ManifestItem {
  std::int64_t pair_id = 0;
  std::string before, after;  // paths relative to the manifest's directory
  std::vector<std::string> captions;
  friend bool operator==(const ManifestItem&, const ManifestItem&) = default;
};

struct DatasetManifest {
  Split split = Split::train;
  std::vector<ManifestItem> items;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline void validate_manifest(const DatasetManifest& m) {
  std::set<std::int64_t> seen;
  for (const auto& it : m.items) {
    if (it.captions.size() != kCaptionsPerItem)
      throw ValidationError("pair_id " + std::to_string(it.pair_id) + " has " + std::to_string(it.captions.size()) +
                            " captions, expected 5");
    if (!seen.insert(it.pair_id).second)
      throw ValidationError("pair_id " + std::to_string(it.pair_id) + " appears twice in the " + to_string(m.split) +
                            " split");
  }
}

// One JSON record per line: pair_id, before, after, captions[5], split.
inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  validate_manifest(m);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path);
  for (const auto& it : m.items) {
    nlohmann::ordered_json j;
    j["pair_id"] = it.pair_id;
    j["before"] = it.before;
    j["after"] = it.after;
    j["captions"] = it.captions;
    j["split"] = to_string(m.split);
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("short write to manifest " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest " + path);
  DatasetManifest m;
  const std::string stem = std::filesystem::path(path).stem().string();
  if (stem == "val" || stem == "test") m.split = parse_split(stem);
  std::string line;
  std::size_t lineno = 0;
  bool split_set = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestItem it;
    try {
      const auto j = nlohmann::json::parse(line);
      it.pair_id = j.at("pair_id").get<std::int64_t>();
      it.before = j.at("before").get<std::string>();
      it.after = j.at("after").get<std::string>();
      it.captions = j.at("captions").get<std::vector<std::string>>();
      if (j.contains("split")) {
        const Split s = parse_split(j.at("split").get<std::string>());
        if (split_set && s != m.split) throw ValidationError("mixed splits in one manifest");
        m.split = s;
        split_set = true;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const ValidationError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (it.captions.size() != kCaptionsPerItem)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": pair_id " + std::to_string(it.pair_id) + " has " +
                            std::to_string(it.captions.size()) + " captions, expected 5");
    m.items.push_back(std::move(it));
  }
  validate_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// In-memory samples and batching

struct Sample {
  ImagePair pair;
  std::vector<std::string> captions;
};

inline std::vector<Sample> load_samples(const DatasetManifest& m, const std::string& base_dir) {
  std::vector<Sample> out;
  out.reserve(m.items.size());
  const std::filesystem::path base(base_dir);
  for (const auto& it : m.items) {
    Sample s;
    s.pair.pair_id = it.pair_id;
    s.pair.before = read_ppm((base / it.before).string());
    s.pair.after = read_ppm((base / it.after).string());
    s.pair.validate();
    s.captions = it.captions;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> to_samples(const std::vector<GeneratedItem>& items) {
  std::vector<Sample> out;
  for (const auto& it : items) out.push_back({it.pair, it.captions});
  return out;
}

struct BatchEntry {
  std::size_t item = 0;     // index into the split
  std::size_t caption = 0;  // which of the item's captions is used this epoch
  bool anchor = true;       // false for entries added as hard negatives
  friend bool operator==(const BatchEntry&, const BatchEntry&) = default;
};

using Batch = std::vector<BatchEntry>;

// Per item: indices of planned hard negatives.
struct HardNegativePlan {
  std::vector<std::vector<std::size_t>> negatives;
  bool empty() const { return negatives.empty(); }
};

// Caption choice for every item in a given epoch.
inline std::vector<std::size_t> epoch_captions(std::size_t n_items, std::uint64_t shuffle_seed, std::size_t epoch,
                                               std::size_t captions_per_item = kCaptionsPerItem) {
  Rng rng(mix_seed(mix_seed(shuffle_seed, epoch), 0xCA9));
  std::vector<std::size_t> out(n_items);
  for (auto& c : out) c = rng.below(captions_per_item);
  return out;
}

// Every item is an anchor exactly once per epoch. Without a plan batches are
// consecutive chunks of a seeded permutation (a trailing singleton joins the
// previous batch). With a plan, each anchor brings its hard negatives along and
// anchors per batch shrink to batch_size / (1 + m).
inline std::vector<Batch> make_batches(std::size_t n_items, std::size_t batch_size, std::uint64_t shuffle_seed,
                                       std::size_t epoch = 0, const HardNegativePlan* plan = nullptr) {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2, got " + std::to_string(batch_size));
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(shuffle_seed, epoch));
  rng.shuffle(order);
  const auto caps = epoch_captions(n_items, shuffle_seed, epoch);
  std::vector<Batch> out;

  if (plan == nullptr || plan->empty()) {
    for (std::size_t i = 0; i < n_items; i += batch_size) {
      Batch b;
      for (std::size_t j = i; j < std::min(n_items, i + batch_size); ++j) b.push_back({order[j], caps[order[j]], true});
      if (b.size() == 1 && !out.empty()) out.back().push_back(b.front());
      else out.push_back(std::move(b));
    }
    return out;
  }

  if (plan->negatives.size() != n_items) throw ConfigError("hard-negative plan does not cover the dataset");
  std::size_t m = 0;
  for (const auto& v : plan->negatives) m = std::max(m, v.size());
  const std::size_t per_batch = std::max<std::size_t>(1, batch_size / (1 + m));
  for (std::size_t i = 0; i < n_items; i += per_batch) {
    Batch b;
    std::set<std::size_t> present;
    const std::size_t end = std::min(n_items, i + per_batch);
    for (std::size_t j = i; j < end; ++j) {
      b.push_back({order[j], caps[order[j]], true});
      present.insert(order[j]);
    }
    for (std::size_t j = i; j < end; ++j)
      for (std::size_t neg : plan->negatives[order[j]]) {
        if (b.size() >= batch_size) break;
        if (present.insert(neg).second) b.push_back({neg, caps[neg], false});
      }
    if (b.size() == 1 && !out.empty()) {
      for (const auto& e : b)
        if (std::none_of(out.back().begin(), out.back().end(), [&](const BatchEntry& x) { return x.item == e.item; }))
          out.back().push_back(e);
    } else {
      out.push_back(std::move(b));
    }
  }
  return out;
}

}  // namespace bitemp
