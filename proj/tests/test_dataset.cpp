#include <fstream>

#include "test_support.hpp"

using namespace bitemp;
using namespace bitemp::testing;

namespace {

SceneSpec spec(ChangeKind k, Location loc = Location::top_left, int count = 2, Color col = Color::red,
               std::uint64_t seed = 7) {
  SceneSpec s;
  s.seed = seed;
  s.change_kind = k;
  s.location = loc;
  s.object_count = count;
  s.color = col;
  return s;
}

}  // namespace

TEST(Dataset, NoChangeSceneHasIdenticalImages) {
  GeneratorConfig cfg;
  auto [pair, caps] = generate_scene(spec(ChangeKind::none), cfg);
  EXPECT_EQ(pair.before, pair.after);
  ASSERT_EQ(caps.size(), 5u);
  const auto family = caption_templates(spec(ChangeKind::none));
  for (const auto& c : caps) EXPECT_NE(std::find(family.begin(), family.end(), c), family.end()) << c;
}

TEST(Dataset, ChangeScenesDifferOnlyInTheirCell) {
  GeneratorConfig cfg;
  for (auto k : {ChangeKind::add_building, ChangeKind::remove_building, ChangeKind::add_road}) {
    auto [pair, caps] = generate_scene(spec(k, Location::bottom_right), cfg);
    pair.validate();
    std::size_t diff = 0;
    const std::size_t cell = cfg.image_size / 3;
    for (std::size_t y = 0; y < cfg.image_size; ++y)
      for (std::size_t x = 0; x < cfg.image_size; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          if (pair.before.at(y, x, c) != pair.after.at(y, x, c)) {
            ++diff;
            EXPECT_GE(y, 2 * cell - 2);
            EXPECT_GE(x, 2 * cell);
          }
    EXPECT_GT(diff, 0u) << to_string(k);
  }
}

TEST(Dataset, GenerationIsDeterministic) {
  GeneratorConfig cfg;
  auto a = generate_scene(spec(ChangeKind::add_building), cfg);
  auto b = generate_scene(spec(ChangeKind::add_building), cfg);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  auto c1 = generate_corpus(40, 3, cfg);
  auto c2 = generate_corpus(40, 3, cfg);
  for (std::size_t i = 0; i < c1.size(); ++i) {
    EXPECT_EQ(c1[i].pair, c2[i].pair);
    EXPECT_EQ(c1[i].captions, c2[i].captions);
  }
}

TEST(Dataset, PixelsAreQuantizedAndInRange) {
  auto [pair, caps] = generate_scene(spec(ChangeKind::add_road, Location::center), GeneratorConfig{});
  for (float v : pair.after.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
    EXPECT_EQ(v, std::round(v * 255.0f) / 255.0f);
  }
}

TEST(Dataset, SmallImageSizeIsAConfigError) {
  GeneratorConfig cfg;
  cfg.image_size = 16;
  EXPECT_THROW(generate_scene(spec(ChangeKind::none), cfg), ConfigError);
}

TEST(Dataset, HalfOfDefaultCorpusIsNoChange) {
  const auto specs = plan_corpus(1000, 11, GeneratorConfig{});
  const auto none = std::count_if(specs.begin(), specs.end(), [](const SceneSpec& s) { return s.change_kind == ChangeKind::none; });
  EXPECT_NEAR(static_cast<double>(none) / 1000.0, 0.5, 0.05);
}

TEST(Dataset, DuplicateInjectionRate) {
  GeneratorConfig cfg;
  const auto specs = plan_corpus(400, 5, cfg);
  std::set<std::tuple<ChangeKind, Location, int, Color>> seen;
  std::size_t changes = 0, repeats = 0;
  for (const auto& s : specs) {
    if (s.change_kind == ChangeKind::none) continue;
    ++changes;
    if (!seen.insert(s.fact()).second) ++repeats;
  }
  // 315 distinct facts > ~200 change pairs, so every repeat is an injected duplicate
  const double rate = static_cast<double>(repeats) / static_cast<double>(changes);
  EXPECT_GT(rate, 0.04);
  EXPECT_LT(rate, 0.18);
}

TEST(Dataset, ParaphrasesShareContentWords) {
  BowSimilarity bow;
  for (const auto& f : change_facts()) {
    const auto caps = caption_templates(f);
    for (std::size_t i = 1; i < caps.size(); ++i)
      ASSERT_DOUBLE_EQ(cosine(bow.embed(caps[0]), bow.embed(caps[i])), 1.0) << caps[0] << " / " << caps[i];
  }
  const auto none = caption_templates(spec(ChangeKind::none));
  for (const auto& c : none) EXPECT_DOUBLE_EQ(cosine(bow.embed(none[0]), bow.embed(c)), 1.0);
}

TEST(Dataset, DistinctFactsHaveDistinctMeaning) {
  BowSimilarity bow;
  const auto facts = change_facts();
  EXPECT_EQ(facts.size(), 315u);
  for (std::size_t i = 0; i < facts.size(); ++i)
    for (std::size_t j = i + 1; j < facts.size(); ++j)
      ASSERT_LT(cosine(bow.embed(caption_templates(facts[i])[0]), bow.embed(caption_templates(facts[j])[0])), 1.0);
}

TEST(Dataset, ParaphraseCountLimitsTemplates) {
  const auto caps = scene_captions(spec(ChangeKind::add_building), 1);
  for (const auto& c : caps) EXPECT_EQ(c, caps[0]);
  const auto caps2 = scene_captions(spec(ChangeKind::add_building), 2);
  EXPECT_EQ(caps2[0], caps2[2]);
  EXPECT_NE(caps2[0], caps2[1]);
}

TEST(Dataset, DuplicateLedgerGroupsVerbatimCaptionSets) {
  const auto items = generate_corpus(200, 9, GeneratorConfig{});
  const auto groups = duplicate_groups(
      items, [](const GeneratedItem& i) { return i.pair.pair_id; }, [](const GeneratedItem& i) { return i.captions; });
  std::size_t none_group = 0;
  for (const auto& g : groups) {
    ASSERT_GE(g.size(), 2u);
    const auto& first = items[static_cast<std::size_t>(g[0])];
    for (auto id : g) EXPECT_EQ(items[static_cast<std::size_t>(id)].captions, first.captions);
    if (first.spec.change_kind == ChangeKind::none) none_group = g.size();
  }
  const auto n_none = std::count_if(items.begin(), items.end(),
                                    [](const GeneratedItem& i) { return i.spec.change_kind == ChangeKind::none; });
  EXPECT_EQ(none_group, static_cast<std::size_t>(n_none));
  EXPECT_GT(groups.size(), 1u);  // at least one injected change duplicate
}

TEST(Dataset, PpmRoundTripIsLossless) {
  const auto dir = temp_dir("ppm");
  auto [pair, caps] = generate_scene(spec(ChangeKind::add_building), GeneratorConfig{});
  write_ppm(dir + "/a.ppm", pair.after);
  EXPECT_EQ(read_ppm(dir + "/a.ppm"), pair.after);
  std::ofstream(dir + "/bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(read_ppm(dir + "/bad.ppm"), ParseError);
  EXPECT_THROW(read_ppm(dir + "/missing.ppm"), IoError);
}

TEST(Dataset, ManifestRoundTrip) {
  const auto dir = temp_dir("manifest");
  DatasetManifest m;
  m.split = Split::val;
  for (int i = 0; i < 3; ++i)
    m.items.push_back({i * 10, "images/b" + std::to_string(i) + ".ppm", "images/a" + std::to_string(i) + ".ppm",
                       {"c1", "c2 x", "c3", "c4", "there is no change"}});
  write_manifest(m, dir + "/anything.jsonl");
  EXPECT_EQ(load_manifest(dir + "/anything.jsonl"), m);
}

TEST(Dataset, EmptyManifestIsEmpty) {
  const auto dir = temp_dir("empty_manifest");
  std::ofstream(dir + "/test.jsonl").close();
  const auto m = load_manifest(dir + "/test.jsonl");
  EXPECT_TRUE(m.items.empty());
  EXPECT_EQ(m.split, Split::test);
}

TEST(Dataset, ManifestWithFourCaptionsNamesPairId) {
  const auto dir = temp_dir("bad_manifest");
  {
    std::ofstream os(dir + "/train.jsonl");
    os << R"({"pair_id": 1, "before": "b", "after": "a", "captions": ["1","2","3","4","5"]})" << '\n';
    os << R"({"pair_id": 42, "before": "b", "after": "a", "captions": ["1","2","3","4"]})" << '\n';
  }
  try {
    load_manifest(dir + "/train.jsonl");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos) << e.what();
  }
}

TEST(Dataset, MalformedManifestLineIsAParseErrorWithLineNumber) {
  const auto dir = temp_dir("malformed_manifest");
  {
    std::ofstream os(dir + "/train.jsonl");
    os << R"({"pair_id": 1, "before": "b", "after": "a", "captions": ["1","2","3","4","5"]})" << '\n';
    os << R"({"pair_id": 2, "before": "b",)" << '\n';
  }
  try {
    load_manifest(dir + "/train.jsonl");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Dataset, DuplicatePairIdRejected) {
  DatasetManifest m;
  m.items.push_back({1, "b", "a", {"1", "2", "3", "4", "5"}});
  m.items.push_back({1, "b", "a", {"1", "2", "3", "4", "5"}});
  EXPECT_THROW(validate_manifest(m), ValidationError);
}

TEST(Batching, PartitionAndDeterminism) {
  const auto b = make_batches(64, 32, 5, 0);
  ASSERT_EQ(b.size(), 2u);
  std::multiset<std::size_t> seen;
  for (const auto& batch : b)
    for (const auto& e : batch) {
      EXPECT_TRUE(e.anchor);
      EXPECT_LT(e.caption, 5u);
      seen.insert(e.item);
    }
  EXPECT_EQ(seen.size(), 64u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 64u);
  EXPECT_EQ(make_batches(64, 32, 5, 0), b);
  EXPECT_NE(make_batches(64, 32, 5, 1), b);
  EXPECT_NE(make_batches(64, 32, 6, 0), b);
}

TEST(Batching, TrailingSingletonJoinsPreviousBatch) {
  const auto b = make_batches(65, 32, 1, 0);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 33u);
  const auto c = make_batches(66, 32, 1, 0);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[2].size(), 2u);
}

TEST(Batching, BatchSizeOneIsAnError) { EXPECT_THROW(make_batches(10, 1, 0, 0), ConfigError); }

TEST(Batching, CaptionSamplingCoversAllFive) {
  std::set<std::size_t> used;
  for (std::size_t epoch = 0; epoch < 20; ++epoch)
    for (const auto& batch : make_batches(16, 8, 2, epoch))
      for (const auto& e : batch)
        if (e.item == 3) used.insert(e.caption);
  EXPECT_EQ(used.size(), 5u);
}

TEST(Batching, HardNegativesCoOccurWithAnchors) {
  const std::size_t n = 40, m = 3;
  HardNegativePlan plan;
  Rng rng(3);
  for (std::size_t i = 0; i < n; ++i) {
    std::set<std::size_t> s;
    while (s.size() < m) {
      const auto j = rng.below(n);
      if (j != i) s.insert(j);
    }
    plan.negatives.emplace_back(s.begin(), s.end());
  }
  const auto batches = make_batches(n, 16, 9, 0, &plan);
  std::multiset<std::size_t> anchors;
  for (const auto& b : batches) {
    EXPECT_LE(b.size(), 16u);
    std::set<std::size_t> present;
    for (const auto& e : b) {
      EXPECT_TRUE(present.insert(e.item).second) << "item twice in one batch";
      if (e.anchor) anchors.insert(e.item);
    }
    for (const auto& e : b)
      if (e.anchor)
        for (auto neg : plan.negatives[e.item]) EXPECT_TRUE(present.count(neg)) << "anchor " << e.item;
  }
  EXPECT_EQ(anchors.size(), n);
  EXPECT_EQ(std::set<std::size_t>(anchors.begin(), anchors.end()).size(), n);
}
