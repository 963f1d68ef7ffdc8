#include <fstream>
#include <map>
#include <sstream>

#include "test_support.hpp"

using namespace bitemp;
using namespace bitemp::testing;

TEST(Vocab, ThresholdKeepsFrequentWordsOnly) {
  const auto v = Vocabulary::build({"a a a a a b"}, 5);
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.tokens(), std::vector<std::string>{"a"});
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), Vocabulary::unk);
}

TEST(Vocab, OrderingIsCountThenLexicographic) {
  const auto v = Vocabulary::build({"b b a a c c c", "d"}, 1);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"c", "a", "b", "d"}));
  EXPECT_EQ(Vocabulary::build({"b b a a c c c", "d"}, 1), v);
}

TEST(Vocab, EmptyCorpusIsAnError) { EXPECT_THROW(Vocabulary::build({}, 5), ValidationError); }

TEST(Vocab, TokenizationLowercasesAndStripsPunctuation) {
  EXPECT_EQ(tokenize("A Building, appears."), (std::vector<std::string>{"a", "building", "appears"}));
  EXPECT_EQ(normalize_text("  There is NO change!  "), "there is no change");
}

// Independent count over the generated corpus: plain split, manual lowercase.
TEST(Vocab, MatchesIndependentWordFrequencyCount) {
  const auto items = generate_corpus(300, 21, GeneratorConfig{});
  std::vector<std::string> caps;
  std::map<std::string, int> freq;
  for (const auto& it : items)
    for (const auto& c : it.captions) {
      caps.push_back(c);
      std::istringstream is(c);
      for (std::string w; is >> w;) {
        for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        ++freq[w];
      }
    }
  std::size_t expected = 0;
  for (const auto& [w, n] : freq) expected += n >= 5;
  const auto v = Vocabulary::build(caps, 5);
  EXPECT_EQ(v.size(), expected + 4);
  for (const auto& t : v.tokens()) EXPECT_GE(freq.at(t), 5) << t;
}

TEST(Vocab, EncodeLayout) {
  const auto v = Vocabulary::build({"a"}, 1);
  EXPECT_EQ(v.encode("a", 4), (std::vector<int>{Vocabulary::start, v.id("a"), Vocabulary::end, Vocabulary::pad}));
  EXPECT_THROW(v.encode("a", 2), ConfigError);
}

TEST(Vocab, EncodeTruncatesAndMapsUnknown) {
  const auto v = Vocabulary::build({"a building appears"}, 1);
  const auto ids = v.encode("a building appears today at noon", 5);
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids.front(), Vocabulary::start);
  EXPECT_EQ(ids.back(), Vocabulary::end);
  const auto unk = v.encode("a zebra", 6);
  EXPECT_EQ(unk[2], Vocabulary::unk);
}

TEST(Vocab, RoundTrip) {
  const auto v = Vocabulary::build({"a building appears"}, 1);
  EXPECT_EQ(v.decode(v.encode("a building appears", 10)), "a building appears");
  EXPECT_EQ(v.decode(v.encode("A Building appears.", 10)), "a building appears");
}

TEST(Vocab, PadNeverBeforeEnd) {
  const auto v = generator_vocab();
  for (const auto& c : caption_templates(change_facts()[17])) {
    const auto ids = v.encode(c, 20);
    const auto end = std::find(ids.begin(), ids.end(), Vocabulary::end);
    ASSERT_NE(end, ids.end());
    EXPECT_EQ(std::find(ids.begin(), end, Vocabulary::pad), end);
    for (int id : ids) EXPECT_LT(static_cast<std::size_t>(id), v.size());
  }
}

TEST(Vocab, SaveLoadRoundTrip) {
  const auto dir = temp_dir("vocab");
  const auto v = generator_vocab();
  v.save(dir + "/vocab.txt");
  EXPECT_EQ(Vocabulary::load(dir + "/vocab.txt"), v);
  std::ifstream is(dir + "/vocab.txt");
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(v.id(first), 4);
}

TEST(Vocab, BijectionHolds) {
  const auto v = generator_vocab();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<int>(i))), static_cast<int>(i));
  EXPECT_THROW(v.token(static_cast<int>(v.size())), IndexError);
}
