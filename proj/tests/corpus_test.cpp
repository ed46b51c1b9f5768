#include "circuitscope/corpus.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "circuitscope/error.hpp"

namespace circuitscope {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "circuitscope_corpus_test";
  fs::create_directories(dir);
  return dir / name;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

TEST(Generate, SameSeedSameCorpus) {
  const auto spec = CorpusSpec::default_spec();
  const auto a = generate(spec, 20, 64, 17);
  const auto b = generate(spec, 20, 64, 17);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_NE(generate(spec, 20, 64, 18).sequences, a.sequences);
  EXPECT_EQ(a.count(Language::A), 20u);
  EXPECT_EQ(a.count(Language::B), 20u);
}

TEST(Generate, LanguageBNeverUsesAExclusiveTokens) {
  const auto spec = CorpusSpec::default_spec();
  const auto c = generate(spec, 500, 64, 3);
  for (const auto& s : c.tokens_of(Language::B))
    for (int t : s) ASSERT_FALSE(spec.a.exclusive.contains(t));
  for (const auto& s : c.sequences)
    for (int t : s.tokens) ASSERT_LT(t, spec.vocab_size);
}

TEST(Generate, LanguageRecoverableFromExclusiveTokens) {
  const auto spec = CorpusSpec::default_spec();
  const auto c = generate(spec, 1000, 64, 5);
  for (const auto& s : c.sequences) {
    const bool has_a = std::any_of(s.tokens.begin(), s.tokens.end(), [&](int t) { return spec.a.exclusive.contains(t); });
    const bool has_b = std::any_of(s.tokens.begin(), s.tokens.end(), [&](int t) { return spec.b.exclusive.contains(t); });
    ASSERT_NE(has_a, has_b);
    ASSERT_EQ(has_a ? Language::A : Language::B, s.language);
  }
}

TEST(Generate, PlantedTrigramIsOverrepresented) {
  const auto spec = CorpusSpec::default_spec();
  // ~1e6 tokens of language A.
  const auto c = generate(spec, 15625, 64, 11);
  std::map<int, double> unigram;
  std::size_t total = 0, windows = 0;
  const Trigram tri = spec.a.planted_trigrams[3];
  std::size_t hits = 0;
  for (const auto& s : c.tokens_of(Language::A)) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      unigram[s[i]] += 1;
      ++total;
      if (i + 2 < s.size()) {
        ++windows;
        hits += (s[i] == tri[0] && s[i + 1] == tri[1] && s[i + 2] == tri[2]);
      }
    }
  }
  ASSERT_GE(total, 1000000u);
  const double observed = double(hits) / double(windows);
  const double independent = unigram[tri[0]] / total * unigram[tri[1]] / total * unigram[tri[2]] / total;
  EXPECT_GE(observed, 5.0 * independent);
}

TEST(Generate, UnigramsMatchZipfTarget) {
  auto spec = CorpusSpec::default_spec();
  spec.a.planted_trigrams.clear();
  const auto c = generate(spec, 15625, 64, 21);
  std::map<int, double> freq;
  double total = 0;
  for (const auto& s : c.tokens_of(Language::A))
    for (int t : s) freq[t] += 1, total += 1;
  const auto ranks = spec.a.rank_order();
  const auto p = spec.a.zipf_probabilities();
  double tv = 0;
  for (std::size_t r = 0; r < ranks.size(); ++r) tv += std::abs(freq[ranks[r]] / total - p[r]);
  EXPECT_LT(tv / 2, 0.02);
}

TEST(Generate, SliceOverflowIsConfigError) {
  auto spec = CorpusSpec::default_spec();
  spec.b.exclusive.end = 600;
  EXPECT_THROW(generate(spec, 1, 8, 0), ConfigError);
  spec = CorpusSpec::default_spec();
  spec.a.exclusive = {200, 400};
  EXPECT_THROW(generate(spec, 1, 8, 0), ConfigError);
  spec = CorpusSpec::default_spec();
  spec.a.planted_trigrams.push_back({1, 2, 400});
  EXPECT_THROW(generate(spec, 1, 8, 0), ConfigError);
}

TEST(RankOrder, InterleavesSlicesInProportion) {
  const auto spec = CorpusSpec::default_spec();
  const auto ranks = spec.a.rank_order();
  ASSERT_EQ(ranks.size(), 96u + 208u);
  EXPECT_EQ(std::set<int>(ranks.begin(), ranks.end()).size(), ranks.size());
  int shared_in_top = 0;
  for (int i = 0; i < 30; ++i) shared_in_top += spec.a.shared.contains(ranks[i]);
  EXPECT_NEAR(shared_in_top, 30 * 96 / 304, 1);
}

Corpus hand_corpus() {
  // Twenty tokens; ids < 2 are non-content.
  Corpus c;
  c.vocab_size = 10;
  c.non_content = {true, true, false, false, false, false, false, false, false, false};
  c.sequences = {{{2, 2, 2, 3, 3, 0, 0, 0, 0, 4}, Language::A}, {{5, 5, 6, 7, 8, 8, 8, 9, 1, 3}, Language::B}};
  return c;
}

// Count, sort by (count desc, id asc), keep content, take k, drop the other
// language's top-k.
std::vector<int> brute_force_top(const Corpus& c, Language l, int k) {
  auto top = [&](Language lang) {
    std::map<int, int> counts;
    for (const auto& s : c.sequences)
      if (s.language == lang)
        for (int t : s.tokens) counts[t]++;
    std::vector<std::pair<int, int>> v;
    for (auto [id, n] : counts)
      if (c.is_content(id)) v.push_back({-n, id});
    std::sort(v.begin(), v.end());
    std::vector<int> ids;
    for (int i = 0; i < k && i < int(v.size()); ++i) ids.push_back(v[i].second);
    return ids;
  };
  const auto mine = top(l);
  const auto other = top(l == Language::A ? Language::B : Language::A);
  std::vector<int> out;
  for (int t : mine)
    if (std::find(other.begin(), other.end(), t) == other.end()) out.push_back(t);
  return out;
}

TEST(TopK, MatchesBruteForceOracle) {
  const auto c = hand_corpus();
  for (int k = 1; k <= 6; ++k) {
    for (Language l : {Language::A, Language::B}) {
      EXPECT_EQ(top_k_exclusive_tokens(c, l, k).tokens, brute_force_top(c, l, k)) << "k=" << k;
    }
  }
  // A: 2 (x3), 3 (x2), 4 (x1); 3 is also frequent in B.
  EXPECT_EQ(top_k_exclusive_tokens(c, Language::A, 3).tokens, (std::vector<int>{2, 4}));
  EXPECT_FALSE(top_k_exclusive_tokens(c, Language::A, 3).short_list);
  EXPECT_TRUE(top_k_exclusive_tokens(c, Language::A, 5).short_list);
}

TEST(TopK, DisjointLanguagesGiveExactlyK) {
  auto spec = CorpusSpec::default_spec();
  spec.a.shared = {0, 16};
  spec.b.shared = {0, 16};
  for (auto* l : {&spec.a, &spec.b}) {
    for (auto& tri : l->planted_trigrams) tri = {l->exclusive.begin, l->exclusive.begin + 1, l->exclusive.begin + 2};
  }
  const auto c = generate(spec, 200, 64, 1);
  for (Language l : {Language::A, Language::B}) {
    const auto top = top_k_exclusive_tokens(c, l, 50);
    EXPECT_EQ(top.tokens.size(), 50u);
    for (int t : top.tokens) EXPECT_GE(t, 16);
  }
  EXPECT_THROW(top_k_exclusive_tokens(c, Language::A, 0), InputError);
}

VocabMap test_vocab() {
  return VocabMap::from_pairs({{"<unk>", 0}, {"<pad>", 1}, {",", 2}, {"der", 3}, {"die", 4}, {"das", 5}, {"haus", 6},
                               {"ist", 7}, {"klein", 8}, {"und", 9}, {"alt", 10}, {"sehr", 11}});
}

TEST(Ingest, KnownWordsMapDirectly) {
  const auto path = temp_path("ten.txt");
  write_file(path, "der haus ist klein ,\nund das haus ist alt\n");
  const auto c = ingest_text(path, test_vocab(), Language::A, 10);
  ASSERT_EQ(c.sequences.size(), 1u);
  EXPECT_EQ(c.sequences[0].tokens, (std::vector<int>{3, 6, 7, 8, 2, 9, 5, 6, 7, 10}));
  EXPECT_EQ(test_vocab().detokenize(c.sequences[0].tokens), "der haus ist klein , und das haus ist alt");
  EXPECT_FALSE(c.is_content(2));
  EXPECT_TRUE(c.is_content(3));
}

TEST(Ingest, OutOfVocabularyAndPadding) {
  const auto path = temp_path("oov.txt");
  write_file(path, "das boot ist sehr alt");
  const auto c = ingest_text(path, test_vocab(), Language::B, 3);
  ASSERT_EQ(c.sequences.size(), 2u);
  EXPECT_EQ(c.sequences[0].tokens, (std::vector<int>{5, 0, 7}));
  EXPECT_EQ(c.sequences[1].tokens, (std::vector<int>{11, 10, 1}));
  EXPECT_EQ(c.sequences[1].language, Language::B);
}

TEST(Ingest, Errors) {
  EXPECT_THROW(ingest_text(temp_path("missing.txt"), test_vocab(), Language::A, 4), IoError);
  const auto empty = temp_path("empty.txt");
  write_file(empty, "  \n\n");
  EXPECT_THROW(ingest_text(empty, test_vocab(), Language::A, 4), DataError);
  EXPECT_THROW(VocabMap::from_pairs({{"a", 1}}), ConfigError);
}

TEST(VocabMapFile, LoadsTabSeparatedPairs) {
  const auto path = temp_path("vocab.tsv");
  write_file(path, "<unk>\t0\nhallo\t1\nwelt\t2\n");
  const auto v = VocabMap::load(path);
  EXPECT_EQ(v.word_to_id.at("welt"), 2);
  EXPECT_EQ(v.oov_id, 0);
  EXPECT_EQ(v.pad_id, 0);
  write_file(path, "<unk> 0\n");
  EXPECT_THROW(VocabMap::load(path), FormatError);
}

TEST(CorpusFile, RoundTripAndValidation) {
  const auto spec = CorpusSpec::default_spec();
  const auto c = generate(spec, 5, 16, 2);
  const auto path = temp_path("corpus.txt");
  save_corpus(c, path);
  const auto back = load_corpus(path, spec.vocab_size, spec.non_content);
  EXPECT_EQ(back.sequences, c.sequences);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first.substr(0, 2), "A\t");
  write_file(path, "C\t1 2 3\n");
  EXPECT_THROW(load_corpus(path, 512, 16), InputError);
  write_file(path, "A\t1 2 999\n");
  EXPECT_THROW(load_corpus(path, 512, 16), FormatError);
  write_file(path, "A 1 2\n");
  EXPECT_THROW(load_corpus(path, 512, 16), FormatError);
}

}  // namespace
}  // namespace circuitscope
