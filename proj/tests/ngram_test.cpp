#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "circuitscope/error.hpp"
#include "circuitscope/ngram.hpp"
#include "circuitscope/table.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace circuitscope;

namespace {

ModelConfig config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_mlp = 6;
  c.vocab_size = 12;
  c.max_seq_len = 16;
  return c;
}

AblationSpec ablation() {
  AblationSpec a;
  a.neuron = {0, 2};
  a.mean = 1.5;
  return a;
}

}  // namespace

TEST(Filter, PredicateMatchesDefinition) {
  const FilterConfig strict;
  FilterConfig loose;
  loose.require_indirect_dominant = false;
  const double cleans[] = {0.0, 1.0, 1.5, 1.5000001, 3.0};
  const double totals[] = {-1.0, 0.0, 0.1999999, 0.2, 5.0};
  const double splits[] = {-0.5, 0.0, 0.3};
  for (double clean : cleans)
    for (double total : totals)
      for (double direct : splits)
        for (double indirect : splits) {
          const bool base = clean <= 1.5 && total >= 0.2;
          EXPECT_EQ(loose.passes(clean, total, direct, indirect), base);
          EXPECT_EQ(strict.passes(clean, total, direct, indirect), base && indirect > direct);
        }
}

TEST(Filter, KeepsPassingCandidatesInOrder) {
  std::vector<Candidate> cs(4);
  for (int i = 0; i < 4; ++i) cs[static_cast<std::size_t>(i)].tokens = {i, i, i};
  cs[0].clean = 1.0, cs[0].ablated = 1.5, cs[0].direct = 0.1, cs[0].indirect = 0.4;
  cs[1].clean = 2.0, cs[1].ablated = 3.0, cs[1].direct = 0.1, cs[1].indirect = 0.9;
  cs[2].clean = 0.5, cs[2].ablated = 0.6, cs[2].direct = 0.0, cs[2].indirect = 0.1;
  cs[3].clean = 0.2, cs[3].ablated = 1.2, cs[3].direct = 0.6, cs[3].indirect = 0.4;
  const auto kept = filter(cs, FilterConfig{});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].tokens, (Trigram{0, 0, 0}));
  FilterConfig loose;
  loose.require_indirect_dominant = false;
  EXPECT_EQ(filter(cs, loose).size(), 2u);
  loose.max_clean_loss = std::nan("");
  EXPECT_THROW(filter(cs, loose), ConfigError);
}

TEST(Prompts, ShapeMembershipAndDeterminism) {
  const std::vector<int> pool{3, 5, 7, 9};
  const Trigram tri{1, 2, 4};
  const auto p = make_prompts(tri, pool, 12, 100, 20, 42);
  ASSERT_EQ(p.size(), 100u);
  std::set<int> seen;
  for (const auto& prompt : p) {
    ASSERT_EQ(prompt.size(), 23u);
    for (std::size_t i = 0; i < 20; ++i) {
      EXPECT_TRUE(std::count(pool.begin(), pool.end(), prompt[i])) << prompt[i];
      seen.insert(prompt[i]);
    }
    EXPECT_EQ(prompt[20], 1);
    EXPECT_EQ(prompt[21], 2);
    EXPECT_EQ(prompt[22], 4);
  }
  EXPECT_EQ(seen.size(), pool.size());
  EXPECT_EQ(make_prompts(tri, pool, 12, 100, 20, 42), p);
  EXPECT_NE(make_prompts(tri, pool, 12, 100, 20, 43), p);
  const Trigram other{1, 2, 5};
  EXPECT_NE(make_prompts(other, pool, 12, 1, 20, 42)[0], std::vector<int>(p[0].begin(), p[0].end()));

  EXPECT_THROW(make_prompts(tri, pool, 12, 0, 20, 0), InputError);
  EXPECT_THROW(make_prompts(tri, pool, 12, 5, 0, 0), InputError);
  EXPECT_THROW(make_prompts(tri, std::vector<int>{}, 12, 5, 20, 0), InputError);
  const Trigram bad{1, 2, 12};
  EXPECT_THROW(make_prompts(bad, pool, 12, 5, 20, 0), InputError);
}

TEST(Prompts, PoolComesFromLanguageAExclusiveTokens) {
  const Corpus corpus = generate(CorpusSpec::default_spec(), 60, 32, 1);
  const auto pool = prompt_pool(corpus, 100);
  const auto spec = CorpusSpec::default_spec();
  ASSERT_FALSE(pool.empty());
  for (int t : pool) {
    EXPECT_TRUE(corpus.is_content(t));
    EXPECT_FALSE(spec.b.exclusive.contains(t)) << t;
  }
  EXPECT_EQ(pool, top_k_exclusive_tokens(corpus, Language::A, 100).tokens);
  const auto prompts = make_prompts(Trigram{20, 21, 22}, corpus, 5);
  for (const auto& p : prompts) {
    ASSERT_EQ(p.size(), 23u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_TRUE(std::count(pool.begin(), pool.end(), p[i]));
  }
  EXPECT_THROW(prompt_pool(corpus, 0), InputError);
}

TEST(Verify, RecomputesFromPassLosses) {
  std::mt19937_64 rng(11);
  const auto model = oracle::random_model(config(), rng);
  const std::vector<int> pool{3, 4, 5, 6};
  const Trigram tri{7, 8, 9};
  const auto prompts = make_prompts(tri, pool, 12, 7, 5, 3);
  const auto rec = verify(model, ablation(), tri, prompts);
  double clean = 0, ablated = 0, direct = 0, indirect = 0;
  for (const auto& p : prompts) {
    const auto pl = pass_losses(model, {p}, ablation(), true, true);
    const std::size_t last = p.size() - 2;
    clean += pl.clean[last];
    ablated += pl.ablated[last];
    direct += (*pl.direct)[last] - pl.clean[last];
    indirect += (*pl.indirect)[last] - pl.clean[last];
  }
  EXPECT_EQ(rec.n_prompts, 7);
  EXPECT_EQ(rec.tokens, tri);
  EXPECT_NEAR(rec.clean, clean / 7, 1e-6);
  EXPECT_NEAR(rec.ablated, ablated / 7, 1e-6);
  EXPECT_NEAR(rec.direct, direct / 7, 1e-6);
  EXPECT_NEAR(rec.indirect, indirect / 7, 1e-6);
  EXPECT_EQ(rec.verdict, FilterConfig{}.passes(rec.clean, rec.total(), rec.direct, rec.indirect));

  // Batched verification agrees with one-at-a-time verification.
  const Trigram tri2{1, 2, 3};
  const auto prompts2 = make_prompts(tri2, pool, 12, 4, 8, 3);
  const auto many = verify_many(model, ablation(), {tri, tri2}, {prompts, prompts2});
  ASSERT_EQ(many.size(), 2u);
  EXPECT_NEAR(many[0].clean, rec.clean, 1e-6);
  EXPECT_NEAR(many[0].indirect, rec.indirect, 1e-6);
  const auto rec2 = verify(model, ablation(), tri2, prompts2);
  EXPECT_NEAR(many[1].ablated, rec2.ablated, 1e-6);
  EXPECT_NEAR(many[1].direct, rec2.direct, 1e-6);

  EXPECT_THROW(verify(model, ablation(), tri, {}), InputError);
  EXPECT_THROW(verify(model, ablation(), tri2, prompts), InputError);
}

TEST(Scan, SitesCoverEveryTriple) {
  std::mt19937_64 rng(12);
  const auto model = oracle::random_model(config(), rng);
  const std::vector<std::vector<int>> seqs{{1, 2, 3, 4, 5}, {6, 7, 8, 9, 10}, {1, 2, 3}};
  const auto sites = scan_sites(model, seqs, ablation());
  ASSERT_EQ(sites.size(), 3u + 3u + 1u);
  for (const auto& s : sites) {
    const auto& seq = seqs[static_cast<std::size_t>(s.sequence)];
    EXPECT_EQ(s.tokens, (Trigram{seq[static_cast<std::size_t>(s.position) - 2],
                                 seq[static_cast<std::size_t>(s.position) - 1], seq[static_cast<std::size_t>(s.position)]}));
  }
  const auto pl = pass_losses(model, {seqs[1]}, ablation(), true, true);
  const auto& s = sites[4];
  ASSERT_EQ(s.sequence, 1);
  ASSERT_EQ(s.position, 3);
  EXPECT_NEAR(s.clean, pl.clean[2], 1e-6);
  EXPECT_NEAR(s.indirect, (*pl.indirect)[2] - pl.clean[2], 1e-6);
  EXPECT_THROW(scan_sites(model, {}, ablation()), DataError);
}

TEST(Scan, GroupsRepeatedTriplesAndRanksByIndirect) {
  std::mt19937_64 rng(13);
  const auto model = oracle::random_model(config(), rng);
  std::vector<std::vector<int>> seqs;
  for (int i = 0; i < 5; ++i) seqs.push_back({1, 2, 3, 4, 5, 6});
  seqs.push_back({2, 3, 4, 11, 10, 9});
  const auto all = scan(model, seqs, ablation(), 100);
  std::set<Trigram> unique;
  for (const auto& c : all) EXPECT_TRUE(unique.insert(c.tokens).second);
  EXPECT_EQ(all.size(), 4u + 3u);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].indirect, all[i].indirect);
  const std::map<Trigram, int> expected{{{1, 2, 3}, 5},  {{2, 3, 4}, 6},   {{3, 4, 5}, 5},  {{4, 5, 6}, 5},
                                        {{3, 4, 11}, 1}, {{4, 11, 10}, 1}, {{11, 10, 9}, 1}};
  for (const auto& c : all) EXPECT_EQ(c.occurrences, expected.at(c.tokens));
  const auto top = scan(model, seqs, ablation(), 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].tokens, all[0].tokens);
  EXPECT_THROW(scan(model, seqs, ablation(), 0), InputError);
}

TEST(Scan, JsonLinesOutput) {
  TrigramRecord r;
  r.tokens = {1, 2, 3};
  r.n_prompts = 100;
  r.clean = 0.5;
  r.ablated = 1.25;
  r.direct = 0.125;
  r.indirect = 0.5;
  r.verdict = true;
  const auto vocab = VocabMap::from_pairs({{"<unk>", 0}, {"der", 1}, {"die", 2}, {"das", 3}});
  const auto dir = std::filesystem::temp_directory_path() / "circuitscope_ngram_test";
  std::filesystem::remove_all(dir);
  write_trigram_jsonl({r, r}, dir / "t.jsonl", &vocab);
  const std::string text = read_text(dir / "t.jsonl");
  const auto first = text.substr(0, text.find('\n'));
  const auto j = nlohmann::json::parse(first);
  EXPECT_EQ(j["tokens"], (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(j["text"], "der die das");
  EXPECT_DOUBLE_EQ(j["total"].get<double>(), 0.75);
  EXPECT_EQ(j["verdict"], true);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_EQ(first.rfind("{\"tokens\"", 0), 0u);
  std::filesystem::remove_all(dir);
}
