#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "circuitscope/causal.hpp"
#include "circuitscope/error.hpp"
#include "oracles.hpp"

using namespace circuitscope;

namespace {

ModelConfig config(bool parallel, int layers = 3) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_mlp = 6;
  c.vocab_size = 10;
  c.max_seq_len = 12;
  c.parallel_blocks = parallel;
  return c;
}

std::vector<std::vector<int>> random_sequences(std::mt19937_64& rng, std::size_t n, std::size_t len, int vocab) {
  std::vector<std::vector<int>> out(n, std::vector<int>(len));
  for (auto& s : out)
    for (auto& t : s) t = static_cast<int>(rng() % static_cast<unsigned>(vocab));
  return out;
}

Corpus corpus_of(const std::vector<std::vector<int>>& a, const std::vector<std::vector<int>>& b, int vocab) {
  Corpus c;
  c.vocab_size = vocab;
  c.non_content.assign(static_cast<std::size_t>(vocab), false);
  for (const auto& s : a) c.sequences.push_back({s, Language::A});
  for (const auto& s : b) c.sequences.push_back({s, Language::B});
  return c;
}

AblationSpec mean_ablation(NeuronId n, double mean) {
  AblationSpec a;
  a.neuron = n;
  a.mean = mean;
  return a;
}

class Effects : public ::testing::TestWithParam<bool> {};

}  // namespace

TEST_P(Effects, SelfPinHasNoEffect) {
  std::mt19937_64 rng(1);
  const auto model = oracle::random_model(config(GetParam()), rng);
  const auto seqs = random_sequences(rng, 5, 9, 10);
  for (int layer = 0; layer < 3; ++layer) {
    const auto r = measure_effects(model, seqs, AblationSpec::self_pin({layer, 2}));
    EXPECT_EQ(r.total, 0.0);
    EXPECT_EQ(*r.direct, 0.0);
    EXPECT_EQ(*r.indirect, 0.0);
  }
}

TEST_P(Effects, LastLayerHasNoIndirectPath) {
  std::mt19937_64 rng(2);
  const auto model = oracle::random_model(config(GetParam()), rng);
  const auto seqs = random_sequences(rng, 6, 10, 10);
  const auto r = measure_effects(model, seqs, mean_ablation({2, 4}, 1.7));
  EXPECT_NE(r.total, 0.0);
  EXPECT_EQ(*r.indirect, 0.0);
  EXPECT_EQ(*r.direct, r.total);
}

TEST_P(Effects, DeadDownstreamLayersCarryNothing) {
  std::mt19937_64 rng(3);
  auto model = oracle::random_model(config(GetParam()), rng);
  // Layers after 0 write constants, so only the direct path remains.
  for (int l = 1; l < 3; ++l) {
    auto& lw = model.mutable_weights().layers[static_cast<std::size_t>(l)];
    lw.w_o = Tensor(lw.w_o.shape());
    lw.w_out = Tensor(lw.w_out.shape());
  }
  const auto seqs = random_sequences(rng, 4, 8, 10);
  const auto r = measure_effects(model, seqs, mean_ablation({0, 1}, -0.8));
  EXPECT_NE(r.total, 0.0);
  EXPECT_EQ(*r.indirect, 0.0);
  EXPECT_DOUBLE_EQ(*r.direct, r.total);
}

TEST_P(Effects, AblatedPassMatchesManualIntervention) {
  std::mt19937_64 rng(4);
  const auto model = oracle::random_model(config(GetParam()), rng);
  const auto seqs = random_sequences(rng, 3, 7, 10);
  const NeuronId n{1, 3};
  const auto r = measure_effects(model, seqs, mean_ablation(n, 0.25), false, false);
  const Intervention pin[] = {Intervention::pin_mean(HookId(HookSite::mlp_act, 1), 0.25f, 3)};
  double clean = 0.0, ablated = 0.0;
  for (const auto& s : seqs) {
    const Tensor lc = per_token_loss(model, s);
    const Tensor logits = forward_with_interventions(model, s, pin).logits;
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      clean += lc[t];
      ablated += oracle::cross_entropy_row(logits.ptr() + t * 10, 10, s[t + 1]);
    }
  }
  const double count = 3.0 * 6.0;
  EXPECT_NEAR(r.clean_loss, clean / count, 1e-6);
  EXPECT_NEAR(r.ablated_loss, ablated / count, 1e-5);
  EXPECT_NEAR(r.total, (ablated - clean) / count, 1e-5);
  EXPECT_FALSE(r.direct.has_value());
  EXPECT_FALSE(r.indirect.has_value());
}

INSTANTIATE_TEST_SUITE_P(BlockModes, Effects, ::testing::Bool());

TEST(Effects, BatchingDoesNotChangeResults) {
  std::mt19937_64 rng(5);
  const auto model = oracle::random_model(config(true), rng);
  auto seqs = random_sequences(rng, 40, 6, 10);
  const auto longer = random_sequences(rng, 3, 9, 10);
  seqs.insert(seqs.begin() + 10, longer.begin(), longer.end());
  const auto spec = mean_ablation({0, 5}, 0.4);
  const auto all = measure_effects(model, seqs, spec);
  ASSERT_EQ(all.per_sequence_total.size(), seqs.size());
  double clean = 0.0, total = 0.0, direct = 0.0, indirect = 0.0;
  double tokens = 0.0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto one = measure_effects(model, {seqs[i]}, spec);
    const double w = double(seqs[i].size() - 1);
    clean += one.clean_loss * w;
    total += one.total * w;
    direct += *one.direct * w;
    indirect += *one.indirect * w;
    tokens += w;
    EXPECT_NEAR(all.per_sequence_total[i], one.total, 1e-6);
  }
  EXPECT_NEAR(all.clean_loss, clean / tokens, 1e-6);
  EXPECT_NEAR(all.total, total / tokens, 1e-6);
  EXPECT_NEAR(*all.direct, direct / tokens, 1e-6);
  EXPECT_NEAR(*all.indirect, indirect / tokens, 1e-6);
}

TEST(Effects, ReportJson) {
  EffectReport r;
  r.step = 12;
  r.neuron = {1, 4};
  r.clean_loss = 2.0;
  r.total = 0.5;
  r.indirect = 0.25;
  const auto j = r.to_json();
  EXPECT_EQ(j["step"], 12);
  EXPECT_EQ(j["layer"], 1);
  EXPECT_EQ(j["neuron"], 4);
  EXPECT_DOUBLE_EQ(j["pct_total"].get<double>(), 25.0);
  EXPECT_TRUE(j["direct"].is_null());
  EXPECT_TRUE(j["pct_direct"].is_null());
  EXPECT_DOUBLE_EQ(j["pct_indirect"].get<double>(), 12.5);
}

TEST(Effects, InputErrors) {
  std::mt19937_64 rng(6);
  const auto model = oracle::random_model(config(true), rng);
  const auto seqs = random_sequences(rng, 2, 5, 10);
  EXPECT_THROW(measure_effects(model, seqs, mean_ablation({3, 0}, 0.0)), AddressError);
  EXPECT_THROW(measure_effects(model, seqs, mean_ablation({0, 6}, 0.0)), AddressError);
  EXPECT_THROW(measure_effects(model, seqs, mean_ablation({0, 0}, std::nan(""))), NumericError);
  EXPECT_THROW(measure_effects(model, {}, mean_ablation({0, 0}, 0.0)), DataError);
  EXPECT_THROW(measure_effects(model, {{1}}, mean_ablation({0, 0}, 0.0)), InputError);
}

TEST(MeanActivation, MatchesCachedForwardPasses) {
  std::mt19937_64 rng(7);
  const auto model = oracle::random_model(config(false), rng);
  const auto a = random_sequences(rng, 35, 7, 10);
  const auto b = random_sequences(rng, 4, 5, 10);
  const Corpus corpus = corpus_of(a, b, 10);
  const NeuronId n{1, 2};
  const HookId site(HookSite::mlp_act, 1);
  auto manual = [&](const std::vector<std::vector<int>>& seqs) {
    double sum = 0.0, count = 0.0;
    for (const auto& s : seqs) {
      const auto [logits, cache] = forward_with_cache(model, s, std::span<const HookId>(&site, 1));
      for (std::size_t t = 1; t < s.size(); ++t) sum += cache.at(site).at(t, 2);
      count += double(s.size() - 1);
    }
    return sum / count;
  };
  EXPECT_NEAR(mean_activation(model, corpus, Language::A, n), manual(a), 1e-6);
  EXPECT_NEAR(mean_activation(model, corpus, Language::B, n), manual(b), 1e-6);
  auto both = a;
  both.insert(both.end(), b.begin(), b.end());
  EXPECT_NEAR(mean_activation(model, corpus, std::nullopt, n), manual(both), 1e-6);

  const auto spec = AblationSpec::from_corpus(model, corpus, n, Language::B, "eval", 40);
  EXPECT_DOUBLE_EQ(spec.mean, mean_activation(model, corpus, Language::B, n));
  EXPECT_EQ(spec.corpus_id, "eval");
  EXPECT_EQ(spec.step, 40);
  EXPECT_THROW(mean_activation(model, corpus_of(a, {}, 10), Language::B, n), DataError);
  EXPECT_THROW(mean_activation(model, corpus, Language::A, {2, 6}), AddressError);
  const auto layer = mean_activations(model, corpus, Language::A, 1);
  ASSERT_EQ(layer.size(), 6u);
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(layer[static_cast<std::size_t>(i)], mean_activation(model, corpus, Language::A, {1, i}));
}

TEST(MeanLoss, MatchesPerTokenLoss) {
  std::mt19937_64 rng(8);
  const auto model = oracle::random_model(config(true), rng);
  const auto seqs = random_sequences(rng, 5, 8, 10);
  double sum = 0.0;
  for (const auto& s : seqs) {
    const Tensor l = per_token_loss(model, s);
    for (float v : l.data()) sum += v;
  }
  EXPECT_NEAR(mean_loss(model, seqs), sum / 35.0, 1e-6);
}

TEST(Dla, IdentityUnembeddingReturnsOutputRow) {
  ModelConfig c = config(true, 2);
  c.d_model = 10;
  c.d_head = 5;
  std::mt19937_64 rng(9);
  auto model = oracle::random_model(c, rng);
  model.mutable_weights().w_u = Tensor::identity(10);
  const auto& w = model.weights();
  const Tensor plain = dla(model, {1, 3});
  const Tensor folded = dla(model, {1, 3}, true);
  for (std::size_t t = 0; t < 10; ++t) {
    EXPECT_FLOAT_EQ(plain[t], w.layers[1].w_out.at(3, t));
    EXPECT_NEAR(folded[t], double(w.layers[1].w_out.at(3, t)) * w.lnf_w[t], 1e-6);
  }
  const int toks_a[] = {0, 1}, toks_b[] = {5};
  const double gap = (double(plain[0]) + plain[1]) / 2 - plain[5];
  EXPECT_NEAR(dla_language_gap(model, {1, 3}, toks_a, toks_b), gap, 1e-6);
  EXPECT_THROW(dla_language_gap(model, {1, 3}, {}, toks_b), InputError);
  const int bad[] = {10};
  EXPECT_THROW(dla_language_gap(model, {1, 3}, toks_a, bad), IndexError);
  EXPECT_THROW(dla(model, {2, 0}), AddressError);
}

TEST(Dla, LinearUnderFrozenFinalNorm) {
  std::mt19937_64 rng(10);
  auto model = oracle::random_model(config(true), rng);
  // A zero-mean output row passes through the mean subtraction unchanged.
  auto& row = model.mutable_weights().layers[1].w_out;
  double mu = 0.0;
  for (std::size_t j = 0; j < 8; ++j) mu += row.at(4, j);
  for (std::size_t j = 0; j < 8; ++j) row.at(4, j) -= static_cast<float>(mu / 8);
  const auto& w = model.weights();

  const std::vector<int> tokens{3, 1, 4, 1, 5};
  std::vector<std::vector<double>> resid;
  oracle::reference_forward(model, tokens, &resid);
  const auto& r = resid.back();
  double mean = 0.0, var = 0.0;
  for (double v : r) mean += v;
  mean /= 8;
  for (double v : r) var += (v - mean) * (v - mean);
  const double rstd = 1.0 / std::sqrt(var / 8 + model.config().ln_eps);

  const double c = 0.7;
  auto frozen_logits = [&](double scale) {
    std::vector<double> out(10, 0.0);
    for (std::size_t j = 0; j < 8; ++j) {
      const double x = r[j] + scale * row.at(4, j);
      const double normed = (x - mean) * rstd * w.lnf_w[j] + w.lnf_b[j];
      for (std::size_t t = 0; t < 10; ++t) out[t] += normed * w.w_u.at(j, t);
    }
    return out;
  };
  const auto base = frozen_logits(0.0);
  const auto moved = frozen_logits(c);
  const Tensor attr = dla(model, {1, 4}, true);
  for (std::size_t t = 0; t < 10; ++t) EXPECT_NEAR(moved[t] - base[t], c * rstd * attr[t], 1e-5);
}
