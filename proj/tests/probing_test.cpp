#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "circuitscope/error.hpp"
#include "circuitscope/probing.hpp"
#include "circuitscope/stats.hpp"

using namespace circuitscope;

namespace {

struct BruteForce {
  double f1, mcc;
};

BruteForce brute_force(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& y) {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] && y[i];
    fp += p[i] && !y[i];
    tn += !p[i] && !y[i];
    fn += !p[i] && y[i];
  }
  const double precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
  const double recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
  const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  const double den = double(tp + fp) * double(tp + fn) * double(tn + fp) * double(tn + fn);
  const double m = den == 0 ? 0.0 : (double(tp) * double(tn) - double(fp) * double(fn)) / std::sqrt(den);
  return {f1, m};
}

ActivationDataset gaussian_dataset(std::size_t per_class, double separation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  ActivationDataset d;
  d.neuron = {1, 7};
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const bool a = i < per_class;
    d.values.push_back(noise(rng) + (a ? float(separation) : 0.0f));
    d.labels.push_back(a);
  }
  return d;
}

// Two-token-class micro-model: A sequences use token 1, B sequences token 2.
// Neuron 0 of layer 0 reads embedding dimension 0, which is 1 for token 1 and
// 0 for token 2 (whose embedding is all zeros), so its activation is a fixed
// positive value on A positions and exactly gelu(0) = 0 on B positions.
Transformer pinned_neuron_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.d_head = 4;
  c.d_mlp = 3;
  c.vocab_size = 4;
  c.max_seq_len = 8;
  Transformer m(c);
  auto& w = m.mutable_weights();
  w.w_e.at(1, 0) = 1.0f;
  w.layers[0].w_in.at(0, 0) = 0.8f;
  return m;
}

}  // namespace

TEST(Metrics, ClosedFormCases) {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(f1_score(y, y), 1.0);
  EXPECT_DOUBLE_EQ(mcc(y, y), 1.0);
  const std::vector<std::uint8_t> all_pos(6, 1);
  EXPECT_NEAR(f1_score(all_pos, y), 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(mcc(all_pos, y), 0.0);
  const std::vector<std::uint8_t> none(6, 0);
  EXPECT_DOUBLE_EQ(f1_score(none, y), 0.0);
  EXPECT_DOUBLE_EQ(mcc(none, y), 0.0);
  EXPECT_THROW(f1_score(y, std::span(all_pos).first(5)), InputError);
  EXPECT_THROW(mcc({}, {}), InputError);
}

TEST(Metrics, MatchBruteForceOnRandomCases) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 100;
    std::vector<std::uint8_t> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng() & 1;
      y[i] = rng() % 3 == 0;
    }
    const auto bf = brute_force(p, y);
    ASSERT_NEAR(f1_score(p, y), bf.f1, 1e-12) << trial;
    ASSERT_NEAR(mcc(p, y), bf.mcc, 1e-12) << trial;
  }
}

TEST(Logistic, RecoversKnownParameters) {
  // Labels drawn from a logistic model with w = 1.5, b = -0.5.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> xs(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(20000);
  std::vector<std::uint8_t> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = xs(rng);
    y[i] = u(rng) < 1.0 / (1.0 + std::exp(-(1.5 * x[i] - 0.5)));
  }
  const auto fit = fit_logistic_1d(x, y);
  EXPECT_FALSE(fit.capped);
  EXPECT_NEAR(fit.weight, 1.5, 0.08);
  EXPECT_NEAR(fit.bias, -0.5, 0.06);
  EXPECT_LT(fit.iterations, 20);
}

TEST(Logistic, SeparableDataIsCappedWithThresholdInGap) {
  std::vector<double> x{-3, -2, -1, -0.05, 0.05, 1, 2, 3};
  std::vector<std::uint8_t> y{0, 0, 0, 0, 1, 1, 1, 1};
  const auto fit = fit_logistic_1d(x, y);
  EXPECT_TRUE(fit.capped);
  EXPECT_DOUBLE_EQ(std::abs(fit.weight), kProbeWeightCap);
  const double threshold = -fit.bias / fit.weight;
  EXPECT_GT(threshold, -0.05);
  EXPECT_LT(threshold, 0.05);
  EXPECT_THROW(fit_logistic_1d(x, std::vector<std::uint8_t>(8, 1)), ProbeError);
}

TEST(Probe, SeparableDatasetScoresPerfectly) {
  const auto d = gaussian_dataset(500, 50.0, 1);
  const auto r = fit_probe(d);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.mcc, 1.0);
  EXPECT_GT(r.weight, 0.0);
  EXPECT_EQ(r.neuron, (NeuronId{1, 7}));
}

TEST(Probe, InformativeNeuronBeatsChance) {
  const auto r = fit_probe(gaussian_dataset(2000, 2.0, 2));
  EXPECT_GT(r.f1, 0.8);
  EXPECT_GT(r.mcc, 0.6);
}

TEST(Probe, PermutationNull) {
  double f1_sum = 0.0, mcc_sum = 0.0, f1_max = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto d = gaussian_dataset(1000, 0.0, 100 + seed);
    std::mt19937_64 rng(seed);
    std::shuffle(d.labels.begin(), d.labels.end(), rng);
    const auto r = fit_probe(d, 0.8, seed);
    f1_sum += r.f1;
    mcc_sum += r.mcc;
    f1_max = std::max(f1_max, r.f1);
  }
  EXPECT_NEAR(f1_sum / 20, 0.5, 0.05);
  EXPECT_NEAR(mcc_sum / 20, 0.0, 0.05);
  EXPECT_LT(f1_max, 0.6);
}

TEST(Probe, InvariantToIncreasingAffineMaps) {
  const auto d = gaussian_dataset(1500, 1.0, 9);
  const auto base = fit_probe(d, 0.8, 4);
  auto scaled = d;
  for (auto& v : scaled.values) v = 1000.0f * v + 37.0f;
  const auto r = fit_probe(scaled, 0.8, 4);
  EXPECT_DOUBLE_EQ(r.f1, base.f1);
  EXPECT_DOUBLE_EQ(r.mcc, base.mcc);
}

TEST(Probe, RejectsBadInput) {
  ActivationDataset d;
  d.values = {1.0f, 2.0f, 3.0f};
  d.labels = {1, 1, 1};
  EXPECT_THROW(fit_probe(d), ProbeError);
  d.labels = {1, 0};
  EXPECT_THROW(fit_probe(d), InputError);
  d.labels = {1, 0, 1};
  d.values[1] = std::nanf("");
  EXPECT_THROW(fit_probe(d), NumericError);
}

TEST(Collect, BalancedDeterministicAndExcludesPositionZero) {
  const Corpus corpus = generate(CorpusSpec::default_spec(), 20, 16, 3);
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_mlp = 8;
  c.max_seq_len = 16;
  std::mt19937_64 rng(2);
  Transformer model(c);
  model.mutable_weights().visit([&](const std::string&, Tensor& t) {
    std::normal_distribution<float> dist(0.0f, 0.3f);
    for (auto& v : t.data()) v = dist(rng);
  });
  const auto sites = sample_sites(corpus, 100, 7);
  ASSERT_EQ(sites.size(), 200u);
  for (const auto& s : sites) EXPECT_GE(s.position, 1);
  std::set<TokenSite> unique(sites.begin(), sites.end());
  EXPECT_EQ(unique.size(), 200u);

  const int layers[] = {0, 1};
  const auto a = collect_activations(model, corpus, layers, 100, 7, 5);
  const auto b = collect_activations(model, corpus, layers, 100, 7, 5);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[1].values, b[1].values);
  EXPECT_EQ(a[0].size(), 200u);
  EXPECT_EQ(std::count(a[0].labels.begin(), a[0].labels.end(), 1), 100);
  EXPECT_EQ(a[0].step, 5);

  // Values agree with a direct cached forward pass at the sampled site.
  const auto& site = sites[150];
  const auto& seq = corpus.sequences[static_cast<std::size_t>(site.sequence)].tokens;
  const HookId id(HookSite::mlp_act, 1);
  const auto [logits, cache] = forward_with_cache(model, seq, std::span<const HookId>(&id, 1));
  for (std::size_t n = 0; n < 8; ++n) {
    EXPECT_FLOAT_EQ(a[1].values[150 * 8 + n], cache.at(id).at(static_cast<std::size_t>(site.position), n));
  }
  const auto ds = a[1].dataset(3);
  EXPECT_EQ(ds.neuron, (NeuronId{1, 3}));
  EXPECT_FLOAT_EQ(ds.values[150], a[1].values[150 * 8 + 3]);

  // 20 sequences of 15 usable positions per language.
  EXPECT_THROW(sample_sites(corpus, 301, 0), DataError);
  EXPECT_NO_THROW(sample_sites(corpus, 300, 0));
}

TEST(Collect, PinnedNeuronIsPerfectlySeparated) {
  const Transformer model = pinned_neuron_model();
  Corpus corpus;
  corpus.vocab_size = 4;
  corpus.non_content.assign(4, false);
  for (int i = 0; i < 30; ++i) corpus.sequences.push_back({std::vector<int>(8, 1), Language::A});
  for (int i = 0; i < 30; ++i) corpus.sequences.push_back({std::vector<int>(8, 2), Language::B});
  const auto acts = collect_activations(model, corpus, 0, 200, 1);
  const auto ds = acts.dataset(0);
  for (std::size_t i = 0; i < ds.values.size(); ++i) {
    if (ds.labels[i]) {
      EXPECT_GT(ds.values[i], 0.1f);
    } else {
      EXPECT_EQ(ds.values[i], 0.0f);
    }
  }
  const auto r = fit_probe(ds, 0.8, 1);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  const auto probes = fit_layer_probes(acts, 0.8, 1);
  ASSERT_EQ(probes.size(), 3u);
  EXPECT_DOUBLE_EQ(probes[0].f1, 1.0);
  EXPECT_EQ(probes[0].f1, r.f1);
  EXPECT_EQ(probes[0].weight, r.weight);
}

TEST(Percentiles, LinearInterpolation) {
  std::vector<std::vector<double>> units;
  for (int u = 1; u <= 100; ++u) units.push_back({double(u), double(u)});
  const double probes[] = {25, 50, 75, 0, 100};
  const auto bands = percentile_bands(units, probes);
  ASSERT_EQ(bands.size(), 2u);
  EXPECT_DOUBLE_EQ(bands[0][0], 25.75);
  EXPECT_DOUBLE_EQ(bands[0][1], 50.5);
  EXPECT_DOUBLE_EQ(bands[0][2], 75.25);
  EXPECT_DOUBLE_EQ(bands[1][3], 1.0);
  EXPECT_DOUBLE_EQ(bands[1][4], 100.0);
  EXPECT_DOUBLE_EQ(median_of({5, 1, 9, 3, 7}), 5.0);
  const auto single = percentile_bands({{1.0, 4.0, 2.0}}, probes);
  for (std::size_t s = 0; s < 3; ++s) {
    for (double v : single[s]) EXPECT_DOUBLE_EQ(v, (std::vector<double>{1.0, 4.0, 2.0})[s]);
  }
  EXPECT_THROW(percentile_bands({}, probes), InputError);
  EXPECT_THROW(percentile({}, 50), InputError);
}
