#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "circuitscope/checkpoint.hpp"
#include "circuitscope/corpus.hpp"
#include "circuitscope/model.hpp"

namespace circuitscope {

// One neuron's activations with binary labels (1 = language A).
struct ActivationDataset {
  NeuronId neuron;
  int step = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> labels;
};

// mlp_act values of every neuron of one layer at a shared set of sampled
// token positions: values is [labels.size(), d_mlp].
struct LayerActivations {
  int layer = 0;
  int step = 0;
  std::size_t d_mlp = 0;
  std::vector<std::uint8_t> labels;
  std::vector<float> values;

  std::size_t size() const { return labels.size(); }
  ActivationDataset dataset(int neuron) const;
};

// A token position in the corpus.
struct TokenSite {
  int sequence = 0;
  int position = 0;
  auto operator<=>(const TokenSite&) const = default;
};

// n_per_class positions per language, drawn uniformly without replacement from
// positions >= 1; A sites first, then B. Deterministic in seed.
std::vector<TokenSite> sample_sites(const Corpus& corpus, int n_per_class, std::uint64_t seed);

// Activations at sample_sites(corpus, n_per_class, seed) for each requested
// layer, from one cached forward pass per sequence.
std::vector<LayerActivations> collect_activations(const Transformer& model, const Corpus& corpus,
                                                  std::span<const int> layers, int n_per_class, std::uint64_t seed,
                                                  int step = 0);
LayerActivations collect_activations(const Transformer& model, const Corpus& corpus, int layer, int n_per_class,
                                     std::uint64_t seed, int step = 0);

struct ProbeResult {
  NeuronId neuron;
  int step = 0;
  double weight = 0.0;  // in raw activation units
  double bias = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
};

struct LogisticFit {
  double weight = 0.0;  // on standardized inputs
  double bias = 0.0;
  int iterations = 0;
  bool capped = false;
};

inline constexpr double kProbeWeightCap = 50.0;

// Maximum-likelihood 1-D logistic regression by Newton/IRLS on x as given.
// Stops when the mean-gradient norm drops below 1e-8 or after 100 iterations;
// on separable data the weight is clamped to |w| <= kProbeWeightCap and the
// bias alone is iterated to convergence.
LogisticFit fit_logistic_1d(std::span<const double> x, std::span<const std::uint8_t> y);

// Seeded shuffle, fit on the first train_fraction, metrics on the rest.
// Activations are standardized with train-split statistics before fitting
// (the cap applies to the standardized weight); the reported weight and bias
// are mapped back to raw units.
ProbeResult fit_probe(const ActivationDataset& data, double train_fraction = 0.8, std::uint64_t seed = 0);

// Same split and fit for every neuron of a layer (the shuffle is shared).
std::vector<ProbeResult> fit_layer_probes(const LayerActivations& acts, double train_fraction, std::uint64_t seed);

double f1_score(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels);
double mcc(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels);

struct SweepConfig {
  int n_per_class = 10000;
  double train_fraction = 0.8;
  double f1_floor = 0.85;
  std::uint64_t seed = 0;
};

struct F1Band {
  int step = 0;
  double p5 = 0.0, p50 = 0.0, p95 = 0.0;
};

struct SweepResult {
  std::vector<ProbeResult> results;  // ordered by (step, layer, neuron)
  std::vector<int> steps;
  std::vector<NeuronId> qualifying;  // max-over-checkpoints F1 >= f1_floor
  std::vector<F1Band> bands;         // over qualifying neurons; empty when none qualify

  // F1 of one neuron at every step, in step order.
  std::vector<double> f1_series(NeuronId neuron) const;
};

// Probes for every neuron of every layer of one model, ordered by (layer,
// neuron).
std::vector<ProbeResult> probe_all(const Transformer& model, const Corpus& corpus, const SweepConfig& config, int step);

// Qualifying neurons and percentile bands from per-step probe results (steps
// ascending, one result list per step).
SweepResult summarize_sweep(std::vector<int> steps, const std::vector<std::vector<ProbeResult>>& per_step,
                            double f1_floor);

// Checkpoints are processed concurrently.
SweepResult sweep(const std::vector<CheckpointFile>& checkpoints, const Corpus& corpus, const SweepConfig& config);

// CSV "step,layer,neuron,f1,mcc,weight,bias".
void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path);

}  // namespace circuitscope
