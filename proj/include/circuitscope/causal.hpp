#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/corpus.hpp"
#include "circuitscope/model.hpp"
#include "json.hpp"

namespace circuitscope {

// Mean of mlp_act[neuron] over every position >= 1 of the corpus sequences
// in `language` (all sequences when unset), accumulated in double.
double mean_activation(const Transformer& model, const Corpus& corpus, std::optional<Language> language,
                       NeuronId neuron);
// The same mean for every neuron of a layer, from one pass.
std::vector<double> mean_activations(const Transformer& model, const Corpus& corpus, std::optional<Language> language,
                                     int layer);

struct AblationSpec {
  enum class Mode {
    mean,        // pin to `mean` at every position
    clean_self,  // pin to the neuron's own clean activation (a no-op control)
  };

  NeuronId neuron;
  double mean = 0.0;
  Mode mode = Mode::mean;
  Language reference = Language::B;  // distribution the mean was taken over
  std::string corpus_id;
  int step = 0;

  static AblationSpec from_corpus(const Transformer& model, const Corpus& corpus, NeuronId neuron,
                                  Language reference, std::string corpus_id, int step);
  static AblationSpec self_pin(NeuronId neuron);
  void validate(const ModelConfig& config) const;
};

// Attention and MLP outputs of every layer strictly after `layer`.
std::vector<HookId> downstream_sites(const ModelConfig& config, int layer);

// Next-token losses [B, T-1] for each pass of the effect decomposition over
// equal-length sequences. Only requested passes are run.
struct PassLosses {
  Tensor clean;
  Tensor ablated;
  std::optional<Tensor> direct;    // ablated neuron, downstream outputs patched from clean
  std::optional<Tensor> indirect;  // clean neuron, downstream outputs patched from ablated
};

PassLosses pass_losses(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                       const AblationSpec& ablation, bool direct, bool indirect);

struct EffectReport {
  int step = 0;
  NeuronId neuron;
  double clean_loss = 0.0;
  double ablated_loss = 0.0;
  double total = 0.0;
  std::optional<double> direct;
  std::optional<double> indirect;
  std::vector<double> per_sequence_total;

  double pct_total() const;
  std::optional<double> pct_direct() const;
  std::optional<double> pct_indirect() const;
  // {step, layer, neuron, clean_loss, total, direct, indirect, pct_total,
  // pct_direct, pct_indirect}; absent parts are null.
  nlohmann::json to_json() const;
};

// Aggregate effects over all sequences (mean per-token cross entropy). The
// sequences are processed in batches of equal length.
EffectReport measure_effects(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                             const AblationSpec& ablation, bool direct = true, bool indirect = true);

EffectReport total_effect(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                          const AblationSpec& ablation);
EffectReport direct_effect(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                           const AblationSpec& ablation);
EffectReport indirect_effect(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                             const AblationSpec& ablation);

// Mean next-token loss over sequences without interventions.
double mean_loss(const Transformer& model, const std::vector<std::vector<int>>& sequences);

// Weights-only direct logit attribution: the neuron's output weight dotted
// with each unembedding column, optionally scaled by the final-norm gain.
Tensor dla(const Transformer& model, NeuronId neuron, bool fold_final_norm = false);

double dla_language_gap(const Transformer& model, NeuronId neuron, std::span<const int> tokens_a,
                        std::span<const int> tokens_b, bool fold_final_norm = false);

}  // namespace circuitscope
