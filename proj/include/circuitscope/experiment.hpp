#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "circuitscope/checkpoint.hpp"
#include "circuitscope/corpus.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/ngram.hpp"
#include "circuitscope/probing.hpp"
#include "circuitscope/trainer.hpp"
#include "json.hpp"

namespace circuitscope {

// A stage of run() failed; what() is "stage '<name>' failed: <cause>".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentToggles {
  bool probe_sweep = true;
  bool ablation_sweep = true;
  bool effects = true;
  bool dla_gap = true;
  bool trigrams = true;
  bool loss_curves = true;

  bool any() const { return probe_sweep || ablation_sweep || effects || dla_gap || trigrams || loss_curves; }
};

struct ExperimentPlan {
  std::filesystem::path checkpoint_dir;
  // Corpus the evaluation sets are drawn from; unset means the spec recorded
  // in the checkpoints.
  std::optional<CorpusSpec> corpus;
  // Steps that must be present; empty means the schedule recorded in the
  // checkpoints.
  std::vector<int> steps;
  // Unset: the neuron with the highest final-checkpoint F1 (first in
  // (layer, index) order on ties).
  std::optional<NeuronId> target;
  // Every corpus, split and prompt seed is derived from this; probing.seed is
  // ignored.
  std::uint64_t seed = 0;
  ExperimentToggles toggles;

  int probe_sequences = 300;  // per language
  int eval_sequences = 200;   // per language
  SweepConfig probing;
  int ablation_every = 10;  // checkpoints; the final one is always included
  int effects_every = 5;
  int max_ablation_neurons = 32;
  FilterConfig filter;
  int scan_top_m = 20;
  int max_trigrams = 16;
  int n_prompts = 100;
  int prefix_len = 20;
  int pool_size = 100;
  int dla_tokens = 100;
  int dla_random_neurons = 100;
  bool render = false;  // SVGs next to the tables, listed in the manifest

  void validate() const;
  // Everything except checkpoint_dir.
  nlohmann::ordered_json to_json() const;
};

struct SignatureCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Criterion-7 style reading of a finished run: the target's final F1, its
// ablation effect relative to the first checkpoint where it is detected, and
// the planted-trigram ordering.
struct Signature {
  NeuronId target;
  std::vector<SignatureCheck> checks;
  bool passed() const;
  nlohmann::ordered_json to_json() const;
};

struct ExperimentResult {
  std::vector<int> steps;
  std::optional<NeuronId> target;
  std::string target_rule;
  std::optional<Signature> signature;  // when probing and trigram stages ran
  std::vector<std::filesystem::path> files;  // relative to the output directory
};

// Runs every enabled stage and writes one subdirectory per figure plus
// manifest.json. Throws PlanError listing absent checkpoint steps; a failing
// stage aborts with the stage named.
ExperimentResult run(const ExperimentPlan& plan, const std::filesystem::path& out_dir);

struct ReproduceConfig {
  ModelConfig model;
  TrainConfig train;
  CorpusSpec corpus = CorpusSpec::default_spec();
  ExperimentPlan plan;  // checkpoint_dir and corpus are filled in
};

// Train into out/checkpoints, run the plan on the result into out/results and
// render every figure table to SVG.
ExperimentResult reproduce(const ReproduceConfig& config, const std::filesystem::path& out_dir);

// SVGs for the standard tables present under a results directory, written
// next to each table.
std::vector<std::filesystem::path> render_results(const std::filesystem::path& results_dir);

std::string sha256_file(const std::filesystem::path& path);

// Independent seeds run() derives from the plan seed.
enum class SeedStream : std::uint64_t { probe_corpus = 1, eval_corpus, probe_split, prompts, dla_neurons };
std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream);

// The probing and evaluation corpora run() draws from a plan seed.
Corpus probe_corpus(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed);
Corpus eval_corpus(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed);

// The corpus spec stored with a checkpoint by train(); PlanError when absent.
CorpusSpec recorded_corpus(const Checkpoint& checkpoint);

}  // namespace circuitscope
