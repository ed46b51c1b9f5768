#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "circuitscope/corpus.hpp"
#include "circuitscope/model.hpp"
#include "json.hpp"

namespace circuitscope {

struct TrainConfig {
  enum class Decay { none, cosine };

  int steps = 4000;
  int batch_size = 32;
  double base_lr = 1e-3;
  int warmup_steps = 200;
  Decay decay = Decay::cosine;
  double final_lr_fraction = 0.1;  // cosine_to_fraction(f)
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<int> checkpoint_schedule;  // empty: default_schedule(steps)

  void validate() const;
  std::vector<int> schedule() const;

  // 0, 1, 2, 4, ..., 512, then every 250 steps up to and including `steps`.
  static std::vector<int> default_schedule(int steps);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Linear warm-up base_lr * (step + 1) / warmup_steps, then constant or a
// cosine from base_lr (at step warmup_steps - 1) down to f * base_lr at the
// final step.
double lr_at_step(const TrainConfig& config, int step);

// GPT-style init: N(0, 0.02) everywhere except the residual-writing matrices
// (attention output, MLP output) at N(0, 0.02 / sqrt(2 n_layers)); zero biases
// and unit layer-norm gains.
Weights init_weights(const ModelConfig& config, std::uint64_t seed);

// Mean next-token cross entropy over every position of every sequence in the
// batch, and its gradient with respect to every parameter (written to grads,
// which is resized as needed).
double compute_gradients(const Transformer& model, const std::vector<std::vector<int>>& batch, Weights& grads);

// Mean next-token loss without gradients.
double batch_loss(const Transformer& model, const std::vector<std::vector<int>>& batch);

class Adam {
 public:
  Adam() = default;
  Adam(const ModelConfig& config, double beta1, double beta2, double eps);

  // One bias-corrected update; moments are kept in float32, the update
  // arithmetic in float64.
  void step(Weights& params, const Weights& grads, double lr);

  std::int64_t t() const { return t_; }
  const Weights& first_moment() const { return m_; }
  const Weights& second_moment() const { return v_; }
  void restore(Weights m, Weights v, std::int64_t t);

 private:
  double beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8;
  Weights m_, v_;
  std::int64_t t_ = 0;
};

// Deterministic training batch for one step: the first ceil(B/2) sequences are
// language A, the rest language B, drawn from a stream seeded by (seed, step).
std::vector<std::vector<int>> training_batch(const CorpusSpec& corpus, int batch_size, int seq_len,
                                             std::uint64_t seed, int step);

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

using TrainProgress = std::function<void(int step, double lr, double loss)>;

// Trains from init_weights(seed), writing ckpt_<step>.bin at every scheduled
// step and metrics.csv ("step,lr,train_loss", one row per step) into out_dir.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, const CorpusSpec& corpus,
                  const std::filesystem::path& out_dir, const TrainProgress& progress = {});

std::filesystem::path checkpoint_filename(const std::filesystem::path& dir, int step);

}  // namespace circuitscope
