#pragma once

// Forward pass over a batch of equal-length sequences that keeps every
// intermediate the hand-written backward pass needs. Analysis code reaches it
// through run_batch(); the trainer calls it directly.

#include <cstddef>
#include <vector>

#include "circuitscope/model.hpp"

namespace circuitscope::detail {

struct LayerState {
  std::vector<float> ln1_out, ln1_mean, ln1_rstd;
  std::vector<float> q, k, v;
  std::vector<float> probs;  // [B, H, T, T]
  std::vector<float> z;      // heads concatenated, [N, H*dh]
  std::vector<float> attn_out;
  std::vector<float> mid;  // resid_pre + attn_out (sequential blocks only)
  std::vector<float> ln2_out, ln2_mean, ln2_rstd;
  std::vector<float> mlp_pre, mlp_act, mlp_out;
};

struct ForwardState {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::vector<float>> resid;  // n_layers + 1 buffers of [N, d]
  std::vector<LayerState> layers;
  std::vector<float> lnf_out, lnf_mean, lnf_rstd;
  std::vector<float> logits;  // [N, V]

  std::size_t rows() const { return batch * seq; }
};

// Receives every hook site as it is produced. `data` is [rows, dim] and may be
// edited in place; downstream computation consumes the edited values.
class HookVisitor {
 public:
  virtual ~HookVisitor() = default;
  virtual void at(HookId id, float* data, std::size_t rows, std::size_t dim) = 0;
};

void run_forward(const Transformer& model, const std::vector<std::vector<int>>& sequences, ForwardState& state,
                 HookVisitor* hooks);

}  // namespace circuitscope::detail
