#pragma once

#include <compare>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "circuitscope/numerics.hpp"
#include "json.hpp"

namespace circuitscope {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_head = 32;
  int d_mlp = 512;
  int vocab_size = 512;
  int max_seq_len = 64;
  float ln_eps = 1e-5f;
  // Attention and MLP read the same residual input and their outputs are
  // summed (GPT-NeoX style); otherwise the MLP reads resid + attn_out.
  bool parallel_blocks = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Hook sites in forward evaluation order. The per-layer sites repeat for every
// block; embed, final_norm_out and logits occur once.
enum class HookSite : int {
  embed,
  resid_pre,
  attn_out,
  mlp_pre,
  mlp_act,
  mlp_out,
  resid_post,
  final_norm_out,
  logits,
};

bool site_is_per_layer(HookSite site);

struct HookId {
  HookSite site = HookSite::embed;
  int layer = 0;  // forced to 0 for sites without a layer

  HookId() = default;
  HookId(HookSite s, int l = 0) : site(s), layer(site_is_per_layer(s) ? l : 0) {}

  // "embed", "blocks.2.mlp_act", "final_norm_out", "logits"
  std::string name() const;
  static HookId parse(std::string_view name);

  // Ordered by position in the forward pass.
  std::strong_ordering operator<=>(const HookId& other) const;
  bool operator==(const HookId& other) const = default;
};

std::vector<HookId> all_hook_sites(const ModelConfig& config);

struct NeuronId {
  int layer = 0;
  int index = 0;

  std::string name() const;  // "L3N12"
  auto operator<=>(const NeuronId&) const = default;
};

// One edit applied to a hook site during the forward pass.
struct Intervention {
  enum class Mode { pin_scalar, pin_mean, patch_cache };

  HookId target;
  std::optional<int> neuron;  // restrict to one channel (mlp_pre / mlp_act only)
  Mode mode = Mode::pin_scalar;
  float value = 0.0f;                    // pin_scalar, pin_mean
  std::shared_ptr<const Tensor> source;  // patch_cache; same shape as the live activation
  std::optional<std::vector<int>> positions;

  static Intervention pin_scalar(HookId target, float value, std::optional<int> neuron = std::nullopt);
  static Intervention pin_mean(HookId target, float mean, std::optional<int> neuron = std::nullopt);
  static Intervention patch(HookId target, std::shared_ptr<const Tensor> source,
                            std::optional<int> neuron = std::nullopt);
  Intervention& at_positions(std::vector<int> pos);
};

// Activations captured during one forward pass, keyed by hook site. Tensors
// are [T, dim] for single-sequence passes and [B, T, dim] for batched ones.
class ActivationCache {
 public:
  ActivationCache() = default;
  explicit ActivationCache(std::vector<std::vector<int>> tokens) : tokens_(std::move(tokens)) {}

  bool contains(HookId id) const { return entries_.count(id) != 0; }
  const Tensor& at(HookId id) const;
  std::shared_ptr<const Tensor> share(HookId id) const;
  void insert(HookId id, Tensor t);

  std::size_t size() const { return entries_.size(); }
  std::vector<HookId> keys() const;
  const std::vector<std::vector<int>>& tokens() const { return tokens_; }

 private:
  std::map<HookId, std::shared_ptr<const Tensor>> entries_;
  std::vector<std::vector<int>> tokens_;
};

struct LayerWeights {
  Tensor ln1_w, ln1_b;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v;  // [d_model, n_heads*d_head]
  Tensor w_o, b_o;                      // [n_heads*d_head, d_model]
  Tensor ln2_w, ln2_b;
  Tensor w_in, b_in;    // [d_model, d_mlp]
  Tensor w_out, b_out;  // [d_mlp, d_model]; row i is neuron i's output weight
};

struct Weights {
  Tensor w_e;    // [vocab, d_model]
  Tensor w_pos;  // [max_seq_len, d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_w, lnf_b;
  Tensor w_u;  // [d_model, vocab]
  Tensor b_u;  // [vocab]

  // Zero tensors of the right shapes; layer-norm gains are zero as well.
  static Weights zeros(const ModelConfig& config);

  // Visits every parameter in canonical order as (name, tensor).
  template <class Fn>
  void visit(Fn&& fn);
  template <class Fn>
  void visit(Fn&& fn) const;

  std::size_t parameter_count() const;
};

class Transformer {
 public:
  // All-zero projections with unit layer-norm gains.
  explicit Transformer(ModelConfig config);
  Transformer(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& mutable_weights() { return weights_; }

 private:
  ModelConfig config_;
  Weights weights_;
};

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

Tensor forward(const Transformer& model, std::span<const int> tokens);

std::pair<Tensor, ActivationCache> forward_with_cache(const Transformer& model, std::span<const int> tokens,
                                                      std::span<const HookId> sites);

struct InterventionResult {
  Tensor logits;
  std::optional<ActivationCache> cache;
};

InterventionResult forward_with_interventions(const Transformer& model, std::span<const int> tokens,
                                              std::span<const Intervention> interventions,
                                              std::optional<std::vector<HookId>> cache_sites = std::nullopt);

// Cross entropy of logits[0..T-1) against tokens[1..T).
Tensor per_token_loss(const Transformer& model, std::span<const int> tokens);

// Batched pass over equal-length sequences. Logits are [B, T, V]; cached
// tensors and patch sources are [B, T, dim]. Interventions with positions
// apply to those positions of every sequence.
struct BatchResult {
  Tensor logits;
  ActivationCache cache;
};

BatchResult run_batch(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                      std::span<const Intervention> interventions = {}, std::span<const HookId> cache_sites = {});

// [B, T-1] next-token losses from [B, T, V] logits.
Tensor batch_token_losses(const Tensor& logits, const std::vector<std::vector<int>>& sequences);

// -- template definitions ---------------------------------------------------

template <class Fn>
void Weights::visit(Fn&& fn) {
  std::as_const(*this).visit([&](const std::string& name, const Tensor& t) { fn(name, const_cast<Tensor&>(t)); });
}

template <class Fn>
void Weights::visit(Fn&& fn) const {
  fn(std::string("embed.w_e"), w_e);
  fn(std::string("pos_embed.w_pos"), w_pos);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lw = layers[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "ln1.w", lw.ln1_w);
    fn(p + "ln1.b", lw.ln1_b);
    fn(p + "attn.w_q", lw.w_q);
    fn(p + "attn.b_q", lw.b_q);
    fn(p + "attn.w_k", lw.w_k);
    fn(p + "attn.b_k", lw.b_k);
    fn(p + "attn.w_v", lw.w_v);
    fn(p + "attn.b_v", lw.b_v);
    fn(p + "attn.w_o", lw.w_o);
    fn(p + "attn.b_o", lw.b_o);
    fn(p + "ln2.w", lw.ln2_w);
    fn(p + "ln2.b", lw.ln2_b);
    fn(p + "mlp.w_in", lw.w_in);
    fn(p + "mlp.b_in", lw.b_in);
    fn(p + "mlp.w_out", lw.w_out);
    fn(p + "mlp.b_out", lw.b_out);
  }
  fn(std::string("ln_final.w"), lnf_w);
  fn(std::string("ln_final.b"), lnf_b);
  fn(std::string("unembed.w_u"), w_u);
  fn(std::string("unembed.b_u"), b_u);
}

}  // namespace circuitscope
