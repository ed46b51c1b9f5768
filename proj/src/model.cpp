#include "circuitscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "circuitscope/error.hpp"
#include "forward_engine.hpp"

namespace circuitscope {

// -- config -----------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  if (d_model != n_heads * d_head) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                      std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }
  if (max_seq_len < 4) throw ConfigError("max_seq_len must be >= 4, got " + std::to_string(max_seq_len));
  if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"d_model", c.d_model},         {"n_heads", c.n_heads},
                     {"d_head", c.d_head},         {"d_mlp", c.d_mlp},             {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len}, {"ln_eps", c.ln_eps},         {"parallel_blocks", c.parallel_blocks}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_head").get_to(c.d_head);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("ln_eps").get_to(c.ln_eps);
  j.at("parallel_blocks").get_to(c.parallel_blocks);
}

// -- hook addressing --------------------------------------------------------

namespace {

struct SiteName {
  HookSite site;
  const char* name;
};

constexpr SiteName kSiteNames[] = {
    {HookSite::embed, "embed"},
    {HookSite::resid_pre, "resid_pre"},
    {HookSite::attn_out, "attn_out"},
    {HookSite::mlp_pre, "mlp_pre"},
    {HookSite::mlp_act, "mlp_act"},
    {HookSite::mlp_out, "mlp_out"},
    {HookSite::resid_post, "resid_post"},
    {HookSite::final_norm_out, "final_norm_out"},
    {HookSite::logits, "logits"},
};

const char* site_name(HookSite s) {
  for (const auto& sn : kSiteNames) {
    if (sn.site == s) return sn.name;
  }
  return "?";
}

int site_phase(HookSite s) {
  switch (s) {
    case HookSite::embed:
      return 0;
    case HookSite::final_norm_out:
      return 2;
    case HookSite::logits:
      return 3;
    default:
      return 1;
  }
}

std::size_t site_dim(const ModelConfig& c, HookSite s) {
  switch (s) {
    case HookSite::mlp_pre:
    case HookSite::mlp_act:
      return static_cast<std::size_t>(c.d_mlp);
    case HookSite::logits:
      return static_cast<std::size_t>(c.vocab_size);
    default:
      return static_cast<std::size_t>(c.d_model);
  }
}

void validate_hook(const ModelConfig& c, HookId id) {
  if (site_is_per_layer(id.site) && (id.layer < 0 || id.layer >= c.n_layers)) {
    throw AddressError("hook " + id.name() + " addresses a layer outside [0, " + std::to_string(c.n_layers) + ")");
  }
}

}  // namespace

bool site_is_per_layer(HookSite site) { return site_phase(site) == 1; }

std::string HookId::name() const {
  if (!site_is_per_layer(site)) return site_name(site);
  return "blocks." + std::to_string(layer) + "." + site_name(site);
}

HookId HookId::parse(std::string_view name) {
  for (const auto& sn : kSiteNames) {
    if (!site_is_per_layer(sn.site) && name == sn.name) return HookId(sn.site);
  }
  constexpr std::string_view prefix = "blocks.";
  if (name.substr(0, prefix.size()) == prefix) {
    const auto rest = name.substr(prefix.size());
    const auto dot = rest.find('.');
    if (dot != std::string_view::npos && dot > 0) {
      const auto layer_str = rest.substr(0, dot);
      const auto site_str = rest.substr(dot + 1);
      if (std::all_of(layer_str.begin(), layer_str.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        const int layer = std::stoi(std::string(layer_str));
        for (const auto& sn : kSiteNames) {
          if (site_is_per_layer(sn.site) && site_str == sn.name) return HookId(sn.site, layer);
        }
      }
    }
  }
  throw AddressError("unknown hook site '" + std::string(name) + "'");
}

std::strong_ordering HookId::operator<=>(const HookId& other) const {
  if (auto c = site_phase(site) <=> site_phase(other.site); c != 0) return c;
  if (auto c = layer <=> other.layer; c != 0) return c;
  return static_cast<int>(site) <=> static_cast<int>(other.site);
}

std::vector<HookId> all_hook_sites(const ModelConfig& config) {
  std::vector<HookId> out{HookId(HookSite::embed)};
  for (int l = 0; l < config.n_layers; ++l) {
    for (auto s : {HookSite::resid_pre, HookSite::attn_out, HookSite::mlp_pre, HookSite::mlp_act, HookSite::mlp_out,
                   HookSite::resid_post}) {
      out.emplace_back(s, l);
    }
  }
  out.emplace_back(HookSite::final_norm_out);
  out.emplace_back(HookSite::logits);
  return out;
}

std::string NeuronId::name() const { return "L" + std::to_string(layer) + "N" + std::to_string(index); }

// -- interventions & cache --------------------------------------------------

Intervention Intervention::pin_scalar(HookId target, float value, std::optional<int> neuron) {
  Intervention iv;
  iv.target = target;
  iv.neuron = neuron;
  iv.mode = Mode::pin_scalar;
  iv.value = value;
  return iv;
}

Intervention Intervention::pin_mean(HookId target, float mean, std::optional<int> neuron) {
  Intervention iv = pin_scalar(target, mean, neuron);
  iv.mode = Mode::pin_mean;
  return iv;
}

Intervention Intervention::patch(HookId target, std::shared_ptr<const Tensor> source, std::optional<int> neuron) {
  Intervention iv;
  iv.target = target;
  iv.neuron = neuron;
  iv.mode = Mode::patch_cache;
  iv.source = std::move(source);
  return iv;
}

Intervention& Intervention::at_positions(std::vector<int> pos) {
  positions = std::move(pos);
  return *this;
}

const Tensor& ActivationCache::at(HookId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw AddressError("activation cache has no entry for " + id.name());
  return *it->second;
}

std::shared_ptr<const Tensor> ActivationCache::share(HookId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw AddressError("activation cache has no entry for " + id.name());
  return it->second;
}

void ActivationCache::insert(HookId id, Tensor t) { entries_[id] = std::make_shared<const Tensor>(std::move(t)); }

std::vector<HookId> ActivationCache::keys() const {
  std::vector<HookId> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

// -- weights ----------------------------------------------------------------

Weights Weights::zeros(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto hd = static_cast<std::size_t>(c.n_heads * c.d_head);
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  Weights w;
  w.w_e = Tensor({v, d});
  w.w_pos = Tensor({static_cast<std::size_t>(c.max_seq_len), d});
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_w = Tensor({d});
    lw.ln1_b = Tensor({d});
    lw.w_q = Tensor({d, hd});
    lw.b_q = Tensor({hd});
    lw.w_k = Tensor({d, hd});
    lw.b_k = Tensor({hd});
    lw.w_v = Tensor({d, hd});
    lw.b_v = Tensor({hd});
    lw.w_o = Tensor({hd, d});
    lw.b_o = Tensor({d});
    lw.ln2_w = Tensor({d});
    lw.ln2_b = Tensor({d});
    lw.w_in = Tensor({d, m});
    lw.b_in = Tensor({m});
    lw.w_out = Tensor({m, d});
    lw.b_out = Tensor({d});
    w.layers.push_back(std::move(lw));
  }
  w.lnf_w = Tensor({d});
  w.lnf_b = Tensor({d});
  w.w_u = Tensor({d, v});
  w.b_u = Tensor({v});
  return w;
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

Transformer::Transformer(ModelConfig config) : config_(config), weights_(Weights::zeros(config)) {
  for (auto& lw : weights_.layers) {
    lw.ln1_w.fill(1.0f);
    lw.ln2_w.fill(1.0f);
  }
  weights_.lnf_w.fill(1.0f);
}

Transformer::Transformer(ModelConfig config, Weights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const Weights ref = Weights::zeros(config_);
  std::vector<std::pair<std::string, Shape>> expected;
  ref.visit([&](const std::string& name, const Tensor& t) { expected.emplace_back(name, t.shape()); });
  std::size_t i = 0;
  if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers)) {
    throw DimensionError("weights have " + std::to_string(weights_.layers.size()) + " layers, config expects " +
                         std::to_string(config_.n_layers));
  }
  weights_.visit([&](const std::string& name, const Tensor& t) {
    if (t.shape() != expected[i].second) {
      throw DimensionError("weight " + name + " has shape " + shape_to_string(t.shape()) + ", expected " +
                           shape_to_string(expected[i].second));
    }
    ++i;
  });
}

// -- forward engine ---------------------------------------------------------

namespace detail {

namespace {

void resize(std::vector<float>& v, std::size_t n) {
  if (v.size() != n) v.assign(n, 0.0f);
}

// y[N, n] = x[N, k] W[k, n] + b
void linear(const float* x, std::size_t rows, std::size_t k, const Tensor& w, const Tensor& b, float* y) {
  const std::size_t n = w.dim(1);
  kernels::gemm(false, false, rows, n, k, x, k, w.ptr(), n, y, n, false);
  kernels::add_bias_rows(y, rows, n, b.ptr());
}

void causal_attention(const ModelConfig& c, std::size_t batch, std::size_t seq, LayerState& ls) {
  const auto d = static_cast<std::size_t>(c.n_heads * c.d_head);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const float* q = ls.q.data() + b * seq * d + h * dh;
      const float* k = ls.k.data() + b * seq * d + h * dh;
      const float* v = ls.v.data() + b * seq * d + h * dh;
      float* p = ls.probs.data() + (b * heads + h) * seq * seq;
      float* z = ls.z.data() + b * seq * d + h * dh;
      kernels::gemm(false, true, seq, seq, dh, q, d, k, d, p, seq, false);
      for (std::size_t i = 0; i < seq; ++i) {
        float* row = p + i * seq;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] *= scale;
          mx = std::max(mx, row[j]);
        }
        float sum = 0.0f;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const float inv = 1.0f / sum;
        for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
        for (std::size_t j = i + 1; j < seq; ++j) row[j] = 0.0f;
      }
      kernels::gemm(false, false, seq, dh, seq, p, seq, v, d, z, d, false);
    }
  }
}

}  // namespace

void run_forward(const Transformer& model, const std::vector<std::vector<int>>& sequences, ForwardState& st,
                 HookVisitor* hooks) {
  const ModelConfig& c = model.config();
  const Weights& w = model.weights();
  st.batch = sequences.size();
  st.seq = sequences.empty() ? 0 : sequences.front().size();
  const std::size_t n = st.rows();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto layers = static_cast<std::size_t>(c.n_layers);
  auto hook = [&](HookSite s, int layer, float* data, std::size_t dim) {
    if (hooks) hooks->at(HookId(s, layer), data, n, dim);
  };

  st.resid.resize(layers + 1);
  for (auto& r : st.resid) resize(r, n * d);
  st.layers.resize(layers);

  float* x0 = st.resid[0].data();
  for (std::size_t b = 0; b < st.batch; ++b) {
    for (std::size_t t = 0; t < st.seq; ++t) {
      const auto tok = static_cast<std::size_t>(sequences[b][t]);
      const float* e = w.w_e.ptr() + tok * d;
      const float* p = w.w_pos.ptr() + t * d;
      float* out = x0 + (b * st.seq + t) * d;
      for (std::size_t j = 0; j < d; ++j) out[j] = e[j] + p[j];
    }
  }
  hook(HookSite::embed, 0, x0, d);

  for (std::size_t l = 0; l < layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerState& ls = st.layers[l];
    const int li = static_cast<int>(l);
    float* x = st.resid[l].data();
    hook(HookSite::resid_pre, li, x, d);

    resize(ls.ln1_out, n * d);
    resize(ls.ln1_mean, n);
    resize(ls.ln1_rstd, n);
    kernels::layer_norm_rows(x, n, d, lw.ln1_w.ptr(), lw.ln1_b.ptr(), c.ln_eps, ls.ln1_out.data(),
                             ls.ln1_mean.data(), ls.ln1_rstd.data());
    resize(ls.q, n * d);
    resize(ls.k, n * d);
    resize(ls.v, n * d);
    linear(ls.ln1_out.data(), n, d, lw.w_q, lw.b_q, ls.q.data());
    linear(ls.ln1_out.data(), n, d, lw.w_k, lw.b_k, ls.k.data());
    linear(ls.ln1_out.data(), n, d, lw.w_v, lw.b_v, ls.v.data());
    resize(ls.probs, st.batch * heads * st.seq * st.seq);
    resize(ls.z, n * d);
    causal_attention(c, st.batch, st.seq, ls);
    resize(ls.attn_out, n * d);
    linear(ls.z.data(), n, d, lw.w_o, lw.b_o, ls.attn_out.data());
    hook(HookSite::attn_out, li, ls.attn_out.data(), d);

    const float* mlp_in = x;
    if (!c.parallel_blocks) {
      resize(ls.mid, n * d);
      for (std::size_t i = 0; i < n * d; ++i) ls.mid[i] = x[i] + ls.attn_out[i];
      mlp_in = ls.mid.data();
    }
    resize(ls.ln2_out, n * d);
    resize(ls.ln2_mean, n);
    resize(ls.ln2_rstd, n);
    kernels::layer_norm_rows(mlp_in, n, d, lw.ln2_w.ptr(), lw.ln2_b.ptr(), c.ln_eps, ls.ln2_out.data(),
                             ls.ln2_mean.data(), ls.ln2_rstd.data());
    resize(ls.mlp_pre, n * m);
    linear(ls.ln2_out.data(), n, d, lw.w_in, lw.b_in, ls.mlp_pre.data());
    hook(HookSite::mlp_pre, li, ls.mlp_pre.data(), m);
    resize(ls.mlp_act, n * m);
    kernels::gelu(ls.mlp_pre.data(), n * m, ls.mlp_act.data());
    hook(HookSite::mlp_act, li, ls.mlp_act.data(), m);
    resize(ls.mlp_out, n * d);
    linear(ls.mlp_act.data(), n, m, lw.w_out, lw.b_out, ls.mlp_out.data());
    hook(HookSite::mlp_out, li, ls.mlp_out.data(), d);

    float* y = st.resid[l + 1].data();
    for (std::size_t i = 0; i < n * d; ++i) y[i] = x[i] + ls.attn_out[i] + ls.mlp_out[i];
    hook(HookSite::resid_post, li, y, d);
  }

  resize(st.lnf_out, n * d);
  resize(st.lnf_mean, n);
  resize(st.lnf_rstd, n);
  kernels::layer_norm_rows(st.resid[layers].data(), n, d, w.lnf_w.ptr(), w.lnf_b.ptr(), c.ln_eps,
                           st.lnf_out.data(), st.lnf_mean.data(), st.lnf_rstd.data());
  hook(HookSite::final_norm_out, 0, st.lnf_out.data(), d);
  resize(st.logits, n * vocab);
  linear(st.lnf_out.data(), n, d, w.w_u, w.b_u, st.logits.data());
  hook(HookSite::logits, 0, st.logits.data(), vocab);
}

}  // namespace detail

// -- interventions runner ---------------------------------------------------

namespace {

Shape public_shape(std::size_t batch, std::size_t seq, std::size_t dim, bool squeeze) {
  if (squeeze) return {seq, dim};
  return {batch, seq, dim};
}

bool positions_overlap(const std::optional<std::vector<int>>& a, const std::optional<std::vector<int>>& b) {
  if (!a || !b) return true;
  std::set<int> sa(a->begin(), a->end());
  return std::any_of(b->begin(), b->end(), [&](int p) { return sa.count(p) != 0; });
}

class InterventionRunner final : public detail::HookVisitor {
 public:
  InterventionRunner(const ModelConfig& config, std::size_t batch, std::size_t seq,
                     std::span<const Intervention> interventions, std::span<const HookId> cache_sites, bool squeeze,
                     std::vector<std::vector<int>> tokens)
      : config_(config), batch_(batch), seq_(seq), squeeze_(squeeze), cache_(std::move(tokens)) {
    for (const auto& iv : interventions) validate(iv);
    for (std::size_t i = 0; i < interventions.size(); ++i) {
      for (std::size_t j = i + 1; j < interventions.size(); ++j) {
        const auto& a = interventions[i];
        const auto& b = interventions[j];
        if (!(a.target == b.target)) continue;
        const bool channels = !a.neuron || !b.neuron || *a.neuron == *b.neuron;
        if (channels && positions_overlap(a.positions, b.positions)) {
          throw ConfigError("conflicting interventions on " + a.target.name() +
                            (a.neuron ? " neuron " + std::to_string(*a.neuron) : std::string()));
        }
      }
      by_site_[interventions[i].target].push_back(&interventions[i]);
    }
    for (const auto& id : cache_sites) {
      validate_hook(config_, id);
      cache_sites_.insert(id);
    }
  }

  void at(HookId id, float* data, std::size_t rows, std::size_t dim) override {
    if (auto it = by_site_.find(id); it != by_site_.end()) {
      for (const Intervention* iv : it->second) apply(*iv, data, dim);
    }
    if (cache_sites_.count(id)) {
      cache_.insert(id, Tensor(public_shape(batch_, seq_, dim, squeeze_), std::vector<float>(data, data + rows * dim)));
    }
  }

  ActivationCache take_cache() { return std::move(cache_); }

 private:
  void validate(const Intervention& iv) const {
    validate_hook(config_, iv.target);
    if (iv.neuron) {
      if (iv.target.site != HookSite::mlp_act && iv.target.site != HookSite::mlp_pre) {
        throw ConfigError("neuron-indexed intervention at " + iv.target.name() + "; only mlp_pre/mlp_act allowed");
      }
      if (*iv.neuron < 0 || *iv.neuron >= config_.d_mlp) {
        throw AddressError("neuron " + std::to_string(*iv.neuron) + " outside [0, " + std::to_string(config_.d_mlp) +
                           ")");
      }
    }
    if (iv.positions) {
      for (int p : *iv.positions) {
        if (p < 0 || static_cast<std::size_t>(p) >= seq_) {
          throw InputError("intervention position " + std::to_string(p) + " outside sequence of length " +
                           std::to_string(seq_));
        }
      }
    }
    if (iv.mode == Intervention::Mode::patch_cache) {
      const Shape want = public_shape(batch_, seq_, site_dim(config_, iv.target.site), squeeze_);
      if (!iv.source) throw ConfigError("patch intervention at " + iv.target.name() + " has no source tensor");
      if (iv.source->shape() != want) {
        throw DimensionError("patch source for " + iv.target.name() + " has shape " +
                             shape_to_string(iv.source->shape()) + ", live activation is " + shape_to_string(want));
      }
    } else if (!std::isfinite(iv.value)) {
      throw NumericError("pin value for " + iv.target.name() + " is not finite");
    }
  }

  void apply(const Intervention& iv, float* data, std::size_t dim) const {
    const std::size_t c0 = iv.neuron ? static_cast<std::size_t>(*iv.neuron) : 0;
    const std::size_t c1 = iv.neuron ? c0 + 1 : dim;
    const bool patch = iv.mode == Intervention::Mode::patch_cache;
    const float* src = patch ? iv.source->ptr() : nullptr;
    auto edit_row = [&](std::size_t row) {
      float* r = data + row * dim;
      for (std::size_t ch = c0; ch < c1; ++ch) r[ch] = patch ? src[row * dim + ch] : iv.value;
    };
    for (std::size_t b = 0; b < batch_; ++b) {
      if (iv.positions) {
        for (int p : *iv.positions) edit_row(b * seq_ + static_cast<std::size_t>(p));
      } else {
        for (std::size_t t = 0; t < seq_; ++t) edit_row(b * seq_ + t);
      }
    }
  }

  const ModelConfig& config_;
  std::size_t batch_;
  std::size_t seq_;
  bool squeeze_;
  std::map<HookId, std::vector<const Intervention*>> by_site_;
  std::set<HookId> cache_sites_;
  ActivationCache cache_;
};

void validate_batch(const ModelConfig& config, const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw InputError("empty batch");
  const std::size_t len = sequences.front().size();
  for (const auto& s : sequences) {
    if (s.size() != len) throw InputError("batched sequences must share one length");
    validate_tokens(config, s);
  }
}

BatchResult run_impl(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                     std::span<const Intervention> interventions, std::span<const HookId> cache_sites, bool squeeze) {
  const ModelConfig& c = model.config();
  validate_batch(c, sequences);
  thread_local detail::ForwardState state;
  const std::size_t batch = sequences.size();
  const std::size_t seq = sequences.front().size();
  const bool need_runner = !interventions.empty() || !cache_sites.empty();
  std::optional<InterventionRunner> runner;
  if (need_runner) runner.emplace(c, batch, seq, interventions, cache_sites, squeeze, sequences);
  detail::run_forward(model, sequences, state, runner ? &*runner : nullptr);
  BatchResult out;
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  out.logits = Tensor(public_shape(batch, seq, vocab, squeeze), state.logits);
  require_finite(out.logits, "forward");
  out.cache = runner ? runner->take_cache() : ActivationCache(sequences);
  return out;
}

}  // namespace

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(config.max_seq_len)) {
    throw InputError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(config.vocab_size));
    }
  }
}

BatchResult run_batch(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                      std::span<const Intervention> interventions, std::span<const HookId> cache_sites) {
  return run_impl(model, sequences, interventions, cache_sites, false);
}

Tensor forward(const Transformer& model, std::span<const int> tokens) {
  return run_impl(model, {std::vector<int>(tokens.begin(), tokens.end())}, {}, {}, true).logits;
}

std::pair<Tensor, ActivationCache> forward_with_cache(const Transformer& model, std::span<const int> tokens,
                                                      std::span<const HookId> sites) {
  auto r = run_impl(model, {std::vector<int>(tokens.begin(), tokens.end())}, {}, sites, true);
  return {std::move(r.logits), std::move(r.cache)};
}

InterventionResult forward_with_interventions(const Transformer& model, std::span<const int> tokens,
                                              std::span<const Intervention> interventions,
                                              std::optional<std::vector<HookId>> cache_sites) {
  std::span<const HookId> sites;
  if (cache_sites) sites = *cache_sites;
  auto r = run_impl(model, {std::vector<int>(tokens.begin(), tokens.end())}, interventions, sites, true);
  InterventionResult out;
  out.logits = std::move(r.logits);
  if (cache_sites) out.cache = std::move(r.cache);
  return out;
}

Tensor per_token_loss(const Transformer& model, std::span<const int> tokens) {
  if (tokens.size() < 2) throw InputError("per_token_loss needs at least two tokens");
  const Tensor logits = forward(model, tokens);
  const std::size_t t = tokens.size();
  const std::size_t v = logits.cols();
  Tensor head({t - 1, v}, std::vector<float>(logits.ptr(), logits.ptr() + (t - 1) * v));
  return cross_entropy(head, tokens.subspan(1));
}

Tensor batch_token_losses(const Tensor& logits, const std::vector<std::vector<int>>& sequences) {
  if (logits.rank() != 3 || logits.dim(0) != sequences.size()) {
    throw DimensionError("batch_token_losses expects [B, T, V] logits matching the batch; got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t b = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
  if (t < 2) throw InputError("need at least two tokens per sequence for next-token loss");
  Tensor out({b, t - 1});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p + 1 < t; ++p) {
      const int target = sequences[i][p + 1];
      out.at(i, p) = static_cast<float>(kernels::row_cross_entropy(logits.ptr() + (i * t + p) * v, v, target));
    }
  }
  return out;
}

}  // namespace circuitscope
