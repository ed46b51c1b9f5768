#include "circuitscope/causal.hpp"

#include <cmath>
#include <map>

#include "circuitscope/error.hpp"

namespace circuitscope {

namespace {

constexpr std::size_t kBatch = 32;

// Consecutive runs of equal-length sequences, at most kBatch each, in input
// order.
std::vector<std::pair<std::size_t, std::size_t>> batches(const std::vector<std::vector<int>>& seqs) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < seqs.size()) {
    std::size_t j = i + 1;
    while (j < seqs.size() && j - i < kBatch && seqs[j].size() == seqs[i].size()) ++j;
    out.emplace_back(i, j);
    i = j;
  }
  return out;
}

std::vector<std::vector<int>> slice(const std::vector<std::vector<int>>& seqs, std::pair<std::size_t, std::size_t> r) {
  return {seqs.begin() + static_cast<std::ptrdiff_t>(r.first), seqs.begin() + static_cast<std::ptrdiff_t>(r.second)};
}

}  // namespace

std::vector<double> mean_activations(const Transformer& model, const Corpus& corpus, std::optional<Language> language,
                                     int layer) {
  const ModelConfig& c = model.config();
  if (layer < 0 || layer >= c.n_layers) throw AddressError("layer " + std::to_string(layer) + " outside the model");
  std::vector<std::vector<int>> seqs;
  for (const auto& s : corpus.sequences) {
    if ((!language || s.language == *language) && s.tokens.size() > 1) seqs.push_back(s.tokens);
  }
  if (seqs.empty()) {
    throw DataError(std::string("no sequences with more than one token") +
                    (language ? std::string(" in language ") + language_code(*language) : std::string()));
  }
  const HookId site(HookSite::mlp_act, layer);
  const HookId sites[] = {site};
  const auto m = static_cast<std::size_t>(c.d_mlp);
  std::vector<double> sum(m, 0.0);
  std::size_t count = 0;
  for (const auto& r : batches(seqs)) {
    const auto batch = slice(seqs, r);
    const BatchResult res = run_batch(model, batch, {}, sites);
    const Tensor& act = res.cache.at(site);
    const std::size_t len = batch.front().size();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t t = 1; t < len; ++t) {
        const float* row = act.ptr() + (b * len + t) * m;
        for (std::size_t n = 0; n < m; ++n) sum[n] += row[n];
      }
      count += len - 1;
    }
  }
  for (auto& v : sum) v /= static_cast<double>(count);
  return sum;
}

double mean_activation(const Transformer& model, const Corpus& corpus, std::optional<Language> language,
                       NeuronId neuron) {
  const ModelConfig& c = model.config();
  if (neuron.layer < 0 || neuron.layer >= c.n_layers || neuron.index < 0 || neuron.index >= c.d_mlp) {
    throw AddressError("neuron " + neuron.name() + " outside the model");
  }
  return mean_activations(model, corpus, language, neuron.layer)[static_cast<std::size_t>(neuron.index)];
}

AblationSpec AblationSpec::from_corpus(const Transformer& model, const Corpus& corpus, NeuronId neuron,
                                       Language reference, std::string corpus_id, int step) {
  AblationSpec a;
  a.neuron = neuron;
  a.mean = mean_activation(model, corpus, reference, neuron);
  a.reference = reference;
  a.corpus_id = std::move(corpus_id);
  a.step = step;
  return a;
}

AblationSpec AblationSpec::self_pin(NeuronId neuron) {
  AblationSpec a;
  a.neuron = neuron;
  a.mode = Mode::clean_self;
  return a;
}

void AblationSpec::validate(const ModelConfig& config) const {
  if (neuron.layer < 0 || neuron.layer >= config.n_layers || neuron.index < 0 || neuron.index >= config.d_mlp) {
    throw AddressError("ablation neuron " + neuron.name() + " outside the model");
  }
  if (mode == Mode::mean && !std::isfinite(mean)) throw NumericError("ablation mean for " + neuron.name() + " is not finite");
}

std::vector<HookId> downstream_sites(const ModelConfig& config, int layer) {
  std::vector<HookId> out;
  for (int l = layer + 1; l < config.n_layers; ++l) {
    out.emplace_back(HookSite::attn_out, l);
    out.emplace_back(HookSite::mlp_out, l);
  }
  return out;
}

PassLosses pass_losses(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                       const AblationSpec& ablation, bool direct, bool indirect) {
  ablation.validate(model.config());
  const HookId target(HookSite::mlp_act, ablation.neuron.layer);
  const auto down = downstream_sites(model.config(), ablation.neuron.layer);
  const bool self = ablation.mode == AblationSpec::Mode::clean_self;

  std::vector<HookId> clean_sites;
  if (direct) clean_sites = down;
  if (self) clean_sites.push_back(target);
  const BatchResult clean = run_batch(model, seqs, {}, clean_sites);

  const Intervention ablate = self ? Intervention::patch(target, clean.cache.share(target), ablation.neuron.index)
                                   : Intervention::pin_mean(target, static_cast<float>(ablation.mean), ablation.neuron.index);
  std::vector<HookId> ablated_sites;
  if (indirect) ablated_sites = down;
  const Intervention one[] = {ablate};
  const BatchResult ablated = run_batch(model, seqs, one, ablated_sites);

  PassLosses out;
  out.clean = batch_token_losses(clean.logits, seqs);
  out.ablated = batch_token_losses(ablated.logits, seqs);
  if (direct) {
    std::vector<Intervention> ivs{ablate};
    for (const auto& id : down) ivs.push_back(Intervention::patch(id, clean.cache.share(id)));
    out.direct = batch_token_losses(run_batch(model, seqs, ivs).logits, seqs);
  }
  if (indirect) {
    std::vector<Intervention> ivs;
    for (const auto& id : down) ivs.push_back(Intervention::patch(id, ablated.cache.share(id)));
    out.indirect = batch_token_losses(run_batch(model, seqs, ivs).logits, seqs);
  }
  return out;
}

double EffectReport::pct_total() const { return 100.0 * total / clean_loss; }

std::optional<double> EffectReport::pct_direct() const {
  if (!direct) return std::nullopt;
  return 100.0 * *direct / clean_loss;
}

std::optional<double> EffectReport::pct_indirect() const {
  if (!indirect) return std::nullopt;
  return 100.0 * *indirect / clean_loss;
}

nlohmann::json EffectReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return nlohmann::json{{"step", step},
                        {"layer", neuron.layer},
                        {"neuron", neuron.index},
                        {"clean_loss", clean_loss},
                        {"total", total},
                        {"direct", opt(direct)},
                        {"indirect", opt(indirect)},
                        {"pct_total", pct_total()},
                        {"pct_direct", opt(pct_direct())},
                        {"pct_indirect", opt(pct_indirect())}};
}

EffectReport measure_effects(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                             const AblationSpec& ablation, bool direct, bool indirect) {
  if (seqs.empty()) throw DataError("effect measurement needs at least one sequence");
  for (const auto& s : seqs) {
    if (s.size() < 2) throw InputError("effect measurement needs sequences of at least 2 tokens");
  }
  double clean = 0.0, abl = 0.0, dir = 0.0, ind = 0.0;
  std::size_t count = 0;
  EffectReport r;
  r.step = ablation.step;
  r.neuron = ablation.neuron;
  for (const auto& range : batches(seqs)) {
    const auto batch = slice(seqs, range);
    const PassLosses pl = pass_losses(model, batch, ablation, direct, indirect);
    const std::size_t cols = pl.clean.dim(1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      double seq_delta = 0.0;
      for (std::size_t t = 0; t < cols; ++t) {
        const std::size_t i = b * cols + t;
        clean += pl.clean[i];
        abl += pl.ablated[i];
        seq_delta += static_cast<double>(pl.ablated[i]) - pl.clean[i];
        if (pl.direct) dir += (*pl.direct)[i];
        if (pl.indirect) ind += (*pl.indirect)[i];
      }
      r.per_sequence_total.push_back(seq_delta / static_cast<double>(cols));
      count += cols;
    }
  }
  const double n = static_cast<double>(count);
  r.clean_loss = clean / n;
  r.ablated_loss = abl / n;
  r.total = r.ablated_loss - r.clean_loss;
  if (direct) r.direct = dir / n - r.clean_loss;
  if (indirect) r.indirect = ind / n - r.clean_loss;
  return r;
}

EffectReport total_effect(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                          const AblationSpec& ablation) {
  return measure_effects(model, seqs, ablation, false, false);
}

EffectReport direct_effect(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                           const AblationSpec& ablation) {
  return measure_effects(model, seqs, ablation, true, false);
}

EffectReport indirect_effect(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                             const AblationSpec& ablation) {
  return measure_effects(model, seqs, ablation, false, true);
}

double mean_loss(const Transformer& model, const std::vector<std::vector<int>>& seqs) {
  if (seqs.empty()) throw DataError("loss of an empty sequence set");
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& range : batches(seqs)) {
    const auto batch = slice(seqs, range);
    const Tensor l = batch_token_losses(run_batch(model, batch).logits, batch);
    for (float v : l.data()) sum += v;
    count += l.numel();
  }
  return sum / static_cast<double>(count);
}

Tensor dla(const Transformer& model, NeuronId neuron, bool fold_final_norm) {
  const ModelConfig& c = model.config();
  if (neuron.layer < 0 || neuron.layer >= c.n_layers || neuron.index < 0 || neuron.index >= c.d_mlp) {
    throw AddressError("neuron " + neuron.name() + " outside the model");
  }
  const Weights& w = model.weights();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const float* out_w = w.layers[static_cast<std::size_t>(neuron.layer)].w_out.ptr() +
                       static_cast<std::size_t>(neuron.index) * d;
  std::vector<double> acc(v, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    const double a = static_cast<double>(out_w[j]) * (fold_final_norm ? w.lnf_w[j] : 1.0f);
    const float* u = w.w_u.ptr() + j * v;
    for (std::size_t t = 0; t < v; ++t) acc[t] += a * u[t];
  }
  Tensor out({v});
  for (std::size_t t = 0; t < v; ++t) out[t] = static_cast<float>(acc[t]);
  return out;
}

double dla_language_gap(const Transformer& model, NeuronId neuron, std::span<const int> tokens_a,
                        std::span<const int> tokens_b, bool fold_final_norm) {
  if (tokens_a.empty() || tokens_b.empty()) throw InputError("dla_language_gap needs non-empty token lists");
  const Tensor attr = dla(model, neuron, fold_final_norm);
  auto mean_over = [&](std::span<const int> toks) {
    double s = 0.0;
    for (int t : toks) {
      if (t < 0 || static_cast<std::size_t>(t) >= attr.numel()) throw IndexError("token " + std::to_string(t) + " outside vocab");
      s += attr[static_cast<std::size_t>(t)];
    }
    return s / static_cast<double>(toks.size());
  };
  return mean_over(tokens_a) - mean_over(tokens_b);
}

}  // namespace circuitscope
