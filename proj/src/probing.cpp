#include "circuitscope/probing.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "circuitscope/error.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/stats.hpp"
#include "circuitscope/table.hpp"

namespace circuitscope {

namespace {

constexpr std::uint64_t kSiteStream = 0x73697465;   // "site"
constexpr std::uint64_t kSplitStream = 0x73706c74;  // "splt"
constexpr std::size_t kBatch = 32;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Confusion {
  double tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> labels) {
  if (pred.size() != labels.size()) {
    throw InputError("prediction/label length mismatch: " + std::to_string(pred.size()) + " vs " +
                     std::to_string(labels.size()));
  }
  if (pred.empty()) throw InputError("metrics need at least one prediction");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, y = labels[i] != 0;
    if (p && y) c.tp += 1;
    if (p && !y) c.fp += 1;
    if (!p && y) c.fn += 1;
    if (!p && !y) c.tn += 1;
  }
  return c;
}

}  // namespace

ActivationDataset LayerActivations::dataset(int neuron) const {
  if (neuron < 0 || static_cast<std::size_t>(neuron) >= d_mlp) {
    throw AddressError("neuron " + std::to_string(neuron) + " outside [0, " + std::to_string(d_mlp) + ")");
  }
  ActivationDataset d;
  d.neuron = {layer, neuron};
  d.step = step;
  d.labels = labels;
  d.values.resize(size());
  for (std::size_t i = 0; i < size(); ++i) d.values[i] = values[i * d_mlp + static_cast<std::size_t>(neuron)];
  return d;
}

std::vector<TokenSite> sample_sites(const Corpus& corpus, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw InputError("n_per_class must be >= 1");
  std::vector<TokenSite> out;
  for (Language lang : {Language::A, Language::B}) {
    std::vector<TokenSite> pool;
    for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
      const auto& seq = corpus.sequences[s];
      if (seq.language != lang) continue;
      for (std::size_t p = 1; p < seq.tokens.size(); ++p) pool.push_back({static_cast<int>(s), static_cast<int>(p)});
    }
    if (pool.size() < static_cast<std::size_t>(n_per_class)) {
      throw DataError(std::string("language ") + language_code(lang) + " has " + std::to_string(pool.size()) +
                      " token positions (excluding position 0); " + std::to_string(n_per_class) +
                      " requested, short by " + std::to_string(static_cast<std::size_t>(n_per_class) - pool.size()));
    }
    Rng rng(derive_seed(seed, kSiteStream, lang == Language::A ? 0 : 1));
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_per_class); ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(static_cast<std::size_t>(n_per_class));
    std::sort(pool.begin(), pool.end());
    out.insert(out.end(), pool.begin(), pool.end());
  }
  return out;
}

std::vector<LayerActivations> collect_activations(const Transformer& model, const Corpus& corpus,
                                                  std::span<const int> layers, int n_per_class, std::uint64_t seed,
                                                  int step) {
  const ModelConfig& c = model.config();
  for (int l : layers) {
    if (l < 0 || l >= c.n_layers) throw AddressError("layer " + std::to_string(l) + " outside the model");
  }
  const auto sites = sample_sites(corpus, n_per_class, seed);
  const auto m = static_cast<std::size_t>(c.d_mlp);

  std::vector<LayerActivations> out(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out[i].layer = layers[i];
    out[i].step = step;
    out[i].d_mlp = m;
    out[i].values.resize(sites.size() * m);
    out[i].labels.resize(sites.size());
    for (std::size_t k = 0; k < sites.size(); ++k) {
      out[i].labels[k] = corpus.sequences[static_cast<std::size_t>(sites[k].sequence)].language == Language::A;
    }
  }

  // sequence -> rows of `sites` it contributes, grouped by sequence length
  std::map<std::size_t, std::map<int, std::vector<std::size_t>>> by_len;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    const auto& seq = corpus.sequences[static_cast<std::size_t>(sites[k].sequence)];
    by_len[seq.tokens.size()][sites[k].sequence].push_back(k);
  }
  std::vector<HookId> hooks;
  for (int l : layers) hooks.emplace_back(HookSite::mlp_act, l);

  for (const auto& [len, groups] : by_len) {
    std::vector<std::pair<int, const std::vector<std::size_t>*>> items;
    for (const auto& [s, rows] : groups) items.emplace_back(s, &rows);
    for (std::size_t b0 = 0; b0 < items.size(); b0 += kBatch) {
      const std::size_t b1 = std::min(items.size(), b0 + kBatch);
      std::vector<std::vector<int>> seqs;
      for (std::size_t b = b0; b < b1; ++b) seqs.push_back(corpus.sequences[static_cast<std::size_t>(items[b].first)].tokens);
      const BatchResult res = run_batch(model, seqs, {}, hooks);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        const Tensor& act = res.cache.at(hooks[li]);  // [B, T, m]
        for (std::size_t b = b0; b < b1; ++b) {
          for (std::size_t k : *items[b].second) {
            const auto pos = static_cast<std::size_t>(sites[k].position);
            const float* src = act.ptr() + ((b - b0) * len + pos) * m;
            std::copy(src, src + m, out[li].values.begin() + static_cast<std::ptrdiff_t>(k * m));
          }
        }
      }
    }
  }
  for (const auto& la : out) {
    if (!std::all_of(la.values.begin(), la.values.end(), [](float v) { return std::isfinite(v); })) {
      throw NumericError("non-finite activation in layer " + std::to_string(la.layer));
    }
  }
  return out;
}

LayerActivations collect_activations(const Transformer& model, const Corpus& corpus, int layer, int n_per_class,
                                     std::uint64_t seed, int step) {
  const int layers[] = {layer};
  return std::move(collect_activations(model, corpus, layers, n_per_class, seed, step).front());
}

LogisticFit fit_logistic_1d(std::span<const double> x, std::span<const std::uint8_t> y) {
  if (x.size() != y.size() || x.empty()) throw InputError("logistic fit needs equal, non-empty x and y");
  const double n = static_cast<double>(x.size());
  std::size_t positives = 0;
  for (auto v : y) positives += v != 0;
  if (positives == 0 || positives == x.size()) throw ProbeError("probe training split contains a single class");

  LogisticFit fit;
  double b0 = std::log(static_cast<double>(positives) / static_cast<double>(x.size() - positives));
  double b1 = 0.0;
  const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
  bool weight_fixed = constant;

  for (fit.iterations = 0; fit.iterations < 100; ++fit.iterations) {
    double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p = sigmoid(b0 + b1 * x[i]);
      const double r = (y[i] ? 1.0 : 0.0) - p;
      const double w = p * (1.0 - p);
      g0 += r;
      g1 += r * x[i];
      h00 += w;
      h01 += w * x[i];
      h11 += w * x[i] * x[i];
    }
    g0 /= n;
    g1 /= n;
    h00 /= n;
    h01 /= n;
    h11 /= n;
    const double gnorm = weight_fixed ? std::abs(g0) : std::hypot(g0, g1);
    if (gnorm < 1e-8) break;
    if (weight_fixed) {
      if (h00 <= 1e-300) break;
      b0 += g0 / h00;
      continue;
    }
    const double det = h00 * h11 - h01 * h01;
    if (det <= 1e-300 * std::max(1.0, h00 * h11)) {
      // Saturated: the data are separated at the current weight.
      b1 = std::clamp(b1 + (g1 >= 0 ? 1.0 : -1.0) * kProbeWeightCap, -kProbeWeightCap, kProbeWeightCap);
      fit.capped = true;
      weight_fixed = true;
      continue;
    }
    const double d0 = (h11 * g0 - h01 * g1) / det;
    const double d1 = (h00 * g1 - h01 * g0) / det;
    b0 += d0;
    b1 += d1;
    if (std::abs(b1) > kProbeWeightCap) {
      // Scale back along the Newton direction so the bias stays consistent
      // with the clamped weight, then refine the threshold alone.
      const double over = (std::abs(b1) - kProbeWeightCap) / std::abs(d1);
      b0 -= over * d0;
      b1 = std::copysign(kProbeWeightCap, b1);
      fit.capped = true;
      weight_fixed = true;
    }
  }
  fit.weight = b1;
  fit.bias = b0;
  return fit;
}

namespace {

struct Split {
  std::vector<std::size_t> train, test;
};

// Seeded shuffle, then the first train_fraction of each class (in shuffled
// order) trains and the rest tests, so balanced data give balanced splits.
Split make_split(std::span<const std::uint8_t> labels, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InputError("train_fraction must be in (0, 1)");
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, kSplitStream));
  rng.shuffle(idx);
  std::size_t n_pos = 0;
  for (auto v : labels) n_pos += v != 0;
  const std::size_t quota[2] = {
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(labels.size() - n_pos))),
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n_pos)))};
  std::size_t taken[2] = {0, 0};
  Split s;
  for (auto i : idx) {
    const int c = labels[i] != 0;
    if (taken[c] < quota[c]) {
      ++taken[c];
      s.train.push_back(i);
    } else {
      s.test.push_back(i);
    }
  }
  if (s.train.empty() || s.test.empty()) throw ProbeError("dataset too small for a train/test split");
  return s;
}

template <class Get>
ProbeResult fit_on_split(const Split& split, std::span<const std::uint8_t> labels, Get value) {
  double mean = 0.0;
  for (auto i : split.train) mean += value(i);
  mean /= static_cast<double>(split.train.size());
  double var = 0.0;
  for (auto i : split.train) var += (value(i) - mean) * (value(i) - mean);
  const double sd = std::sqrt(var / static_cast<double>(split.train.size()));
  const double scale = sd > 0.0 ? sd : 1.0;

  std::vector<double> z(split.train.size());
  std::vector<std::uint8_t> y(split.train.size());
  for (std::size_t k = 0; k < split.train.size(); ++k) {
    z[k] = (value(split.train[k]) - mean) / scale;
    y[k] = labels[split.train[k]];
  }
  const LogisticFit fit = fit_logistic_1d(z, y);

  std::vector<std::uint8_t> pred(split.test.size()), truth(split.test.size());
  for (std::size_t k = 0; k < split.test.size(); ++k) {
    const double zk = (value(split.test[k]) - mean) / scale;
    pred[k] = fit.weight * zk + fit.bias > 0.0;
    truth[k] = labels[split.test[k]];
  }
  ProbeResult r;
  r.weight = fit.weight / scale;
  r.bias = fit.bias - fit.weight * mean / scale;
  r.f1 = f1_score(pred, truth);
  r.mcc = mcc(pred, truth);
  return r;
}

}  // namespace

ProbeResult fit_probe(const ActivationDataset& data, double train_fraction, std::uint64_t seed) {
  if (data.values.size() != data.labels.size()) throw InputError("activation dataset values/labels length mismatch");
  for (float v : data.values) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation in dataset for " + data.neuron.name());
  }
  const Split split = make_split(data.labels, train_fraction, seed);
  ProbeResult r = fit_on_split(split, data.labels, [&](std::size_t i) { return static_cast<double>(data.values[i]); });
  r.neuron = data.neuron;
  r.step = data.step;
  return r;
}

std::vector<ProbeResult> fit_layer_probes(const LayerActivations& acts, double train_fraction, std::uint64_t seed) {
  const Split split = make_split(acts.labels, train_fraction, seed);
  std::vector<ProbeResult> out(acts.d_mlp);
  parallel_for(acts.d_mlp, [&](std::size_t n) {
    out[n] = fit_on_split(split, acts.labels,
                          [&](std::size_t i) { return static_cast<double>(acts.values[i * acts.d_mlp + n]); });
    out[n].neuron = {acts.layer, static_cast<int>(n)};
    out[n].step = acts.step;
  });
  return out;
}

double f1_score(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
  const Confusion c = confusion(predictions, labels);
  const double denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 || c.tp == 0 ? 0.0 : 2 * c.tp / denom;
}

double mcc(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
  const Confusion c = confusion(predictions, labels);
  const double a = c.tp + c.fp, b = c.tp + c.fn, d = c.tn + c.fp, e = c.tn + c.fn;
  if (a == 0 || b == 0 || d == 0 || e == 0) return 0.0;
  return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(a * b * d * e);
}

std::vector<double> SweepResult::f1_series(NeuronId neuron) const {
  std::vector<double> out;
  for (const auto& r : results) {
    if (r.neuron == neuron) out.push_back(r.f1);
  }
  return out;
}

std::vector<ProbeResult> probe_all(const Transformer& model, const Corpus& corpus, const SweepConfig& config, int step) {
  std::vector<int> layers(static_cast<std::size_t>(model.config().n_layers));
  std::iota(layers.begin(), layers.end(), 0);
  std::vector<ProbeResult> out;
  for (const auto& la : collect_activations(model, corpus, layers, config.n_per_class, config.seed, step)) {
    auto probes = fit_layer_probes(la, config.train_fraction, config.seed);
    out.insert(out.end(), probes.begin(), probes.end());
  }
  return out;
}

SweepResult summarize_sweep(std::vector<int> steps, const std::vector<std::vector<ProbeResult>>& per_step,
                            double f1_floor) {
  if (steps.size() != per_step.size()) throw InputError("summarize_sweep: one result list per step required");
  SweepResult out;
  out.steps = std::move(steps);
  for (const auto& rs : per_step) out.results.insert(out.results.end(), rs.begin(), rs.end());

  std::map<NeuronId, std::vector<double>> series;
  for (const auto& r : out.results) series[r.neuron].push_back(r.f1);
  std::vector<std::vector<double>> qualifying_series;
  for (const auto& [neuron, f1s] : series) {
    if (*std::max_element(f1s.begin(), f1s.end()) >= f1_floor) {
      out.qualifying.push_back(neuron);
      qualifying_series.push_back(f1s);
    }
  }
  if (!qualifying_series.empty()) {
    const double probes[] = {5.0, 50.0, 95.0};
    const auto bands = percentile_bands(qualifying_series, probes);
    for (std::size_t s = 0; s < out.steps.size(); ++s) {
      out.bands.push_back({out.steps[s], bands[s][0], bands[s][1], bands[s][2]});
    }
  }
  return out;
}

SweepResult sweep(const std::vector<CheckpointFile>& checkpoints, const Corpus& corpus, const SweepConfig& config) {
  if (checkpoints.empty()) throw InputError("probe sweep needs at least one checkpoint");
  const ModelConfig shared = load_checkpoint(checkpoints.front().path).model_config;
  std::vector<std::vector<ProbeResult>> per_step(checkpoints.size());
  std::vector<int> steps(checkpoints.size());
  parallel_for(checkpoints.size(), [&](std::size_t i) {
    const Checkpoint ck = load_checkpoint(checkpoints[i].path);
    if (!(ck.model_config == shared)) {
      throw ConfigError("checkpoint " + checkpoints[i].path.string() + " has a different model config");
    }
    steps[i] = ck.step;
    per_step[i] = probe_all(ck.model(), corpus, config, ck.step);
  });
  return summarize_sweep(std::move(steps), per_step, config.f1_floor);
}

void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  Table t;
  t.header = {"step", "layer", "neuron", "f1", "mcc", "weight", "bias"};
  for (const auto& r : results) {
    t.rows.push_back({std::to_string(r.step), std::to_string(r.neuron.layer), std::to_string(r.neuron.index),
                      format_number(r.f1), format_number(r.mcc), format_number(r.weight), format_number(r.bias)});
  }
  write_csv(t, path);
}

}  // namespace circuitscope
