#include "circuitscope/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "circuitscope/causal.hpp"
#include "circuitscope/checkpoint.hpp"
#include "circuitscope/report.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/stats.hpp"
#include "circuitscope/table.hpp"

namespace circuitscope {

namespace fs = std::filesystem;

StageError::StageError(std::string stage, const std::string& cause)
    : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}

namespace {

constexpr double kSignatureF1 = 0.95;
constexpr double kDetectedF1 = 0.9;
constexpr double kReliancePct = 2.0;
constexpr double kConvergedFraction = 0.25;

template <class Fn>
auto stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string num(double v) { return format_number(v); }

std::string opt_num(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

std::string join_steps(const std::vector<int>& steps) {
  std::string out;
  for (std::size_t i = 0; i < steps.size(); ++i) out += (i ? ", " : "") + std::to_string(steps[i]);
  return out;
}

std::vector<std::size_t> every_kth(std::size_t n, int k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(k)) out.push_back(i);
  if (n > 0 && out.back() != n - 1) out.push_back(n - 1);
  return out;
}

std::string trigram_text(const Trigram& t) {
  return std::to_string(t[0]) + " " + std::to_string(t[1]) + " " + std::to_string(t[2]);
}

struct Ablation {
  NeuronId neuron;
  double f1 = 0.0;
  double clean = 0.0;
  double ablated = 0.0;
  double pct() const { return clean > 0.0 ? 100.0 * (ablated - clean) / clean : 0.0; }
};

struct TrackedTrigram {
  Trigram tokens{};
  std::string source;  // "planted" or "discovered"
  std::vector<std::vector<int>> prompts;
};

// Everything measured on one checkpoint in the second pass.
struct StepData {
  int step = 0;
  double train_loss = 0.0;
  double loss_a = 0.0, loss_b = 0.0;
  double target_f1 = 0.0;
  std::optional<EffectReport> effects;  // total always; direct/indirect on effect steps
  std::vector<Ablation> ablations;      // on sampled steps
  std::vector<TrigramRecord> trigrams;
  double dla_target = 0.0;
  std::vector<double> dla_random;
};

double probe_f1(const std::vector<ProbeResult>& results, NeuronId n, int d_mlp) {
  const auto& r = results[static_cast<std::size_t>(n.layer * d_mlp + n.index)];
  return r.f1;
}

Ablation ablate(const Transformer& model, const Corpus& eval, const std::vector<std::vector<int>>& eval_a,
                NeuronId neuron, double f1, int step) {
  const auto spec = AblationSpec::from_corpus(model, eval, neuron, Language::B, "eval", step);
  const auto rep = total_effect(model, eval_a, spec);
  return {neuron, f1, rep.clean_loss, rep.ablated_loss};
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

Signature evaluate_signature(NeuronId target, const std::vector<StepData>& data,
                             const std::vector<TrackedTrigram>& tracked) {
  Signature sig;
  sig.target = target;
  const StepData& last = data.back();
  char buf[256];

  std::snprintf(buf, sizeof buf, "%s final F1 %.4f (>= %.2f)", target.name().c_str(), last.target_f1, kSignatureF1);
  sig.checks.push_back({"context_neuron", last.target_f1 >= kSignatureF1, buf});

  const double final_pct = last.effects->pct_total();
  const StepData* detected = nullptr;
  for (const auto& d : data) {
    if (d.target_f1 >= kDetectedF1) {
      detected = &d;
      break;
    }
  }
  bool reliance = final_pct >= kReliancePct && detected != nullptr;
  if (detected) {
    const double early = detected->effects->pct_total();
    reliance = reliance && early < 0.5 * final_pct;
    std::snprintf(buf, sizeof buf, "ablation %+.4f%% at final; first F1 >= %.1f at step %d with %+.4f%%", final_pct,
                  kDetectedF1, detected->step, early);
  } else {
    std::snprintf(buf, sizeof buf, "ablation %+.4f%% at final; F1 never reaches %.1f", final_pct, kDetectedF1);
  }
  sig.checks.push_back({"detection_precedes_reliance", reliance, buf});

  std::string detail;
  bool ordered = false;
  for (std::size_t t = 0; t < tracked.size(); ++t) {
    if (tracked[t].source != "planted") continue;
    const TrigramRecord& fin = last.trigrams[t];
    const bool final_ok = fin.verdict && fin.indirect > fin.direct;
    const StepData* converged = nullptr;
    for (const auto& d : data) {
      if (std::abs(d.trigrams[t].clean - fin.clean) <= kConvergedFraction * std::abs(fin.clean)) {
        converged = &d;
        break;
      }
    }
    const auto& early = converged->trigrams[t];
    const bool early_fails = !(early.indirect > early.direct);
    std::snprintf(buf, sizeof buf, "[%s] final %s; converged at step %d with indirect %.3f vs direct %.3f",
                  trigram_text(tracked[t].tokens).c_str(), final_ok ? "verified" : "not verified", converged->step,
                  early.indirect, early.direct);
    if (final_ok && early_fails) {
      ordered = true;
      detail = buf;
      break;
    }
    if (final_ok && detail.empty()) detail = buf;
  }
  if (detail.empty()) detail = "no planted trigram verifies with indirect > direct at the final checkpoint";
  sig.checks.push_back({"second_order_ordering", ordered, detail});
  return sig;
}

struct ChartDef {
  const char* table;
  const char* output;
  const char* title;
  const char* y_label;
  std::vector<std::string> series;
  std::vector<BandSpec> bands;
};

const std::vector<ChartDef>& chart_defs() {
  static const std::vector<ChartDef> defs = {
      {"fig1_signature/signature.csv", "fig1_signature/f1.svg", "Context neuron probe F1", "F1", {"target_f1"}, {}},
      {"fig1_signature/signature.csv",
       "fig1_signature/ablation.svg",
       "Language-A loss increase from mean ablation",
       "% increase",
       {"ablation_pct"},
       {}},
      {"fig1_signature/signature.csv",
       "fig1_signature/trigram_loss.svg",
       "Trigram loss (median, 25th-75th percentile)",
       "nats",
       {"trigram_clean_p50", "trigram_total_p50"},
       {{"trigram_clean_p25", "trigram_clean_p75"}, {"trigram_total_p25", "trigram_total_p75"}}},
      {"fig2_probing/f1_bands.csv",
       "fig2_probing/f1_bands.svg",
       "Context neuron F1 (median, 5th-95th percentile)",
       "F1",
       {"p50"},
       {{"p5", "p95"}}},
      {"fig4_effects/effects.csv",
       "fig4_effects/effects.svg",
       "Ablation loss increase by path",
       "% increase",
       {"pct_total", "pct_direct", "pct_indirect"},
       {}},
      {"fig5_trigrams/trigram_bands.csv",
       "fig5_trigrams/trigram_bands.svg",
       "Trigram loss deltas (median, 25th-75th percentile)",
       "nats",
       {"clean_p50", "direct_p50", "indirect_p50"},
       {{"clean_p25", "clean_p75"}, {"direct_p25", "direct_p75"}, {"indirect_p25", "indirect_p75"}}},
      {"fig6_dla/dla_gap.csv",
       "fig6_dla/dla_gap.svg",
       "DLA language gap",
       "mean logit gap",
       {"target_gap", "random_p50"},
       {{"random_p5", "random_p95"}}},
      {"fig7_losses/losses.csv", "fig7_losses/losses.svg", "Loss by language", "nats",
       {"loss_a", "loss_b", "train_loss"}, {}},
  };
  return defs;
}

}  // namespace

void ExperimentPlan::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive(probe_sequences, "probe_sequences");
  positive(eval_sequences, "eval_sequences");
  positive(probing.n_per_class, "probe_per_class");
  positive(ablation_every, "ablation_every");
  positive(effects_every, "effects_every");
  positive(max_ablation_neurons, "max_ablation_neurons");
  positive(n_prompts, "n_prompts");
  positive(prefix_len, "prefix_len");
  positive(pool_size, "pool_size");
  positive(dla_tokens, "dla_tokens");
  if (scan_top_m < 0) throw ConfigError("scan_top_m must be >= 0");
  if (max_trigrams < 0) throw ConfigError("max_trigrams must be >= 0");
  if (dla_random_neurons < 0) throw ConfigError("dla_random_neurons must be >= 0");
  if (!(probing.train_fraction > 0.0 && probing.train_fraction < 1.0)) {
    throw ConfigError("probe_train_fraction must be in (0, 1)");
  }
  if (!(probing.f1_floor >= 0.0 && probing.f1_floor <= 1.0)) throw ConfigError("f1_floor must be in [0, 1]");
  for (double v : {filter.max_clean_loss, filter.min_total_delta}) {
    if (!std::isfinite(v)) throw ConfigError("filter thresholds must be finite");
  }
  for (int s : steps) {
    if (s < 0) throw ConfigError("checkpoint steps must be >= 0");
  }
}

nlohmann::ordered_json ExperimentPlan::to_json() const {
  nlohmann::ordered_json j;
  if (corpus) {
    nlohmann::json c = *corpus;
    j["corpus"] = c;
  }
  j["steps"] = steps;
  j["target"] = target ? nlohmann::ordered_json(target->name()) : nlohmann::ordered_json(nullptr);
  j["seed"] = seed;
  j["toggles"] = {{"probe_sweep", toggles.probe_sweep}, {"ablation_sweep", toggles.ablation_sweep},
                  {"effects", toggles.effects},         {"dla_gap", toggles.dla_gap},
                  {"trigrams", toggles.trigrams},       {"loss_curves", toggles.loss_curves}};
  j["probe_sequences"] = probe_sequences;
  j["eval_sequences"] = eval_sequences;
  j["probing"] = {{"n_per_class", probing.n_per_class},
                  {"train_fraction", probing.train_fraction},
                  {"f1_floor", probing.f1_floor}};
  j["ablation_every"] = ablation_every;
  j["effects_every"] = effects_every;
  j["max_ablation_neurons"] = max_ablation_neurons;
  j["filter"] = {{"max_clean_loss", filter.max_clean_loss},
                 {"min_total_delta", filter.min_total_delta},
                 {"require_indirect_dominant", filter.require_indirect_dominant}};
  j["scan_top_m"] = scan_top_m;
  j["max_trigrams"] = max_trigrams;
  j["n_prompts"] = n_prompts;
  j["prefix_len"] = prefix_len;
  j["pool_size"] = pool_size;
  j["dla_tokens"] = dla_tokens;
  j["dla_random_neurons"] = dla_random_neurons;
  j["render"] = render;
  return j;
}

bool Signature::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

nlohmann::ordered_json Signature::to_json() const {
  nlohmann::ordered_json j;
  j["target"] = target.name();
  j["passed"] = passed();
  j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : checks) j["checks"].push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  return j;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::vector<fs::path> render_results(const fs::path& results_dir) {
  std::vector<fs::path> out;
  for (const auto& def : chart_defs()) {
    if (!fs::exists(results_dir / def.table)) continue;
    ChartSpec spec;
    spec.input = results_dir / def.table;
    spec.output = results_dir / def.output;
    spec.x = "step";
    spec.series = def.series;
    spec.bands = def.bands;
    spec.title = def.title;
    spec.x_label = "training step";
    spec.y_label = def.y_label;
    spec.log_x = true;
    const Table table = read_csv(spec.input);
    bool present = true;
    for (const auto& s : spec.series) present = present && table.column(s) >= 0;
    if (!present) continue;  // e.g. the signature table without trigram columns
    render_chart_file(spec);
    out.push_back(def.output);
  }
  // One line per context neuron.
  const fs::path wide = results_dir / "fig3_ablation/ablation_wide.csv";
  if (fs::exists(wide)) {
    const Table table = read_csv(wide);
    ChartSpec spec;
    spec.input = wide;
    spec.output = results_dir / "fig3_ablation/ablation.svg";
    spec.x = "step";
    spec.series.assign(table.header.begin() + 1, table.header.end());
    spec.title = "Context neuron ablation";
    spec.x_label = "training step";
    spec.y_label = "% increase in language-A loss";
    spec.log_x = true;
    render_chart_file(spec);
    out.push_back("fig3_ablation/ablation.svg");
  }
  return out;
}

std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

Corpus probe_corpus(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed) {
  return generate(spec, n_per_language, seq_len, stream_seed(seed, SeedStream::probe_corpus));
}

Corpus eval_corpus(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed) {
  return generate(spec, n_per_language, seq_len, stream_seed(seed, SeedStream::eval_corpus));
}

CorpusSpec recorded_corpus(const Checkpoint& checkpoint) {
  if (!checkpoint.run_config.contains("corpus")) {
    throw PlanError("checkpoint at step " + std::to_string(checkpoint.step) + " carries no corpus spec");
  }
  return checkpoint.run_config.at("corpus").get<CorpusSpec>();
}

ExperimentResult run(const ExperimentPlan& plan, const fs::path& out_dir) {
  plan.validate();
  ExperimentResult result;

  // Resolve the checkpoint series.
  const auto available = list_checkpoints(plan.checkpoint_dir);
  if (available.empty()) throw PlanError("no checkpoints in " + plan.checkpoint_dir.string());
  const Checkpoint first = load_checkpoint(available.front().path);
  std::vector<int> steps = plan.steps;
  if (steps.empty()) {
    if (!first.run_config.contains("train")) {
      throw PlanError("checkpoints carry no training schedule; list the steps explicitly");
    }
    steps = first.run_config.at("train").get<TrainConfig>().schedule();
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  std::map<int, fs::path> by_step;
  for (const auto& f : available) by_step[f.step] = f.path;
  std::vector<int> missing;
  std::vector<fs::path> files;
  for (int s : steps) {
    auto it = by_step.find(s);
    if (it == by_step.end()) {
      missing.push_back(s);
    } else {
      files.push_back(it->second);
    }
  }
  if (!missing.empty()) {
    throw PlanError("missing checkpoints in " + plan.checkpoint_dir.string() + " for steps: " + join_steps(missing));
  }
  result.steps = steps;
  const ModelConfig mc = first.model_config;

  CorpusSpec spec = plan.corpus ? *plan.corpus : recorded_corpus(first);
  spec.validate();
  if (spec.vocab_size != mc.vocab_size) throw ConfigError("corpus vocab_size does not match the model");

  fs::create_directories(out_dir);
  const std::uint64_t probe_seed = stream_seed(plan.seed, SeedStream::probe_corpus);
  const std::uint64_t eval_seed = stream_seed(plan.seed, SeedStream::eval_corpus);
  const std::uint64_t split_seed = stream_seed(plan.seed, SeedStream::probe_split);
  const std::uint64_t prompt_seed = stream_seed(plan.seed, SeedStream::prompts);
  const std::uint64_t dla_seed = stream_seed(plan.seed, SeedStream::dla_neurons);

  const auto& tg = plan.toggles;
  const bool need_target = tg.effects || tg.dla_gap || tg.trigrams;
  const bool need_selection = need_target && !plan.target;
  const bool need_probe_final = need_selection || tg.ablation_sweep;
  std::vector<std::string> stages;
  std::vector<fs::path> written;
  const std::size_t n = files.size();

  Corpus probe, eval;
  std::vector<std::vector<int>> eval_a, eval_b;
  if (tg.any()) {
    probe = probe_corpus(spec, plan.probe_sequences, mc.max_seq_len, plan.seed);
    eval = eval_corpus(spec, plan.eval_sequences, mc.max_seq_len, plan.seed);
    eval_a = eval.tokens_of(Language::A);
    eval_b = eval.tokens_of(Language::B);
  }
  SweepConfig probing = plan.probing;
  probing.seed = split_seed;

  // Pass 1: probes.
  std::vector<std::vector<ProbeResult>> probes(n);
  std::optional<SweepResult> sweep_result;
  if (tg.probe_sweep || need_probe_final) {
    stages.push_back("probing");
    stage("probing", [&] {
      std::vector<std::size_t> which;
      if (tg.probe_sweep) {
        for (std::size_t i = 0; i < n; ++i) which.push_back(i);
      } else {
        which.push_back(n - 1);
      }
      parallel_for(which.size(), [&](std::size_t w) {
        const std::size_t i = which[w];
        const Checkpoint ck = load_checkpoint(files[i]);
        if (!(ck.model_config == mc)) throw ConfigError("checkpoint " + files[i].string() + " has a different model config");
        probes[i] = probe_all(ck.model(), probe, probing, ck.step);
      });
      if (tg.probe_sweep) {
        sweep_result = summarize_sweep(steps, probes, probing.f1_floor);
        const fs::path dir = out_dir / "fig2_probing";
        fs::create_directories(dir);
        write_probe_csv(sweep_result->results, dir / "probe_results.csv");
        Table bands;
        bands.header = {"step", "p5", "p50", "p95", "n_neurons"};
        for (const auto& b : sweep_result->bands) {
          bands.add_row({std::to_string(b.step), num(b.p5), num(b.p50), num(b.p95),
                         std::to_string(sweep_result->qualifying.size())});
        }
        write_csv(bands, dir / "f1_bands.csv");
        written.push_back("fig2_probing/probe_results.csv");
        written.push_back("fig2_probing/f1_bands.csv");
      }
      return 0;
    });
  }

  // Context neurons: qualifying over the sweep (or at the final checkpoint),
  // strongest final F1 first, capped. The default target is the strongest.
  std::vector<NeuronId> context;
  if (need_probe_final) {
    stages.push_back("selection");
    stage("selection", [&] {
      const auto& fin = probes[n - 1];
      if (sweep_result) {
        context = sweep_result->qualifying;
      } else {
        for (const auto& r : fin) {
          if (r.f1 >= probing.f1_floor) context.push_back(r.neuron);
        }
      }
      std::stable_sort(context.begin(), context.end(), [&](NeuronId a, NeuronId b) {
        return probe_f1(fin, a, mc.d_mlp) > probe_f1(fin, b, mc.d_mlp);
      });
      if (static_cast<int>(context.size()) > plan.max_ablation_neurons) {
        context.resize(static_cast<std::size_t>(plan.max_ablation_neurons));
      }
      std::sort(context.begin(), context.end());
      if (need_selection) {
        const ProbeResult* best = nullptr;
        for (const auto& r : fin) {
          if (!best || r.f1 > best->f1) best = &r;
        }
        result.target = best->neuron;
        result.target_rule = "argmax final-checkpoint F1";
      }
      return 0;
    });
  }
  if (plan.target) {
    if (plan.target->layer < 0 || plan.target->layer >= mc.n_layers || plan.target->index < 0 ||
        plan.target->index >= mc.d_mlp) {
      throw ConfigError("target neuron " + plan.target->name() + " is outside the model");
    }
    result.target = plan.target;
    result.target_rule = "fixed";
  }
  if (!need_target) result.target.reset();

  // Trigram set, fixed at the final checkpoint.
  std::vector<TrackedTrigram> tracked;
  if (tg.trigrams) {
    stages.push_back("trigram_discovery");
    stage("trigram_discovery", [&] {
      const Checkpoint ck = load_checkpoint(files[n - 1]);
      const Transformer model = ck.model();
      const auto abl = AblationSpec::from_corpus(model, eval, *result.target, Language::B, "eval", ck.step);
      const auto candidates = scan(model, eval_a, abl, plan.scan_top_m);
      const auto kept = filter(candidates, plan.filter);
      std::set<Trigram> kept_set;
      for (const auto& c : kept) kept_set.insert(c.tokens);

      const fs::path dir = out_dir / "fig5_trigrams";
      fs::create_directories(dir);
      Table t;
      t.header = {"a", "b", "c", "occurrences", "clean", "ablated", "total", "direct", "indirect", "passes_filter"};
      for (const auto& c : candidates) {
        t.add_row({std::to_string(c.tokens[0]), std::to_string(c.tokens[1]), std::to_string(c.tokens[2]),
                   std::to_string(c.occurrences), num(c.clean), num(c.ablated), num(c.total()), num(c.direct),
                   num(c.indirect), kept_set.count(c.tokens) ? "1" : "0"});
      }
      write_csv(t, dir / "candidates.csv");
      written.push_back("fig5_trigrams/candidates.csv");

      std::set<Trigram> seen;
      auto add = [&](const Trigram& tri, const char* source) {
        if (static_cast<int>(tracked.size()) >= plan.max_trigrams || !seen.insert(tri).second) return;
        tracked.push_back({tri, source, {}});
      };
      for (const auto& tri : spec.a.planted_trigrams) add(tri, "planted");
      for (const auto& c : kept) add(c.tokens, "discovered");
      const auto pool = prompt_pool(eval, plan.pool_size);
      for (std::size_t i = 0; i < tracked.size(); ++i) {
        tracked[i].prompts = make_prompts(tracked[i].tokens, pool, spec.vocab_size, plan.n_prompts, plan.prefix_len,
                                          derive_seed(prompt_seed, i));
      }
      return 0;
    });
  }

  std::vector<NeuronId> dla_neurons;
  std::vector<int> dla_a, dla_b;
  if (tg.dla_gap) {
    Rng rng(dla_seed);
    std::vector<NeuronId> all;
    for (int l = 0; l < mc.n_layers; ++l) {
      for (int i = 0; i < mc.d_mlp; ++i) {
        if (NeuronId{l, i} != *result.target) all.push_back({l, i});
      }
    }
    rng.shuffle(all);
    all.resize(std::min(all.size(), static_cast<std::size_t>(plan.dla_random_neurons)));
    std::sort(all.begin(), all.end());
    dla_neurons = std::move(all);
    dla_a = top_k_exclusive_tokens(eval, Language::A, plan.dla_tokens).tokens;
    dla_b = top_k_exclusive_tokens(eval, Language::B, plan.dla_tokens).tokens;
  }

  // Pass 2: per-checkpoint measurements.
  std::vector<char> ablation_step(n, 0), effects_step(n, 0);
  for (auto i : every_kth(n, plan.ablation_every)) ablation_step[i] = 1;
  for (auto i : every_kth(n, plan.effects_every)) effects_step[i] = 1;

  std::vector<StepData> data(n);
  const bool pass2 = need_target || tg.ablation_sweep || tg.loss_curves;
  if (pass2) {
    stages.push_back("measurements");
    stage("measurements", [&] {
      parallel_for(n, [&](std::size_t i) {
        const Checkpoint ck = load_checkpoint(files[i]);
        if (!(ck.model_config == mc)) throw ConfigError("checkpoint " + files[i].string() + " has a different model config");
        const Transformer model = ck.model();
        StepData& d = data[i];
        d.step = ck.step;
        d.train_loss = ck.train_loss;
        if (tg.loss_curves) {
          d.loss_a = mean_loss(model, eval_a);
          d.loss_b = mean_loss(model, eval_b);
        }
        if (tg.ablation_sweep && ablation_step[i]) {
          for (NeuronId c : context) {
            const double f1 = probes[i].empty() ? std::nan("") : probe_f1(probes[i], c, mc.d_mlp);
            d.ablations.push_back(ablate(model, eval, eval_a, c, f1, ck.step));
          }
        }
        if (!need_target) return;
        const NeuronId target = *result.target;
        if (!probes[i].empty()) {
          d.target_f1 = probe_f1(probes[i], target, mc.d_mlp);
        } else {
          const auto la = collect_activations(model, probe, target.layer, probing.n_per_class, split_seed, ck.step);
          d.target_f1 = fit_probe(la.dataset(target.index), probing.train_fraction, split_seed).f1;
        }
        const auto abl = AblationSpec::from_corpus(model, eval, target, Language::B, "eval", ck.step);
        const bool split = tg.effects && effects_step[i];
        d.effects = measure_effects(model, eval_a, abl, split, split);
        d.effects->per_sequence_total.clear();
        if (tg.trigrams && !tracked.empty()) {
          std::vector<Trigram> tris;
          std::vector<std::vector<std::vector<int>>> prompts;
          for (const auto& t : tracked) {
            tris.push_back(t.tokens);
            prompts.push_back(t.prompts);
          }
          d.trigrams = verify_many(model, abl, tris, prompts, plan.filter);
        }
        if (tg.dla_gap) {
          d.dla_target = dla_language_gap(model, target, dla_a, dla_b);
          for (NeuronId r : dla_neurons) d.dla_random.push_back(dla_language_gap(model, r, dla_a, dla_b));
        }
      });
      return 0;
    });
  }

  stages.push_back("tables");
  stage("tables", [&] {
    if (tg.loss_curves) {
      fs::create_directories(out_dir / "fig7_losses");
      Table t;
      t.header = {"step", "loss_a", "loss_b", "train_loss"};
      for (const auto& d : data) t.add_row({std::to_string(d.step), num(d.loss_a), num(d.loss_b), num(d.train_loss)});
      write_csv(t, out_dir / "fig7_losses/losses.csv");
      written.push_back("fig7_losses/losses.csv");
    }
    if (tg.ablation_sweep) {
      fs::create_directories(out_dir / "fig3_ablation");
      Table lng, wide;
      lng.header = {"step", "layer", "neuron", "f1", "clean_loss", "ablated_loss", "delta", "pct"};
      wide.header = {"step"};
      for (NeuronId c : context) wide.header.push_back(c.name());
      for (std::size_t i = 0; i < n; ++i) {
        if (!ablation_step[i]) continue;
        const auto& d = data[i];
        std::vector<std::string> row{std::to_string(d.step)};
        for (const auto& a : d.ablations) {
          lng.add_row({std::to_string(d.step), std::to_string(a.neuron.layer), std::to_string(a.neuron.index),
                       num(a.f1), num(a.clean), num(a.ablated), num(a.ablated - a.clean), num(a.pct())});
          row.push_back(num(a.pct()));
        }
        wide.add_row(std::move(row));
      }
      write_csv(lng, out_dir / "fig3_ablation/ablation.csv");
      write_csv(wide, out_dir / "fig3_ablation/ablation_wide.csv");
      written.push_back("fig3_ablation/ablation.csv");
      written.push_back("fig3_ablation/ablation_wide.csv");
    }
    if (!need_target) return 0;
    const NeuronId target = *result.target;
    const std::string layer = std::to_string(target.layer), index = std::to_string(target.index);

    // Trigram percentile bands per step.
    std::vector<std::array<double, 12>> tri_bands(n);
    if (tg.trigrams && !tracked.empty()) {
      const double q[] = {25.0, 50.0, 75.0};
      for (std::size_t i = 0; i < n; ++i) {
        std::array<std::vector<double>, 4> cols;
        for (const auto& r : data[i].trigrams) {
          cols[0].push_back(r.clean);
          cols[1].push_back(r.total());
          cols[2].push_back(r.direct);
          cols[3].push_back(r.indirect);
        }
        for (std::size_t c = 0; c < 4; ++c) {
          for (std::size_t k = 0; k < 3; ++k) tri_bands[i][c * 3 + k] = percentile(cols[c], q[k]);
        }
      }
    }

    fs::create_directories(out_dir / "fig1_signature");
    Table sig;
    sig.header = {"step", "layer", "neuron", "target_f1", "clean_loss_a", "ablated_loss_a", "ablation_pct"};
    const bool with_tri = tg.trigrams && !tracked.empty();
    if (with_tri) {
      for (const char* c : {"trigram_clean_p25", "trigram_clean_p50", "trigram_clean_p75", "trigram_total_p25",
                            "trigram_total_p50", "trigram_total_p75"}) {
        sig.header.push_back(c);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& d = data[i];
      std::vector<std::string> row{std::to_string(d.step),        layer,
                                   index,                         num(d.target_f1),
                                   num(d.effects->clean_loss),    num(d.effects->ablated_loss),
                                   num(d.effects->pct_total())};
      if (with_tri) {
        for (std::size_t k = 0; k < 6; ++k) row.push_back(num(tri_bands[i][k]));
      }
      sig.add_row(std::move(row));
    }
    write_csv(sig, out_dir / "fig1_signature/signature.csv");
    written.push_back("fig1_signature/signature.csv");

    if (tg.effects) {
      fs::create_directories(out_dir / "fig4_effects");
      Table t;
      t.header = {"step", "layer", "neuron", "clean_loss", "ablated_loss", "total", "direct", "indirect",
                  "pct_total", "pct_direct", "pct_indirect"};
      for (std::size_t i = 0; i < n; ++i) {
        if (!effects_step[i]) continue;
        const auto& e = *data[i].effects;
        t.add_row({std::to_string(e.step), layer, index, num(e.clean_loss), num(e.ablated_loss), num(e.total),
                   opt_num(e.direct), opt_num(e.indirect), num(e.pct_total()), opt_num(e.pct_direct()),
                   opt_num(e.pct_indirect())});
      }
      write_csv(t, out_dir / "fig4_effects/effects.csv");
      written.push_back("fig4_effects/effects.csv");
    }

    if (tg.trigrams) {
      const fs::path dir = out_dir / "fig5_trigrams";
      Table t;
      t.header = {"step", "a", "b", "c", "source", "clean", "ablated", "total", "direct", "indirect", "verdict"};
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < tracked.size(); ++k) {
          const auto& r = data[i].trigrams[k];
          t.add_row({std::to_string(data[i].step), std::to_string(r.tokens[0]), std::to_string(r.tokens[1]),
                     std::to_string(r.tokens[2]), tracked[k].source, num(r.clean), num(r.ablated), num(r.total()),
                     num(r.direct), num(r.indirect), r.verdict ? "1" : "0"});
        }
      }
      write_csv(t, dir / "trigram_losses.csv");
      Table b;
      b.header = {"step"};
      for (const char* m : {"clean", "total", "direct", "indirect"}) {
        for (const char* p : {"_p25", "_p50", "_p75"}) b.header.push_back(std::string(m) + p);
      }
      if (!tracked.empty()) {
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<std::string> row{std::to_string(data[i].step)};
          for (double v : tri_bands[i]) row.push_back(num(v));
          b.add_row(std::move(row));
        }
      }
      write_csv(b, dir / "trigram_bands.csv");
      write_trigram_jsonl(tracked.empty() ? std::vector<TrigramRecord>{} : data[n - 1].trigrams,
                          dir / "trigrams.jsonl");
      written.push_back("fig5_trigrams/trigram_losses.csv");
      written.push_back("fig5_trigrams/trigram_bands.csv");
      written.push_back("fig5_trigrams/trigrams.jsonl");
    }

    if (tg.dla_gap) {
      fs::create_directories(out_dir / "fig6_dla");
      Table t;
      t.header = {"step", "layer", "neuron", "target_gap", "random_p5", "random_p50", "random_p95"};
      for (const auto& d : data) {
        std::vector<std::string> row{std::to_string(d.step), layer, index, num(d.dla_target)};
        for (double p : {5.0, 50.0, 95.0}) row.push_back(d.dla_random.empty() ? "" : num(percentile(d.dla_random, p)));
        t.add_row(std::move(row));
      }
      write_csv(t, out_dir / "fig6_dla/dla_gap.csv");
      written.push_back("fig6_dla/dla_gap.csv");
    }

    if (tg.probe_sweep && tg.trigrams && tg.effects) {
      result.signature = evaluate_signature(target, data, tracked);
      write_json(out_dir / "fig1_signature/signature.json", result.signature->to_json());
      written.push_back("fig1_signature/signature.json");
    }
    return 0;
  });

  if (plan.render && !written.empty()) {
    stages.push_back("render");
    stage("render", [&] {
      for (auto& p : render_results(out_dir)) written.push_back(p);
      return 0;
    });
  }

  // Manifest.
  nlohmann::ordered_json m;
  m["format"] = "circuitscope-results/1";
  m["plan"] = plan.to_json();
  m["seeds"] = {{"plan", plan.seed},           {"probe_corpus", probe_seed}, {"eval_corpus", eval_seed},
                {"probe_split", split_seed},   {"prompts", prompt_seed},     {"dla_neurons", dla_seed}};
  nlohmann::json mcj = mc;
  nlohmann::json spj = spec;
  m["model_config"] = mcj;
  m["corpus"] = spj;
  m["checkpoints"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < n; ++i) {
    m["checkpoints"].push_back(
        {{"step", steps[i]}, {"file", files[i].filename().string()}, {"sha256", sha256_file(files[i])}});
  }
  if (result.target) {
    m["target"] = {{"neuron", result.target->name()},
                   {"layer", result.target->layer},
                   {"index", result.target->index},
                   {"rule", result.target_rule}};
  } else {
    m["target"] = nullptr;
  }
  if (!tracked.empty()) {
    m["trigrams"] = nlohmann::ordered_json::array();
    for (const auto& t : tracked) m["trigrams"].push_back({{"tokens", t.tokens}, {"source", t.source}});
  }
  m["stages"] = stages;
  m["files"] = nlohmann::ordered_json::array();
  for (const auto& f : written) {
    m["files"].push_back({{"path", f.generic_string()},
                          {"sha256", sha256_file(out_dir / f)},
                          {"bytes", fs::file_size(out_dir / f)}});
  }
  if (result.signature) m["signature"] = result.signature->to_json();
  write_json(out_dir / "manifest.json", m);
  written.push_back("manifest.json");
  result.files = std::move(written);
  return result;
}

ExperimentResult reproduce(const ReproduceConfig& config, const fs::path& out_dir) {
  const fs::path ckpt_dir = out_dir / "checkpoints";
  stage("train", [&] {
    train(config.model, config.train, config.corpus, ckpt_dir);
    return 0;
  });
  ExperimentPlan plan = config.plan;
  plan.checkpoint_dir = ckpt_dir;
  plan.corpus = config.corpus;
  return run(plan, out_dir / "results");
}

}  // namespace circuitscope
