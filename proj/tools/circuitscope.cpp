#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>

#include "circuitscope/causal.hpp"
#include "circuitscope/checkpoint.hpp"
#include "circuitscope/config.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/experiment.hpp"
#include "circuitscope/ngram.hpp"
#include "circuitscope/probing.hpp"
#include "circuitscope/report.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/table.hpp"
#include "circuitscope/trainer.hpp"

using namespace circuitscope;
namespace fs = std::filesystem;

namespace {

struct Key {
  const char* name;
  const char* fallback;
  const char* help;
};

using KeyGroup = std::vector<Key>;

const KeyGroup kModelKeys = {
    {"n_layers", "4", "transformer blocks"},
    {"d_model", "128", "residual width"},
    {"n_heads", "4", "attention heads"},
    {"d_head", "32", "width per head"},
    {"d_mlp", "512", "MLP neurons per layer"},
    {"max_seq_len", "64", "context length; also the corpus sequence length"},
    {"parallel_blocks", "true", "attention and MLP read the same residual"},
};

const KeyGroup kTrainKeys = {
    {"steps", "4000", "optimizer steps"},
    {"batch_size", "32", "sequences per step, half per language"},
    {"lr", "0.001", "peak learning rate"},
    {"warmup_steps", "200", "linear warm-up length"},
    {"decay", "cosine", "cosine or none"},
    {"final_lr_fraction", "0.1", "cosine floor as a fraction of lr"},
    {"adam_beta1", "0.9", ""},
    {"adam_beta2", "0.95", ""},
    {"checkpoint_steps", "", "comma-separated steps; empty: 0,1,2,4..512 then every 250"},
};

const KeyGroup kCorpusKeys = {
    {"corpus_spec", "", "corpus spec JSON; empty: the built-in two-language spec"},
};

const KeyGroup kGenKeys = {
    {"n_per_language", "1000", "sequences per language"},
    {"seq_len", "64", "tokens per sequence"},
};

const KeyGroup kCheckpointsKeys = {
    {"checkpoints", "checkpoints", "checkpoint directory"},
};

const KeyGroup kProbeKeys = {
    {"probe_sequences", "300", "probing corpus sequences per language"},
    {"probe_per_class", "10000", "sampled positions per language"},
    {"probe_train_fraction", "0.8", "probe training split"},
    {"f1_floor", "0.85", "context-neuron F1 threshold"},
};

const KeyGroup kNeuronKeys = {
    {"checkpoint", "", "checkpoint file (required)"},
    {"neuron", "", "neuron as L<layer>N<index> (required)"},
    {"eval_sequences", "200", "evaluation sequences per language"},
};

const KeyGroup kAblateKeys = {
    {"reference", "B", "language whose mean activation is pinned"},
};

const KeyGroup kDlaKeys = {
    {"fold_final_norm", "false", "scale by the final-norm gain"},
    {"dla_tokens", "100", "tokens per language for the gap"},
};

const KeyGroup kFilterKeys = {
    {"max_clean_loss", "1.5", "filter: clean loss ceiling (nats)"},
    {"min_total_delta", "0.2", "filter: total ablation delta floor (nats)"},
    {"require_indirect_dominant", "true", "filter: indirect delta must exceed direct"},
    {"scan_top_m", "20", "candidates kept from the corpus scan"},
    {"n_prompts", "100", "verification prompts per trigram"},
    {"prefix_len", "20", "random prefix tokens per prompt"},
    {"pool_size", "100", "frequent language-A tokens the prefixes draw from"},
};

const KeyGroup kFindKeys = {
    {"include_planted", "true", "verify the planted language-A trigrams as well"},
};

const KeyGroup kPlanKeys = {
    {"plan_steps", "", "comma-separated checkpoint steps; empty: the recorded schedule"},
    {"target", "", "fixed target neuron; empty: highest final-checkpoint F1"},
    {"eval_sequences", "200", "evaluation sequences per language"},
    {"ablation_every", "10", "context-neuron ablations every k-th checkpoint"},
    {"effects_every", "5", "direct/indirect effects every k-th checkpoint"},
    {"max_ablation_neurons", "32", "context neurons ablated"},
    {"max_trigrams", "16", "tracked trigrams"},
    {"dla_random_neurons", "100", "baseline neurons for the DLA gap"},
    {"dla_tokens", "100", "tokens per language for the DLA gap"},
    {"probe_sweep", "true", "stage toggle"},
    {"ablation_sweep", "true", "stage toggle"},
    {"effects", "true", "stage toggle"},
    {"dla_gap", "true", "stage toggle"},
    {"trigrams", "true", "stage toggle"},
    {"loss_curves", "true", "stage toggle"},
};

const KeyGroup kRunKeys = {
    {"render", "false", "write SVGs next to the tables"},
};

const KeyGroup kReproduceKeys = {
    {"render", "true", "write SVGs next to the tables"},
};

const KeyGroup kRenderKeys = {
    {"results", "", "results directory: render every standard table"},
    {"input", "", "CSV table"},
    {"x", "step", "x column"},
    {"series", "", "comma-separated y columns"},
    {"bands", "", "comma-separated lower:upper column pairs"},
    {"title", "", ""},
    {"x_label", "", ""},
    {"y_label", "", ""},
    {"log_x", "false", "logarithmic x axis (x <= 0 skipped)"},
};

struct Options {
  std::uint64_t seed = 0;
  fs::path out;
  KeyValueConfig cfg;

  std::string str(const std::string& k) const { return cfg.get(k, ""); }
  int i(const std::string& k) const { return cfg.get_int(k, 0); }
  double d(const std::string& k) const { return cfg.get_double(k, 0.0); }
  bool b(const std::string& k) const { return cfg.get_bool(k, false); }
  std::string required(const std::string& k) const {
    const auto v = str(k);
    if (v.empty()) throw ConfigError("key '" + k + "' is required");
    return v;
  }
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<int> int_list(const Options& o, const std::string& key) {
  std::vector<int> out;
  for (const auto& s : split(o.str(key), ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + s + "' is not an integer");
    }
  }
  return out;
}

NeuronId parse_neuron(const std::string& s) {
  static const std::regex re(R"(L(\d+)N(\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("neuron '" + s + "' is not of the form L<layer>N<index>");
  return {std::stoi(m[1]), std::stoi(m[2])};
}

ModelConfig model_config(const Options& o) {
  ModelConfig c;
  c.n_layers = o.i("n_layers");
  c.d_model = o.i("d_model");
  c.n_heads = o.i("n_heads");
  c.d_head = o.i("d_head");
  c.d_mlp = o.i("d_mlp");
  c.max_seq_len = o.i("max_seq_len");
  c.parallel_blocks = o.b("parallel_blocks");
  c.validate();
  return c;
}

TrainConfig train_config(const Options& o) {
  TrainConfig c;
  c.steps = o.i("steps");
  c.batch_size = o.i("batch_size");
  c.base_lr = o.d("lr");
  c.warmup_steps = o.i("warmup_steps");
  const auto decay = o.str("decay");
  if (decay == "cosine") {
    c.decay = TrainConfig::Decay::cosine;
  } else if (decay == "none") {
    c.decay = TrainConfig::Decay::none;
  } else {
    throw ConfigError("key 'decay': expected cosine or none, got '" + decay + "'");
  }
  c.final_lr_fraction = o.d("final_lr_fraction");
  c.adam_beta1 = o.d("adam_beta1");
  c.adam_beta2 = o.d("adam_beta2");
  c.checkpoint_schedule = int_list(o, "checkpoint_steps");
  c.seed = o.seed;
  c.validate();
  return c;
}

std::optional<CorpusSpec> corpus_spec(const Options& o) {
  const auto path = o.str("corpus_spec");
  if (path.empty()) return std::nullopt;
  CorpusSpec spec;
  try {
    spec = nlohmann::json::parse(read_text(path)).get<CorpusSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("corpus spec " + path + ": " + e.what());
  }
  spec.validate();
  return spec;
}

void apply_filter(const Options& o, FilterConfig& f) {
  f.max_clean_loss = o.d("max_clean_loss");
  f.min_total_delta = o.d("min_total_delta");
  f.require_indirect_dominant = o.b("require_indirect_dominant");
}

ExperimentPlan plan_from(const Options& o) {
  ExperimentPlan p;
  p.corpus = corpus_spec(o);
  p.steps = int_list(o, "plan_steps");
  if (!o.str("target").empty()) p.target = parse_neuron(o.str("target"));
  p.seed = o.seed;
  p.toggles = {o.b("probe_sweep"), o.b("ablation_sweep"), o.b("effects"),
               o.b("dla_gap"),     o.b("trigrams"),       o.b("loss_curves")};
  p.probe_sequences = o.i("probe_sequences");
  p.eval_sequences = o.i("eval_sequences");
  p.probing.n_per_class = o.i("probe_per_class");
  p.probing.train_fraction = o.d("probe_train_fraction");
  p.probing.f1_floor = o.d("f1_floor");
  p.ablation_every = o.i("ablation_every");
  p.effects_every = o.i("effects_every");
  p.max_ablation_neurons = o.i("max_ablation_neurons");
  apply_filter(o, p.filter);
  p.scan_top_m = o.i("scan_top_m");
  p.max_trigrams = o.i("max_trigrams");
  p.n_prompts = o.i("n_prompts");
  p.prefix_len = o.i("prefix_len");
  p.pool_size = o.i("pool_size");
  p.dla_tokens = o.i("dla_tokens");
  p.dla_random_neurons = o.i("dla_random_neurons");
  p.render = o.b("render");
  p.validate();
  return p;
}

void print_signature(const ExperimentResult& r) {
  if (r.target) std::printf("target %s (%s)\n", r.target->name().c_str(), r.target_rule.c_str());
  if (!r.signature) return;
  for (const auto& c : r.signature->checks) {
    std::printf("%s %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
  }
}

// Loaded checkpoint with the corpus it was trained on.
struct Loaded {
  Checkpoint ckpt;
  CorpusSpec spec;
  NeuronId neuron;
  Corpus eval;
};

Loaded load_for_neuron(const Options& o) {
  Loaded l;
  l.ckpt = load_checkpoint(o.required("checkpoint"));
  const auto spec = corpus_spec(o);
  l.spec = spec ? *spec : recorded_corpus(l.ckpt);
  l.neuron = parse_neuron(o.required("neuron"));
  const auto& mc = l.ckpt.model_config;
  if (l.neuron.layer >= mc.n_layers || l.neuron.index >= mc.d_mlp) {
    throw ConfigError("neuron " + l.neuron.name() + " is outside the model");
  }
  l.eval = eval_corpus(l.spec, o.i("eval_sequences"), mc.max_seq_len, o.seed);
  return l;
}

void emit(const Options& o, const std::string& text) {
  if (o.out.empty()) {
    std::cout << text;
  } else {
    if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
    write_text(o.out, text);
  }
}

int cmd_gen_corpus(const Options& o) {
  const auto spec = corpus_spec(o).value_or(CorpusSpec::default_spec());
  const Corpus c = generate(spec, o.i("n_per_language"), o.i("seq_len"), o.seed);
  const fs::path out = o.out.empty() ? fs::path("corpus.txt") : o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_corpus(c, out);
  std::printf("wrote %zu sequences to %s\n", c.sequences.size(), out.string().c_str());
  return 0;
}

int cmd_train(const Options& o) {
  const auto mc = model_config(o);
  const auto tc = train_config(o);
  const auto spec = corpus_spec(o).value_or(CorpusSpec::default_spec());
  const fs::path out = o.out.empty() ? fs::path("checkpoints") : o.out;
  const auto r = train(mc, tc, spec, out, [&](int step, double lr, double loss) {
    if (step % 250 == 0 || step == tc.steps) std::printf("step %d lr %.6g loss %.4f\n", step, lr, loss);
  });
  std::printf("wrote %zu checkpoints to %s; loss %.4f -> %.4f\n", r.checkpoints.size(), out.string().c_str(),
              r.initial_loss, r.final_loss);
  return 0;
}

int cmd_probe_sweep(const Options& o) {
  const auto files = list_checkpoints(o.str("checkpoints"));
  if (files.empty()) throw PlanError("no checkpoints in " + o.str("checkpoints"));
  const Checkpoint first = load_checkpoint(files.front().path);
  const auto spec = corpus_spec(o).value_or(recorded_corpus(first));
  const Corpus corpus = probe_corpus(spec, o.i("probe_sequences"), first.model_config.max_seq_len, o.seed);
  SweepConfig sc;
  sc.n_per_class = o.i("probe_per_class");
  sc.train_fraction = o.d("probe_train_fraction");
  sc.f1_floor = o.d("f1_floor");
  sc.seed = stream_seed(o.seed, SeedStream::probe_split);
  const auto r = sweep(files, corpus, sc);
  const fs::path out = o.out.empty() ? fs::path("probe_results.csv") : o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_probe_csv(r.results, out);
  std::printf("wrote %zu probes over %zu checkpoints to %s; %zu context neurons\n", r.results.size(), r.steps.size(),
              out.string().c_str(), r.qualifying.size());
  return 0;
}

int cmd_effects(const Options& o, bool split) {
  const auto l = load_for_neuron(o);
  const Transformer model = l.ckpt.model();
  const auto abl = AblationSpec::from_corpus(model, l.eval, l.neuron, parse_language(o.str("reference")), "eval",
                                             l.ckpt.step);
  auto rep = measure_effects(model, l.eval.tokens_of(Language::A), abl, split, split);
  auto j = rep.to_json();
  emit(o, j.dump(2) + "\n");
  return 0;
}

int cmd_dla(const Options& o) {
  const auto l = load_for_neuron(o);
  const Transformer model = l.ckpt.model();
  const bool fold = o.b("fold_final_norm");
  const Tensor logits = dla(model, l.neuron, fold);
  const int k = o.i("dla_tokens");
  const auto a = top_k_exclusive_tokens(l.eval, Language::A, k).tokens;
  const auto b = top_k_exclusive_tokens(l.eval, Language::B, k).tokens;
  const double gap = dla_language_gap(model, l.neuron, a, b, fold);
  Table t;
  t.header = {"token", "logit"};
  for (std::size_t i = 0; i < logits.data().size(); ++i) t.add_row({std::to_string(i), format_number(logits.data()[i])});
  const fs::path out = o.out.empty() ? fs::path("dla.csv") : o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_csv(t, out);
  std::printf("%s language gap %.6g (A %zu tokens, B %zu tokens); wrote %s\n", l.neuron.name().c_str(), gap, a.size(),
              b.size(), out.string().c_str());
  return 0;
}

int cmd_find_ngrams(const Options& o) {
  const auto l = load_for_neuron(o);
  const Transformer model = l.ckpt.model();
  const auto abl = AblationSpec::from_corpus(model, l.eval, l.neuron, Language::B, "eval", l.ckpt.step);
  FilterConfig f;
  apply_filter(o, f);
  const auto kept = filter(scan(model, l.eval.tokens_of(Language::A), abl, o.i("scan_top_m")), f);
  std::vector<Trigram> tris;
  if (o.b("include_planted")) tris = l.spec.a.planted_trigrams;
  for (const auto& c : kept) {
    if (std::find(tris.begin(), tris.end(), c.tokens) == tris.end()) tris.push_back(c.tokens);
  }
  const auto pool = prompt_pool(l.eval, o.i("pool_size"));
  const auto prompt_seed = stream_seed(o.seed, SeedStream::prompts);
  std::vector<std::vector<std::vector<int>>> prompts;
  for (std::size_t i = 0; i < tris.size(); ++i) {
    prompts.push_back(make_prompts(tris[i], pool, l.spec.vocab_size, o.i("n_prompts"), o.i("prefix_len"),
                                   derive_seed(prompt_seed, i)));
  }
  const auto records = verify_many(model, abl, tris, prompts, f);
  const fs::path out = o.out.empty() ? fs::path("trigrams.jsonl") : o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_trigram_jsonl(records, out);
  const auto verified = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.verdict; });
  std::printf("%zu candidates passed the scan filter; %zu of %zu trigrams verified; wrote %s\n", kept.size(),
              static_cast<std::size_t>(verified), records.size(), out.string().c_str());
  return 0;
}

int cmd_run(const Options& o) {
  auto plan = plan_from(o);
  plan.checkpoint_dir = o.str("checkpoints");
  const fs::path out = o.out.empty() ? fs::path("results") : o.out;
  const auto r = run(plan, out);
  std::printf("wrote %zu files to %s\n", r.files.size(), out.string().c_str());
  print_signature(r);
  return 0;
}

int cmd_render(const Options& o) {
  if (!o.str("results").empty()) {
    for (const auto& p : render_results(o.str("results"))) std::printf("wrote %s\n", p.string().c_str());
    return 0;
  }
  ChartSpec spec;
  spec.input = o.required("input");
  spec.x = o.str("x");
  spec.series = split(o.required("series"), ',');
  for (const auto& pair : split(o.str("bands"), ',')) {
    const auto parts = split(pair, ':');
    if (parts.size() != 2) throw ConfigError("key 'bands': '" + pair + "' is not lower:upper");
    spec.bands.push_back({parts[0], parts[1]});
  }
  spec.title = o.str("title");
  spec.x_label = o.str("x_label");
  spec.y_label = o.str("y_label");
  spec.log_x = o.b("log_x");
  spec.output = o.out.empty() ? fs::path(spec.input).replace_extension(".svg") : o.out;
  render_chart_file(spec);
  std::printf("wrote %s\n", spec.output.string().c_str());
  return 0;
}

int cmd_reproduce(const Options& o) {
  ReproduceConfig rc;
  rc.model = model_config(o);
  rc.train = train_config(o);
  rc.corpus = corpus_spec(o).value_or(CorpusSpec::default_spec());
  rc.plan = plan_from(o);
  const fs::path out = o.out.empty() ? fs::path("reproduce") : o.out;
  const auto r = reproduce(rc, out);
  std::printf("wrote checkpoints to %s and %zu result files to %s\n", (out / "checkpoints").string().c_str(),
              r.files.size(), (out / "results").string().c_str());
  print_signature(r);
  return 0;
}

struct Command {
  std::string name;
  std::string description;
  std::vector<const KeyGroup*> groups;
  std::function<int(const Options&)> handler;
  std::string out_help;
};

std::vector<Command> commands() {
  return {
      {"gen-corpus", "Generate a two-language synthetic corpus", {&kCorpusKeys, &kGenKeys}, cmd_gen_corpus,
       "corpus file (default corpus.txt)"},
      {"train", "Train a model and write the checkpoint series", {&kModelKeys, &kTrainKeys, &kCorpusKeys}, cmd_train,
       "checkpoint directory (default checkpoints)"},
      {"probe-sweep", "Fit a 1-D probe to every neuron of every checkpoint",
       {&kCheckpointsKeys, &kCorpusKeys, &kProbeKeys}, cmd_probe_sweep, "CSV path (default probe_results.csv)"},
      {"ablate", "Total effect of mean-ablating one neuron on language-A loss",
       {&kNeuronKeys, &kCorpusKeys, &kAblateKeys}, [](const Options& o) { return cmd_effects(o, false); },
       "JSON path (default stdout)"},
      {"effects", "Total, direct and indirect ablation effects of one neuron",
       {&kNeuronKeys, &kCorpusKeys, &kAblateKeys}, [](const Options& o) { return cmd_effects(o, true); },
       "JSON path (default stdout)"},
      {"dla", "Direct logit attribution of one neuron", {&kNeuronKeys, &kCorpusKeys, &kDlaKeys}, cmd_dla,
       "CSV path (default dla.csv)"},
      {"find-ngrams", "Scan, filter and verify trigrams that depend on a neuron",
       {&kNeuronKeys, &kCorpusKeys, &kFilterKeys, &kFindKeys}, cmd_find_ngrams,
       "JSON-lines path (default trigrams.jsonl)"},
      {"run-experiments", "Run the longitudinal analyses over a checkpoint series",
       {&kCheckpointsKeys, &kCorpusKeys, &kProbeKeys, &kFilterKeys, &kPlanKeys, &kRunKeys}, cmd_run,
       "results directory (default results)"},
      {"render", "Render a CSV table (or a results directory) to SVG line charts", {&kRenderKeys}, cmd_render,
       "SVG path (default: the input with .svg)"},
      {"reproduce", "Train with the default configuration and run every analysis",
       {&kModelKeys, &kTrainKeys, &kCorpusKeys, &kProbeKeys, &kFilterKeys, &kPlanKeys, &kReproduceKeys},
       cmd_reproduce, "output directory (default reproduce)"},
  };
}

// Keys of a command in declaration order, first declaration winning.
std::vector<Key> keys_of(const Command& c) {
  std::vector<Key> out;
  for (const auto* g : c.groups) {
    for (const auto& k : *g) {
      if (std::none_of(out.begin(), out.end(), [&](const Key& e) { return std::string(e.name) == k.name; })) {
        out.push_back(k);
      }
    }
  }
  return out;
}

std::string suggestion(const std::string& word, const std::vector<std::string>& candidates) {
  const auto m = closest_match(word, candidates);
  return m ? "; did you mean '" + *m + "'?" : "";
}

int usage_error(const std::string& msg) {
  std::fprintf(stderr, "error: %s\nRun 'circuitscope --help' for usage.\n", msg.c_str());
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  const auto cmds = commands();
  std::vector<std::string> names;
  for (const auto& c : cmds) names.push_back(c.name);

  CLI::App app{"circuitscope: train small transformers and trace context neurons over training", "circuitscope"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");
  app.footer("Every subcommand accepts --seed, --config and --out. Config files hold flat 'key = value' lines; the\n"
             "keys of each subcommand are listed in its --help and may also be given as --<key> <value>.\n"
             "Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.\n"
             "CIRCUITSCOPE_THREADS caps worker threads.");

  if (argc > 1 && argv[1][0] != '-' &&
      std::find(names.begin(), names.end(), std::string(argv[1])) == names.end()) {
    return usage_error("unknown subcommand '" + std::string(argv[1]) + "'" + suggestion(argv[1], names));
  }

  struct Parsed {
    std::uint64_t seed = 0;
    std::string config, out;
    std::map<std::string, std::string> values;
  };
  std::vector<Parsed> parsed(cmds.size());
  std::vector<std::vector<std::string>> flag_names(cmds.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    const auto& c = cmds[i];
    auto* sub = app.add_subcommand(c.name, c.description);
    auto& p = parsed[i];
    sub->add_option("--seed", p.seed, "master seed; every derived seed follows from it")->default_val(0);
    sub->add_option("--config", p.config, "flat key = value config file");
    sub->add_option("--out", p.out, c.out_help);
    flag_names[i] = {"--seed", "--config", "--out", "--help"};
    for (const auto& k : keys_of(c)) {
      std::string help = k.help;
      help += std::string(help.empty() ? "" : " ") + "(default: " + (*k.fallback ? k.fallback : "none") + ")";
      auto* opt = sub->add_option_function<std::string>(
          std::string("--") + k.name, [&p, name = std::string(k.name)](const std::string& v) { p.values[name] = v; },
          help);
      opt->type_name("VALUE");
      flag_names[i].push_back(std::string("--") + k.name);
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string hint;
    std::size_t which = cmds.size();
    for (std::size_t i = 0; i < cmds.size(); ++i) {
      if (argc > 1 && cmds[i].name == argv[1]) which = i;
    }
    if (which < cmds.size()) {
      for (int a = 2; a < argc && hint.empty(); ++a) {
        std::string arg = argv[a];
        if (arg.rfind("--", 0) != 0) continue;
        arg = arg.substr(0, arg.find('='));
        const auto& known = flag_names[which];
        if (std::find(known.begin(), known.end(), arg) == known.end()) {
          hint = "unknown flag '" + arg + "' for " + cmds[which].name + suggestion(arg, known);
        }
      }
    }
    return usage_error(hint.empty() ? std::string(e.what()) : hint);
  }

  std::size_t which = 0;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) which = i;
  }
  const auto& cmd = cmds[which];
  const auto& p = parsed[which];

  try {
    Options o;
    o.seed = p.seed;
    o.out = p.out;
    std::vector<std::string> known;
    for (const auto& k : keys_of(cmd)) {
      known.push_back(k.name);
      if (*k.fallback) o.cfg.set(k.name, k.fallback);
    }
    if (!p.config.empty()) {
      const auto file = KeyValueConfig::load(p.config);
      file.require_known(known);
      for (const auto& [k, v] : file.values()) o.cfg.set(k, v);
    }
    for (const auto& [k, v] : p.values) o.cfg.set(k, v);
    return cmd.handler(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
