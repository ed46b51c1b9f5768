#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "circuitscope/checkpoint.hpp"
#include "circuitscope/experiment.hpp"
#include "circuitscope/stats.hpp"
#include "circuitscope/table.hpp"

using namespace circuitscope;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("circuitscope_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = temp_dir("ckpts");
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_head = 8;
    mc.d_mlp = 32;
    mc.max_seq_len = 12;
    TrainConfig tc;
    tc.steps = 16;
    tc.batch_size = 8;
    tc.warmup_steps = 4;
    tc.base_lr = 3e-3;
    tc.checkpoint_schedule = {0, 4, 8, 12, 16};
    train(mc, tc, CorpusSpec::default_spec(), dir_);
  }

  static ExperimentPlan small_plan() {
    ExperimentPlan p;
    p.checkpoint_dir = dir_;
    p.seed = 5;
    p.probe_sequences = 40;
    p.eval_sequences = 20;
    p.probing.n_per_class = 200;
    p.probing.f1_floor = 0.0;
    p.ablation_every = 2;
    p.effects_every = 2;
    p.max_ablation_neurons = 4;
    p.scan_top_m = 5;
    p.max_trigrams = 10;
    p.n_prompts = 8;
    p.prefix_len = 4;
    p.pool_size = 20;
    p.dla_tokens = 20;
    p.dla_random_neurons = 10;
    return p;
  }

  static fs::path dir_;
};

fs::path ExperimentTest::dir_;

std::vector<std::vector<std::string>> probes_of(const fs::path& out) {
  return read_csv(out / "fig2_probing/probe_results.csv").rows;
}

}  // namespace

TEST_F(ExperimentTest, EmptyPlanWritesManifestOnly) {
  auto plan = small_plan();
  plan.toggles = {false, false, false, false, false, false};
  const auto out = temp_dir("empty");
  const auto r = run(plan, out);
  ASSERT_EQ(r.files.size(), 1u);
  EXPECT_EQ(r.files[0], "manifest.json");
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(out)) ++entries;
  EXPECT_EQ(entries, 1u);
  const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m.at("checkpoints").size(), 5u);
  EXPECT_TRUE(m.at("files").empty());
  EXPECT_TRUE(m.at("target").is_null());
  EXPECT_EQ(r.steps, (std::vector<int>{0, 4, 8, 12, 16}));
}

TEST_F(ExperimentTest, MissingCheckpointsAreListed) {
  auto plan = small_plan();
  plan.steps = {0, 4, 5, 7};
  try {
    run(plan, temp_dir("missing"));
    FAIL();
  } catch (const PlanError& e) {
    EXPECT_NE(std::string(e.what()).find("steps: 5, 7"), std::string::npos) << e.what();
  }
  plan.checkpoint_dir = temp_dir("nothing_here");
  EXPECT_THROW(run(plan, temp_dir("missing2")), PlanError);
}

TEST_F(ExperimentTest, FullRunLayoutAndDeterminism) {
  auto plan = small_plan();
  plan.render = true;
  const auto a = temp_dir("full_a"), b = temp_dir("full_b");
  const auto ra = run(plan, a);
  const auto rb = run(plan, b);
  ASSERT_TRUE(ra.target.has_value());
  EXPECT_EQ(*ra.target, *rb.target);
  ASSERT_EQ(ra.files, rb.files);
  for (const auto& f : ra.files) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  for (const char* d : {"fig1_signature", "fig2_probing", "fig3_ablation", "fig4_effects", "fig5_trigrams", "fig6_dla",
                        "fig7_losses"}) {
    EXPECT_TRUE(fs::is_directory(a / d)) << d;
  }
  EXPECT_EQ(read_csv(a / "fig2_probing/probe_results.csv").rows.size(), 5u * 2u * 32u);
  EXPECT_EQ(read_csv(a / "fig2_probing/f1_bands.csv").rows.size(), 5u);
  EXPECT_EQ(read_csv(a / "fig7_losses/losses.csv").rows.size(), 5u);
  EXPECT_EQ(read_csv(a / "fig1_signature/signature.csv").rows.size(), 5u);
  // Every second checkpoint: 0, 8, 16.
  const auto wide = read_csv(a / "fig3_ablation/ablation_wide.csv");
  ASSERT_EQ(wide.rows.size(), 3u);
  EXPECT_EQ(wide.rows[1][0], "8");
  EXPECT_EQ(wide.header.size(), 5u);
  EXPECT_EQ(read_csv(a / "fig4_effects/effects.csv").rows.size(), 3u);
  EXPECT_TRUE(fs::exists(a / "fig1_signature/signature.json"));
  EXPECT_TRUE(fs::exists(a / "fig2_probing/f1_bands.svg"));

  const auto m = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(m.at("files").size() + 1, ra.files.size());
  for (const auto& f : m.at("files")) {
    EXPECT_EQ(f.at("sha256").get<std::string>(), sha256_file(a / f.at("path").get<std::string>()));
  }
  EXPECT_EQ(m.at("checkpoints")[4].at("sha256").get<std::string>(), sha256_file(dir_ / "ckpt_16.bin"));
  EXPECT_EQ(m.at("target").at("neuron").get<std::string>(), ra.target->name());
}

TEST_F(ExperimentTest, TablesAreInternallyConsistent) {
  auto plan = small_plan();
  const auto out = temp_dir("consistency");
  run(plan, out);

  const auto eff = read_csv(out / "fig4_effects/effects.csv");
  for (const auto& row : eff.rows) {
    const double clean = std::stod(row[eff.column("clean_loss")]);
    const double ablated = std::stod(row[eff.column("ablated_loss")]);
    EXPECT_NEAR(std::stod(row[eff.column("total")]), ablated - clean, 1e-9);
    EXPECT_FALSE(row[eff.column("direct")].empty());
    EXPECT_FALSE(row[eff.column("indirect")].empty());
  }

  // Trigram bands are the percentiles of the per-trigram rows of each step.
  const auto losses = read_csv(out / "fig5_trigrams/trigram_losses.csv");
  const auto bands = read_csv(out / "fig5_trigrams/trigram_bands.csv");
  ASSERT_EQ(bands.rows.size(), 5u);
  for (const auto& brow : bands.rows) {
    std::vector<double> indirect;
    for (const auto& row : losses.rows) {
      if (row[0] == brow[0]) indirect.push_back(std::stod(row[losses.column("indirect")]));
    }
    ASSERT_FALSE(indirect.empty());
    EXPECT_NEAR(std::stod(brow[bands.column("indirect_p25")]), percentile(indirect, 25), 1e-12);
    EXPECT_NEAR(std::stod(brow[bands.column("indirect_p75")]), percentile(indirect, 75), 1e-12);
  }
  // The planted trigrams are tracked first.
  const auto spec = CorpusSpec::default_spec();
  EXPECT_EQ(losses.rows[0][losses.column("source")], "planted");
  EXPECT_EQ(losses.rows[0][1], std::to_string(spec.a.planted_trigrams[0][0]));

  // The default target has the highest final F1, first in (layer, index) order.
  double best = -1.0;
  std::string best_layer, best_neuron;
  for (const auto& prow : probes_of(out)) {
    if (prow[0] == "16" && std::stod(prow[3]) > best) {
      best = std::stod(prow[3]);
      best_layer = prow[1];
      best_neuron = prow[2];
    }
  }
  const auto sig0 = read_csv(out / "fig1_signature/signature.csv");
  EXPECT_EQ(sig0.rows[0][1], best_layer);
  EXPECT_EQ(sig0.rows[0][2], best_neuron);

  // Signature F1 column matches the probe sweep.
  const auto sig = read_csv(out / "fig1_signature/signature.csv");
  const auto probes = read_csv(out / "fig2_probing/probe_results.csv");
  const std::string layer = sig.rows[0][1], neuron = sig.rows[0][2];
  for (const auto& srow : sig.rows) {
    for (const auto& prow : probes.rows) {
      if (prow[0] == srow[0] && prow[1] == layer && prow[2] == neuron) EXPECT_EQ(prow[3], srow[3]);
    }
  }
}

TEST_F(ExperimentTest, FixedTargetAndStageErrors) {
  auto plan = small_plan();
  plan.toggles.probe_sweep = false;
  plan.toggles.ablation_sweep = false;
  plan.toggles.trigrams = false;
  plan.target = NeuronId{1, 3};
  const auto out = temp_dir("fixed");
  const auto r = run(plan, out);
  EXPECT_EQ(r.target_rule, "fixed");
  EXPECT_FALSE(r.signature.has_value());
  EXPECT_FALSE(fs::exists(out / "fig2_probing"));
  EXPECT_TRUE(fs::exists(out / "fig4_effects/effects.csv"));

  plan.target = NeuronId{2, 0};
  EXPECT_THROW(run(plan, temp_dir("fixed_bad")), ConfigError);

  // A corrupted checkpoint surfaces as a failure of the stage that read it.
  const auto broken = temp_dir("broken");
  for (const auto& f : list_checkpoints(dir_)) fs::copy_file(f.path, broken / f.path.filename());
  {
    std::fstream f(broken / "ckpt_16.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    f.put('\x7f');
  }
  auto bad = small_plan();
  bad.checkpoint_dir = broken;
  try {
    run(bad, temp_dir("broken_out"));
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "probing");
    EXPECT_NE(std::string(e.what()).find("stage 'probing'"), std::string::npos);
  }
}

TEST(ExperimentPlan, ValidationRejectsBadValues) {
  ExperimentPlan p;
  EXPECT_NO_THROW(p.validate());
  p.effects_every = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.probing.f1_floor = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.probing.train_fraction = 1.0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Sha256, KnownDigest) {
  const auto dir = temp_dir("sha");
  std::ofstream(dir / "abc") << "abc";
  EXPECT_EQ(sha256_file(dir / "abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
