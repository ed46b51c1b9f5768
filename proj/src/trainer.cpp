#include "circuitscope/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>

#include "circuitscope/checkpoint.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/rng.hpp"
#include "forward_engine.hpp"

namespace circuitscope {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;   // "init"
constexpr std::uint64_t kBatchStream = 0x62617463;  // "batc"

}  // namespace

// -- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train.base_lr must be positive");
  if (warmup_steps < 1) throw ConfigError("train.warmup_steps must be >= 1");
  if (warmup_steps > steps) throw ConfigError("train.warmup_steps must not exceed train.steps");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("train.final_lr_fraction must be in (0, 1]");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  for (std::size_t i = 0; i < checkpoint_schedule.size(); ++i) {
    const int s = checkpoint_schedule[i];
    if (s < 0 || s > steps) {
      throw ConfigError("checkpoint step " + std::to_string(s) + " outside [0, " + std::to_string(steps) + "]");
    }
    if (i > 0 && s <= checkpoint_schedule[i - 1]) throw ConfigError("checkpoint schedule must be strictly increasing");
  }
}

std::vector<int> TrainConfig::default_schedule(int steps) {
  std::vector<int> out{0};
  for (int s = 1; s <= 512 && s <= steps; s *= 2) out.push_back(s);
  for (int s = 750; s <= steps; s += 250) out.push_back(s);
  if (out.back() != steps) out.push_back(steps);
  return out;
}

std::vector<int> TrainConfig::schedule() const {
  return checkpoint_schedule.empty() ? default_schedule(steps) : checkpoint_schedule;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"base_lr", c.base_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"decay", c.decay == TrainConfig::Decay::cosine ? "cosine" : "none"},
                     {"final_lr_fraction", c.final_lr_fraction},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"seed", c.seed},
                     {"checkpoint_schedule", c.schedule()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("warmup_steps").get_to(c.warmup_steps);
  const auto decay = j.at("decay").get<std::string>();
  if (decay == "cosine") {
    c.decay = TrainConfig::Decay::cosine;
  } else if (decay == "none") {
    c.decay = TrainConfig::Decay::none;
  } else {
    throw ConfigError("unknown decay '" + decay + "'");
  }
  j.at("final_lr_fraction").get_to(c.final_lr_fraction);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("seed").get_to(c.seed);
  j.at("checkpoint_schedule").get_to(c.checkpoint_schedule);
}

double lr_at_step(const TrainConfig& c, int step) {
  if (step < 0 || step > c.steps) {
    throw InputError("step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) + "]");
  }
  if (step < c.warmup_steps) return c.base_lr * (step + 1) / c.warmup_steps;
  if (c.decay == TrainConfig::Decay::none) return c.base_lr;
  const int start = c.warmup_steps - 1;
  const int span = c.steps - start;
  const double p = span > 0 ? static_cast<double>(step - start) / span : 1.0;
  const double f = c.final_lr_fraction;
  return f * c.base_lr + (1.0 - f) * c.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

// -- init -------------------------------------------------------------------

Weights init_weights(const ModelConfig& config, std::uint64_t seed) {
  Weights w = Weights::zeros(config);
  Rng rng(derive_seed(seed, kInitStream));
  const double resid_std = 0.02 / std::sqrt(2.0 * config.n_layers);
  w.visit([&](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with("ln1.w") || name.ends_with("ln2.w") || name == "ln_final.w";
    const bool bias = name.ends_with("ln1.b") || name.ends_with("ln2.b") || name == "ln_final.b" ||
                      name.find(".b_") != std::string::npos;
    if (gain) {
      t.fill(1.0f);
    } else if (!bias) {
      const bool resid = name.ends_with("attn.w_o") || name.ends_with("mlp.w_out");
      const double sd = resid ? resid_std : 0.02;
      for (float& x : t.data()) x = static_cast<float>(sd * rng.normal());
    }
  });
  return w;
}

// -- backward ---------------------------------------------------------------

namespace {

struct Scratch {
  detail::ForwardState fwd;
  std::vector<float> dlogits, dlnf, dresid, dx, dmlp_in, dact, dln, dz, dq, dk, dv, dp;
};

// y = xhat * g + b with xhat = (x - mean) * rstd; accumulates dg, db and
// writes (or adds, when accumulate) dx.
void layer_norm_backward(const float* x, const float* mean, const float* rstd, const float* g, const float* dy,
                         std::size_t rows, std::size_t d, float* dg, float* db, float* dx, bool accumulate) {
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    const float* dyr = dy + r * d;
    float* dxr = dx + r * d;
    const double mu = mean[r];
    const double rs = rstd[r];
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * rs;
      dg[j] += static_cast<float>(dyr[j] * xh);
      db[j] += dyr[j];
      dxhat[j] = static_cast<double>(dyr[j]) * g[j];
      s1 += dxhat[j];
      s2 += dxhat[j] * xh;
    }
    s1 /= static_cast<double>(d);
    s2 /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * rs;
      const auto v = static_cast<float>(rs * (dxhat[j] - s1 - xh * s2));
      dxr[j] = accumulate ? dxr[j] + v : v;
    }
  }
}

// dW += x^T dy, db += colsum(dy), dx (=|+=) dy W^T
void linear_backward(const float* x, const float* dy, std::size_t rows, std::size_t k, std::size_t n, const Tensor& w,
                     Tensor& dw, Tensor& db, float* dx, bool accumulate_dx) {
  kernels::gemm(true, false, k, n, rows, x, k, dy, n, dw.ptr(), n, true);
  kernels::accumulate_column_sums(dy, rows, n, db.ptr());
  if (dx) kernels::gemm(false, true, rows, k, n, dy, n, w.ptr(), n, dx, k, accumulate_dx);
}

void resize(std::vector<float>& v, std::size_t n) {
  if (v.size() != n) v.assign(n, 0.0f);
}

bool same_layout(const Weights& a, const Weights& b) {
  if (a.layers.size() != b.layers.size()) return false;
  std::vector<Shape> sa;
  a.visit([&](const std::string&, const Tensor& t) { sa.push_back(t.shape()); });
  std::size_t i = 0;
  bool same = true;
  b.visit([&](const std::string&, const Tensor& t) { same = same && i < sa.size() && sa[i++] == t.shape(); });
  return same && i == sa.size();
}

void check_batch(const ModelConfig& c, const std::vector<std::vector<int>>& batch) {
  if (batch.empty()) throw InputError("training batch is empty");
  const std::size_t len = batch.front().size();
  if (len < 2) throw InputError("training sequences need at least 2 tokens");
  for (const auto& s : batch) {
    if (s.size() != len) throw InputError("training sequences must share one length");
    validate_tokens(c, s);
  }
}

double loss_from_logits(const detail::ForwardState& st, const std::vector<std::vector<int>>& batch,
                        std::size_t vocab, float* dlogits) {
  const std::size_t count = st.batch * (st.seq - 1);
  double total = 0.0;
  for (std::size_t b = 0; b < st.batch; ++b) {
    for (std::size_t t = 0; t < st.seq; ++t) {
      const std::size_t r = b * st.seq + t;
      const float* row = st.logits.data() + r * vocab;
      if (t + 1 == st.seq) {
        if (dlogits) std::fill_n(dlogits + r * vocab, vocab, 0.0f);
        continue;
      }
      const int target = batch[b][t + 1];
      total += kernels::row_cross_entropy(row, vocab, target);
      if (dlogits) {
        float mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        float* g = dlogits + r * vocab;
        const double inv = 1.0 / (z * static_cast<double>(count));
        for (std::size_t j = 0; j < vocab; ++j) g[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) * inv);
        g[target] -= static_cast<float>(1.0 / static_cast<double>(count));
      }
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace

double batch_loss(const Transformer& model, const std::vector<std::vector<int>>& batch) {
  check_batch(model.config(), batch);
  thread_local Scratch s;
  detail::run_forward(model, batch, s.fwd, nullptr);
  return loss_from_logits(s.fwd, batch, static_cast<std::size_t>(model.config().vocab_size), nullptr);
}

double compute_gradients(const Transformer& model, const std::vector<std::vector<int>>& batch, Weights& grads) {
  const ModelConfig& c = model.config();
  check_batch(c, batch);
  const Weights& w = model.weights();
  if (!same_layout(grads, w)) grads = Weights::zeros(c);
  grads.visit([](const std::string&, Tensor& t) { t.fill(0.0f); });

  thread_local Scratch s;
  auto& st = s.fwd;
  detail::run_forward(model, batch, st, nullptr);
  const std::size_t n = st.rows();
  const std::size_t seq = st.seq;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto layers = static_cast<std::size_t>(c.n_layers);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  resize(s.dlogits, n * vocab);
  const double loss = loss_from_logits(st, batch, vocab, s.dlogits.data());
  if (!std::isfinite(loss)) return loss;

  // unembed and final norm
  resize(s.dlnf, n * d);
  linear_backward(st.lnf_out.data(), s.dlogits.data(), n, d, vocab, w.w_u, grads.w_u, grads.b_u, s.dlnf.data(), false);
  resize(s.dresid, n * d);
  layer_norm_backward(st.resid[layers].data(), st.lnf_mean.data(), st.lnf_rstd.data(), w.lnf_w.ptr(), s.dlnf.data(),
                      n, d, grads.lnf_w.ptr(), grads.lnf_b.ptr(), s.dresid.data(), false);

  resize(s.dx, n * d);
  resize(s.dmlp_in, n * d);
  resize(s.dact, n * m);
  resize(s.dln, n * d);
  resize(s.dz, n * d);
  resize(s.dq, n * d);
  resize(s.dk, n * d);
  resize(s.dv, n * d);
  resize(s.dp, seq * seq);

  for (std::size_t li = layers; li-- > 0;) {
    const LayerWeights& lw = w.layers[li];
    LayerWeights& gw = grads.layers[li];
    const detail::LayerState& ls = st.layers[li];
    const float* x = st.resid[li].data();
    const float* dy = s.dresid.data();  // gradient w.r.t. resid_post
    // Residual path.
    std::copy(dy, dy + n * d, s.dx.begin());

    // MLP: dy flows into mlp_out.
    linear_backward(ls.mlp_act.data(), dy, n, m, d, lw.w_out, gw.w_out, gw.b_out, s.dact.data(), false);
    kernels::gelu_backward(ls.mlp_pre.data(), n * m, s.dact.data());
    linear_backward(ls.ln2_out.data(), s.dact.data(), n, d, m, lw.w_in, gw.w_in, gw.b_in, s.dln.data(), false);
    const float* mlp_in = c.parallel_blocks ? x : ls.mid.data();
    layer_norm_backward(mlp_in, ls.ln2_mean.data(), ls.ln2_rstd.data(), lw.ln2_w.ptr(), s.dln.data(), n, d,
                        gw.ln2_w.ptr(), gw.ln2_b.ptr(), s.dmlp_in.data(), false);
    for (std::size_t i = 0; i < n * d; ++i) s.dx[i] += s.dmlp_in[i];

    // Attention output receives dy, plus the MLP-input gradient in sequential blocks.
    const float* dattn = dy;
    if (!c.parallel_blocks) {
      for (std::size_t i = 0; i < n * d; ++i) s.dmlp_in[i] += dy[i];
      dattn = s.dmlp_in.data();
    }
    linear_backward(ls.z.data(), dattn, n, d, d, lw.w_o, gw.w_o, gw.b_o, s.dz.data(), false);

    for (std::size_t b = 0; b < st.batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * d + h * dh;
        const float* q = ls.q.data() + off;
        const float* k = ls.k.data() + off;
        const float* v = ls.v.data() + off;
        const float* p = ls.probs.data() + (b * heads + h) * seq * seq;
        const float* dzh = s.dz.data() + off;
        float* dp = s.dp.data();
        // dP = dZ V^T, dV = P^T dZ
        kernels::gemm(false, true, seq, seq, dh, dzh, d, v, d, dp, seq, false);
        kernels::gemm(true, false, seq, dh, seq, p, seq, dzh, d, s.dv.data() + off, d, false);
        for (std::size_t i = 0; i < seq; ++i) {
          float* dr = dp + i * seq;
          const float* pr = p + i * seq;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot += static_cast<double>(pr[j]) * dr[j];
          for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - static_cast<float>(dot)) * scale;
          for (std::size_t j = i + 1; j < seq; ++j) dr[j] = 0.0f;
        }
        // dQ = dS K, dK = dS^T Q
        kernels::gemm(false, false, seq, dh, seq, dp, seq, k, d, s.dq.data() + off, d, false);
        kernels::gemm(true, false, seq, dh, seq, dp, seq, q, d, s.dk.data() + off, d, false);
      }
    }
    linear_backward(ls.ln1_out.data(), s.dq.data(), n, d, d, lw.w_q, gw.w_q, gw.b_q, s.dln.data(), false);
    linear_backward(ls.ln1_out.data(), s.dk.data(), n, d, d, lw.w_k, gw.w_k, gw.b_k, s.dln.data(), true);
    linear_backward(ls.ln1_out.data(), s.dv.data(), n, d, d, lw.w_v, gw.w_v, gw.b_v, s.dln.data(), true);
    layer_norm_backward(x, ls.ln1_mean.data(), ls.ln1_rstd.data(), lw.ln1_w.ptr(), s.dln.data(), n, d,
                        gw.ln1_w.ptr(), gw.ln1_b.ptr(), s.dx.data(), true);
    std::swap(s.dresid, s.dx);
  }

  for (std::size_t b = 0; b < st.batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      const float* g = s.dresid.data() + (b * seq + t) * d;
      float* ge = grads.w_e.ptr() + static_cast<std::size_t>(batch[b][t]) * d;
      float* gp = grads.w_pos.ptr() + t * d;
      for (std::size_t j = 0; j < d; ++j) {
        ge[j] += g[j];
        gp[j] += g[j];
      }
    }
  }
  return loss;
}

// -- Adam -------------------------------------------------------------------

Adam::Adam(const ModelConfig& config, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(Weights::zeros(config)), v_(Weights::zeros(config)) {}

void Adam::step(Weights& params, const Weights& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::vector<Tensor*> ps, ms, vs;
  std::vector<const Tensor*> gs;
  params.visit([&](const std::string&, Tensor& t) { ps.push_back(&t); });
  m_.visit([&](const std::string&, Tensor& t) { ms.push_back(&t); });
  v_.visit([&](const std::string&, Tensor& t) { vs.push_back(&t); });
  grads.visit([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  if (ps.size() != gs.size() || ps.size() != ms.size()) throw DimensionError("Adam: parameter/gradient layout mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i]->shape() != gs[i]->shape() || ps[i]->shape() != ms[i]->shape()) {
      throw DimensionError("Adam: shape mismatch for parameter " + std::to_string(i));
    }
    float* p = ps[i]->ptr();
    float* m = ms[i]->ptr();
    float* v = vs[i]->ptr();
    const float* g = gs[i]->ptr();
    for (std::size_t j = 0, e = ps[i]->numel(); j < e; ++j) {
      const double gj = g[j];
      const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
      const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      p[j] = static_cast<float>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps_));
    }
  }
}

void Adam::restore(Weights m, Weights v, std::int64_t t) {
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

// -- data -------------------------------------------------------------------

std::vector<std::vector<int>> training_batch(const CorpusSpec& corpus, int batch_size, int seq_len, std::uint64_t seed,
                                             int step) {
  if (batch_size < 1 || seq_len < 2) throw InputError("training batch needs batch_size >= 1 and seq_len >= 2");
  thread_local std::optional<CorpusSpec> cached;
  thread_local std::optional<SequenceSampler> sa, sb;
  if (!cached || !(*cached == corpus)) {
    corpus.validate();
    cached = corpus;
    sa.emplace(corpus.a);
    sb.emplace(corpus.b);
  }
  Rng rng(derive_seed(seed, kBatchStream, static_cast<std::uint64_t>(step)));
  const int n_a = (batch_size + 1) / 2;
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) out.push_back((i < n_a ? *sa : *sb).sample(rng, seq_len));
  return out;
}

// -- loop -------------------------------------------------------------------

std::filesystem::path checkpoint_filename(const std::filesystem::path& dir, int step) {
  return dir / ("ckpt_" + std::to_string(step) + ".bin");
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& tc, const CorpusSpec& corpus,
                  const std::filesystem::path& out_dir, const TrainProgress& progress) {
  model_config.validate();
  tc.validate();
  corpus.validate();
  if (corpus.vocab_size != model_config.vocab_size) {
    throw ConfigError("corpus vocab_size " + std::to_string(corpus.vocab_size) + " != model vocab_size " +
                      std::to_string(model_config.vocab_size));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
  metrics << "step,lr,train_loss\n";

  const nlohmann::json run_config = {{"train", tc}, {"corpus", corpus}};
  const auto schedule = tc.schedule();
  const int seq_len = model_config.max_seq_len;

  Transformer model(model_config, init_weights(model_config, tc.seed));
  Adam adam(model_config, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  Weights grads = Weights::zeros(model_config);
  TrainResult result;
  std::size_t next_ckpt = 0;

  for (int step = 0; step <= tc.steps; ++step) {
    const auto batch = training_batch(corpus, tc.batch_size, seq_len, tc.seed, step);
    const double loss = compute_gradients(model, batch, grads);
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss at step " + std::to_string(step));
    const double lr = lr_at_step(tc, step);
    if (step == 0) result.initial_loss = loss;
    result.final_loss = loss;

    if (next_ckpt < schedule.size() && schedule[next_ckpt] == step) {
      Checkpoint ckpt;
      ckpt.step = step;
      ckpt.model_config = model_config;
      ckpt.weights = model.weights();
      ckpt.optimizer = OptimizerState{adam.first_moment(), adam.second_moment(), adam.t()};
      ckpt.train_loss = loss;
      ckpt.run_config = run_config;
      const auto path = checkpoint_filename(out_dir, step);
      save_checkpoint(ckpt, path);
      result.checkpoints.push_back(path);
      ++next_ckpt;
    }

    std::ostringstream row;
    row << step << ',' << std::setprecision(9) << lr << ',' << std::setprecision(9) << loss << '\n';
    metrics << row.str();
    if (!metrics) throw IoError("failed writing metrics.csv");
    if (progress) progress(step, lr, loss);

    if (step < tc.steps) adam.step(model.mutable_weights(), grads, lr);
  }
  return result;
}

}  // namespace circuitscope
