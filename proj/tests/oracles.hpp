#pragma once

// Independent 64-bit reference implementations used only by tests.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "circuitscope/numerics.hpp"

namespace circuitscope::oracle {

inline std::vector<double> matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += double(a.at(i, p)) * double(b.at(p, j));
  return c;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x, double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size());
  std::vector<double> out;
  for (double v : x) out.push_back((v - mean) / std::sqrt(var + eps));
  return out;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Naive softmax: exponentiate without max subtraction, in double.
inline double cross_entropy_row(const float* logits, std::size_t v, int target) {
  double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(double(logits[j]));
  return -std::log(std::exp(double(logits[target])) / z);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> dist(0.0f, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace circuitscope::oracle

#include "circuitscope/model.hpp"

namespace circuitscope::oracle {

// Scalar double-precision transformer written directly from the block
// equations, sharing nothing with the library's forward pass. Returns [T][V].
inline std::vector<std::vector<double>> reference_forward(const Transformer& model, const std::vector<int>& tokens,
                                                          std::vector<std::vector<double>>* final_resid = nullptr) {
  const ModelConfig& c = model.config();
  const Weights& w = model.weights();
  const std::size_t T = tokens.size(), d = c.d_model, H = c.n_heads, dh = c.d_head, M = c.d_mlp, V = c.vocab_size;
  using Mat = std::vector<std::vector<double>>;
  auto ln = [&](const Mat& x, const Tensor& g, const Tensor& b) {
    Mat out(T, std::vector<double>(d));
    for (std::size_t t = 0; t < T; ++t) {
      double mu = 0, var = 0;
      for (double v : x[t]) mu += v;
      mu /= double(d);
      for (double v : x[t]) var += (v - mu) * (v - mu);
      var /= double(d);
      for (std::size_t j = 0; j < d; ++j) out[t][j] = (x[t][j] - mu) / std::sqrt(var + c.ln_eps) * g[j] + b[j];
    }
    return out;
  };
  auto lin = [&](const Mat& x, const Tensor& W, const Tensor& b) {
    const std::size_t in = W.dim(0), outd = W.dim(1);
    Mat y(x.size(), std::vector<double>(outd));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t o = 0; o < outd; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < in; ++i) s += x[t][i] * W.at(i, o);
        y[t][o] = s;
      }
    return y;
  };
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) x[t][j] = double(w.w_e.at(tokens[t], j)) + w.w_pos.at(t, j);
  for (const auto& lw : w.layers) {
    const Mat h1 = ln(x, lw.ln1_w, lw.ln1_b);
    const Mat q = lin(h1, lw.w_q, lw.b_q), k = lin(h1, lw.w_k, lw.b_k), v = lin(h1, lw.w_v, lw.b_v);
    Mat z(T, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
          s[j] = dot / std::sqrt(double(dh));
          mx = std::max(mx, s[j]);
        }
        double sum = 0;
        for (auto& sj : s) sum += (sj = std::exp(sj - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t e = 0; e < dh; ++e) z[i][h * dh + e] += s[j] / sum * v[j][h * dh + e];
      }
    }
    const Mat a = lin(z, lw.w_o, lw.b_o);
    Mat mlp_in = x;
    if (!c.parallel_blocks)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) mlp_in[t][j] += a[t][j];
    Mat u = lin(ln(mlp_in, lw.ln2_w, lw.ln2_b), lw.w_in, lw.b_in);
    for (auto& row : u)
      for (auto& e : row) e = gelu(e);
    (void)M;
    const Mat m = lin(u, lw.w_out, lw.b_out);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t][j] += a[t][j] + m[t][j];
  }
  if (final_resid) *final_resid = x;
  const Mat logits = lin(ln(x, w.lnf_w, w.lnf_b), w.w_u, w.b_u);
  (void)V;
  return logits;
}

inline Transformer random_model(const ModelConfig& config, std::mt19937_64& rng, float scale = 0.5f) {
  Transformer model(config);
  std::normal_distribution<float> dist(0.0f, scale);
  model.mutable_weights().visit([&](const std::string& name, Tensor& t) {
    const bool gain = name.find("ln") != std::string::npos && name.back() == 'w';
    for (auto& v : t.data()) v = gain ? 1.0f + 0.2f * dist(rng) : dist(rng);
  });
  return model;
}

}  // namespace circuitscope::oracle
