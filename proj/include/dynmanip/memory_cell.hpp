#pragma once

// Gated memory cell:  M_t = sigmoid(G) * H + (1 - sigmoid(G)) * M_{t-1},
// with G (one gate per memory row) and H = tanh(.) from affine maps of
// [vec(M_{t-1}); F_t], a linear readout, exact BPTT, and the digit
// recitation toy.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmanip/core/random.hpp"
#include "json.hpp"

namespace dynmanip::memory {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// l_m x c; row i is memory slot i.
using MemoryState = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline MemoryState init_memory(Eigen::Index l_m = 8, Eigen::Index c = 16) {
  if (l_m < 1 || c < 1) throw std::invalid_argument("memory shape must be >= 1 x 1");
  return MemoryState::Zero(l_m, c);
}

/// Row-major flattening; matches MemoryState storage.
inline Vec flatten(const MemoryState& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

inline MemoryState unflatten(const Vec& v, Eigen::Index l_m, Eigen::Index c) {
  return Eigen::Map<const MemoryState>(v.data(), l_m, c);
}

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct CellParams {
  Eigen::Index l_m = 8, c = 16, n_out = 10;
  Mat Wg;  // l_m x (l_m c + c)
  Vec bg;  // l_m
  Mat Wh;  // l_m c x (l_m c + c)
  Vec bh;  // l_m c
  Mat Wo;  // n_out x l_m c
  Vec bo;  // n_out

  Eigen::Index state_dim() const { return l_m * c; }
  Eigen::Index input_dim() const { return l_m * c + c; }

  static CellParams zeros(Eigen::Index l_m, Eigen::Index c, Eigen::Index n_out = 10) {
    if (l_m < 1 || c < 1 || n_out < 1) throw std::invalid_argument("cell shape must be positive");
    CellParams p;
    p.l_m = l_m;
    p.c = c;
    p.n_out = n_out;
    const Eigen::Index s = l_m * c, d = s + c;
    p.Wg = Mat::Zero(l_m, d);
    p.bg = Vec::Zero(l_m);
    p.Wh = Mat::Zero(s, d);
    p.bh = Vec::Zero(s);
    p.Wo = Mat::Zero(n_out, s);
    p.bo = Vec::Zero(n_out);
    return p;
  }

  /// Gaussian init with 1/sqrt(fan_in) scale; biases zero.
  static CellParams random(Eigen::Index l_m, Eigen::Index c, Eigen::Index n_out, Rng& rng) {
    CellParams p = zeros(l_m, c, n_out);
    auto fill = [&](Mat& w) {
      const double s = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng, 0.0, s);
    };
    fill(p.Wg);
    fill(p.Wh);
    fill(p.Wo);
    return p;
  }

  void validate() const {
    const Eigen::Index s = l_m * c, d = s + c;
    if (Wg.rows() != l_m || Wg.cols() != d || bg.size() != l_m || Wh.rows() != s || Wh.cols() != d ||
        bh.size() != s || Wo.rows() != n_out || Wo.cols() != s || bo.size() != n_out)
      throw std::invalid_argument("cell parameter shapes inconsistent with (l_m, c, n_out)");
    if (!Wg.allFinite() || !bg.allFinite() || !Wh.allFinite() || !bh.allFinite() || !Wo.allFinite() ||
        !bo.allFinite())
      throw std::invalid_argument("cell parameters must be finite");
  }

  // Group-wise visitors keep gradient descent and finite differences generic.
  template <class F>
  void for_each(F&& f) {
    f("Wg", Wg.data(), Wg.size());
    f("bg", bg.data(), bg.size());
    f("Wh", Wh.data(), Wh.size());
    f("bh", bh.data(), bh.size());
    f("Wo", Wo.data(), Wo.size());
    f("bo", bo.data(), bo.size());
  }
};

/// The G row; nullopt computes it from the parameters.
using GateOverride = std::optional<Vec>;

struct StepResult {
  MemoryState memory;
  Vec gate;        // G, pre-sigmoid, l_m
  MemoryState candidate;  // H
};

inline Vec cell_input(const MemoryState& m_prev, const Vec& feature) {
  Vec x(m_prev.size() + feature.size());
  x << flatten(m_prev), feature;
  return x;
}

inline StepResult memory_step(const CellParams& p, const MemoryState& m_prev, const Vec& feature,
                              const GateOverride& gate = std::nullopt) {
  if (m_prev.rows() != p.l_m || m_prev.cols() != p.c) throw std::invalid_argument("memory_step: memory shape mismatch");
  if (feature.size() != p.c) throw std::invalid_argument("memory_step: feature size must equal c");
  if (gate && gate->size() != p.l_m) throw std::invalid_argument("memory_step: gate size must equal l_m");
  const Vec x = cell_input(m_prev, feature);
  StepResult r;
  r.gate = gate ? *gate : Vec(p.Wg * x + p.bg);
  r.candidate = unflatten((p.Wh * x + p.bh).array().tanh().matrix(), p.l_m, p.c);
  r.memory.resize(p.l_m, p.c);
  for (Eigen::Index i = 0; i < p.l_m; ++i) {
    const double s = sigmoid(r.gate[i]);
    r.memory.row(i) = s * r.candidate.row(i) + (1.0 - s) * m_prev.row(i);
  }
  return r;
}

/// Blend with an explicit G; used to exercise the mixing law in isolation.
inline MemoryState mix(const MemoryState& m_prev, const MemoryState& h, const Vec& g) {
  if (h.rows() != m_prev.rows() || h.cols() != m_prev.cols() || g.size() != m_prev.rows())
    throw std::invalid_argument("mix: shape mismatch");
  MemoryState out(m_prev.rows(), m_prev.cols());
  for (Eigen::Index i = 0; i < m_prev.rows(); ++i) {
    const double s = sigmoid(g[i]);
    out.row(i) = s * h.row(i) + (1.0 - s) * m_prev.row(i);
  }
  return out;
}

inline Vec readout(const CellParams& p, const MemoryState& m) { return p.Wo * flatten(m) + p.bo; }

inline Vec softmax(const Vec& z) {
  const Vec e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline Eigen::Index argmax(const Vec& z) {
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < z.size(); ++i)
    if (z[i] > z[k]) k = i;
  return k;
}

/// Inputs per step, and a class target per step (-1 for unscored steps).
struct Rollout {
  std::vector<Vec> features;
  std::vector<int> targets;
};

struct Gradients {
  double loss = 0.0;  // summed cross-entropy over scored steps
  CellParams grad;    // same shapes as the parameters
};

/// Exact gradients of the summed cross-entropy through the unrolled
/// recurrence, starting from the zero memory.
inline Gradients cell_gradients(const CellParams& p, const Rollout& ro) {
  const std::size_t T = ro.features.size();
  if (T < 1) throw std::invalid_argument("cell_gradients needs T >= 1");
  if (ro.targets.size() != T) throw std::invalid_argument("cell_gradients: one target slot per step");
  const Eigen::Index S = p.state_dim();

  std::vector<Vec> xs(T), ss(T), hs(T), ms(T + 1), probs(T);
  ms[0] = Vec::Zero(S);
  Gradients out;
  for (std::size_t t = 0; t < T; ++t) {
    if (ro.features[t].size() != p.c) throw std::invalid_argument("cell_gradients: feature size must equal c");
    xs[t].resize(S + p.c);
    xs[t] << ms[t], ro.features[t];
    const Vec a = p.Wg * xs[t] + p.bg;
    ss[t] = a.unaryExpr([](double v) { return sigmoid(v); });
    hs[t] = (p.Wh * xs[t] + p.bh).array().tanh().matrix();
    ms[t + 1].resize(S);
    for (Eigen::Index i = 0; i < p.l_m; ++i)
      for (Eigen::Index j = 0; j < p.c; ++j) {
        const Eigen::Index k = i * p.c + j;
        ms[t + 1][k] = ss[t][i] * hs[t][k] + (1.0 - ss[t][i]) * ms[t][k];
      }
    const int y = ro.targets[t];
    if (y >= 0) {
      if (y >= p.n_out) throw std::invalid_argument("cell_gradients: target out of range");
      const Vec z = p.Wo * ms[t + 1] + p.bo;
      probs[t] = softmax(z);
      const double lse = z.maxCoeff() + std::log((z.array() - z.maxCoeff()).exp().sum());
      out.loss += lse - z[y];
    }
  }

  CellParams& g = out.grad;
  g = CellParams::zeros(p.l_m, p.c, p.n_out);
  Vec dm = Vec::Zero(S);
  for (std::size_t t = T; t-- > 0;) {
    if (ro.targets[t] >= 0) {
      Vec dz = probs[t];
      dz[ro.targets[t]] -= 1.0;
      g.Wo.noalias() += dz * ms[t + 1].transpose();
      g.bo += dz;
      dm.noalias() += p.Wo.transpose() * dz;
    }
    Vec dh(S), dpre_g(p.l_m), dprev(S);
    for (Eigen::Index i = 0; i < p.l_m; ++i) {
      const double s = ss[t][i];
      double ds = 0.0;
      for (Eigen::Index j = 0; j < p.c; ++j) {
        const Eigen::Index k = i * p.c + j;
        dh[k] = s * dm[k] * (1.0 - hs[t][k] * hs[t][k]);
        ds += dm[k] * (hs[t][k] - ms[t][k]);
        dprev[k] = (1.0 - s) * dm[k];
      }
      dpre_g[i] = ds * s * (1.0 - s);
    }
    g.Wh.noalias() += dh * xs[t].transpose();
    g.bh += dh;
    g.Wg.noalias() += dpre_g * xs[t].transpose();
    g.bg += dpre_g;
    const Vec dx = p.Wh.transpose() * dh + p.Wg.transpose() * dpre_g;
    dm = dprev + dx.head(S);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Digit recitation

struct ReciteConfig {
  int length = 20;          // L
  Eigen::Index l_m = 8;
  Eigen::Index c = 16;      // >= 10; digits are one-hot in the first 10 entries
  int epochs = 5000;
  double step_size = 0.1;
  std::uint64_t seed = 0;
  bool stop_when_perfect = true;

  void validate() const {
    if (length < 2) throw std::invalid_argument("recitation length must be >= 2");
    if (l_m < 1) throw std::invalid_argument("l_m must be >= 1");
    if (c < 10) throw std::invalid_argument("c must be >= 10 for one-hot digits");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (!(step_size > 0.0)) throw std::invalid_argument("step_size must be > 0");
  }
};

inline Vec digit_feature(int digit, Eigen::Index c) {
  Vec f = Vec::Zero(c);
  f[digit] = 1.0;
  return f;
}

inline std::vector<int> random_digits(int length, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x646967u});
  std::vector<int> d(static_cast<std::size_t>(length));
  for (auto& x : d) x = uniform_int(rng, 0, 9);
  return d;
}

/// Teacher-forced rollout: feed digit t, predict digit t+1.
inline Rollout recite_rollout(std::span<const int> digits, Eigen::Index c) {
  Rollout ro;
  for (std::size_t t = 0; t + 1 < digits.size(); ++t) {
    ro.features.push_back(digit_feature(digits[t], c));
    ro.targets.push_back(digits[t + 1]);
  }
  return ro;
}

/// Free-running accuracy: given the first digit, feed back the model's own
/// predictions; fraction of the L-1 predictions that are correct.
inline double recite_accuracy(const CellParams& p, std::span<const int> digits) {
  MemoryState m = init_memory(p.l_m, p.c);
  int input = digits[0], correct = 0;
  for (std::size_t t = 0; t + 1 < digits.size(); ++t) {
    m = memory_step(p, m, digit_feature(input, p.c)).memory;
    input = static_cast<int>(argmax(readout(p, m)));
    correct += input == digits[t + 1];
  }
  return static_cast<double>(correct) / static_cast<double>(digits.size() - 1);
}

struct ReciteResult {
  std::vector<int> digits;
  CellParams params;
  std::vector<double> accuracy;  // index 0 is the untrained cell, then one per epoch
  std::vector<double> loss;      // teacher-forced loss per epoch
  std::optional<int> perfect_epoch;

  double final_accuracy() const { return accuracy.back(); }
};

inline ReciteResult train_recite(const ReciteConfig& cfg) {
  cfg.validate();
  ReciteResult res;
  res.digits = random_digits(cfg.length, cfg.seed);
  Rng rng = make_rng(cfg.seed, {0x696e6974u});
  res.params = CellParams::random(cfg.l_m, cfg.c, 10, rng);
  const Rollout ro = recite_rollout(res.digits, cfg.c);
  const double scale = cfg.step_size / static_cast<double>(ro.targets.size());
  res.accuracy.push_back(recite_accuracy(res.params, res.digits));
  if (res.accuracy.back() == 1.0) res.perfect_epoch = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (res.perfect_epoch && cfg.stop_when_perfect) break;
    Gradients g = cell_gradients(res.params, ro);
    res.loss.push_back(g.loss);
    res.params.Wg -= scale * g.grad.Wg;
    res.params.bg -= scale * g.grad.bg;
    res.params.Wh -= scale * g.grad.Wh;
    res.params.bh -= scale * g.grad.bh;
    res.params.Wo -= scale * g.grad.Wo;
    res.params.bo -= scale * g.grad.bo;
    res.accuracy.push_back(recite_accuracy(res.params, res.digits));
    if (!res.perfect_epoch && res.accuracy.back() == 1.0) res.perfect_epoch = epoch;
  }
  return res;
}

// ---------------------------------------------------------------------------
// JSON snapshot

inline nlohmann::json to_json(const CellParams& p) {
  auto mat = [](const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
      rows.push_back(r);
    }
    return rows;
  };
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"l_m", p.l_m}, {"c", p.c}, {"n_out", p.n_out}, {"Wg", mat(p.Wg)}, {"bg", vec(p.bg)},
          {"Wh", mat(p.Wh)}, {"bh", vec(p.bh)}, {"Wo", mat(p.Wo)}, {"bo", vec(p.bo)}};
}

inline CellParams params_from_json(const nlohmann::json& j) {
  CellParams p = CellParams::zeros(j.at("l_m").get<Eigen::Index>(), j.at("c").get<Eigen::Index>(),
                                   j.at("n_out").get<Eigen::Index>());
  auto mat = [&](const char* key, Mat& m) {
    const auto rows = j.at(key).get<std::vector<std::vector<double>>>();
    if (static_cast<Eigen::Index>(rows.size()) != m.rows()) throw std::invalid_argument(std::string(key) + ": bad shape");
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const auto& r = rows[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(r.size()) != m.cols()) throw std::invalid_argument(std::string(key) + ": bad shape");
      for (Eigen::Index k = 0; k < m.cols(); ++k) m(i, k) = r[static_cast<std::size_t>(k)];
    }
  };
  auto vec = [&](const char* key, Vec& v) {
    const auto r = j.at(key).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(r.size()) != v.size()) throw std::invalid_argument(std::string(key) + ": bad shape");
    v = Eigen::Map<const Vec>(r.data(), v.size());
  };
  mat("Wg", p.Wg);
  vec("bg", p.bg);
  mat("Wh", p.Wh);
  vec("bh", p.bh);
  mat("Wo", p.Wo);
  vec("bo", p.bo);
  p.validate();
  return p;
}

}  // namespace dynmanip::memory
