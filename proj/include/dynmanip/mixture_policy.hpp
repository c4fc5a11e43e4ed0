#pragma once

// Diagonal Gaussian mixtures as action heads: density, sampling, mode
// selection, EM fitting, and the two-target ambiguity demo contrasting a
// mixture head with mean regression.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmanip/core/random.hpp"
#include "json.hpp"

namespace dynmanip::gmm {

using Vec = Eigen::VectorXd;

inline constexpr double kVarianceFloor = 1e-8;
inline constexpr double kWeightSumTolerance = 1e-9;
inline constexpr int kDefaultComponents = 5;

struct Component {
  double weight = 0.0;
  Vec mean;
  Vec variance;  // per dimension
};

class GaussianMixture {
 public:
  GaussianMixture() = default;

  explicit GaussianMixture(std::vector<Component> components) : components_(std::move(components)) { validate(); }

  /// Rescales positive weights to sum to one before validating.
  static GaussianMixture normalized(std::vector<Component> components) {
    double s = 0.0;
    for (const auto& c : components) s += c.weight;
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("mixture weights must have a positive sum");
    for (auto& c : components) c.weight /= s;
    return GaussianMixture(std::move(components));
  }

  std::size_t size() const { return components_.size(); }
  Eigen::Index dim() const { return components_.empty() ? 0 : components_.front().mean.size(); }
  const Component& operator[](std::size_t k) const { return components_[k]; }
  const std::vector<Component>& components() const { return components_; }

  Vec mean() const {
    Vec m = Vec::Zero(dim());
    for (const auto& c : components_) m += c.weight * c.mean;
    return m;
  }

  /// log(alpha_k) + log N(x; mu_k, diag(var_k)).
  double component_log_density(std::size_t k, const Vec& x) const {
    const Component& c = components_[k];
    double q = 0.0, logdet = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double d = x[i] - c.mean[i];
      q += d * d / c.variance[i];
      logdet += std::log(c.variance[i]);
    }
    const double lw = c.weight > 0.0 ? std::log(c.weight) : -std::numeric_limits<double>::infinity();
    return lw - 0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet + q);
  }

  double log_density(const Vec& x) const {
    if (x.size() != dim()) throw std::invalid_argument("log_density: dimension mismatch");
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      terms[k] = component_log_density(k, x);
      best = std::max(best, terms[k]);
    }
    if (!std::isfinite(best)) return best;
    double s = 0.0;
    for (double t : terms) s += std::exp(t - best);
    return best + std::log(s);
  }

  Vec sample(Rng& rng) const {
    const double u = uniform01(rng);
    std::size_t k = 0;
    double acc = components_[0].weight;
    while (k + 1 < components_.size() && (u >= acc || components_[k].weight == 0.0)) acc += components_[++k].weight;
    const Component& c = components_[k];
    Vec x(dim());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = c.mean[i] + std::sqrt(c.variance[i]) * normal(rng);
    return x;
  }

  /// Component mean with the highest mixture density; lowest index wins ties.
  /// Only the means are candidates, which matches the true mode when the
  /// components are well separated.
  Vec mode_action() const {
    std::size_t best = 0;
    double best_ld = log_density(components_[0].mean);
    for (std::size_t k = 1; k < components_.size(); ++k) {
      const double ld = log_density(components_[k].mean);
      if (ld > best_ld) {
        best_ld = ld;
        best = k;
      }
    }
    return components_[best].mean;
  }

 private:
  void validate() const {
    if (components_.empty()) throw std::invalid_argument("mixture needs at least one component");
    const Eigen::Index d = components_.front().mean.size();
    if (d == 0) throw std::invalid_argument("mixture dimension must be >= 1");
    double s = 0.0;
    for (const auto& c : components_) {
      if (c.mean.size() != d || c.variance.size() != d) throw std::invalid_argument("mixture dimension mismatch");
      if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) throw std::invalid_argument("mixture weights must be >= 0");
      if (!c.mean.allFinite()) throw std::invalid_argument("mixture means must be finite");
      for (Eigen::Index i = 0; i < d; ++i)
        if (!(c.variance[i] >= kVarianceFloor) || !std::isfinite(c.variance[i]))
          throw std::invalid_argument("mixture variances must be finite and >= the variance floor");
      s += c.weight;
    }
    if (std::abs(s - 1.0) > kWeightSumTolerance) throw std::invalid_argument("mixture weights must sum to 1");
  }

  std::vector<Component> components_;
};

inline double log_density(const GaussianMixture& g, const Vec& x) { return g.log_density(x); }
inline Vec sample(const GaussianMixture& g, Rng& rng) { return g.sample(rng); }
inline Vec mode_action(const GaussianMixture& g) { return g.mode_action(); }

struct Gaussian {
  Vec mean;
  Vec variance;
};

namespace detail {

inline Eigen::Index check_data(std::span<const Vec> data) {
  const Eigen::Index d = data.front().size();
  if (d == 0) throw std::invalid_argument("data points must have dimension >= 1");
  for (const auto& x : data) {
    if (x.size() != d) throw std::invalid_argument("data dimension mismatch");
    if (!x.allFinite()) throw std::invalid_argument("data must be finite");
  }
  return d;
}

// Responsibility-weighted mean and variance (1/N normalization), floored.
// fit_unimodal and single-component EM share this so they agree bit for bit.
inline Gaussian weighted_stats(std::span<const Vec> data, std::span<const double> r, double total) {
  const Eigen::Index d = data.front().size();
  Gaussian g{Vec::Zero(d), Vec::Zero(d)};
  for (std::size_t n = 0; n < data.size(); ++n) g.mean += r[n] * data[n];
  g.mean /= total;
  for (std::size_t n = 0; n < data.size(); ++n) g.variance += r[n] * (data[n] - g.mean).array().square().matrix();
  g.variance /= total;
  g.variance = g.variance.cwiseMax(kVarianceFloor);
  return g;
}

}  // namespace detail

/// Gaussian MLE: sample mean and per-dimension 1/N variance.
inline Gaussian fit_unimodal(std::span<const Vec> data) {
  if (data.size() < 2) throw std::invalid_argument("fit_unimodal needs at least 2 points");
  detail::check_data(data);
  const std::vector<double> ones(data.size(), 1.0);
  double total = 0.0;
  for (double o : ones) total += o;
  return detail::weighted_stats(data, ones, total);
}

struct EmOptions {
  int components = kDefaultComponents;
  std::uint64_t init_seed = 0;
  int max_iters = 200;
  double tol = 1e-10;  // on mean log-likelihood per point
  int kmeans_iters = 10;
};

struct EmResult {
  GaussianMixture mixture;
  std::vector<double> log_likelihood;  // mean per point, one entry per E-step
  int iterations = 0;                  // M-steps performed
  bool converged = false;
  std::vector<std::string> events;     // component re-seeds
};

namespace detail {

inline std::size_t farthest_point(std::span<const Vec> data, const std::vector<Vec>& centers) {
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& c : centers) dmin = std::min(dmin, (data[n] - c).squaredNorm());
    if (dmin > best_d) {
      best_d = dmin;
      best = n;
    }
  }
  return best;
}

// k-means++ seeding followed by a few Lloyd iterations.
inline std::vector<Vec> kmeans_init(std::span<const Vec> data, int K, Rng& rng, int iters,
                                    std::vector<std::string>& events) {
  const std::size_t N = data.size();
  std::vector<Vec> centers;
  centers.push_back(data[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(N) - 1))]);
  std::vector<double> d2(N);
  while (static_cast<int>(centers.size()) < K) {
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      double dmin = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) dmin = std::min(dmin, (data[n] - c).squaredNorm());
      d2[n] = dmin;
      total += dmin;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (pick = 0; pick + 1 < N; ++pick) {
        acc += d2[pick];
        if (u < acc && d2[pick] > 0.0) break;
      }
    } else {
      pick = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(N) - 1));
    }
    centers.push_back(data[pick]);
  }
  std::vector<int> assign(N, -1);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t n = 0; n < N; ++n) {
      int best = 0;
      double bd = (data[n] - centers[0]).squaredNorm();
      for (int k = 1; k < K; ++k) {
        const double dk = (data[n] - centers[static_cast<std::size_t>(k)]).squaredNorm();
        if (dk < bd) {
          bd = dk;
          best = k;
        }
      }
      changed |= assign[n] != best;
      assign[n] = best;
    }
    if (!changed && it > 0) break;
    std::vector<Vec> sums(static_cast<std::size_t>(K), Vec::Zero(data.front().size()));
    std::vector<int> counts(static_cast<std::size_t>(K), 0);
    for (std::size_t n = 0; n < N; ++n) {
      sums[static_cast<std::size_t>(assign[n])] += data[n];
      ++counts[static_cast<std::size_t>(assign[n])];
    }
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      if (counts[ku] > 0) {
        centers[ku] = sums[ku] / counts[ku];
      } else {
        std::vector<Vec> others;
        for (int j = 0; j < K; ++j)
          if (j != k) others.push_back(centers[static_cast<std::size_t>(j)]);
        const std::size_t far = farthest_point(data, others);
        centers[ku] = data[far];
        events.push_back("kmeans: empty cluster " + std::to_string(k) + " re-seeded from point " +
                         std::to_string(far));
      }
    }
  }
  return centers;
}

}  // namespace detail

/// Diagonal-covariance EM. The recorded mean log-likelihood is non-decreasing
/// except across a logged component re-seed.
inline EmResult fit_em_trace(std::span<const Vec> data, const EmOptions& opt = {}) {
  if (opt.components < 1) throw std::invalid_argument("fit_em needs K >= 1");
  if (data.size() < static_cast<std::size_t>(opt.components)) throw std::invalid_argument("fit_em needs at least K points");
  if (opt.max_iters < 1) throw std::invalid_argument("fit_em needs max_iters >= 1");
  detail::check_data(data);
  const std::size_t N = data.size();
  const auto K = static_cast<std::size_t>(opt.components);

  EmResult res;
  Rng rng = make_rng(opt.init_seed, {0x656du});

  // Initial responsibilities are hard k-means assignments.
  std::vector<std::vector<double>> r(K, std::vector<double>(N, 0.0));
  if (K == 1) {
    std::fill(r[0].begin(), r[0].end(), 1.0);
  } else {
    const auto centers = detail::kmeans_init(data, opt.components, rng, opt.kmeans_iters, res.events);
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if ((data[n] - centers[k]).squaredNorm() < (data[n] - centers[best]).squaredNorm()) best = k;
      r[best][n] = 1.0;
    }
  }

  auto m_step = [&](bool initial) {
    std::vector<Component> comps(K);
    for (std::size_t k = 0; k < K; ++k) {
      double nk = 0.0;
      for (double v : r[k]) nk += v;
      if (!(nk > 0.0)) {
        std::vector<Vec> others;
        for (std::size_t j = 0; j < k; ++j) others.push_back(comps[j].mean);
        if (others.empty()) others.push_back(fit_unimodal(data).mean);
        const std::size_t far = detail::farthest_point(data, others);
        std::fill(r[k].begin(), r[k].end(), 0.0);
        r[k][far] = 1.0;
        nk = 1.0;
        res.events.push_back("em: collapsed component " + std::to_string(k) + " re-seeded from point " +
                             std::to_string(far));
      }
      Gaussian g = detail::weighted_stats(data, r[k], nk);
      // A singleton k-means cluster would start at the variance floor.
      if (initial && nk <= 1.0 && K > 1) g.variance = fit_unimodal(data).variance;
      comps[k] = {nk / static_cast<double>(N), std::move(g.mean), std::move(g.variance)};
    }
    return GaussianMixture::normalized(std::move(comps));
  };

  auto e_step = [&](const GaussianMixture& g) {
    double total = 0.0;
    std::vector<double> lk(K);
    for (std::size_t n = 0; n < N; ++n) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        lk[k] = g.component_log_density(k, data[n]);
        best = std::max(best, lk[k]);
      }
      double s = 0.0;
      for (double v : lk) s += std::exp(v - best);
      const double lse = best + std::log(s);
      for (std::size_t k = 0; k < K; ++k) r[k][n] = std::exp(lk[k] - lse);
      total += lse;
    }
    return total / static_cast<double>(N);
  };

  GaussianMixture g = m_step(true);
  for (;;) {
    const double ll = e_step(g);
    res.log_likelihood.push_back(ll);
    const std::size_t h = res.log_likelihood.size();
    if (h >= 2 && ll - res.log_likelihood[h - 2] < opt.tol) {
      res.converged = true;
      break;
    }
    if (res.iterations >= opt.max_iters) break;
    g = m_step(false);
    ++res.iterations;
  }
  res.mixture = std::move(g);
  return res;
}

inline GaussianMixture fit_em(std::span<const Vec> data, int K = kDefaultComponents, std::uint64_t init_seed = 0,
                              int max_iters = 200, double tol = 1e-10) {
  EmOptions opt;
  opt.components = K;
  opt.init_seed = init_seed;
  opt.max_iters = max_iters;
  opt.tol = tol;
  return fit_em_trace(data, opt).mixture;
}

// ---------------------------------------------------------------------------
// Tabular contextual policy

using ContextKey = std::vector<long>;

/// Grid-quantizes a relative pose into a table key.
inline ContextKey quantize_context(const Vec& relative_pose, double cell) {
  if (!(cell > 0.0)) throw std::invalid_argument("context cell size must be > 0");
  ContextKey key(static_cast<std::size_t>(relative_pose.size()));
  for (Eigen::Index i = 0; i < relative_pose.size(); ++i)
    key[static_cast<std::size_t>(i)] = static_cast<long>(std::floor(relative_pose[i] / cell));
  return key;
}

class ContextualPolicyTable {
 public:
  void set(const ContextKey& key, GaussianMixture g) { table_.insert_or_assign(key, std::move(g)); }
  bool contains(const ContextKey& key) const { return table_.count(key) != 0; }
  const GaussianMixture& at(const ContextKey& key) const {
    auto it = table_.find(key);
    if (it == table_.end()) throw std::out_of_range("no mixture for context");
    return it->second;
  }
  Vec act(const ContextKey& key) const { return at(key).mode_action(); }
  Vec act(const ContextKey& key, Rng& rng) const { return at(key).sample(rng); }
  std::size_t size() const { return table_.size(); }
  const std::map<ContextKey, GaussianMixture>& entries() const { return table_; }

 private:
  std::map<ContextKey, GaussianMixture> table_;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const GaussianMixture& g) {
  nlohmann::json j;
  j["weights"] = nlohmann::json::array();
  j["means"] = nlohmann::json::array();
  j["variances"] = nlohmann::json::array();
  for (const auto& c : g.components()) {
    j["weights"].push_back(c.weight);
    j["means"].push_back(std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size()));
    j["variances"].push_back(std::vector<double>(c.variance.data(), c.variance.data() + c.variance.size()));
  }
  return j;
}

inline GaussianMixture mixture_from_json(const nlohmann::json& j) {
  const auto w = j.at("weights").get<std::vector<double>>();
  const auto m = j.at("means").get<std::vector<std::vector<double>>>();
  const auto v = j.at("variances").get<std::vector<std::vector<double>>>();
  if (m.size() != w.size() || v.size() != w.size()) throw std::invalid_argument("mixture json: array length mismatch");
  std::vector<Component> comps;
  for (std::size_t k = 0; k < w.size(); ++k)
    comps.push_back({w[k], Eigen::Map<const Vec>(m[k].data(), static_cast<Eigen::Index>(m[k].size())),
                     Eigen::Map<const Vec>(v[k].data(), static_cast<Eigen::Index>(v[k].size()))});
  return GaussianMixture(std::move(comps));
}

// ---------------------------------------------------------------------------
// Two-target ambiguity demo

struct TwoTargetConfig {
  double separation = 0.2;  // m
  double noise = 0.01;      // m; demo endpoint spread and execution noise
  int episodes = 200;
  std::uint64_t seed = 0;
  int components = 2;

  void validate() const {
    if (!(noise > 0.0)) throw std::invalid_argument("noise must be > 0");
    if (!(separation > 4.0 * noise)) throw std::invalid_argument("separation must exceed 4 * noise");
    if (episodes < 2) throw std::invalid_argument("episodes must be >= 2");
    if (components < 1) throw std::invalid_argument("components must be >= 1");
  }
};

struct ModelOutcome {
  std::string model;
  double commanded = 0.0;     // endpoint the controller aims for
  double success_rate = 0.0;
  double mean_offset = 0.0;   // |commanded - midpoint|
};

struct TwoTargetReport {
  std::vector<double> demos;  // demonstrated endpoints
  Gaussian unimodal;
  GaussianMixture mixture;
  ModelOutcome unimodal_outcome;
  ModelOutcome mixture_outcome;
};

/// Demonstrations alternate between the targets at -s/2 and +s/2 with
/// Gaussian endpoint noise, one per episode. Both models are fitted once; each
/// episode then executes its commanded endpoint with fresh execution noise and
/// succeeds if it lands within 3 noise of either target.
inline TwoTargetReport two_target_demo(const TwoTargetConfig& cfg) {
  cfg.validate();
  const double half = 0.5 * cfg.separation;
  TwoTargetReport rep;
  Rng demo_rng = make_rng(cfg.seed, {0x64656d6fu});
  std::vector<Vec> data;
  for (int e = 0; e < cfg.episodes; ++e) {
    const double target = e % 2 == 0 ? -half : half;
    const double x = target + normal(demo_rng, 0.0, cfg.noise);
    rep.demos.push_back(x);
    data.push_back(Vec::Constant(1, x));
  }
  rep.unimodal = fit_unimodal(data);
  EmOptions opt;
  opt.components = cfg.components;
  opt.init_seed = derive_seed(cfg.seed, {0x656du});
  rep.mixture = fit_em_trace(data, opt).mixture;

  auto evaluate = [&](const std::string& name, double commanded, std::uint64_t stream) {
    Rng rng = make_rng(cfg.seed, {stream});
    int ok = 0;
    for (int e = 0; e < cfg.episodes; ++e) {
      const double landed = commanded + normal(rng, 0.0, cfg.noise);
      if (std::min(std::abs(landed + half), std::abs(landed - half)) <= 3.0 * cfg.noise) ++ok;
    }
    return ModelOutcome{name, commanded, static_cast<double>(ok) / cfg.episodes, std::abs(commanded)};
  };
  rep.unimodal_outcome = evaluate("unimodal", rep.unimodal.mean[0], 1);
  rep.mixture_outcome = evaluate("mixture", rep.mixture.mode_action()[0], 2);
  return rep;
}

}  // namespace dynmanip::gmm
