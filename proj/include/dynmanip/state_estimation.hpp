#pragma once

// Gaussian-process regression over an object's top-centroid history:
// position prediction (including through occlusions) and analytic velocity.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <array>
#include <cmath>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynmanip::gp {

using Vec3 = Eigen::Vector3d;

struct CentroidSample {
  double time = 0.0;  // s
  Vec3 position = Vec3::Zero();  // m
};

/// Squared-exponential kernel  k(a, b) = s2 * exp(-(a - b)^2 / (2 l^2)).
struct GpHyperparams {
  double length_scale = 0.5;     // s
  double signal_variance = 1.0;  // m^2
  double noise_variance = 1e-4;  // m^2

  void validate() const {
    if (!std::isfinite(length_scale) || !std::isfinite(signal_variance) || !std::isfinite(noise_variance))
      throw std::invalid_argument("gp hyperparameters must be finite");
    if (!(length_scale > 0.0)) throw std::invalid_argument("length_scale must be > 0");
    if (!(signal_variance >= 0.0) || !(noise_variance >= 0.0))
      throw std::invalid_argument("kernel variances must be >= 0");
    if (!(signal_variance + noise_variance > 0.0))
      throw std::invalid_argument("signal_variance + noise_variance must be > 0");
  }

  double kernel(double a, double b) const {
    const double d = (a - b) / length_scale;
    return signal_variance * std::exp(-0.5 * d * d);
  }

  /// d k(t, b) / dt
  double kernel_dt(double t, double b) const {
    return -(t - b) / (length_scale * length_scale) * kernel(t, b);
  }
};

class GpFitError : public std::runtime_error {
 public:
  GpFitError(int axis, const std::string& what)
      : std::runtime_error("gp fit failed on axis " + std::to_string(axis) + ": " + what), axis_(axis) {}
  int axis() const { return axis_; }

 private:
  int axis_;
};

struct GpPrediction {
  Vec3 mean = Vec3::Zero();
  Vec3 variance = Vec3::Zero();  // latent-function variance, clamped at 0
};

/// Three independent per-axis GPs over a shared time base. Immutable after
/// fitting.
class GpModel {
 public:
  struct Axis {
    GpHyperparams hyper;
    double target_mean = 0.0;
    Eigen::MatrixXd factor;   // lower-triangular L with L L^T = K + (noise + jitter) I
    Eigen::VectorXd weights;  // (K + noise I)^{-1} (y - mean)
    double jitter = 0.0;      // diagonal added beyond noise_variance; 0 unless the
                              // plain factorization was not positive definite
  };

  const Eigen::VectorXd& times() const { return times_; }
  const Eigen::MatrixXd& targets() const { return targets_; }  // n x 3, uncentered
  const Axis& axis(int i) const { return axes_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return static_cast<std::size_t>(times_.size()); }
  double last_time() const { return times_[times_.size() - 1]; }

  static GpModel fit(std::span<const CentroidSample> history, const std::array<GpHyperparams, 3>& hyper) {
    if (history.empty()) throw std::invalid_argument("gp fit needs at least one sample");
    for (std::size_t i = 1; i < history.size(); ++i)
      if (!(history[i].time > history[i - 1].time))
        throw std::invalid_argument("gp fit needs strictly increasing sample times");
    for (const auto& h : hyper) h.validate();

    GpModel m;
    const auto n = static_cast<Eigen::Index>(history.size());
    m.times_.resize(n);
    m.targets_.resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      m.times_[i] = history[static_cast<std::size_t>(i)].time;
      m.targets_.row(i) = history[static_cast<std::size_t>(i)].position.transpose();
    }
    for (int a = 0; a < 3; ++a) m.axes_[static_cast<std::size_t>(a)] = fit_axis(m.times_, m.targets_.col(a), hyper[static_cast<std::size_t>(a)], a);
    return m;
  }

  static GpModel fit(std::span<const CentroidSample> history, const GpHyperparams& hyper = {}) {
    return fit(history, {hyper, hyper, hyper});
  }

  GpPrediction predict(double t) const {
    GpPrediction out;
    for (int a = 0; a < 3; ++a) {
      const Axis& ax = axes_[static_cast<std::size_t>(a)];
      Eigen::VectorXd k(times_.size());
      for (Eigen::Index i = 0; i < times_.size(); ++i) k[i] = ax.hyper.kernel(t, times_[i]);
      out.mean[a] = ax.target_mean + k.dot(ax.weights);
      const Eigen::VectorXd v = ax.factor.triangularView<Eigen::Lower>().solve(k);
      out.variance[a] = std::max(0.0, ax.hyper.signal_variance - v.squaredNorm());
    }
    return out;
  }

  /// Time derivative of the posterior mean.
  Vec3 velocity(double t) const {
    if (times_.size() < 2) throw std::invalid_argument("velocity needs at least two samples");
    Vec3 v;
    for (int a = 0; a < 3; ++a) {
      const Axis& ax = axes_[static_cast<std::size_t>(a)];
      double s = 0.0;
      for (Eigen::Index i = 0; i < times_.size(); ++i) s += ax.hyper.kernel_dt(t, times_[i]) * ax.weights[i];
      v[a] = s;
    }
    return v;
  }

 private:
  static Axis fit_axis(const Eigen::VectorXd& t, const Eigen::VectorXd& y, const GpHyperparams& hyper, int axis) {
    const auto n = t.size();
    Axis ax;
    ax.hyper = hyper;
    ax.target_mean = y.mean();
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) K(i, j) = hyper.kernel(t[i], t[j]);
    K.diagonal().array() += hyper.noise_variance;

    // Noise-free SE kernels on dense samples are numerically singular; escalate
    // a diagonal jitter relative to the kernel scale before giving up.
    const double scale = hyper.signal_variance + hyper.noise_variance;
    double jitter = 0.0;
    for (int attempt = 0;; ++attempt) {
      Eigen::MatrixXd Kj = K;
      Kj.diagonal().array() += jitter;
      Eigen::LLT<Eigen::MatrixXd> llt(Kj);
      if (llt.info() == Eigen::Success) {
        ax.factor = llt.matrixL();
        const Eigen::VectorXd centered = y.array() - ax.target_mean;
        ax.weights = llt.solve(centered);
        ax.jitter = jitter;
        if (!ax.weights.allFinite()) throw GpFitError(axis, "non-finite weights");
        return ax;
      }
      if (attempt == 3) throw GpFitError(axis, "kernel matrix is not positive definite");
      jitter = jitter == 0.0 ? 1e-12 * scale : jitter * 100.0;
    }
  }

  Eigen::VectorXd times_;
  Eigen::MatrixXd targets_;
  std::array<Axis, 3> axes_;
};

inline GpModel gp_fit(std::span<const CentroidSample> history, const GpHyperparams& hyper = {}) {
  return GpModel::fit(history, hyper);
}

inline GpPrediction gp_predict(const GpModel& model, double t) { return model.predict(t); }

inline Vec3 estimate_velocity(const GpModel& model, double t) { return model.velocity(t); }

/// Time-windowed centroid history. Keeps samples no older than
/// (newest time - window).
class HistoryBuffer {
 public:
  explicit HistoryBuffer(double window = 1.0) : window_(window) {
    if (!(window > 0.0)) throw std::invalid_argument("history window must be > 0");
  }

  void push(const CentroidSample& s) {
    if (!samples_.empty() && !(s.time > samples_.back().time))
      throw std::invalid_argument("history samples must arrive in strictly increasing time");
    samples_.push_back(s);
    const double cutoff = s.time - window_;
    while (!samples_.empty() && samples_.front().time < cutoff) samples_.pop_front();
  }

  std::vector<CentroidSample> samples() const { return {samples_.begin(), samples_.end()}; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  double window() const { return window_; }
  const CentroidSample& back() const { return samples_.back(); }
  void clear() { samples_.clear(); }

 private:
  double window_;
  std::deque<CentroidSample> samples_;
};

inline HistoryBuffer sliding_history(HistoryBuffer buffer, const CentroidSample& sample) {
  buffer.push(sample);
  return buffer;
}

struct ObjectEstimate {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  bool extrapolated = false;  // query time is past the newest sample
};

/// Streaming estimator: history buffer plus a lazily refitted GP. Past the
/// newest sample it extrapolates at constant velocity from the posterior at
/// that sample.
class ObjectStateEstimator {
 public:
  explicit ObjectStateEstimator(GpHyperparams hyper = {}, double window = 1.0) : hyper_(hyper), history_(window) {
    hyper_.validate();
  }

  void observe(const CentroidSample& s) {
    history_.push(s);
    model_.reset();
  }

  bool ready() const { return !history_.empty(); }
  const HistoryBuffer& history() const { return history_; }

  ObjectEstimate estimate(double t) {
    if (history_.empty()) throw std::logic_error("no centroid observations yet");
    if (!model_) {
      const auto samples = history_.samples();
      model_ = GpModel::fit(samples, hyper_);
    }
    ObjectEstimate e;
    const double last = model_->last_time();
    const bool has_velocity = model_->size() >= 2;
    e.velocity = has_velocity ? model_->velocity(std::min(t, last)) : Vec3::Zero();
    if (t <= last) {
      e.position = model_->predict(t).mean;
    } else {
      e.position = model_->predict(last).mean + e.velocity * (t - last);
      e.extrapolated = true;
    }
    return e;
  }

 private:
  GpHyperparams hyper_;
  HistoryBuffer history_;
  std::optional<GpModel> model_;
};

}  // namespace dynmanip::gp
