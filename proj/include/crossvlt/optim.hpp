#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "crossvlt/params.hpp"

namespace crossvlt {

/// base_lr * (1 - step/total_steps)^power, clamped to zero past the end.
inline double poly_lr(double base_lr, long step, long total_steps, double power) {
  if (total_steps <= 0) throw UsageError("poly_lr: total_steps must be positive");
  if (step >= total_steps) return 0.0;
  if (step <= 0) return base_lr;
  return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Decay applies to ParamKind::weight only;
/// biases, norm parameters and log-temperatures are not decayed. Moments are
/// kept in double regardless of the parameter scalar type.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Manifest& manifest, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& s : manifest) {
      if (!s.trainable()) continue;
      m_.emplace(s.path, Matrix<double>::Zero(s.rows, s.cols));
      v_.emplace(s.path, Matrix<double>::Zero(s.rows, s.cols));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  /// One update with learning rate `lr`. Parameters without a gradient entry
  /// (not reached by the loss) see a zero gradient.
  template <class T>
  void step(ModelParams<T>& params, const std::map<std::string, Matrix<T>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& spec = params.manifest()[i];
      if (!spec.trainable()) continue;
      auto& m = m_.at(spec.path);
      auto& v = v_.at(spec.path);
      auto& w = params.value(i);
      auto it = grads.find(spec.path);
      const bool has = it != grads.end();
      for (Eigen::Index k = 0; k < w.size(); ++k) {
        const double g = has ? static_cast<double>(it->second.data()[k]) : 0.0;
        double& mk = m.data()[k];
        double& vk = v.data()[k];
        mk = cfg_.beta1 * mk + (1.0 - cfg_.beta1) * g;
        vk = cfg_.beta2 * vk + (1.0 - cfg_.beta2) * g * g;
        double x = static_cast<double>(w.data()[k]);
        if (spec.decayed()) x -= lr * cfg_.weight_decay * x;
        x -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps);
        w.data()[k] = static_cast<T>(x);
      }
    }
  }

  const std::map<std::string, Matrix<double>>& first_moments() const { return m_; }
  const std::map<std::string, Matrix<double>>& second_moments() const { return v_; }
  std::map<std::string, Matrix<double>>& first_moments() { return m_; }
  std::map<std::string, Matrix<double>>& second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Matrix<double>> m_;
  std::map<std::string, Matrix<double>> v_;
  long t_ = 0;
};

}  // namespace crossvlt
