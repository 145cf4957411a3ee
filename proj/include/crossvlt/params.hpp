#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "crossvlt/core.hpp"
#include "crossvlt/tensor.hpp"

namespace crossvlt {

/// How a parameter is initialised and whether the optimizer decays it.
enum class ParamKind {
  weight,       // truncated normal, decayed
  bias,         // zeros
  norm_gain,    // ones
  norm_bias,    // zeros
  temperature,  // log(0.07)
  position_2d,  // 2-D sine-cosine table, learned afterwards
  logit_prior,  // log(kMaskPrior / (1 - kMaskPrior)), not decayed
  running_mean, // buffer, zeros, not trained
  running_var,  // buffer, ones, not trained
};

struct ParamSpec {
  std::string path;
  int rows = 0;
  int cols = 0;
  ParamKind kind = ParamKind::weight;

  long count() const { return static_cast<long>(rows) * cols; }
  bool trainable() const {
    return kind != ParamKind::running_mean && kind != ParamKind::running_var;
  }
  bool decayed() const { return kind == ParamKind::weight; }
  bool operator==(const ParamSpec&) const = default;
};

using Manifest = std::vector<ParamSpec>;

inline constexpr double kInitStd = 0.02;
inline const double kInitLogTau = std::log(0.07);
/// Foreground rate the mask head's bias starts at.
inline constexpr double kMaskPrior = 0.1;

namespace detail {

struct ManifestBuilder {
  Manifest out;

  void add(std::string path, int rows, int cols, ParamKind kind) {
    out.push_back({std::move(path), rows, cols, kind});
  }
  void linear(const std::string& p, int in, int outd, bool bias = true) {
    add(p + ".weight", in, outd, ParamKind::weight);
    if (bias) add(p + ".bias", 1, outd, ParamKind::bias);
  }
  void layer_norm(const std::string& p, int dim) {
    add(p + ".gain", 1, dim, ParamKind::norm_gain);
    add(p + ".bias", 1, dim, ParamKind::norm_bias);
  }
  void batch_norm(const std::string& p, int dim) {
    layer_norm(p, dim);
    add(p + ".running_mean", 1, dim, ParamKind::running_mean);
    add(p + ".running_var", 1, dim, ParamKind::running_var);
  }
  void attention(const std::string& p, int model_dim, int kv_dim) {
    linear(p + ".q_proj", model_dim, model_dim);
    linear(p + ".k_proj", kv_dim, model_dim);
    linear(p + ".v_proj", kv_dim, model_dim);
    linear(p + ".o_proj", model_dim, model_dim);
  }
  void ffn(const std::string& p, int dim, int hidden) {
    linear(p + ".fc1", dim, hidden);
    linear(p + ".fc2", hidden, dim);
  }
  void encoder_layer(const std::string& p, int dim, int hidden) {
    layer_norm(p + ".norm1", dim);
    attention(p + ".attn", dim, dim);
    layer_norm(p + ".norm2", dim);
    ffn(p + ".ffn", dim, hidden);
  }
};

}  // namespace detail

inline std::string stage_prefix(const char* tower, int stage) {
  return std::string(tower) + ".stage" + std::to_string(stage);
}

/// Every parameter the given configuration owns, in initialisation order.
/// Disabled fusion layers and loss heads own no parameters.
inline Manifest build_manifest(const ModelConfig& c) {
  require_valid(c);
  detail::ManifestBuilder m;
  const int n = c.num_stages;
  const int c1 = c.channels(1);
  const int h1 = c.stage_resolution(1);

  m.linear("vision.patch_embed.proj", 3 * c.patch_size * c.patch_size, c1);
  m.add("vision.patch_embed.pos", h1 * h1, c1, ParamKind::position_2d);
  for (int i = 1; i <= n; ++i) {
    const std::string p = stage_prefix("vision", i);
    const int ch = c.channels(i);
    for (int j = 0; j < c.vision_depths[i - 1]; ++j) {
      m.encoder_layer(p + ".block" + std::to_string(j), ch, ch * c.ffn_ratio);
    }
    if (c.fusion_enabled(i)) {
      m.attention(p + ".fusion.attn1", ch, c.lang_dim);
      m.ffn(p + ".fusion.ffn1", ch, ch * c.ffn_ratio);
      if (i < n) {
        const int next = c.channels(i + 1);
        m.attention(p + ".fusion.attn2", next, c.lang_dim);
        m.ffn(p + ".fusion.ffn2", next, next * c.ffn_ratio);
      }
    }
    if (i < n) m.linear(p + ".down", 4 * ch, c.channels(i + 1));
  }

  const int d = c.lang_dim;
  m.add("language.embed.tokens", c.vocab_size, d, ParamKind::weight);
  m.add("language.embed.pos", c.max_tokens, d, ParamKind::weight);
  for (int i = 1; i <= n; ++i) {
    const std::string p = stage_prefix("language", i);
    int first_self = 0;
    if (i >= 2) {
      first_self = 1;  // slot 0 is the language query fusion layer
      if (c.language_fusion_enabled(i)) {
        // keys/values are F_V of stage i-1, already at stage-i width
        m.attention(p + ".fusion.attn", d, c.channels(i));
        m.ffn(p + ".fusion.ffn", d, d * c.ffn_ratio);
      }
    }
    for (int j = first_self; j < c.lang_depths[i - 1]; ++j) {
      m.encoder_layer(p + ".layer" + std::to_string(j), d, d * c.ffn_ratio);
    }
  }

  for (int i = 1; i <= n; ++i) {
    if (!c.align_enabled(i)) continue;
    if (c.stage_loss == StageLoss::alignment) {
      const std::string p = stage_prefix("align", i);
      m.linear(p + ".vision_proj", c.channels(i), c.align_dim);
      m.linear(p + ".lang_proj", d, c.align_dim);
      m.add(p + ".log_tau", 1, 1, ParamKind::temperature);
    } else {
      m.linear(stage_prefix("aux", i) + ".head", c.channels(i), 1);
    }
  }

  int prev = c.channels(n);
  for (int b = 1; b < n; ++b) {
    const std::string p = "decoder.block" + std::to_string(b);
    const int in = prev + c.channels(n - b);
    const int outc = c.decoder_channels[b - 1];
    m.add(p + ".conv1.weight", 9 * in, outc, ParamKind::weight);
    m.batch_norm(p + ".bn1", outc);
    m.add(p + ".conv2.weight", 9 * outc, outc, ParamKind::weight);
    m.batch_norm(p + ".bn2", outc);
    prev = outc;
  }
  m.add("decoder.head.weight", prev, 1, ParamKind::weight);
  m.add("decoder.head.bias", 1, 1, ParamKind::logit_prior);
  return m.out;
}

inline long trainable_count(const Manifest& manifest) {
  long total = 0;
  for (const auto& p : manifest) {
    if (p.trainable()) total += p.count();
  }
  return total;
}

/// Named parameter store. Paths are hierarchical (`vision.stage2.fusion.attn1.q_proj.weight`);
/// iteration follows manifest order.
template <class T>
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(Manifest manifest) : manifest_(std::move(manifest)) {
    for (std::size_t i = 0; i < manifest_.size(); ++i) {
      const auto& spec = manifest_[i];
      if (!index_.emplace(spec.path, i).second) {
        throw ConfigError("duplicate parameter path " + spec.path);
      }
      values_.push_back(Matrix<T>::Zero(spec.rows, spec.cols));
    }
  }

  const Manifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.size(); }
  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  const Matrix<T>& at(const std::string& path) const { return values_[slot(path)]; }
  Matrix<T>& at(const std::string& path) { return values_[slot(path)]; }
  const Matrix<T>& value(std::size_t i) const { return values_[i]; }
  Matrix<T>& value(std::size_t i) { return values_[i]; }
  const ParamSpec& spec(const std::string& path) const { return manifest_[slot(path)]; }

  long trainable_count() const { return crossvlt::trainable_count(manifest_); }

  bool all_finite() const {
    for (const auto& v : values_) {
      if (!v.allFinite()) return false;
    }
    return true;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out(manifest_);
    for (std::size_t i = 0; i < values_.size(); ++i) out.value(i) = values_[i].template cast<U>();
    return out;
  }

  bool operator==(const ModelParams& o) const {
    if (manifest_ != o.manifest_) return false;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (values_[i] != o.values_[i]) return false;
    }
    return true;
  }

 private:
  std::size_t slot(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw UsageError("unknown parameter '" + path + "'");
    return it->second;
  }

  Manifest manifest_;
  std::map<std::string, std::size_t> index_;
  std::vector<Matrix<T>> values_;
};

/// Sine-cosine positional table for a side x side grid, rows in raster
/// order. The first half of the channels encodes y, the second half x; each
/// half is split into sines and cosines over geometric frequencies.
inline Matrix<double> sincos_2d(int side, int dim) {
  Matrix<double> out = Matrix<double>::Zero(static_cast<Eigen::Index>(side) * side, dim);
  const int quarter = dim / 4;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const auto row = static_cast<Eigen::Index>(y) * side + x;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        out(row, k) = std::sin(y * omega);
        out(row, quarter + k) = std::cos(y * omega);
        out(row, 2 * quarter + k) = std::sin(x * omega);
        out(row, 3 * quarter + k) = std::cos(x * omega);
      }
    }
  return out;
}

/// Deterministic initialisation: weights ~ normal(0, 0.02) truncated at two
/// standard deviations, biases and norm offsets zero, norm gains one,
/// log-temperatures log(0.07), batch-norm running stats (0, 1), vision
/// positional table sincos_2d, mask-head bias at the kMaskPrior logit.
template <class T = double>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<T> params(build_manifest(config));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&] {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    return z * kInitStd;
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& spec = params.manifest()[i];
    auto& v = params.value(i);
    switch (spec.kind) {
      case ParamKind::weight:
        for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<T>(trunc_normal());
        break;
      case ParamKind::norm_gain:
      case ParamKind::running_var:
        v.setOnes();
        break;
      case ParamKind::temperature:
        v.setConstant(static_cast<T>(kInitLogTau));
        break;
      case ParamKind::logit_prior:
        v.setConstant(static_cast<T>(std::log(kMaskPrior / (1.0 - kMaskPrior))));
        break;
      case ParamKind::position_2d:
        v = sincos_2d(static_cast<int>(std::lround(std::sqrt(spec.rows))), spec.cols).template cast<T>();
        break;
      default:
        v.setZero();
    }
  }
  return params;
}

}  // namespace crossvlt
