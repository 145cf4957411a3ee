#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crossvlt/core.hpp"

namespace crossvlt {

/// Optimisation settings. Ablation switches (fusion/alignment stages,
/// direction, lambda, stage loss) live in ModelConfig because they change
/// the parameter set.
struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double base_lr = 3e-4;
  double lr_power = 0.9;
  double weight_decay = 0.01;
  double bn_momentum = 0.1;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  /// Per-sample training augmentation: random left-right mirror and random
  /// colour permutation, both re-rendered exactly.
  bool augment_mirror = true;
  bool augment_recolor = false;

  bool operator==(const TrainConfig&) const = default;
};

inline std::vector<ConfigViolation> validate_train_config(const TrainConfig& t) {
  std::vector<ConfigViolation> v;
  if (t.epochs < 1) v.push_back({"epochs", "must be >= 1"});
  if (t.batch_size < 1) v.push_back({"batch_size", "must be >= 1"});
  if (!(t.base_lr > 0)) v.push_back({"base_lr", "must be > 0"});
  if (!(t.lr_power >= 0)) v.push_back({"lr_power", "must be >= 0"});
  if (!(t.weight_decay >= 0)) v.push_back({"weight_decay", "must be >= 0"});
  if (!(t.bn_momentum > 0 && t.bn_momentum <= 1)) v.push_back({"bn_momentum", "must lie in (0, 1]"});
  return v;
}

inline void require_valid(const TrainConfig& t) {
  const auto violations = validate_train_config(t);
  if (violations.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& v : violations) msg += " [" + v.message() + "]";
  throw ConfigError(msg);
}

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError(key + ": expected 0/1, got '" + v + "'");
}

}  // namespace detail

inline KeyValues to_key_values(const TrainConfig& t) {
  KeyValues kv;
  kv["epochs"] = std::to_string(t.epochs);
  kv["batch_size"] = std::to_string(t.batch_size);
  kv["base_lr"] = detail::format_double(t.base_lr);
  kv["lr_power"] = detail::format_double(t.lr_power);
  kv["weight_decay"] = detail::format_double(t.weight_decay);
  kv["bn_momentum"] = detail::format_double(t.bn_momentum);
  kv["init_seed"] = std::to_string(t.init_seed);
  kv["shuffle_seed"] = std::to_string(t.shuffle_seed);
  kv["augment_mirror"] = t.augment_mirror ? "1" : "0";
  kv["augment_recolor"] = t.augment_recolor ? "1" : "0";
  return kv;
}

inline std::vector<std::string> apply_key_values(TrainConfig& t, const KeyValues& kv) {
  using namespace detail;
  std::vector<std::string> unknown;
  for (const auto& [key, value] : kv) {
    if (key == "epochs") t.epochs = static_cast<int>(parse_long(key, value));
    else if (key == "batch_size") t.batch_size = static_cast<int>(parse_long(key, value));
    else if (key == "base_lr") t.base_lr = parse_double(key, value);
    else if (key == "lr_power") t.lr_power = parse_double(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_double(key, value);
    else if (key == "bn_momentum") t.bn_momentum = parse_double(key, value);
    else if (key == "init_seed") t.init_seed = static_cast<std::uint64_t>(parse_long(key, value));
    else if (key == "shuffle_seed") t.shuffle_seed = static_cast<std::uint64_t>(parse_long(key, value));
    else if (key == "augment_mirror") t.augment_mirror = parse_bool(key, value);
    else if (key == "augment_recolor") t.augment_recolor = parse_bool(key, value);
    else unknown.push_back(key);
  }
  return unknown;
}

/// Applies one shared key-value file to both configs; keys neither knows
/// are an error.
inline void apply_config_file(const KeyValues& kv, ModelConfig& model, TrainConfig& train) {
  const auto left = apply_key_values(model, kv);
  KeyValues rest;
  for (const auto& k : left) rest[k] = kv.at(k);
  const auto unknown = apply_key_values(train, rest);
  if (!unknown.empty()) throw ConfigError("unknown config key '" + unknown.front() + "'");
}

}  // namespace crossvlt
