#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crossvlt/errors.hpp"

namespace crossvlt {

enum class FusionDirection { bidirectional, vision_only };
enum class AlignNorm { per_stage_mean, global_pixel_mean };
/// Which per-stage loss is attached to the encoders at align_stages.
enum class StageLoss { alignment, auxiliary };

/// Architecture hyperparameters. Stage indices are 1-based everywhere in the
/// public surface (stage 1 is the highest resolution).
struct ModelConfig {
  int image_size = 64;
  int patch_size = 4;
  int num_stages = 4;
  std::vector<int> vision_depths{1, 1, 1, 1};
  std::vector<int> vision_channels{32, 64, 128, 256};
  std::vector<int> vision_heads{2, 4, 8, 8};
  std::vector<int> lang_depths{3, 1, 1, 1};
  int lang_dim = 64;
  int lang_heads = 4;
  int vocab_size = 16;
  int max_tokens = 12;
  int align_dim = 32;
  int ffn_ratio = 4;
  std::vector<int> decoder_channels{128, 64, 32};
  double lambda_align = 0.1;
  std::set<int> fusion_stages{1, 2, 3, 4};
  std::set<int> align_stages{1, 2, 3, 4};
  FusionDirection fusion_direction = FusionDirection::bidirectional;
  AlignNorm align_norm = AlignNorm::per_stage_mean;
  StageLoss stage_loss = StageLoss::alignment;
  /// Reserved for windowed self-attention; only 0 (full attention) is supported.
  int attention_window = 0;
  std::uint64_t seed = 0;

  bool fusion_enabled(int stage) const { return fusion_stages.count(stage) != 0; }
  bool align_enabled(int stage) const { return align_stages.count(stage) != 0; }

  /// The language query fusion layer of stage `stage` (>= 2) consumes the
  /// vision output of stage `stage - 1`; it exists only for bidirectional
  /// fusion with that vision stage's fusion enabled.
  bool language_fusion_enabled(int stage) const {
    return stage >= 2 && fusion_direction == FusionDirection::bidirectional &&
           fusion_enabled(stage - 1);
  }

  /// Side length of the stage-`stage` token grid.
  int stage_resolution(int stage) const {
    return image_size / (patch_size << (stage - 1));
  }
  int stage_tokens(int stage) const {
    const int r = stage_resolution(stage);
    return r * r;
  }
  int channels(int stage) const { return vision_channels.at(stage - 1); }
  /// Side length in pixels of the image cell covered by one stage token.
  int stage_cell(int stage) const { return patch_size << (stage - 1); }

  bool operator==(const ModelConfig&) const = default;
};

/// Language layers split 6,2,2,2 with 21 tokens; vision stays at toy size.
inline ModelConfig six_two_language_split(ModelConfig config) {
  config.lang_depths = {6, 2, 2, 2};
  config.max_tokens = 21;
  return config;
}

struct ConfigViolation {
  std::string field;
  std::string rule;

  std::string message() const { return field + ": " + rule; }
  bool operator==(const ConfigViolation&) const = default;
};

inline std::vector<ConfigViolation> validate_config(const ModelConfig& c) {
  std::vector<ConfigViolation> out;
  auto fail = [&](std::string field, std::string rule) {
    out.push_back({std::move(field), std::move(rule)});
  };

  if (c.num_stages != 4) fail("num_stages", "must be 4");
  if (c.image_size <= 0) fail("image_size", "must be positive");
  if (c.patch_size <= 0) fail("patch_size", "must be positive");
  if (c.image_size > 0 && c.patch_size > 0 && c.num_stages >= 1 &&
      c.num_stages <= 16) {
    const long chain = static_cast<long>(c.patch_size) << (c.num_stages - 1);
    if (c.image_size % chain != 0) {
      fail("image_size", "resolution chain not integral");
    }
  }

  auto check_len = [&](const std::vector<int>& v, const char* name,
                       std::size_t want) {
    if (v.size() != want) {
      fail(name, std::string(name) + " length must equal " +
                     std::to_string(want));
      return false;
    }
    return true;
  };
  const auto n = static_cast<std::size_t>(std::max(c.num_stages, 0));
  const bool depths_ok = check_len(c.vision_depths, "vision_depths", n);
  const bool channels_ok = check_len(c.vision_channels, "vision_channels", n);
  const bool heads_ok = check_len(c.vision_heads, "vision_heads", n);
  const bool lang_ok = check_len(c.lang_depths, "lang_depths", n);
  check_len(c.decoder_channels, "decoder_channels", n > 0 ? n - 1 : 0);

  if (depths_ok) {
    for (int d : c.vision_depths) {
      if (d < 0) fail("vision_depths", "entries must be >= 0");
    }
  }
  if (channels_ok && heads_ok) {
    for (std::size_t i = 0; i < n; ++i) {
      const int ch = c.vision_channels[i];
      const int h = c.vision_heads[i];
      if (ch <= 0 || h <= 0) {
        fail("vision_channels", "channels and heads must be positive");
        continue;
      }
      if (ch % h != 0) {
        fail("vision_heads", "stage " + std::to_string(i + 1) +
                                 " channels not divisible by heads");
      }
      // The second fusion attention runs at C_{i+1} with the host stage's heads.
      if (i + 1 < n && c.vision_channels[i + 1] % h != 0) {
        fail("vision_heads", "stage " + std::to_string(i + 2) +
                                 " channels not divisible by stage " +
                                 std::to_string(i + 1) + " heads");
      }
    }
  }
  if (lang_ok) {
    for (int d : c.lang_depths) {
      if (d < 1) fail("lang_depths", "entries must be >= 1");
    }
  }
  if (c.lang_dim <= 0 || c.lang_heads <= 0 || c.lang_dim % c.lang_heads != 0) {
    fail("lang_heads", "lang_dim must be a positive multiple of lang_heads");
  }
  if (c.vocab_size < 3) fail("vocab_size", "must be >= 3");
  if (c.max_tokens < 2) fail("max_tokens", "must be >= 2");
  if (c.align_dim < 1) fail("align_dim", "must be >= 1");
  if (c.ffn_ratio < 1) fail("ffn_ratio", "must be >= 1");
  for (int d : c.decoder_channels) {
    if (d < 1) fail("decoder_channels", "entries must be >= 1");
  }
  if (!(c.lambda_align >= 0.0)) fail("lambda_align", "must be >= 0");
  for (int s : c.fusion_stages) {
    if (s < 1 || s > c.num_stages) fail("fusion_stages", "stage out of range");
  }
  for (int s : c.align_stages) {
    if (s < 1 || s > c.num_stages) fail("align_stages", "stage out of range");
  }
  if (c.attention_window != 0) {
    fail("attention_window", "windowed attention is not implemented");
  }
  return out;
}

inline void require_valid(const ModelConfig& c) {
  const auto violations = validate_config(c);
  if (violations.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& v : violations) msg += " [" + v.message() + "]";
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Flat key-value text format: one `key = value` per line, lists as
// comma-separated values, `#` starts a comment.

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline long parse_long(const std::string& key, const std::string& s) {
  long v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) {
    throw ConfigError(key + ": expected integer, got '" + s + "'");
  }
  return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected number, got '" + s + "'");
  }
}

inline std::vector<int> parse_int_list(const std::string& key,
                                       const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split(s, ',')) {
    out.push_back(static_cast<int>(parse_long(key, item)));
  }
  return out;
}

inline std::string join(const std::vector<int>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::string join(const std::set<int>& v, char sep = ',') {
  return join(std::vector<int>(v.begin(), v.end()), sep);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": missing '='");
    }
    kv[detail::trim(std::string_view(line).substr(0, eq))] =
        detail::trim(std::string_view(line).substr(eq + 1));
  }
  return kv;
}

inline KeyValues parse_key_values(const std::string& text) {
  std::istringstream is(text);
  return parse_key_values(is);
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline KeyValues to_key_values(const ModelConfig& c) {
  KeyValues kv;
  kv["image_size"] = std::to_string(c.image_size);
  kv["patch_size"] = std::to_string(c.patch_size);
  kv["num_stages"] = std::to_string(c.num_stages);
  kv["vision_depths"] = detail::join(c.vision_depths);
  kv["vision_channels"] = detail::join(c.vision_channels);
  kv["vision_heads"] = detail::join(c.vision_heads);
  kv["lang_depths"] = detail::join(c.lang_depths);
  kv["lang_dim"] = std::to_string(c.lang_dim);
  kv["lang_heads"] = std::to_string(c.lang_heads);
  kv["vocab_size"] = std::to_string(c.vocab_size);
  kv["max_tokens"] = std::to_string(c.max_tokens);
  kv["align_dim"] = std::to_string(c.align_dim);
  kv["ffn_ratio"] = std::to_string(c.ffn_ratio);
  kv["decoder_channels"] = detail::join(c.decoder_channels);
  kv["lambda_align"] = detail::format_double(c.lambda_align);
  kv["fusion_stages"] = detail::join(c.fusion_stages);
  kv["align_stages"] = detail::join(c.align_stages);
  kv["fusion_direction"] = c.fusion_direction == FusionDirection::bidirectional
                               ? "bidirectional"
                               : "vision_only";
  kv["align_norm"] = c.align_norm == AlignNorm::per_stage_mean
                         ? "per_stage_mean"
                         : "global_pixel_mean";
  kv["stage_loss"] =
      c.stage_loss == StageLoss::alignment ? "alignment" : "auxiliary";
  kv["attention_window"] = std::to_string(c.attention_window);
  kv["seed"] = std::to_string(c.seed);
  return kv;
}

/// Applies every recognised key in `kv` to `c`. Unknown keys are returned so
/// callers that share one file between several configs can check leftovers.
inline std::vector<std::string> apply_key_values(ModelConfig& c,
                                                 const KeyValues& kv) {
  using namespace detail;
  std::vector<std::string> unknown;
  for (const auto& [key, value] : kv) {
    auto as_int = [&] { return static_cast<int>(parse_long(key, value)); };
    if (key == "image_size") c.image_size = as_int();
    else if (key == "patch_size") c.patch_size = as_int();
    else if (key == "num_stages") c.num_stages = as_int();
    else if (key == "vision_depths") c.vision_depths = parse_int_list(key, value);
    else if (key == "vision_channels") c.vision_channels = parse_int_list(key, value);
    else if (key == "vision_heads") c.vision_heads = parse_int_list(key, value);
    else if (key == "lang_depths") c.lang_depths = parse_int_list(key, value);
    else if (key == "lang_dim") c.lang_dim = as_int();
    else if (key == "lang_heads") c.lang_heads = as_int();
    else if (key == "vocab_size") c.vocab_size = as_int();
    else if (key == "max_tokens") c.max_tokens = as_int();
    else if (key == "align_dim") c.align_dim = as_int();
    else if (key == "ffn_ratio") c.ffn_ratio = as_int();
    else if (key == "decoder_channels") c.decoder_channels = parse_int_list(key, value);
    else if (key == "lambda_align") c.lambda_align = parse_double(key, value);
    else if (key == "fusion_stages") {
      const auto v = parse_int_list(key, value);
      c.fusion_stages = std::set<int>(v.begin(), v.end());
    } else if (key == "align_stages") {
      const auto v = parse_int_list(key, value);
      c.align_stages = std::set<int>(v.begin(), v.end());
    } else if (key == "fusion_direction") {
      if (value == "bidirectional" || value == "bi") {
        c.fusion_direction = FusionDirection::bidirectional;
      } else if (value == "vision_only" || value == "uni") {
        c.fusion_direction = FusionDirection::vision_only;
      } else {
        throw ConfigError("fusion_direction: unknown value '" + value + "'");
      }
    } else if (key == "align_norm") {
      if (value == "per_stage_mean") c.align_norm = AlignNorm::per_stage_mean;
      else if (value == "global_pixel_mean") c.align_norm = AlignNorm::global_pixel_mean;
      else throw ConfigError("align_norm: unknown value '" + value + "'");
    } else if (key == "stage_loss") {
      if (value == "alignment") c.stage_loss = StageLoss::alignment;
      else if (value == "auxiliary") c.stage_loss = StageLoss::auxiliary;
      else throw ConfigError("stage_loss: unknown value '" + value + "'");
    } else if (key == "attention_window") c.attention_window = as_int();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_long(key, value));
    else unknown.push_back(key);
  }
  return unknown;
}

inline ModelConfig model_config_from_key_values(const KeyValues& kv) {
  ModelConfig c;
  const auto unknown = apply_key_values(c, kv);
  if (!unknown.empty()) throw ConfigError("unknown config key '" + unknown.front() + "'");
  return c;
}

inline KeyValues read_key_value_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  return parse_key_values(in);
}

}  // namespace crossvlt
