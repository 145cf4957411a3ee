#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "crossvlt/optim.hpp"
#include "crossvlt/params.hpp"
#include "crossvlt/train_config.hpp"

namespace crossvlt {

using TrainScalar = float;

/// Complete training state.
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ModelParams<TrainScalar> params;
  AdamW optimizer;
  long step = 0;
  int epoch = 0;
  /// Shuffle generator state as written by operator<<.
  std::string rng_state;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'L', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const std::string& what) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("truncated checkpoint reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& what) {
  const auto n = get_le<std::uint64_t>(is, what);
  if (n > (1u << 30)) throw CheckpointError("implausible string length reading " + what);
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated checkpoint reading " + what);
  return s;
}

template <class T>
void put_record(std::ostream& os, const std::string& path, const Matrix<T>& m) {
  put_string(os, path);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(std::is_same_v<T, float> ? DType::f32 : DType::f64));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index k = 0; k < m.size(); ++k) put_le<T>(os, m.data()[k]);
}

struct RawRecord {
  DType dtype = DType::f32;
  std::uint32_t rows = 0, cols = 0;
  std::vector<double> values;
  std::vector<float> values_f32;
};

inline std::pair<std::string, RawRecord> get_record(std::istream& is) {
  std::string path = get_string(is, "record path");
  RawRecord r;
  r.dtype = static_cast<DType>(get_le<std::uint8_t>(is, path));
  r.rows = get_le<std::uint32_t>(is, path);
  r.cols = get_le<std::uint32_t>(is, path);
  const std::size_t n = static_cast<std::size_t>(r.rows) * r.cols;
  if (n > (1u << 28)) throw CheckpointError("implausible record size for " + path);
  if (r.dtype == DType::f32) {
    r.values_f32.resize(n);
    for (auto& v : r.values_f32) v = get_le<float>(is, path);
  } else if (r.dtype == DType::f64) {
    r.values.resize(n);
    for (auto& v : r.values) v = get_le<double>(is, path);
  } else {
    throw CheckpointError("unknown dtype for " + path);
  }
  return {std::move(path), std::move(r)};
}

template <class T>
Matrix<T> to_matrix(const RawRecord& r, const std::string& path) {
  Matrix<T> m(r.rows, r.cols);
  const bool f32 = r.dtype == DType::f32;
  if (f32 != std::is_same_v<T, float>) throw CheckpointError(path + ": unexpected dtype");
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    m.data()[k] = f32 ? static_cast<T>(r.values_f32[static_cast<std::size_t>(k)])
                      : static_cast<T>(r.values[static_cast<std::size_t>(k)]);
  }
  return m;
}

inline std::string config_blob(const ModelConfig& m, const TrainConfig& t) {
  KeyValues kv;
  for (const auto& [k, v] : to_key_values(m)) kv["model." + k] = v;
  for (const auto& [k, v] : to_key_values(t)) kv["train." + k] = v;
  return format_key_values(kv);
}

inline void parse_config_blob(const std::string& blob, ModelConfig& m, TrainConfig& t) {
  KeyValues mk, tk;
  for (const auto& [k, v] : parse_key_values(blob)) {
    if (k.rfind("model.", 0) == 0) mk[k.substr(6)] = v;
    else if (k.rfind("train.", 0) == 0) tk[k.substr(6)] = v;
    else throw CheckpointError("unexpected config key " + k);
  }
  m = model_config_from_key_values(mk);
  if (const auto u = apply_key_values(t, tk); !u.empty()) throw CheckpointError("unknown train key " + u.front());
}

}  // namespace detail

/// Lists differences between an expected manifest and the (path, shape)
/// records found; empty when they agree.
inline std::vector<std::string> manifest_diff(const Manifest& expected,
                                              const std::map<std::string, std::pair<int, int>>& found) {
  std::vector<std::string> diff;
  std::set<std::string> seen;
  for (const auto& s : expected) {
    seen.insert(s.path);
    auto it = found.find(s.path);
    if (it == found.end()) {
      diff.push_back("missing " + s.path);
    } else if (it->second != std::pair<int, int>(s.rows, s.cols)) {
      diff.push_back("shape " + s.path + ": expected " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                     ", found " + std::to_string(it->second.first) + "x" + std::to_string(it->second.second));
    }
  }
  for (const auto& [path, shape] : found) {
    if (!seen.count(path)) diff.push_back("unexpected " + path);
  }
  return diff;
}

/// Header (magic, version, config blob, step, epoch, RNG state), then
/// parameter records in manifest order, then optimizer moment records
/// (`adam.m.<path>`, `adam.v.<path>`). All numbers little-endian.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_string(os, detail::config_blob(ck.model, ck.train));
  detail::put_le<std::int64_t>(os, ck.step);
  detail::put_le<std::int32_t>(os, ck.epoch);
  detail::put_le<std::int64_t>(os, ck.optimizer.steps());
  detail::put_string(os, ck.rng_state);
  const auto& moments_m = ck.optimizer.first_moments();
  const auto& moments_v = ck.optimizer.second_moments();
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.params.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    detail::put_record(os, ck.params.manifest()[i].path, ck.params.value(i));
  }
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(moments_m.size() + moments_v.size()));
  for (const auto& [p, m] : moments_m) detail::put_record(os, "adam.m." + p, m);
  for (const auto& [p, v] : moments_v) detail::put_record(os, "adam.v." + p, v);
  if (!os) throw IoError("write failure on checkpoint " + path);
}

/// Loads and validates a checkpoint. With `expected`, the stored manifest
/// must also match the manifest `expected` implies.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError(path + ": not a checkpoint file");
  }
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": format version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  try {
    detail::parse_config_blob(detail::get_string(is, "config"), ck.model, ck.train);
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": bad config blob: " + e.what());
  }
  ck.step = detail::get_le<std::int64_t>(is, "step");
  ck.epoch = detail::get_le<std::int32_t>(is, "epoch");
  const auto opt_steps = detail::get_le<std::int64_t>(is, "optimizer steps");
  ck.rng_state = detail::get_string(is, "rng state");

  std::map<std::string, detail::RawRecord> params, moments;
  const auto n_params = detail::get_le<std::uint32_t>(is, "record count");
  for (std::uint32_t i = 0; i < n_params; ++i) params.insert(detail::get_record(is));
  const auto n_moments = detail::get_le<std::uint32_t>(is, "moment count");
  for (std::uint32_t i = 0; i < n_moments; ++i) moments.insert(detail::get_record(is));

  std::map<std::string, std::pair<int, int>> found;
  for (const auto& [p, r] : params) found[p] = {static_cast<int>(r.rows), static_cast<int>(r.cols)};
  auto refuse = [&](const std::string& what, const std::vector<std::string>& diff) {
    std::string msg = path + ": " + what;
    for (const auto& d : diff) msg += "\n  " + d;
    throw CheckpointError(msg);
  };
  const Manifest own = build_manifest(ck.model);
  if (auto diff = manifest_diff(own, found); !diff.empty()) refuse("records disagree with stored config", diff);
  if (expected) {
    if (auto diff = manifest_diff(build_manifest(*expected), found); !diff.empty()) {
      refuse("manifest does not match the requested model", diff);
    }
  }

  ck.params = ModelParams<TrainScalar>(own);
  for (std::size_t i = 0; i < own.size(); ++i) {
    ck.params.value(i) = detail::to_matrix<TrainScalar>(params.at(own[i].path), own[i].path);
  }
  ck.optimizer = AdamW(own, AdamWConfig{0.9, 0.999, 1e-8, ck.train.weight_decay});
  for (auto* side : {&ck.optimizer.first_moments(), &ck.optimizer.second_moments()}) {
    const std::string prefix = side == &ck.optimizer.first_moments() ? "adam.m." : "adam.v.";
    for (auto& [p, m] : *side) {
      auto it = moments.find(prefix + p);
      if (it == moments.end()) throw CheckpointError(path + ": missing optimizer record " + prefix + p);
      if (it->second.rows != m.rows() || it->second.cols != m.cols()) {
        throw CheckpointError(path + ": shape mismatch for " + prefix + p);
      }
      m = detail::to_matrix<double>(it->second, prefix + p);
    }
  }
  ck.optimizer.set_steps(opt_steps);
  return ck;
}

}  // namespace crossvlt
