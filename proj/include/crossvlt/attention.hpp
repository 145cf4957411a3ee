#pragma once

#include <optional>
#include <string>

#include "crossvlt/ops.hpp"
#include "crossvlt/params.hpp"

namespace crossvlt {

/// Binds named parameters of a ModelParams onto a tape.
template <class T>
struct Scope {
  Tape<T>* tape = nullptr;
  const ModelParams<T>* params = nullptr;

  Var<T> param(const std::string& path) const { return tape->parameter(path, params->at(path)); }
  bool has(const std::string& path) const { return params->contains(path); }
};

/// Affine layer `<prefix>.weight` / `<prefix>.bias`.
template <class T>
Var<T> affine(const Scope<T>& s, const std::string& prefix, Var<T> x) {
  return ops::linear(x, s.param(prefix + ".weight"), std::optional<Var<T>>(s.param(prefix + ".bias")));
}

/// Multi-head attention whose projections live under `prefix`
/// (q_proj, k_proj, v_proj, o_proj). Keys and values may have a different
/// width (kv_dim) from the queries.
struct AttentionSpec {
  std::string prefix;
  int model_dim = 0;
  int num_heads = 1;
  int kv_dim = 0;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const {
    if (model_dim <= 0 || num_heads <= 0 || model_dim % num_heads != 0) {
      throw ConfigError(prefix + ": model_dim must be a positive multiple of num_heads");
    }
    if (kv_dim <= 0) throw ConfigError(prefix + ": kv_dim must be positive");
  }
};

/// Two affine layers with GELU between; hidden width is ffn_ratio * model_dim
/// unless overridden.
struct FFNSpec {
  std::string prefix;
  int model_dim = 0;
  int hidden_dim = 0;

  void validate() const {
    if (model_dim <= 0 || hidden_dim < 1) throw ConfigError(prefix + ": bad FFN dims");
  }
};

/// softmax(Q K^T / sqrt(d_k) + mask) V per head, heads concatenated, then the
/// output projection. No residual and no normalization.
template <class T>
Var<T> mhca(const Scope<T>& s, const AttentionSpec& spec, Var<T> query, Var<T> kv, int batch,
            const KeyPadding* key_padding = nullptr, ops::AttentionProbe<T>* probe = nullptr) {
  spec.validate();
  if (query.cols() != spec.model_dim || kv.cols() != spec.kv_dim) {
    throw ShapeError(spec.prefix + ": query width " + std::to_string(query.cols()) + " / kv width " +
                     std::to_string(kv.cols()) + " do not match spec (" +
                     std::to_string(spec.model_dim) + ", " + std::to_string(spec.kv_dim) + ")");
  }
  const Var<T> q = affine(s, spec.prefix + ".q_proj", query);
  const Var<T> k = affine(s, spec.prefix + ".k_proj", kv);
  const Var<T> v = affine(s, spec.prefix + ".v_proj", kv);
  const Var<T> a = ops::attention(q, k, v, spec.num_heads, batch, key_padding, probe);
  return affine(s, spec.prefix + ".o_proj", a);
}

template <class T>
Var<T> ffn(const Scope<T>& s, const FFNSpec& spec, Var<T> x) {
  spec.validate();
  if (x.cols() != spec.model_dim) throw ShapeError(spec.prefix + ": input width mismatch");
  ops::detail::require_finite(x.value(), "ffn");
  return affine(s, spec.prefix + ".fc2", ops::gelu(affine(s, spec.prefix + ".fc1", x)));
}

/// Self-attention transformer layer with pre-normalization (vision blocks):
/// x + MHSA(LN(x)), then + FFN(LN(.)).
template <class T>
Var<T> pre_norm_layer(const Scope<T>& s, const std::string& prefix, Var<T> x, int heads, int ffn_ratio,
                      int batch, const KeyPadding* padding = nullptr) {
  const int dim = static_cast<int>(x.cols());
  const AttentionSpec attn{prefix + ".attn", dim, heads, dim};
  const FFNSpec mlp{prefix + ".ffn", dim, dim * ffn_ratio};
  auto ln = [&](const char* name, Var<T> v) {
    return ops::layer_norm(v, s.param(prefix + "." + name + ".gain"), s.param(prefix + "." + name + ".bias"));
  };
  const Var<T> n1 = ln("norm1", x);
  x = ops::add(x, mhca(s, attn, n1, n1, batch, padding));
  return ops::add(x, ffn(s, mlp, ln("norm2", x)));
}

/// Self-attention transformer layer with post-normalization (language
/// layers): LN(x + MHSA(x)), then LN(. + FFN(.)).
template <class T>
Var<T> post_norm_layer(const Scope<T>& s, const std::string& prefix, Var<T> x, int heads, int ffn_ratio,
                       int batch, const KeyPadding* padding = nullptr) {
  const int dim = static_cast<int>(x.cols());
  const AttentionSpec attn{prefix + ".attn", dim, heads, dim};
  const FFNSpec mlp{prefix + ".ffn", dim, dim * ffn_ratio};
  auto ln = [&](const char* name, Var<T> v) {
    return ops::layer_norm(v, s.param(prefix + "." + name + ".gain"), s.param(prefix + "." + name + ".bias"));
  };
  x = ln("norm1", ops::add(x, mhca(s, attn, x, x, batch, padding)));
  return ln("norm2", ops::add(x, ffn(s, mlp, x)));
}

/// Standalone parameter set for one attention block, for use outside a full
/// model (tests, tools).
template <class T>
ModelParams<T> make_attention_params(const AttentionSpec& spec) {
  detail::ManifestBuilder m;
  m.attention(spec.prefix, spec.model_dim, spec.kv_dim);
  return ModelParams<T>(m.out);
}

template <class T>
ModelParams<T> make_ffn_params(const FFNSpec& spec) {
  detail::ManifestBuilder m;
  m.ffn(spec.prefix, spec.model_dim, spec.hidden_dim);
  return ModelParams<T>(m.out);
}

/// Inference-only mhca on plain matrices.
template <class T>
Matrix<T> mhca(const ModelParams<T>& params, const AttentionSpec& spec, const Matrix<T>& query,
               const Matrix<T>& kv, const KeyPadding* key_padding = nullptr,
               ops::AttentionProbe<T>* probe = nullptr) {
  Tape<T> tape(false);
  const Scope<T> s{&tape, &params};
  return mhca(s, spec, tape.constant(query), tape.constant(kv), 1, key_padding, probe).value();
}

template <class T>
Matrix<T> ffn(const ModelParams<T>& params, const FFNSpec& spec, const Matrix<T>& x) {
  Tape<T> tape(false);
  const Scope<T> s{&tape, &params};
  return ffn(s, spec, tape.constant(x)).value();
}

}  // namespace crossvlt
