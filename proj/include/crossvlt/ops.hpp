#pragma once

// Differentiable building blocks on a Tape. Activations are (rows, channels)
// with `batch` samples stacked along rows; spatial maps are row-major
// (y, x) within each sample.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "crossvlt/tensor.hpp"

namespace crossvlt::ops {

namespace detail {

inline void check_shape(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

inline std::string dims(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <class T>
void require_finite(const Matrix<T>& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

inline double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add",
                         detail::dims(a.rows(), a.cols()) + " vs " +
                             detail::dims(b.rows(), b.cols()));
  Matrix<T> out = a.value() + b.value();
  return a.tape->push(std::move(out), any_needs_grad({a, b}),
                      [a, b](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        if (t.needs_grad(a)) t.grad(a) += g;
                        if (t.needs_grad(b)) t.grad(b) += g;
                      });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape->push(std::move(out), any_needs_grad({a}),
                      [a, s](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        t.grad(a) += g * s;
                      });
}

/// (B*N, C) + (N, C) tiled over the batch.
template <class T>
Var<T> add_tiled(Var<T> x, Var<T> tile) {
  require_same_tape(x, tile);
  const auto n = tile.rows();
  detail::check_shape(n > 0 && x.rows() % n == 0 && x.cols() == tile.cols(),
                         "add_tiled", "tile does not divide input");
  Matrix<T> out = x.value();
  const auto reps = x.rows() / n;
  for (Eigen::Index r = 0; r < reps; ++r) out.middleRows(r * n, n) += tile.value();
  return x.tape->push(
      std::move(out), any_needs_grad({x, tile}),
      [x, tile, n, reps](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        if (t.needs_grad(x)) t.grad(x) += g;
        if (t.needs_grad(tile)) {
          auto& gt = t.grad(tile);
          for (Eigen::Index r = 0; r < reps; ++r) gt += g.middleRows(r * n, n);
        }
      });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  detail::check_shape(a.cols() == b.rows(), "matmul",
                         detail::dims(a.rows(), a.cols()) + " x " +
                             detail::dims(b.rows(), b.cols()));
  Matrix<T> out = a.value() * b.value();
  return a.tape->push(std::move(out), any_needs_grad({a, b}),
                      [a, b](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        if (t.needs_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
                        if (t.needs_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
                      });
}

/// x * weight + bias, weight (in, out), bias (1, out) or absent.
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias) {
  require_same_tape(x, weight);
  detail::check_shape(x.cols() == weight.rows(), "linear",
                         "input " + detail::dims(x.rows(), x.cols()) +
                             " weight " + detail::dims(weight.rows(), weight.cols()));
  Matrix<T> out(x.rows(), weight.cols());
  out.noalias() = x.value() * weight.value();
  Var<T> b{};
  if (bias) {
    b = *bias;
    detail::check_shape(b.rows() == 1 && b.cols() == weight.cols(), "linear",
                           "bias shape");
    out.rowwise() += b.value().row(0);
  }
  return x.tape->push(
      std::move(out), any_needs_grad({x, weight, b}),
      [x, weight, b](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        if (t.needs_grad(x)) t.grad(x).noalias() += g * weight.value().transpose();
        if (t.needs_grad(weight)) t.grad(weight).noalias() += x.value().transpose() * g;
        if (b.valid() && t.needs_grad(b)) t.grad(b) += g.colwise().sum();
      });
}

template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  Matrix<T> out = x.value().unaryExpr([](T v) { return gelu_scalar(v); });
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [x](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        const auto& in = x.value();
                        const T inv_sqrt_2pi = T(0.3989422804014327);
                        Matrix<T> d = in.unaryExpr([&](T v) {
                          const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
                          return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                        });
                        t.grad(x).array() += g.array() * d.array();
                      });
}

/// When set, relu appends the sign of every input entry (1 when > 0). Lets
/// finite-difference checks tell when a perturbation crossed a kink.
inline thread_local std::vector<std::uint8_t>* relu_sign_trace = nullptr;

template <class T>
Var<T> relu(Var<T> x) {
  Matrix<T> out = x.value().cwiseMax(T(0));
  if (relu_sign_trace) {
    for (Eigen::Index i = 0; i < out.size(); ++i) relu_sign_trace->push_back(out.data()[i] > T(0));
  }
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [x](Tape<T>& t, const Matrix<T>& y, const Matrix<T>& g) {
                        t.grad(x).array() += (y.array() > T(0)).select(g.array(), T(0));
                      });
}

/// Row-wise layer normalization with per-channel gain and bias (1, C).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& in = x.value();
  const auto rows = in.rows();
  const auto cols = in.cols();
  detail::check_shape(gain.cols() == cols && bias.cols() == cols, "layer_norm",
                         "gain/bias width");
  auto xhat = std::make_shared<Matrix<T>>(rows, cols);
  auto rstd = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = in.row(r).mean();
    const T var = (in.row(r).array() - mean).square().mean();
    const T s = T(1) / std::sqrt(var + eps);
    (*rstd)(r) = s;
    xhat->row(r) = (in.row(r).array() - mean) * s;
  }
  Matrix<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->push(
      std::move(out), any_needs_grad({x, gain, bias}),
      [x, gain, bias, xhat, rstd](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        if (t.needs_grad(gain)) t.grad(gain) += (g.array() * xhat->array()).colwise().sum().matrix();
        if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
        if (!t.needs_grad(x)) return;
        Matrix<T> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
        auto& gx = t.grad(x);
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const T m1 = dxhat.row(r).mean();
          const T m2 = (dxhat.row(r).array() * xhat->row(r).array()).mean();
          gx.row(r).array() +=
              (*rstd)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
        }
      });
}

/// Per-channel statistics produced by a training-mode batch norm.
template <class T>
struct BatchStats {
  Matrix<T> mean;      // (1, C)
  Matrix<T> variance;  // (1, C), unbiased
};

/// Batch normalization over all rows (samples and positions) per channel.
/// Training mode normalizes with batch statistics and reports them through
/// `stats`; eval mode uses the supplied running estimates.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gain, Var<T> bias, bool training,
                  const Matrix<T>& running_mean, const Matrix<T>& running_var,
                  BatchStats<T>* stats, T eps = T(1e-5)) {
  const auto& in = x.value();
  const auto rows = in.rows();
  const auto cols = in.cols();
  detail::check_shape(gain.cols() == cols && bias.cols() == cols, "batch_norm",
                         "gain/bias width");
  Matrix<T> mean(1, cols);
  Matrix<T> var(1, cols);
  if (training) {
    detail::check_shape(rows >= 1, "batch_norm", "empty batch");
    mean = in.colwise().mean();
    var = (in.rowwise() - mean.row(0)).array().square().colwise().mean().matrix();
    if (stats) {
      stats->mean = mean;
      stats->variance = rows > 1 ? Matrix<T>(var * (T(rows) / T(rows - 1))) : var;
    }
  } else {
    mean = running_mean;
    var = running_var;
  }
  auto rstd = std::make_shared<Matrix<T>>((var.array() + eps).rsqrt().matrix());
  auto xhat = std::make_shared<Matrix<T>>(
      ((in.rowwise() - mean.row(0)).array().rowwise() * rstd->row(0).array()).matrix());
  Matrix<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->push(
      std::move(out), any_needs_grad({x, gain, bias}),
      [x, gain, bias, xhat, rstd, training](Tape<T>& t, const Matrix<T>&,
                                            const Matrix<T>& g) {
        if (t.needs_grad(gain)) t.grad(gain) += (g.array() * xhat->array()).colwise().sum().matrix();
        if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
        if (!t.needs_grad(x)) return;
        Matrix<T> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
        auto& gx = t.grad(x);
        if (!training) {
          gx.array() += dxhat.array().rowwise() * rstd->row(0).array();
          return;
        }
        const Matrix<T> m1 = dxhat.colwise().mean();
        const Matrix<T> m2 = (dxhat.array() * xhat->array()).colwise().mean().matrix();
        gx.array() += ((dxhat.rowwise() - m1.row(0)).array() -
                       xhat->array().rowwise() * m2.row(0).array())
                          .rowwise() *
                      rstd->row(0).array();
      });
}

/// Receives per-(sample, head) attention weight matrices, index b*heads + h.
template <class T>
struct AttentionProbe {
  std::vector<Matrix<T>> weights;
};

/// Multi-head scaled dot-product attention over already-projected q, k, v.
/// q: (B*Nq, C), k and v: (B*Nk, C). `padding` (optional, length B*Nk) masks
/// keys with -inf before the softmax.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, int batch,
                 const KeyPadding* padding = nullptr,
                 AttentionProbe<T>* probe = nullptr) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const auto C = Q.cols();
  detail::check_shape(batch > 0 && heads > 0 && C % heads == 0, "attention",
                         "heads must divide model dim");
  detail::check_shape(K.cols() == C && V.cols() == C && K.rows() == V.rows(),
                         "attention", "q/k/v widths");
  detail::check_shape(Q.rows() % batch == 0 && K.rows() % batch == 0, "attention",
                         "batch does not divide rows");
  detail::require_finite(Q, "attention");
  detail::require_finite(K, "attention");
  detail::require_finite(V, "attention");
  const auto nq = Q.rows() / batch;
  const auto nk = K.rows() / batch;
  const auto dk = C / heads;
  if (padding) {
    detail::check_shape(static_cast<Eigen::Index>(padding->size()) == K.rows(),
                           "attention", "padding length");
    for (int b = 0; b < batch; ++b) {
      bool any_open = false;
      for (Eigen::Index j = 0; j < nk; ++j) any_open |= (*padding)[b * nk + j] == 0;
      if (!any_open) throw NumericError("attention: every key is masked");
    }
  }
  const T scale = T(1) / std::sqrt(T(dk));
  auto probs = std::make_shared<std::vector<Matrix<T>>>(
      static_cast<std::size_t>(batch * heads));
  Matrix<T> out(Q.rows(), C);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      Matrix<T> s(nq, nk);
      s.noalias() = Q.block(b * nq, h * dk, nq, dk) *
                    K.block(b * nk, h * dk, nk, dk).transpose();
      s *= scale;
      if (padding) {
        for (Eigen::Index j = 0; j < nk; ++j) {
          if ((*padding)[b * nk + j]) s.col(j).setConstant(-std::numeric_limits<T>::infinity());
        }
      }
      for (Eigen::Index r = 0; r < nq; ++r) {
        const T m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * nq, h * dk, nq, dk).noalias() = s * V.block(b * nk, h * dk, nk, dk);
      (*probs)[b * heads + h] = std::move(s);
    }
  }
  if (probe) probe->weights = *probs;
  return q.tape->push(
      std::move(out), any_needs_grad({q, k, v}),
      [q, k, v, heads, batch, nq, nk, dk, scale, probs](Tape<T>& t, const Matrix<T>&,
                                                         const Matrix<T>& g) {
        const auto& Q = q.value();
        const auto& K = k.value();
        const auto& V = v.value();
        const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
        Matrix<T>* dQ = gq ? &t.grad(q) : nullptr;
        Matrix<T>* dK = gk ? &t.grad(k) : nullptr;
        Matrix<T>* dV = gv ? &t.grad(v) : nullptr;
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const Matrix<T>& P = (*probs)[b * heads + h];
            const auto dO = g.block(b * nq, h * dk, nq, dk);
            if (dV) dV->block(b * nk, h * dk, nk, dk).noalias() += P.transpose() * dO;
            if (!dQ && !dK) continue;
            Matrix<T> dP(nq, nk);
            dP.noalias() = dO * V.block(b * nk, h * dk, nk, dk).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs =
                (dP.array() * P.array()).rowwise().sum();
            Matrix<T> dS = (P.array() * (dP.array().colwise() - rs.array())).matrix();
            dS *= scale;
            if (dQ) dQ->block(b * nq, h * dk, nq, dk).noalias() += dS * K.block(b * nk, h * dk, nk, dk);
            if (dK) dK->block(b * nk, h * dk, nk, dk).noalias() += dS.transpose() * Q.block(b * nq, h * dk, nq, dk);
          }
        }
      });
}

/// 2x2 neighbour gather: (B*H*W, C) -> (B*(H/2)*(W/2), 4C). The four
/// neighbours of output cell (y, x) are concatenated in row-major order:
/// (2y, 2x), (2y, 2x+1), (2y+1, 2x), (2y+1, 2x+1).
template <class T>
Var<T> space_to_depth(Var<T> x, int batch, int height, int width) {
  const auto& in = x.value();
  const auto C = in.cols();
  detail::check_shape(height % 2 == 0 && width % 2 == 0 &&
                             in.rows() == Eigen::Index(batch) * height * width,
                         "space_to_depth", "input must be an even grid");
  const int oh = height / 2, ow = width / 2;
  auto src_row = [=](int b, int y, int xx, int q) {
    const int sy = 2 * y + q / 2, sx = 2 * xx + q % 2;
    return (Eigen::Index(b) * height + sy) * width + sx;
  };
  Matrix<T> out(Eigen::Index(batch) * oh * ow, 4 * C);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const auto r = (Eigen::Index(b) * oh + y) * ow + xx;
        for (int q = 0; q < 4; ++q) out.row(r).segment(q * C, C) = in.row(src_row(b, y, xx, q));
      }
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [=](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        auto& gx = t.grad(x);
                        for (int b = 0; b < batch; ++b)
                          for (int y = 0; y < oh; ++y)
                            for (int xx = 0; xx < ow; ++xx) {
                              const auto r = (Eigen::Index(b) * oh + y) * ow + xx;
                              for (int q = 0; q < 4; ++q)
                                gx.row(src_row(b, y, xx, q)) += g.row(r).segment(q * C, C);
                            }
                      });
}

namespace detail {

struct Tap {
  int lo, hi;
  double w_lo, w_hi;
};

/// Half-pixel-centre bilinear taps (edge clamped) for an integer upscale.
inline std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in * factor));
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    const double w = src - lo;
    taps[o] = {lo, hi, 1.0 - w, w};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor, (B*H*W, C) -> (B*fH*fW, C).
template <class T>
Var<T> upsample_bilinear(Var<T> x, int batch, int height, int width, int factor) {
  const auto& in = x.value();
  detail::check_shape(in.rows() == Eigen::Index(batch) * height * width && factor >= 1,
                         "upsample_bilinear", "input grid");
  auto ty = std::make_shared<std::vector<detail::Tap>>(detail::bilinear_taps(height, factor));
  auto tx = std::make_shared<std::vector<detail::Tap>>(detail::bilinear_taps(width, factor));
  const int oh = height * factor, ow = width * factor;
  Matrix<T> out(Eigen::Index(batch) * oh * ow, in.cols());
  auto in_row = [=](int b, int y, int xx) { return (Eigen::Index(b) * height + y) * width + xx; };
  auto out_row = [=](int b, int y, int xx) { return (Eigen::Index(b) * oh + y) * ow + xx; };
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < oh; ++y) {
      const auto& a = (*ty)[y];
      for (int xx = 0; xx < ow; ++xx) {
        const auto& c = (*tx)[xx];
        out.row(out_row(b, y, xx)) =
            T(a.w_lo * c.w_lo) * in.row(in_row(b, a.lo, c.lo)) +
            T(a.w_lo * c.w_hi) * in.row(in_row(b, a.lo, c.hi)) +
            T(a.w_hi * c.w_lo) * in.row(in_row(b, a.hi, c.lo)) +
            T(a.w_hi * c.w_hi) * in.row(in_row(b, a.hi, c.hi));
      }
    }
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [=](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        auto& gx = t.grad(x);
                        for (int b = 0; b < batch; ++b)
                          for (int y = 0; y < oh; ++y) {
                            const auto& a = (*ty)[y];
                            for (int xx = 0; xx < ow; ++xx) {
                              const auto& c = (*tx)[xx];
                              const auto gr = g.row(out_row(b, y, xx));
                              gx.row(in_row(b, a.lo, c.lo)) += T(a.w_lo * c.w_lo) * gr;
                              gx.row(in_row(b, a.lo, c.hi)) += T(a.w_lo * c.w_hi) * gr;
                              gx.row(in_row(b, a.hi, c.lo)) += T(a.w_hi * c.w_lo) * gr;
                              gx.row(in_row(b, a.hi, c.hi)) += T(a.w_hi * c.w_hi) * gr;
                            }
                          }
                      });
}

/// Channel concatenation of two maps with equal row counts.
template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows(), "concat_cols", "row counts differ");
  const auto ca = a.cols(), cb = b.cols();
  Matrix<T> out(a.rows(), ca + cb);
  out.leftCols(ca) = a.value();
  out.rightCols(cb) = b.value();
  return a.tape->push(std::move(out), any_needs_grad({a, b}),
                      [a, b, ca, cb](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        if (t.needs_grad(a)) t.grad(a) += g.leftCols(ca);
                        if (t.needs_grad(b)) t.grad(b) += g.rightCols(cb);
                      });
}

/// 3x3 convolution, stride 1, zero padding 1. weight is (9*Cin, Cout) with
/// row index (ky*3 + kx)*Cin + ci.
template <class T>
Var<T> conv3x3(Var<T> x, Var<T> weight, int batch, int height, int width) {
  require_same_tape(x, weight);
  const auto& in = x.value();
  const auto cin = in.cols();
  detail::check_shape(in.rows() == Eigen::Index(batch) * height * width, "conv3x3",
                         "input grid");
  detail::check_shape(weight.rows() == 9 * cin, "conv3x3", "weight rows != 9*Cin");
  auto col = std::make_shared<Matrix<T>>(Matrix<T>::Zero(in.rows(), 9 * cin));
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx) {
        const auto r = (Eigen::Index(b) * height + y) * width + xx;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= height) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= width) continue;
            col->row(r).segment((ky * 3 + kx) * cin, cin) =
                in.row((Eigen::Index(b) * height + sy) * width + sx);
          }
        }
      }
  Matrix<T> out(in.rows(), weight.cols());
  out.noalias() = (*col) * weight.value();
  return x.tape->push(
      std::move(out), any_needs_grad({x, weight}),
      [=](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        if (t.needs_grad(weight)) t.grad(weight).noalias() += col->transpose() * g;
        if (!t.needs_grad(x)) return;
        Matrix<T> dcol(g.rows(), 9 * cin);
        dcol.noalias() = g * weight.value().transpose();
        auto& gx = t.grad(x);
        for (int b = 0; b < batch; ++b)
          for (int y = 0; y < height; ++y)
            for (int xx = 0; xx < width; ++xx) {
              const auto r = (Eigen::Index(b) * height + y) * width + xx;
              for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= height) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int sx = xx + kx - 1;
                  if (sx < 0 || sx >= width) continue;
                  gx.row((Eigen::Index(b) * height + sy) * width + sx) +=
                      dcol.row(r).segment((ky * 3 + kx) * cin, cin);
                }
              }
            }
      });
}

/// Gathers rows by index; gradients scatter-add back.
template <class T>
Var<T> take_rows(Var<T> x, std::vector<Eigen::Index> index) {
  const auto& in = x.value();
  Matrix<T> out(static_cast<Eigen::Index>(index.size()), in.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check_shape(index[i] >= 0 && index[i] < in.rows(), "take_rows",
                           "row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = in.row(index[i]);
  }
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [x, index = std::move(index)](Tape<T>& t, const Matrix<T>&,
                                                    const Matrix<T>& g) {
                        auto& gx = t.grad(x);
                        for (std::size_t i = 0; i < index.size(); ++i)
                          gx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                      });
}

/// Table lookup; ids must lie in [0, table rows).
template <class T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
  const auto vocab = table.rows();
  std::vector<Eigen::Index> index;
  index.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
    index.push_back(id);
  }
  return take_rows(table, std::move(index));
}

/// Mean over all entries, as a 1x1 node.
template <class T>
Var<T> mean(Var<T> x) {
  const auto n = x.value().size();
  detail::check_shape(n > 0, "mean", "empty input");
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().sum() / T(n);
  return x.tape->push(std::move(out), any_needs_grad({x}),
                      [x, n](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                        t.grad(x).array() += g(0, 0) / T(n);
                      });
}

/// Per-pixel binary cross-entropy on logits with probabilities clamped to
/// [1e-7, 1 - 1e-7]. Returns a map of the same shape as `logits`.
template <class T>
Var<T> bce_pixel_losses(Var<T> logits, const std::vector<std::uint8_t>& targets) {
  const auto& z = logits.value();
  detail::check_shape(static_cast<Eigen::Index>(targets.size()) == z.size(),
                         "bce_pixel_losses", "target count " + std::to_string(targets.size()) +
                                                 " vs logits " + std::to_string(z.size()));
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  Matrix<T> out(z.rows(), z.cols());
  auto slope = std::make_shared<Matrix<T>>(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double p = detail::sigmoid(static_cast<double>(z.data()[i]));
    const double pc = std::clamp(p, lo, hi);
    const bool y = targets[static_cast<std::size_t>(i)] != 0;
    out.data()[i] = static_cast<T>(y ? -std::log(pc) : -std::log1p(-pc));
    slope->data()[i] = (p > lo && p < hi) ? static_cast<T>(p - (y ? 1.0 : 0.0)) : T(0);
  }
  return logits.tape->push(std::move(out), any_needs_grad({logits}),
                           [logits, slope](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                             t.grad(logits).array() += g.array() * slope->array();
                           });
}

/// Cosine similarity with epsilon-stabilised norms: <a,b> / ((|a|+eps)(|b|+eps)).
inline constexpr double kCosineEps = 1e-8;

/// Text-to-pixel sigmoid alignment loss per pixel. z_vision (B*N, D'),
/// z_lang (B, D'), labels length B*N (nonzero = relevant), log_tau (1, 1).
/// Pixel j of sample b scores s = cos(z_vision_j, z_lang_b) / exp(log_tau);
/// relevant pixels pay -log sigmoid(s), irrelevant pay -log(1 - sigmoid(s)).
template <class T>
Var<T> alignment_pixel_losses(Var<T> z_vision, Var<T> z_lang,
                              const std::vector<std::uint8_t>& labels, Var<T> log_tau,
                              int batch, Matrix<T>* similarity_out = nullptr) {
  const auto& zv = z_vision.value();
  const auto& zl = z_lang.value();
  detail::check_shape(zl.rows() == batch && zv.cols() == zl.cols() && zv.rows() % batch == 0,
                         "alignment_pixel_losses", "projection shapes");
  detail::check_shape(static_cast<Eigen::Index>(labels.size()) == zv.rows(),
                         "alignment_pixel_losses", "label count");
  detail::check_shape(log_tau.value().size() == 1, "alignment_pixel_losses",
                         "log_tau must be scalar");
  const auto n = zv.rows() / batch;
  const double inv_tau = std::exp(-static_cast<double>(log_tau.value()(0, 0)));
  Matrix<T> out(zv.rows(), 1);
  if (similarity_out) similarity_out->resize(zv.rows(), 1);
  for (int b = 0; b < batch; ++b) {
    const double nl = static_cast<double>(zl.row(b).norm());
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto r = b * n + j;
      const double na = static_cast<double>(zv.row(r).norm());
      const double dot = static_cast<double>(zv.row(r).dot(zl.row(b)));
      const double cos = dot / ((na + kCosineEps) * (nl + kCosineEps));
      const double s = cos * inv_tau;
      if (similarity_out) (*similarity_out)(r, 0) = static_cast<T>(cos);
      out(r, 0) = static_cast<T>(labels[r] ? detail::stable_softplus(-s)
                                           : detail::stable_softplus(s));
    }
  }
  return z_vision.tape->push(
      std::move(out), any_needs_grad({z_vision, z_lang, log_tau}),
      [=](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        const auto& zv = z_vision.value();
        const auto& zl = z_lang.value();
        const bool gv = t.needs_grad(z_vision), gl = t.needs_grad(z_lang),
                   gt = t.needs_grad(log_tau);
        double dtheta = 0;
        for (int b = 0; b < batch; ++b) {
          const double nl = static_cast<double>(zl.row(b).norm());
          for (Eigen::Index j = 0; j < n; ++j) {
            const auto r = b * n + j;
            const double na = static_cast<double>(zv.row(r).norm());
            const double dot = static_cast<double>(zv.row(r).dot(zl.row(b)));
            const double da = na + kCosineEps, dl = nl + kCosineEps;
            const double cos = dot / (da * dl);
            const double s = cos * inv_tau;
            const double dlds =
                static_cast<double>(g(r, 0)) * (detail::sigmoid(s) - (labels[r] ? 1.0 : 0.0));
            dtheta += dlds * -s;
            const double dldc = dlds * inv_tau;
            if (gv) {
              auto row = t.grad(z_vision).row(r);
              row += T(dldc / (da * dl)) * zl.row(b);
              if (na > 0) row -= T(dldc * dot / (na * da * da * dl)) * zv.row(r);
            }
            if (gl) {
              auto row = t.grad(z_lang).row(b);
              row += T(dldc / (da * dl)) * zv.row(r);
              if (nl > 0) row -= T(dldc * dot / (nl * dl * dl * da)) * zl.row(b);
            }
          }
        }
        if (gt) t.grad(log_tau)(0, 0) += static_cast<T>(dtheta);
      });
}

}  // namespace crossvlt::ops
