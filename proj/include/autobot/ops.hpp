#pragma once

// Differentiable primitives recorded on a Tape.
//
// Every forward loop accumulates reductions in a fixed sequential order
// (input channel, then kernel row, then kernel column), so zeroing an input
// channel and deleting it produce bit-identical outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "autobot/autodiff.hpp"
#include "autobot/error.hpp"
#include "autobot/tensor.hpp"

namespace autobot::ops {

namespace detail {

inline void require(bool cond, const std::string& op, const std::string& what) {
  if (!cond) throw ShapeError(op + ": " + what);
}

template <typename T>
void require_finite(const std::string& op, const BasicTensor<T>& t) {
  if (!t.all_finite()) throw ValueError(op + ": non-finite input");
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

// Range of output positions whose input coordinate (o * stride - pad + k)
// lies inside [0, in).
inline std::pair<long, long> valid_range(long out, long in, long stride, long pad,
                                         long k) {
  long lo = 0;
  while (lo < out && lo * stride - pad + k < 0) ++lo;
  long hi = out;
  while (hi > lo && (hi - 1) * stride - pad + k >= in) --hi;
  return {lo, hi};
}

}  // namespace detail

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

/// x: [N, C, H, W], weight: [O, C, KH, KW], bias: [O] or invalid Var.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, Conv2dAttrs attrs) {
  const std::string op = "conv2d";
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  detail::require(attrs.stride >= 1, op, "stride must be >= 1");
  detail::require(xv.rank() == 4, op, "input must be rank 4, got " + shape_str(xv.shape()));
  detail::require(wv.rank() == 4, op, "weight must be rank 4, got " + shape_str(wv.shape()));
  detail::require(xv.dim(1) == wv.dim(1), op,
                  "input channels " + std::to_string(xv.dim(1)) +
                      " != weight input channels " + std::to_string(wv.dim(1)));
  const bool has_bias = bias.valid();
  if (has_bias) {
    const auto& bv = tape.value(bias);
    detail::require(bv.rank() == 1 && bv.dim(0) == wv.dim(0), op,
                    "bias shape " + shape_str(bv.shape()) + " != (" +
                        std::to_string(wv.dim(0)) + ")");
  }
  detail::require_finite(op, xv);

  const long N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const long O = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  const long S = attrs.stride, P = attrs.padding;
  const long OH = conv_out_size(H, KH, S, P), OW = conv_out_size(W, KW, S, P);
  detail::require(OH > 0 && OW > 0, op,
                  "kernel " + shape_str(wv.shape()) + " larger than padded input " +
                      shape_str(xv.shape()));

  BasicTensor<T> out({std::size_t(N), std::size_t(O), std::size_t(OH), std::size_t(OW)});
  const T* X = xv.ptr();
  const T* Wt = wv.ptr();
  const T* B = has_bias ? tape.value(bias).ptr() : nullptr;
  T* Y = out.ptr();

  for (long n = 0; n < N; ++n) {
    for (long o = 0; o < O; ++o) {
      T* y = Y + (n * O + o) * OH * OW;
      std::fill(y, y + OH * OW, B ? B[o] : T{0});
      for (long c = 0; c < C; ++c) {
        const T* xc = X + (n * C + c) * H * W;
        for (long ky = 0; ky < KH; ++ky) {
          auto [oy0, oy1] = detail::valid_range(OH, H, S, P, ky);
          for (long kx = 0; kx < KW; ++kx) {
            const T w = Wt[((o * C + c) * KH + ky) * KW + kx];
            auto [ox0, ox1] = detail::valid_range(OW, W, S, P, kx);
            for (long oy = oy0; oy < oy1; ++oy) {
              const long base = (oy * S - P + ky) * W - P + kx;
              T* yrow = y + oy * OW;
              for (long ox = ox0; ox < ox1; ++ox) yrow[ox] += w * xc[base + ox * S];
            }
          }
        }
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      op, std::move(out), inputs,
      [=](const BasicTensor<T>& go, Tape<T>& t) {
        const T* G = go.ptr();
        const T* Xp = t.value(x).ptr();
        const T* Wp = t.value(weight).ptr();
        auto* gx = t.grad_buffer(x);
        auto* gw = t.grad_buffer(weight);
        auto* gb = has_bias ? t.grad_buffer(bias) : nullptr;
        for (long n = 0; n < N; ++n) {
          for (long o = 0; o < O; ++o) {
            const T* g = G + (n * O + o) * OH * OW;
            if (gb) {
              T acc{0};
              for (long i = 0; i < OH * OW; ++i) acc += g[i];
              (*gb)[o] += acc;
            }
            for (long c = 0; c < C; ++c) {
              const T* xc = Xp + (n * C + c) * H * W;
              T* gxc = gx ? gx->ptr() + (n * C + c) * H * W : nullptr;
              for (long ky = 0; ky < KH; ++ky) {
                auto [oy0, oy1] = detail::valid_range(OH, H, S, P, ky);
                for (long kx = 0; kx < KW; ++kx) {
                  const long widx = ((o * C + c) * KH + ky) * KW + kx;
                  const T w = Wp[widx];
                  auto [ox0, ox1] = detail::valid_range(OW, W, S, P, kx);
                  T acc{0};
                  for (long oy = oy0; oy < oy1; ++oy) {
                    const long base = (oy * S - P + ky) * W - P + kx;
                    const T* grow = g + oy * OW;
                    if (gw) {
                      for (long ox = ox0; ox < ox1; ++ox) acc += grow[ox] * xc[base + ox * S];
                    }
                    if (gxc) {
                      for (long ox = ox0; ox < ox1; ++ox) gxc[base + ox * S] += w * grow[ox];
                    }
                  }
                  if (gw) (*gw)[widx] += acc;
                }
              }
            }
          }
        }
      });
}

/// x: [N, I], weight: [O, I], bias: [O] or invalid Var.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const std::string op = "linear";
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  detail::require(xv.rank() == 2, op, "input must be rank 2, got " + shape_str(xv.shape()));
  detail::require(wv.rank() == 2, op, "weight must be rank 2, got " + shape_str(wv.shape()));
  detail::require(xv.dim(1) == wv.dim(1), op,
                  "input features " + std::to_string(xv.dim(1)) + " != weight columns " +
                      std::to_string(wv.dim(1)));
  const bool has_bias = bias.valid();
  if (has_bias) {
    const auto& bv = tape.value(bias);
    detail::require(bv.rank() == 1 && bv.dim(0) == wv.dim(0), op,
                    "bias shape " + shape_str(bv.shape()) + " != (" +
                        std::to_string(wv.dim(0)) + ")");
  }
  detail::require_finite(op, xv);

  const std::size_t N = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  BasicTensor<T> out({N, O});
  const T* X = xv.ptr();
  const T* Wt = wv.ptr();
  const T* B = has_bias ? tape.value(bias).ptr() : nullptr;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      T acc = B ? B[o] : T{0};
      const T* w = Wt + o * I;
      const T* xr = X + n * I;
      for (std::size_t i = 0; i < I; ++i) acc += w[i] * xr[i];
      out[n * O + o] = acc;
    }
  }
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(op, std::move(out), inputs,
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       const T* Xp = t.value(x).ptr();
                       const T* Wp = t.value(weight).ptr();
                       auto* gx = t.grad_buffer(x);
                       auto* gw = t.grad_buffer(weight);
                       auto* gb = has_bias ? t.grad_buffer(bias) : nullptr;
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t o = 0; o < O; ++o) {
                           const T g = go[n * O + o];
                           if (gb) (*gb)[o] += g;
                           if (gw) {
                             T* gwr = gw->ptr() + o * I;
                             const T* xr = Xp + n * I;
                             for (std::size_t i = 0; i < I; ++i) gwr[i] += g * xr[i];
                           }
                           if (gx) {
                             T* gxr = gx->ptr() + n * I;
                             const T* wr = Wp + o * I;
                             for (std::size_t i = 0; i < I; ++i) gxr[i] += g * wr[i];
                           }
                         }
                       }
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  detail::require_finite("relu", xv);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return tape.record("relu", std::move(out), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       const auto& xin = t.value(x);
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < go.numel(); ++i) {
                         if (xin[i] > T{0}) (*gx)[i] += go[i];
                       }
                     });
}

struct PoolAttrs {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

/// Max pooling over [N, C, H, W]; padded positions never win. Ties go to the
/// first position in row-major window order.
template <typename T>
Var max_pool2d(Tape<T>& tape, Var x, PoolAttrs attrs) {
  const std::string op = "max_pool2d";
  const auto& xv = tape.value(x);
  detail::require(xv.rank() == 4, op, "input must be rank 4, got " + shape_str(xv.shape()));
  detail::require(attrs.stride >= 1 && attrs.kernel >= 1, op, "kernel and stride must be >= 1");
  detail::require(attrs.padding < attrs.kernel, op, "padding must be smaller than kernel");
  detail::require_finite(op, xv);
  const long N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const long K = attrs.kernel, S = attrs.stride, P = attrs.padding;
  const long OH = conv_out_size(H, K, S, P), OW = conv_out_size(W, K, S, P);
  detail::require(OH > 0 && OW > 0, op, "kernel larger than input " + shape_str(xv.shape()));

  BasicTensor<T> out({std::size_t(N), std::size_t(C), std::size_t(OH), std::size_t(OW)});
  std::vector<std::size_t> argmax(out.numel());
  const T* X = xv.ptr();
  for (long nc = 0; nc < N * C; ++nc) {
    const T* xc = X + nc * H * W;
    for (long oy = 0; oy < OH; ++oy) {
      for (long ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        long best_idx = -1;
        for (long ky = 0; ky < K; ++ky) {
          const long iy = oy * S - P + ky;
          if (iy < 0 || iy >= H) continue;
          for (long kx = 0; kx < K; ++kx) {
            const long ix = ox * S - P + kx;
            if (ix < 0 || ix >= W) continue;
            const T v = xc[iy * W + ix];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = iy * W + ix;
            }
          }
        }
        const long o = (nc * OH + oy) * OW + ox;
        out[o] = best;
        argmax[o] = nc * H * W + best_idx;
      }
    }
  }
  return tape.record(op, std::move(out), {x},
                     [=, argmax = std::move(argmax)](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < go.numel(); ++i) (*gx)[argmax[i]] += go[i];
                     });
}

/// [N, C, H, W] -> [N, C]
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const std::string op = "global_avg_pool";
  const auto& xv = tape.value(x);
  detail::require(xv.rank() == 4, op, "input must be rank 4, got " + shape_str(xv.shape()));
  detail::require_finite(op, xv);
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  BasicTensor<T> out({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc{0};
    const T* p = xv.ptr() + nc * HW;
    for (std::size_t i = 0; i < HW; ++i) acc += p[i];
    out[nc] = acc / static_cast<T>(HW);
  }
  return tape.record(op, std::move(out), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       const T inv = T{1} / static_cast<T>(HW);
                       for (std::size_t nc = 0; nc < N * C; ++nc) {
                         T* p = gx->ptr() + nc * HW;
                         const T g = go[nc] * inv;
                         for (std::size_t i = 0; i < HW; ++i) p[i] += g;
                       }
                     });
}

struct BatchNormAttrs {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel running statistics; updated in place in training mode when
/// non-null.
template <typename T>
struct RunningStats {
  BasicTensor<T>* mean = nullptr;
  BasicTensor<T>* var = nullptr;
};

/// Batch normalization over channel axis 1 of a rank-2 or rank-4 input.
/// Training mode normalizes with biased batch statistics and folds the
/// unbiased variance into the running estimate; inference mode uses the
/// running statistics.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, RunningStats<T> stats,
               BatchNormAttrs attrs) {
  const std::string op = "batch_norm";
  const auto& xv = tape.value(x);
  detail::require(xv.rank() == 2 || xv.rank() == 4, op,
                  "input must be rank 2 or 4, got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = detail::spatial_size(xv.shape());
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  detail::require(gv.numel() == C && bv.numel() == C, op,
                  "affine parameters must have " + std::to_string(C) + " entries");
  detail::require(stats.mean && stats.var, op, "running statistics missing");
  detail::require(stats.mean->numel() == C && stats.var->numel() == C, op,
                  "running statistics must have " + std::to_string(C) + " entries");
  detail::require_finite(op, xv);
  const std::size_t M = N * HW;
  if (attrs.training) detail::require(M > 1, op, "training mode needs more than one value per channel");

  std::vector<T> mean(C), inv_std(C);
  if (attrs.training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.ptr() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / double(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.ptr() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / double(M);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + attrs.eps));
      auto& rm = (*stats.mean)[c];
      auto& rv = (*stats.var)[c];
      rm = static_cast<T>((1.0 - attrs.momentum) * rm + attrs.momentum * mu);
      rv = static_cast<T>((1.0 - attrs.momentum) * rv +
                          attrs.momentum * ss / double(M - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*stats.mean)[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(double((*stats.var)[c]) + attrs.eps));
    }
  }

  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (xv[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = h * gv[c] + bv[c];
      }
    }
  }
  const bool training = attrs.training;
  return tape.record(
      op, std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const BasicTensor<T>& go,
                                                                 Tape<T>& t) {
        const auto& g = t.value(gamma);
        auto* gx = t.grad_buffer(x);
        auto* gg = t.grad_buffer(gamma);
        auto* gbeta = t.grad_buffer(beta);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_dy += go[off + i];
              sum_dy_xhat += double(go[off + i]) * xhat[off + i];
            }
          }
          if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
          if (gbeta) (*gbeta)[c] += static_cast<T>(sum_dy);
          if (!gx) continue;
          const T scale = g[c] * inv_std[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (training) {
                (*gx)[off + i] += static_cast<T>(
                    scale * (go[off + i] - sum_dy / double(M) -
                             xhat[off + i] * sum_dy_xhat / double(M)));
              } else {
                (*gx)[off + i] += scale * go[off + i];
              }
            }
          }
        }
      });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require(av.shape() == bv.shape(), "add",
                  "operand shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                      " differ");
  detail::require_finite("add", av);
  detail::require_finite("add", bv);
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return tape.record("add", std::move(out), {a, b},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       if (auto* ga = t.grad_buffer(a)) detail::add_into(*ga, go);
                       if (auto* gb = t.grad_buffer(b)) detail::add_into(*gb, go);
                     });
}

/// Concatenation along the channel axis (axis 1).
template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs) {
  const std::string op = "concat";
  detail::require(!xs.empty(), op, "needs at least one input");
  const auto& first = tape.value(xs[0]);
  detail::require(first.rank() >= 2, op, "inputs must have a channel axis");
  std::size_t channels = 0;
  std::vector<std::size_t> offsets;
  for (Var v : xs) {
    const auto& t = tape.value(v);
    detail::require_finite(op, t);
    bool ok = t.rank() == first.rank() && t.dim(0) == first.dim(0);
    for (std::size_t d = 2; ok && d < t.rank(); ++d) ok = t.dim(d) == first.dim(d);
    detail::require(ok, op,
                    "shape " + shape_str(t.shape()) + " incompatible with " +
                        shape_str(first.shape()) + " outside the channel axis");
    offsets.push_back(channels);
    channels += t.dim(1);
  }
  Shape out_shape = first.shape();
  out_shape[1] = channels;
  const std::size_t N = first.dim(0), HW = detail::spatial_size(first.shape());
  BasicTensor<T> out(out_shape);
  std::vector<std::size_t> widths;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& t = tape.value(xs[k]);
    const std::size_t c = t.dim(1);
    widths.push_back(c);
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(t.ptr() + n * c * HW, c * HW, out.ptr() + (n * channels + offsets[k]) * HW);
    }
  }
  return tape.record(op, std::move(out), xs,
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       for (std::size_t k = 0; k < xs.size(); ++k) {
                         auto* g = t.grad_buffer(xs[k]);
                         if (!g) continue;
                         const std::size_t c = widths[k];
                         for (std::size_t n = 0; n < N; ++n) {
                           const T* src = go.ptr() + (n * channels + offsets[k]) * HW;
                           T* dst = g->ptr() + n * c * HW;
                           for (std::size_t i = 0; i < c * HW; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

/// Per-channel scale: out[n, c, ...] = lambda[c] * x[n, c, ...].
template <typename T>
Var channel_mul(Tape<T>& tape, Var x, Var lambda) {
  const std::string op = "channel_mul";
  const auto& xv = tape.value(x);
  const auto& lv = tape.value(lambda);
  detail::require(xv.rank() >= 2, op, "input must have a channel axis");
  detail::require(lv.rank() == 1 && lv.dim(0) == xv.dim(1), op,
                  "gate length " + std::to_string(lv.numel()) + " != channel count " +
                      std::to_string(xv.dim(1)));
  detail::require_finite(op, xv);
  detail::require_finite(op, lv);
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = detail::spatial_size(xv.shape());
  BasicTensor<T> out(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) out[off + i] = lv[c] * xv[off + i];
    }
  }
  return tape.record(op, std::move(out), {x, lambda},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       const auto& xin = t.value(x);
                       const auto& lam = t.value(lambda);
                       auto* gx = t.grad_buffer(x);
                       auto* gl = t.grad_buffer(lambda);
                       for (std::size_t c = 0; c < C; ++c) {
                         double acc = 0.0;
                         for (std::size_t n = 0; n < N; ++n) {
                           const std::size_t off = (n * C + c) * HW;
                           for (std::size_t i = 0; i < HW; ++i) {
                             if (gx) (*gx)[off + i] += lam[c] * go[off + i];
                             acc += double(go[off + i]) * xin[off + i];
                           }
                         }
                         if (gl) (*gl)[c] += static_cast<T>(acc);
                       }
                     });
}

/// Row-wise softmax of [N, C].
template <typename T>
Var softmax(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  detail::require(xv.rank() == 2, "softmax", "input must be rank 2, got " + shape_str(xv.shape()));
  detail::require_finite("softmax", xv);
  const std::size_t N = xv.dim(0), C = xv.dim(1);
  BasicTensor<T> out(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = xv.ptr() + n * C;
    const T m = *std::max_element(r, r + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(double(r[c] - m));
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = static_cast<T>(std::exp(double(r[c] - m)) / z);
  }
  BasicTensor<T> y = out;
  return tape.record("softmax", std::move(out), {x},
                     [=, y = std::move(y)](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t n = 0; n < N; ++n) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < C; ++c) dot += double(go[n * C + c]) * y[n * C + c];
                         for (std::size_t c = 0; c < C; ++c) {
                           (*gx)[n * C + c] += static_cast<T>(y[n * C + c] * (go[n * C + c] - dot));
                         }
                       }
                     });
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const std::string op = "cross_entropy";
  const auto& xv = tape.value(logits);
  detail::require(xv.rank() == 2, op, "logits must be rank 2, got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1);
  detail::require(C >= 2, op, "needs at least two classes");
  detail::require(labels.size() == N, op,
                  std::to_string(labels.size()) + " labels for batch of " + std::to_string(N));
  for (int l : labels) {
    if (l < 0 || std::size_t(l) >= C) {
      throw ValueError(op + ": label " + std::to_string(l) + " outside [0, " +
                       std::to_string(C) + ")");
    }
  }
  detail::require_finite(op, xv);
  BasicTensor<T> probs(xv.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = xv.ptr() + n * C;
    const double m = *std::max_element(r, r + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(double(r[c]) - m);
    const double lse = m + std::log(z);
    loss += lse - double(r[labels[n]]);
    for (std::size_t c = 0; c < C; ++c) probs[n * C + c] = static_cast<T>(std::exp(double(r[c]) - lse));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(op, BasicTensor<T>::scalar(static_cast<T>(loss / double(N))), {logits},
                     [=, probs = std::move(probs), lab = std::move(lab)](
                         const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(logits);
                       const T scale = go[0] / static_cast<T>(N);
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t c = 0; c < C; ++c) {
                           T p = probs[n * C + c];
                           if (int(c) == lab[n]) p -= T{1};
                           (*gx)[n * C + c] += scale * p;
                         }
                       }
                     });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  detail::require_finite("sigmoid", xv);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = sigmoid_value(xv[i]);
  BasicTensor<T> y = out;
  return tape.record("sigmoid", std::move(out), {x},
                     [=, y = std::move(y)](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < go.numel(); ++i) {
                         (*gx)[i] += go[i] * y[i] * (T{1} - y[i]);
                       }
                     });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  double acc = 0.0;
  for (auto v : xv.data()) acc += v;
  return tape.record("sum", BasicTensor<T>::scalar(static_cast<T>(acc)), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (auto& v : gx->data()) v += go[0];
                     });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * factor;
  return tape.record("scale", std::move(out), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < go.numel(); ++i) (*gx)[i] += go[i] * factor;
                     });
}

/// Scalar sum(x * weights) against a constant weight tensor.
template <typename T>
Var dot_const(Tape<T>& tape, Var x, const BasicTensor<T>& weights) {
  const auto& xv = tape.value(x);
  detail::require(xv.shape() == weights.shape(), "dot_const",
                  "weights shape " + shape_str(weights.shape()) + " != " + shape_str(xv.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += double(xv[i]) * weights[i];
  return tape.record("dot_const", BasicTensor<T>::scalar(static_cast<T>(acc)), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       auto* gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < weights.numel(); ++i) {
                         (*gx)[i] += go[0] * weights[i];
                       }
                     });
}

template <typename T>
Var identity(Tape<T>& tape, Var x) {
  return tape.record("identity", tape.value(x), {x},
                     [=](const BasicTensor<T>& go, Tape<T>& t) {
                       detail::add_into(*t.grad_buffer(x), go);
                     });
}

}  // namespace autobot::ops
