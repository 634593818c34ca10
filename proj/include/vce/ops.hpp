#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/autograd.hpp"
#include "vce/blas.hpp"
#include "vce/tensor.hpp"

namespace vce::ops {

using ag::Var;

// ---------------------------------------------------------------------------
// im2col / col2im

struct ConvGeometry {
  int channels, height, width;
  int kernel, stride, pad;

  int out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h() * out_w(); }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        T* dst = col + (static_cast<std::size_t>(c * g.kernel + ki) * g.kernel + kj) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst + y * ow, dst + (y + 1) * ow, T{0});
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride - g.pad + kj;
            dst[y * ow + x] = (ix >= 0 && ix < g.width) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const T* src =
            col + (static_cast<std::size_t>(c * g.kernel + ki) * g.kernel + kj) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[y * ow + x];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convolutions. Weights follow the OIHW layout; transposed convolution
// weights are Cin×Cout×k×k.

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: weight " + to_string(ws) + " incompatible with input " +
                     to_string(xs));
  }
  const ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, pad};
  if (g.out_h() <= 0 || g.out_w() <= 0) throw ShapeError("conv2d: input smaller than kernel");
  const int oc = ws.n, k = g.rows(), m = g.cols();
  Tensor<T> out(Shape{xs.n, oc, g.out_h(), g.out_w()});
  std::vector<T> col(static_cast<std::size_t>(k) * m);
  const bool has_bias = bias.defined();
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.value().plane(n, 0), g, col.data());
    T* o = out.plane(n, 0);
    if (has_bias) {
      for (int c = 0; c < oc; ++c) std::fill(o + c * m, o + (c + 1) * m, bias.value()[c]);
    }
    blas::gemm(false, false, oc, m, k, T{1}, weight.value().data(), k, col.data(), m,
               has_bias ? T{1} : T{0}, o, m);
  }
  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return ag::make_result<T>(std::move(out), parents, [g, oc, k, m, has_bias](ag::Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = ag::parent_grad(self, 0);
    Tensor<T>* gw = ag::parent_grad(self, 1);
    Tensor<T>* gb = has_bias ? ag::parent_grad(self, 2) : nullptr;
    std::vector<T> col(static_cast<std::size_t>(k) * m);
    const int batch = xv.shape().n;
    for (int n = 0; n < batch; ++n) {
      const T* go = self.grad.plane(n, 0);
      if (gw) {
        im2col(xv.plane(n, 0), g, col.data());
        blas::gemm(false, true, oc, k, m, T{1}, go, m, col.data(), m, T{1}, gw->data(), k);
      }
      if (gb) {
        for (int c = 0; c < oc; ++c) {
          T s{0};
          for (int i = 0; i < m; ++i) s += go[c * m + i];
          (*gb)[c] += s;
        }
      }
      if (gx) {
        blas::gemm(true, false, k, m, oc, T{1}, wv.data(), k, go, m, T{0}, col.data(), m);
        col2im(col.data(), g, gx->plane(n, 0));
      }
    }
  });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride,
                        int pad, int output_pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.h != ws.w) {
    throw ShapeError("conv_transpose2d: weight " + to_string(ws) + " incompatible with input " +
                     to_string(xs));
  }
  if (output_pad >= stride) throw ShapeError("conv_transpose2d: output_pad must be < stride");
  const int cout = ws.c, kk = ws.h;
  const int oh = (xs.h - 1) * stride - 2 * pad + kk + output_pad;
  const int ow = (xs.w - 1) * stride - 2 * pad + kk + output_pad;
  // Geometry of the equivalent forward convolution mapping output -> input.
  const ConvGeometry g{cout, oh, ow, kk, stride, pad};
  const int k = g.rows(), m = xs.h * xs.w, cin = xs.c;
  Tensor<T> out(Shape{xs.n, cout, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(k) * m);
  const bool has_bias = bias.defined();
  for (int n = 0; n < xs.n; ++n) {
    blas::gemm(true, false, k, m, cin, T{1}, weight.value().data(), k, x.value().plane(n, 0), m,
               T{0}, col.data(), m);
    col2im(col.data(), g, out.plane(n, 0));
    if (has_bias) {
      for (int c = 0; c < cout; ++c) {
        T* o = out.plane(n, c);
        for (std::size_t i = 0; i < out.shape().plane(); ++i) o[i] += bias.value()[c];
      }
    }
  }
  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return ag::make_result<T>(std::move(out), parents, [g, k, m, cin, cout, has_bias](ag::Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = ag::parent_grad(self, 0);
    Tensor<T>* gw = ag::parent_grad(self, 1);
    Tensor<T>* gb = has_bias ? ag::parent_grad(self, 2) : nullptr;
    std::vector<T> col(static_cast<std::size_t>(k) * m);
    const int batch = xv.shape().n;
    for (int n = 0; n < batch; ++n) {
      im2col(self.grad.plane(n, 0), g, col.data());
      if (gx) {
        blas::gemm(false, false, cin, m, k, T{1}, wv.data(), k, col.data(), m, T{1},
                   gx->plane(n, 0), m);
      }
      if (gw) {
        blas::gemm(false, true, cin, k, m, T{1}, xv.plane(n, 0), m, col.data(), m, T{1},
                   gw->data(), k);
      }
      if (gb) {
        for (int c = 0; c < cout; ++c) {
          const T* go = self.grad.plane(n, c);
          T s{0};
          for (std::size_t i = 0; i < self.grad.shape().plane(); ++i) s += go[i];
          (*gb)[c] += s;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <class T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

namespace detail {

// Normalises groups of `count` elements; group g covers (n, c) planes selected
// by `planes_of(g)`. Shared by batch and instance normalisation.
template <class T>
Var<T> normalize_groups(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        bool per_instance, NormStats<T>* stats_out) {
  const Shape s = x.shape();
  const int groups = per_instance ? s.n * s.c : s.c;
  const std::size_t plane = s.plane();
  const std::size_t count = per_instance ? plane : plane * s.n;
  if (count < 1) throw ShapeError("normalize: empty group");

  auto for_each_plane = [&](int g, auto&& fn) {
    if (per_instance) {
      fn(g / s.c, g % s.c);
    } else {
      for (int n = 0; n < s.n; ++n) fn(n, g);
    }
  };

  NormStats<T> st{std::vector<T>(groups), std::vector<T>(groups)};
  const auto& xv = x.value();
  for (int g = 0; g < groups; ++g) {
    double sum = 0.0;
    for_each_plane(g, [&](int n, int c) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    });
    const double mu = sum / static_cast<double>(count);
    double sq = 0.0;
    for_each_plane(g, [&](int n, int c) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
    });
    const double var = sq / static_cast<double>(count);
    st.mean[g] = static_cast<T>(mu);
    st.inv_std[g] = static_cast<T>(1.0 / std::sqrt(var + eps));
  }

  const bool affine = gamma.defined();
  Tensor<T> xhat(s);
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const int g = per_instance ? n * s.c + c : c;
      const T* p = xv.plane(n, c);
      T* h = xhat.plane(n, c);
      T* o = out.plane(n, c);
      const T ga = affine ? gamma.value()[c] : T{1};
      const T be = affine ? beta.value()[c] : T{0};
      for (std::size_t i = 0; i < plane; ++i) {
        h[i] = (p[i] - st.mean[g]) * st.inv_std[g];
        o[i] = ga * h[i] + be;
      }
    }
  }
  if (stats_out) *stats_out = st;

  std::vector<Var<T>> parents{x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return ag::make_result<T>(
      std::move(out), parents,
      [xhat = std::move(xhat), inv = st.inv_std, per_instance, affine, groups,
       count](ag::Node<T>& self) {
        const Shape s = self.value.shape();
        const std::size_t plane = s.plane();
        const auto& gamma_v = affine ? self.parents[1]->value : self.value;
        Tensor<T>* gx = ag::parent_grad(self, 0);
        Tensor<T>* gg = affine ? ag::parent_grad(self, 1) : nullptr;
        Tensor<T>* gbeta = affine ? ag::parent_grad(self, 2) : nullptr;
        std::vector<double> sum_dy(groups, 0.0), sum_dy_xhat(groups, 0.0);
        std::vector<double> ch_dy(s.c, 0.0), ch_dy_xhat(s.c, 0.0);
        for (int n = 0; n < s.n; ++n) {
          for (int c = 0; c < s.c; ++c) {
            const int g = per_instance ? n * s.c + c : c;
            const T* dy = self.grad.plane(n, c);
            const T* h = xhat.plane(n, c);
            double a = 0.0, b = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              a += dy[i];
              b += dy[i] * h[i];
            }
            sum_dy[g] += a;
            sum_dy_xhat[g] += b;
            ch_dy[c] += a;
            ch_dy_xhat[c] += b;
          }
        }
        if (gg) {
          for (int c = 0; c < s.c; ++c) {
            (*gg)[c] += static_cast<T>(ch_dy_xhat[c]);
            (*gbeta)[c] += static_cast<T>(ch_dy[c]);
          }
        }
        if (!gx) return;
        const double inv_count = 1.0 / static_cast<double>(count);
        for (int n = 0; n < s.n; ++n) {
          for (int c = 0; c < s.c; ++c) {
            const int g = per_instance ? n * s.c + c : c;
            const double ga = affine ? static_cast<double>(gamma_v[c]) : 1.0;
            const double scale = ga * inv[g];
            const double mdy = sum_dy[g] * inv_count;
            const double mdyh = sum_dy_xhat[g] * inv_count;
            const T* dy = self.grad.plane(n, c);
            const T* h = xhat.plane(n, c);
            T* d = gx->plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              d[i] += static_cast<T>(scale * (dy[i] - mdy - h[i] * mdyh));
            }
          }
        }
      });
}

}  // namespace detail

/// Batch normalisation with batch statistics (training mode).
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        NormStats<T>* stats = nullptr) {
  return detail::normalize_groups<T>(x, gamma, beta, eps, false, stats);
}

/// Batch normalisation with fixed statistics (inference mode); per-channel affine.
template <class T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  const Shape s = x.shape();
  std::vector<T> inv(s.c), mean(s.c);
  for (int c = 0; c < s.c; ++c) {
    inv[c] = T{1} / std::sqrt(running_var[c] + eps);
    mean[c] = running_mean[c];
  }
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* o = out.plane(n, c);
      const T ga = gamma.value()[c], be = beta.value()[c];
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] = ga * (p[i] - mean[c]) * inv[c] + be;
    }
  }
  return ag::make_result<T>(std::move(out), {x, gamma, beta}, [inv, mean](ag::Node<T>& self) {
    const Shape s = self.value.shape();
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    Tensor<T>* gx = ag::parent_grad(self, 0);
    Tensor<T>* gg = ag::parent_grad(self, 1);
    Tensor<T>* gb = ag::parent_grad(self, 2);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const T* dy = self.grad.plane(n, c);
        const T* p = xv.plane(n, c);
        T sdy{0}, sdyh{0};
        for (std::size_t i = 0; i < s.plane(); ++i) {
          sdy += dy[i];
          sdyh += dy[i] * (p[i] - mean[c]) * inv[c];
        }
        if (gx) {
          T* d = gx->plane(n, c);
          const T k = gv[c] * inv[c];
          for (std::size_t i = 0; i < s.plane(); ++i) d[i] += dy[i] * k;
        }
        if (gg) (*gg)[c] += sdyh;
        if (gb) (*gb)[c] += sdy;
      }
    }
  });
}

/// Per-sample, per-channel normalisation. `gamma`/`beta` may be undefined (no affine).
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  return detail::normalize_groups<T>(x, gamma, beta, eps, true, nullptr);
}

// ---------------------------------------------------------------------------
// Pointwise

namespace detail {

// y = f(x) elementwise, dy/dx expressed through (x, y).
template <class T, class F, class D>
Var<T> pointwise(const Var<T>& x, F f, D df) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return ag::make_result<T>(std::move(out), {x}, [df](ag::Node<T>& self) {
    Tensor<T>* gx = ag::parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
    }
  });
}

}  // namespace detail

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::pointwise(
      x, [](T v) { return v > T{0} || v != v ? v : T{0}; },  // NaN passes through
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::pointwise(
      x, [slope](T v) { return v > T{0} || v != v ? v : slope * v; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::pointwise(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

/// a * x + b elementwise.
template <class T>
Var<T> affine(const Var<T>& x, T a, T b) {
  return detail::pointwise(
      x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  expect_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return ag::make_result<T>(std::move(out), {a, b}, [](ag::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor<T>* g = ag::parent_grad(self, p)) {
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

template <class T>
Var<T> max_pool2d(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("max_pool2d: odd spatial extent");
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  std::vector<std::uint32_t> argmax(os.numel());
  const auto& xv = x.value();
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = xv.plane(n, c);
      const std::size_t base = static_cast<std::size_t>(n * s.c + c) * s.plane();
      for (int y = 0; y < os.h; ++y) {
        for (int x2 = 0; x2 < os.w; ++x2, ++o) {
          std::size_t best = static_cast<std::size_t>(2 * y) * s.w + 2 * x2;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = static_cast<std::size_t>(2 * y + dy) * s.w + 2 * x2 + dx;
              if (p[idx] > p[best] || p[idx] != p[idx]) best = idx;
            }
          }
          out[o] = p[best];
          argmax[o] = static_cast<std::uint32_t>(base + best);
        }
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x}, [argmax = std::move(argmax)](ag::Node<T>& self) {
    Tensor<T>* gx = ag::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < argmax.size(); ++i) (*gx)[argmax[i]] += self.grad[i];
  });
}

/// Nearest-neighbour 2× upsampling.
template <class T>
Var<T> upsample2x(const Var<T>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* q = out.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        for (int x2 = 0; x2 < os.w; ++x2) q[y * os.w + x2] = p[(y / 2) * s.w + x2 / 2];
      }
    }
  }
  return ag::make_result<T>(std::move(out), {x}, [](ag::Node<T>& self) {
    Tensor<T>* gx = ag::parent_grad(self, 0);
    if (!gx) return;
    const Shape os = self.value.shape();
    for (int n = 0; n < os.n; ++n) {
      for (int c = 0; c < os.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = gx->plane(n, c);
        const int w = os.w / 2;
        for (int y = 0; y < os.h; ++y) {
          for (int x2 = 0; x2 < os.w; ++x2) d[(y / 2) * w + x2 / 2] += g[y * os.w + x2];
        }
      }
    }
  });
}

/// Channel concatenation [a, b].
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + to_string(sa) + " vs " + to_string(sb));
  }
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> out(os);
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().plane(n, 0), pa, out.plane(n, 0));
    std::copy_n(b.value().plane(n, 0), pb, out.plane(n, sa.c));
  }
  return ag::make_result<T>(std::move(out), {a, b}, [pa, pb, ca = sa.c](ag::Node<T>& self) {
    const int batch = self.value.shape().n;
    Tensor<T>* ga = ag::parent_grad(self, 0);
    Tensor<T>* gb = ag::parent_grad(self, 1);
    for (int n = 0; n < batch; ++n) {
      if (ga) {
        const T* g = self.grad.plane(n, 0);
        T* d = ga->plane(n, 0);
        for (std::size_t i = 0; i < pa; ++i) d[i] += g[i];
      }
      if (gb) {
        const T* g = self.grad.plane(n, ca);
        T* d = gb->plane(n, 0);
        for (std::size_t i = 0; i < pb; ++i) d[i] += g[i];
      }
    }
  });
}

/// Reflection padding ("mirror without repeating the edge").
template <class T>
Var<T> reflection_pad2d(const Var<T>& x, int pad) {
  const Shape s = x.shape();
  if (pad >= s.h || pad >= s.w) throw ShapeError("reflection_pad2d: pad exceeds extent");
  const Shape os{s.n, s.c, s.h + 2 * pad, s.w + 2 * pad};
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  std::vector<std::uint32_t> src(os.plane());
  for (int y = 0; y < os.h; ++y) {
    for (int x2 = 0; x2 < os.w; ++x2) {
      src[static_cast<std::size_t>(y) * os.w + x2] =
          static_cast<std::uint32_t>(reflect(y - pad, s.h) * s.w + reflect(x2 - pad, s.w));
    }
  }
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* q = out.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) q[i] = p[src[i]];
    }
  }
  return ag::make_result<T>(std::move(out), {x}, [src = std::move(src)](ag::Node<T>& self) {
    Tensor<T>* gx = ag::parent_grad(self, 0);
    if (!gx) return;
    const Shape os = self.value.shape();
    for (int n = 0; n < os.n; ++n) {
      for (int c = 0; c < os.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = gx->plane(n, c);
        for (std::size_t i = 0; i < src.size(); ++i) d[src[i]] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions used by the losses. All reduce by the mean over every element.

template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  expect_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  const std::size_t n = a.value().numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return ag::make_result<T>(Tensor<T>::scalar(static_cast<T>(s / n)), {a, b},
                            [n](ag::Node<T>& self) {
                              const auto& av = self.parents[0]->value;
                              const auto& bv = self.parents[1]->value;
                              const T g = self.grad[0] / static_cast<T>(n);
                              Tensor<T>* ga = ag::parent_grad(self, 0);
                              Tensor<T>* gb = ag::parent_grad(self, 1);
                              for (std::size_t i = 0; i < n; ++i) {
                                const T d = av[i] - bv[i];
                                const T sgn = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
                                if (ga) (*ga)[i] += g * sgn;
                                if (gb) (*gb)[i] -= g * sgn;
                              }
                            });
}

/// mean((a - target)^2) for a constant target.
template <class T>
Var<T> mean_sq_to(const Var<T>& a, T target) {
  const std::size_t n = a.value().numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - target;
    s += d * d;
  }
  return ag::make_result<T>(Tensor<T>::scalar(static_cast<T>(s / n)), {a},
                            [n, target](ag::Node<T>& self) {
                              Tensor<T>* ga = ag::parent_grad(self, 0);
                              if (!ga) return;
                              const auto& av = self.parents[0]->value;
                              const T g = T{2} * self.grad[0] / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g * (av[i] - target);
                            });
}

/// Smallest probability admitted by the binary cross-entropy.
template <class T>
constexpr T bce_clamp() {
  if constexpr (std::is_same_v<T, float>) {
    return T(1e-7);
  } else {
    return T(1e-12);
  }
}

/// mean(-[t log p + (1-t) log(1-p)]) for probabilities `p` and a constant target.
template <class T>
Var<T> bce_to(const Var<T>& p, T target) {
  const std::size_t n = p.value().numel();
  const T lo = bce_clamp<T>(), hi = T{1} - bce_clamp<T>();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p.value()[i], lo, hi);
    s -= target * std::log(q) + (1.0 - target) * std::log(1.0 - q);
  }
  return ag::make_result<T>(Tensor<T>::scalar(static_cast<T>(s / n)), {p},
                            [n, target, lo, hi](ag::Node<T>& self) {
                              Tensor<T>* gp = ag::parent_grad(self, 0);
                              if (!gp) return;
                              const auto& pv = self.parents[0]->value;
                              const T g = self.grad[0] / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) {
                                const T v = pv[i];
                                if (v < lo || v > hi) continue;
                                (*gp)[i] += g * (-target / v + (T{1} - target) / (T{1} - v));
                              }
                            });
}

/// Σ w_i * s_i over scalar terms.
template <class T>
Var<T> weighted_sum(const std::vector<std::pair<Var<T>, T>>& terms) {
  double s = 0.0;
  std::vector<Var<T>> parents;
  std::vector<T> weights;
  for (const auto& [v, w] : terms) {
    if (v.value().numel() != 1) throw ShapeError("weighted_sum: non-scalar term");
    s += static_cast<double>(w) * v.item();
    parents.push_back(v);
    weights.push_back(w);
  }
  return ag::make_result<T>(Tensor<T>::scalar(static_cast<T>(s)), parents,
                            [weights](ag::Node<T>& self) {
                              for (std::size_t i = 0; i < weights.size(); ++i) {
                                if (Tensor<T>* g = ag::parent_grad(self, i)) {
                                  (*g)[0] += weights[i] * self.grad[0];
                                }
                              }
                            });
}

}  // namespace vce::ops
