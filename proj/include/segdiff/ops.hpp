#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "segdiff/gemm.hpp"
#include "segdiff/tensor.hpp"
#include "segdiff/thread_pool.hpp"

namespace segdiff {

namespace detail {

template <class T>
bool any_requires(std::initializer_list<Tensor<T>> ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

template <class T, class Fn>
void attach(Tensor<T>& out, std::vector<Tensor<T>> inputs, Fn&& backprop) {
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& in : inputs)
      if (in.requires_grad()) need = true;
  }
  if (!need) return;
  auto node = std::make_shared<typename Tensor<T>::Node>();
  node->inputs = std::move(inputs);
  node->backprop = std::forward<Fn>(backprop);
  out.attach_node(std::move(node));
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

/// Elementwise sum. `b` may also broadcast against an [N,C,H,W] `a` as a
/// per-channel bias [C] or a per-(batch,channel) term [N,C].
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  enum class Mode { Same, Channel, BatchChannel };
  Mode mode;
  if (a.shape() == b.shape()) {
    mode = Mode::Same;
  } else if (a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    mode = Mode::Channel;
  } else if (a.rank() == 4 && b.rank() == 2 && b.dim(0) == a.dim(0) &&
             b.dim(1) == a.dim(1)) {
    mode = Mode::BatchChannel;
  } else {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }

  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  const int n = a.rank() == 4 ? a.dim(0) : 0;
  const int c = a.rank() == 4 ? a.dim(1) : 0;
  const std::int64_t hw = a.rank() == 4 ? a.numel() / (std::int64_t(n) * c) : 0;
  switch (mode) {
    case Mode::Same:
      for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + bv[i];
      break;
    case Mode::Channel:
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const std::int64_t base = (std::int64_t(ni) * c + ci) * hw;
          for (std::int64_t p = 0; p < hw; ++p) ov[base + p] = av[base + p] + bv[ci];
        }
      break;
    case Mode::BatchChannel:
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const std::int64_t base = (std::int64_t(ni) * c + ci) * hw;
          const T bval = bv[std::int64_t(ni) * c + ci];
          for (std::int64_t p = 0; p < hw; ++p) ov[base + p] = av[base + p] + bval;
        }
      break;
  }

  detail::attach(out, {a, b},
                 [a, b, mode, n, c, hw](const typename Tensor<T>::Impl& o) mutable {
                   const auto& g = o.grad;
                   if (a.requires_grad()) {
                     auto ga = a.grad();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (!b.requires_grad()) return;
                   auto gb = b.grad();
                   switch (mode) {
                     case Mode::Same:
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       break;
                     case Mode::Channel:
                       for (int ni = 0; ni < n; ++ni)
                         for (int ci = 0; ci < c; ++ci) {
                           const std::int64_t base = (std::int64_t(ni) * c + ci) * hw;
                           T s = 0;
                           for (std::int64_t p = 0; p < hw; ++p) s += g[base + p];
                           gb[ci] += s;
                         }
                       break;
                     case Mode::BatchChannel:
                       for (int ni = 0; ni < n; ++ni)
                         for (int ci = 0; ci < c; ++ci) {
                           const std::int64_t base = (std::int64_t(ni) * c + ci) * hw;
                           T s = 0;
                           for (std::int64_t p = 0; p < hw; ++p) s += g[base + p];
                           gb[std::int64_t(ni) * c + ci] += s;
                         }
                       break;
                   }
                 });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * bv[i];
  detail::attach(out, {a, b}, [a, b](const typename Tensor<T>::Impl& o) mutable {
    const auto& g = o.grad;
    if (a.requires_grad()) {
      auto ga = a.grad();
      auto bv2 = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      auto av2 = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-xv[i]));
    ov[i] = xv[i] * s;
  }
  detail::attach(out, {x}, [x](const typename Tensor<T>::Impl& o) mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto xv2 = x.data();
    const auto& g = o.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv2[i]));
      gx[i] += g[i] * s * (T(1) + xv2[i] * (T(1) - s));
    }
  });
  return out;
}

/// Group normalization over [N,C,H,W] with per-channel affine parameters.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 4)
    throw std::invalid_argument("group_norm: expected rank-4 input, got " +
                                shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (groups <= 0 || c % groups != 0)
    throw std::invalid_argument("group_norm: channels " + std::to_string(c) +
                                " not divisible by groups " + std::to_string(groups));
  if (gamma.numel() != c || beta.numel() != c)
    throw std::invalid_argument("group_norm: affine shape " + shape_str(gamma.shape()) +
                                " vs channels " + std::to_string(c));

  const int cg = c / groups;
  const std::int64_t hw = std::int64_t(h) * w;
  const std::int64_t gsize = cg * hw;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(n) * groups);
  std::vector<T> inv_std(static_cast<std::size_t>(n) * groups);
  auto xv = x.data();
  auto ov = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (int ni = 0; ni < n; ++ni) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (std::int64_t(ni) * c + std::int64_t(gi) * cg) * hw;
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < gsize; ++i) {
        const double v = xv[base + i];
        s += v;
        s2 += v * v;
      }
      const double mu = s / double(gsize);
      const double var = std::max(0.0, s2 / double(gsize) - mu * mu);
      const T istd = T(1.0 / std::sqrt(var + double(eps)));
      mean[std::size_t(ni) * groups + gi] = T(mu);
      inv_std[std::size_t(ni) * groups + gi] = istd;
      for (int cc = 0; cc < cg; ++cc) {
        const int ci = gi * cg + cc;
        const std::int64_t cb = (std::int64_t(ni) * c + ci) * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
          const T xhat = (xv[cb + p] - T(mu)) * istd;
          ov[cb + p] = gv[ci] * xhat + bv[ci];
        }
      }
    }
  }

  detail::attach(
      out, {x, gamma, beta},
      [x, gamma, beta, n, c, groups, cg, hw, gsize, mean = std::move(mean),
       inv_std = std::move(inv_std)](const typename Tensor<T>::Impl& o) mutable {
        const auto& g = o.grad;
        auto xv2 = x.data();
        auto gv2 = gamma.data();
        for (int ni = 0; ni < n; ++ni) {
          for (int gi = 0; gi < groups; ++gi) {
            const T mu = mean[std::size_t(ni) * groups + gi];
            const T istd = inv_std[std::size_t(ni) * groups + gi];
            // Per-group reductions first, then the input gradient.
            double s1 = 0.0, s2 = 0.0;
            for (int cc = 0; cc < cg; ++cc) {
              const int ci = gi * cg + cc;
              const std::int64_t cb = (std::int64_t(ni) * c + ci) * hw;
              for (std::int64_t p = 0; p < hw; ++p) {
                const T xhat = (xv2[cb + p] - mu) * istd;
                const T dxhat = g[cb + p] * gv2[ci];
                s1 += dxhat;
                s2 += dxhat * xhat;
              }
            }
            if (x.requires_grad()) {
              auto gx = x.grad();
              const T a1 = T(s1 / double(gsize));
              const T a2 = T(s2 / double(gsize));
              for (int cc = 0; cc < cg; ++cc) {
                const int ci = gi * cg + cc;
                const std::int64_t cb = (std::int64_t(ni) * c + ci) * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                  const T xhat = (xv2[cb + p] - mu) * istd;
                  const T dxhat = g[cb + p] * gv2[ci];
                  gx[cb + p] += istd * (dxhat - a1 - xhat * a2);
                }
              }
            }
          }
        }
        if (gamma.requires_grad() || beta.requires_grad()) {
          for (int ni = 0; ni < n; ++ni) {
            for (int ci = 0; ci < c; ++ci) {
              const int gi = ci / cg;
              const T mu = mean[std::size_t(ni) * groups + gi];
              const T istd = inv_std[std::size_t(ni) * groups + gi];
              const std::int64_t cb = (std::int64_t(ni) * c + ci) * hw;
              double sg = 0.0, sb = 0.0;
              for (std::int64_t p = 0; p < hw; ++p) {
                const T xhat = (xv2[cb + p] - mu) * istd;
                sg += g[cb + p] * xhat;
                sb += g[cb + p];
              }
              if (gamma.requires_grad()) gamma.grad()[ci] += T(sg);
              if (beta.requires_grad()) beta.grad()[ci] += T(sb);
            }
          }
        }
      });
  return out;
}

/// y[N,M] = x[N,K] * w[M,K]^T + b[M]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("linear: shape mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  const int n = x.dim(0), k = x.dim(1), m = w.dim(0);
  if (b.numel() != m)
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                " vs out features " + std::to_string(m));
  Tensor<T> out = Tensor<T>::zeros({n, m});
  gemm_nt(x.data().data(), w.data().data(), out.data().data(), n, k, m);
  auto ov = out.data();
  auto bv = b.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) ov[std::int64_t(i) * m + j] += bv[j];

  detail::attach(out, {x, w, b},
                 [x, w, b, n, k, m](const typename Tensor<T>::Impl& o) mutable {
                   const T* g = o.grad.data();
                   if (x.requires_grad())
                     gemm_nn(g, w.data().data(), x.grad().data(), n, m, k, true);
                   if (w.requires_grad())
                     gemm_tn(g, x.data().data(), w.grad().data(), m, n, k, true);
                   if (b.requires_grad()) {
                     auto gb = b.grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < m; ++j) gb[j] += g[std::int64_t(i) * m + j];
                   }
                 });
  return out;
}

namespace detail {

template <class T>
void im2col(const T* img, int cin, int h, int w, int k, int stride, int pad,
            int ho, int wo, T* col) {
  // col is [cin*k*k, ho*wo]
  const std::int64_t p = std::int64_t(ho) * wo;
  std::int64_t row = 0;
  for (int ci = 0; ci < cin; ++ci) {
    const T* plane = img + std::int64_t(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        T* dst = col + row * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst + std::int64_t(oy) * wo, dst + std::int64_t(oy + 1) * wo, T(0));
            continue;
          }
          const T* src_row = plane + std::int64_t(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[std::int64_t(oy) * wo + ox] =
                (ix >= 0 && ix < w) ? src_row[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int cin, int h, int w, int k, int stride, int pad,
                int ho, int wo, T* img) {
  std::int64_t row = 0;
  for (int ci = 0; ci < cin; ++ci) {
    T* plane = img + std::int64_t(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const T* src = col + row * std::int64_t(ho) * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) plane[std::int64_t(iy) * w + ix] += src[std::int64_t(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] kernels (k odd).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int padding = 0) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected rank-4 input and kernel, got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                shape_str(x.shape()) + " vs kernel " +
                                shape_str(w.shape()));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(3) != k || k % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square with odd size, got " +
                                shape_str(w.shape()));
  if (b.numel() != cout)
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()) +
                                " vs out channels " + std::to_string(cout));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (wd + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || ho < 1 || wo < 1)
    throw std::invalid_argument("conv2d: output would be empty for input " +
                                shape_str(x.shape()));

  const int kk = cin * k * k;
  const std::int64_t p = std::int64_t(ho) * wo;
  Tensor<T> out = Tensor<T>::zeros({n, cout, ho, wo});
  auto run_forward = [&](int begin, int end) {
    std::vector<T> col(static_cast<std::size_t>(kk) * p);
    for (int ni = begin; ni < end; ++ni) {
      detail::im2col(x.data().data() + std::int64_t(ni) * cin * h * wd, cin, h, wd,
                     k, stride, padding, ho, wo, col.data());
      T* o = out.data().data() + std::int64_t(ni) * cout * p;
      gemm_nn(w.data().data(), col.data(), o, cout, kk, static_cast<int>(p));
      for (int co = 0; co < cout; ++co) {
        const T bias = b.data()[co];
        for (std::int64_t i = 0; i < p; ++i) o[std::int64_t(co) * p + i] += bias;
      }
    }
  };
  const std::int64_t flops = 2 * std::int64_t(n) * cout * kk * p;
  parallel_for(n, run_forward, flops < (1 << 21) ? 1 : 0);

  detail::attach(
      out, {x, w, b},
      [x, w, b, n, cin, h, wd, cout, k, kk, p, ho, wo, stride,
       padding](const typename Tensor<T>::Impl& o) mutable {
        const T* g = o.grad.data();
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (int ni = 0; ni < n; ++ni)
            for (int co = 0; co < cout; ++co) {
              const T* gp = g + (std::int64_t(ni) * cout + co) * p;
              T s = 0;
              for (std::int64_t i = 0; i < p; ++i) s += gp[i];
              gb[co] += s;
            }
        }
        if (w.requires_grad()) {
          // Per-image partial products reduced in index order, so the result
          // is independent of the worker count.
          std::vector<T> partial(static_cast<std::size_t>(n) * cout * kk);
          parallel_for(n, [&](int begin, int end) {
            std::vector<T> col(static_cast<std::size_t>(kk) * p);
            for (int ni = begin; ni < end; ++ni) {
              detail::im2col(x.data().data() + std::int64_t(ni) * cin * h * wd, cin,
                             h, wd, k, stride, padding, ho, wo, col.data());
              gemm_nt(g + std::int64_t(ni) * cout * p, col.data(),
                      partial.data() + std::int64_t(ni) * cout * kk, cout,
                      static_cast<int>(p), kk);
            }
          });
          auto gw = w.grad();
          for (int ni = 0; ni < n; ++ni) {
            const T* src = partial.data() + std::int64_t(ni) * cout * kk;
            for (std::int64_t i = 0; i < std::int64_t(cout) * kk; ++i) gw[i] += src[i];
          }
        }
        if (x.requires_grad()) {
          parallel_for(n, [&](int begin, int end) {
            std::vector<T> colg(static_cast<std::size_t>(kk) * p);
            for (int ni = begin; ni < end; ++ni) {
              gemm_tn(w.data().data(), g + std::int64_t(ni) * cout * p, colg.data(),
                      kk, cout, static_cast<int>(p));
              detail::col2im_add(colg.data(), cin, h, wd, k, stride, padding, ho, wo,
                                 x.grad().data() + std::int64_t(ni) * cin * h * wd);
            }
          });
        }
      });
  return out;
}

template <class T>
Tensor<T> upsample_nearest_2x(const Tensor<T>& x) {
  if (x.rank() != 4)
    throw std::invalid_argument("upsample_nearest_2x: expected rank-4 input, got " +
                                shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({n, c, 2 * h, 2 * w});
  auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t nc = 0; nc < std::int64_t(n) * c; ++nc) {
    const T* src = xv.data() + nc * h * w;
    T* dst = ov.data() + nc * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const T v = src[std::int64_t(y) * w + xx];
        T* d = dst + (std::int64_t(2 * y) * 2 * w + 2 * xx);
        d[0] = v;
        d[1] = v;
        d[2 * w] = v;
        d[2 * w + 1] = v;
      }
  }
  detail::attach(out, {x}, [x, n, c, h, w](const typename Tensor<T>::Impl& o) mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    const T* g = o.grad.data();
    for (std::int64_t nc = 0; nc < std::int64_t(n) * c; ++nc) {
      T* dst = gx.data() + nc * h * w;
      const T* src = g + nc * 4 * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T* s = src + (std::int64_t(2 * y) * 2 * w + 2 * xx);
          dst[std::int64_t(y) * w + xx] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
        }
    }
  });
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::int64_t hw = std::int64_t(h) * w;
  Tensor<T> out = Tensor<T>::zeros({n, ca + cb, h, w});
  auto ov = out.data();
  for (int ni = 0; ni < n; ++ni) {
    std::copy_n(a.data().data() + std::int64_t(ni) * ca * hw, ca * hw,
                ov.data() + std::int64_t(ni) * (ca + cb) * hw);
    std::copy_n(b.data().data() + std::int64_t(ni) * cb * hw, cb * hw,
                ov.data() + (std::int64_t(ni) * (ca + cb) + ca) * hw);
  }
  detail::attach(out, {a, b},
                 [a, b, n, ca, cb, hw](const typename Tensor<T>::Impl& o) mutable {
                   const T* g = o.grad.data();
                   for (int ni = 0; ni < n; ++ni) {
                     if (a.requires_grad()) {
                       auto ga = a.grad();
                       const T* src = g + std::int64_t(ni) * (ca + cb) * hw;
                       T* dst = ga.data() + std::int64_t(ni) * ca * hw;
                       for (std::int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
                     }
                     if (b.requires_grad()) {
                       auto gb = b.grad();
                       const T* src = g + (std::int64_t(ni) * (ca + cb) + ca) * hw;
                       T* dst = gb.data() + std::int64_t(ni) * cb * hw;
                       for (std::int64_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
                     }
                   }
                 });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(T(s / double(x.numel())));
  detail::attach(out, {x}, [x](const typename Tensor<T>::Impl& o) mutable {
    if (!x.requires_grad()) return;
    const T g = o.grad[0] / T(x.numel());
    auto gx = x.grad();
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
  return out;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.rank() != 4)
    throw std::invalid_argument("softmax_channels: expected rank-4 input, got " +
                                shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t hw = std::int64_t(h) * w;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int ni = 0; ni < n; ++ni)
    for (std::int64_t pp = 0; pp < hw; ++pp) {
      const std::int64_t base = std::int64_t(ni) * c * hw + pp;
      T mx = xv[base];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, xv[base + ci * hw]);
      double denom = 0.0;
      for (int ci = 0; ci < c; ++ci) denom += std::exp(double(xv[base + ci * hw] - mx));
      for (int ci = 0; ci < c; ++ci)
        ov[base + ci * hw] = T(std::exp(double(xv[base + ci * hw] - mx)) / denom);
    }
  detail::attach(out, {x}, [x, n, c, hw](const typename Tensor<T>::Impl& o) mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    const T* y = o.data.data();
    const T* g = o.grad.data();
    for (int ni = 0; ni < n; ++ni)
      for (std::int64_t pp = 0; pp < hw; ++pp) {
        const std::int64_t base = std::int64_t(ni) * c * hw + pp;
        double dot = 0.0;
        for (int ci = 0; ci < c; ++ci) dot += double(g[base + ci * hw]) * y[base + ci * hw];
        for (int ci = 0; ci < c; ++ci)
          gx[base + ci * hw] += y[base + ci * hw] * (g[base + ci * hw] - T(dot));
      }
  });
  return out;
}

/// Mean per-pixel cross entropy between logits [N,C,H,W] and integer labels
/// of length N*H*W (row-major [N,H,W]).
template <class T>
Tensor<T> cross_entropy_per_pixel(const Tensor<T>& logits, std::vector<int> labels) {
  if (logits.rank() != 4)
    throw std::invalid_argument("cross_entropy_per_pixel: expected rank-4 logits, got " +
                                shape_str(logits.shape()));
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::int64_t hw = std::int64_t(h) * w;
  const std::int64_t pixels = std::int64_t(n) * hw;
  if (static_cast<std::int64_t>(labels.size()) != pixels)
    throw std::invalid_argument("cross_entropy_per_pixel: " +
                                std::to_string(labels.size()) + " labels for " +
                                std::to_string(pixels) + " pixels");
  auto xv = logits.data();
  double total = 0.0;
  for (int ni = 0; ni < n; ++ni)
    for (std::int64_t pp = 0; pp < hw; ++pp) {
      const std::int64_t base = std::int64_t(ni) * c * hw + pp;
      const int y = labels[std::int64_t(ni) * hw + pp];
      if (y < 0 || y >= c)
        throw std::invalid_argument("cross_entropy_per_pixel: label " +
                                    std::to_string(y) + " out of range for " +
                                    std::to_string(c) + " classes");
      T mx = xv[base];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, xv[base + ci * hw]);
      double denom = 0.0;
      for (int ci = 0; ci < c; ++ci) denom += std::exp(double(xv[base + ci * hw] - mx));
      total += std::log(denom) + double(mx) - double(xv[base + y * hw]);
    }
  Tensor<T> out = Tensor<T>::scalar(T(total / double(pixels)));
  detail::attach(out, {logits},
                 [logits, labels = std::move(labels), n, c, hw,
                  pixels](const typename Tensor<T>::Impl& o) mutable {
                   if (!logits.requires_grad()) return;
                   auto gx = logits.grad();
                   auto xv2 = logits.data();
                   const T go = o.grad[0] / T(pixels);
                   for (int ni = 0; ni < n; ++ni)
                     for (std::int64_t pp = 0; pp < hw; ++pp) {
                       const std::int64_t base = std::int64_t(ni) * c * hw + pp;
                       const int y = labels[std::int64_t(ni) * hw + pp];
                       T mx = xv2[base];
                       for (int ci = 1; ci < c; ++ci) mx = std::max(mx, xv2[base + ci * hw]);
                       double denom = 0.0;
                       for (int ci = 0; ci < c; ++ci)
                         denom += std::exp(double(xv2[base + ci * hw] - mx));
                       for (int ci = 0; ci < c; ++ci) {
                         const T p = T(std::exp(double(xv2[base + ci * hw] - mx)) / denom);
                         gx[base + ci * hw] += go * (p - T(ci == y ? 1 : 0));
                       }
                     }
                 });
  return out;
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mse");
  auto av = a.data();
  auto bv = b.data();
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(av[i]) - double(bv[i]);
    s += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(T(s / double(a.numel())));
  detail::attach(out, {a, b}, [a, b](const typename Tensor<T>::Impl& o) mutable {
    const T g2 = o.grad[0] * T(2) / T(a.numel());
    auto av2 = a.data();
    auto bv2 = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += g2 * (av2[i] - bv2[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::int64_t i = 0; i < a.numel(); ++i) gb[i] -= g2 * (av2[i] - bv2[i]);
    }
  });
  return out;
}

}  // namespace segdiff
