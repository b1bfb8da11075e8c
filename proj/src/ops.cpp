#include "ttabench/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef TTABENCH_USE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace ttb {

namespace {

void count_op(OpKind k) {
  active_op_counters().forward[static_cast<std::size_t>(k)] += 1;
}

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_2d(const Tensor& t, const char* name) {
  if (t.ndim() != 2) {
    throw shape_error(std::string(name) + " must be 2-d, got " +
                      shape_str(t.shape()));
  }
}

void check_4d(const Tensor& t, const char* name) {
  if (t.ndim() != 4) {
    throw shape_error(std::string(name) + " must be 4-d, got " +
                      shape_str(t.shape()));
  }
}

#ifdef TTABENCH_USE_OPENBLAS
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }  // bit-deterministic GEMM
};
const BlasInit blas_init;
#endif

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc) {
#ifdef TTABENCH_USE_OPENBLAS
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
#else
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) {
        const float av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const float bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
#endif
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul operand a");
  check_2d(b, "matmul operand b");
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int k = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw shape_error("matmul inner extents differ: a " + shape_str(a.shape()) +
                      (trans_a ? "^T" : "") + " vs b " + shape_str(b.shape()) +
                      (trans_b ? "^T" : ""));
  }
  count_op(OpKind::kMatmul);
  Tensor out = Tensor::zeros({m, n});
  gemm(trans_a, trans_b, m, n, k, 1.0f, a.data(), a.dim(1), b.data(), b.dim(1),
       0.0f, out.data(), n);

  if (taping({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc, trans_a, trans_b, m, n, k]() mutable {
      const float* gy = oc.grad();
      if (ac.requires_grad()) {
        float* ga = ac.grad();
        // dA for each transpose case.
        if (!trans_a && !trans_b) {
          gemm(false, true, m, k, n, 1.0f, gy, n, bc.data(), bc.dim(1), 1.0f,
               ga, ac.dim(1));
        } else if (!trans_a && trans_b) {
          gemm(false, false, m, k, n, 1.0f, gy, n, bc.data(), bc.dim(1), 1.0f,
               ga, ac.dim(1));
        } else if (trans_a && !trans_b) {
          gemm(false, true, k, m, n, 1.0f, bc.data(), bc.dim(1), gy, n, 1.0f,
               ga, ac.dim(1));
        } else {
          gemm(true, true, k, m, n, 1.0f, bc.data(), bc.dim(1), gy, n, 1.0f,
               ga, ac.dim(1));
        }
      }
      if (bc.requires_grad()) {
        float* gb = bc.grad();
        if (!trans_a && !trans_b) {
          gemm(true, false, k, n, m, 1.0f, ac.data(), ac.dim(1), gy, n, 1.0f,
               gb, bc.dim(1));
        } else if (!trans_a && trans_b) {
          gemm(true, false, n, k, m, 1.0f, gy, n, ac.data(), ac.dim(1), 1.0f,
               gb, bc.dim(1));
        } else if (trans_a && !trans_b) {
          gemm(false, false, k, n, m, 1.0f, ac.data(), ac.dim(1), gy, n, 1.0f,
               gb, bc.dim(1));
        } else {
          gemm(true, true, n, k, m, 1.0f, gy, n, ac.data(), ac.dim(1), 1.0f,
               gb, bc.dim(1));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d via per-image im2col + GEMM

namespace {

void im2col(const float* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, float* col) {
  const int hw = ho * wo;
  for (int ci = 0; ci < cin; ++ci) {
    const float* plane = x + static_cast<std::ptrdiff_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* row = col + static_cast<std::ptrdiff_t>((ci * kh + ky) * kw + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, wo, 0.0f);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, int cin, int h, int w, int kh, int kw,
                int stride, int pad, int ho, int wo, float* dx) {
  const int hw = ho * wo;
  for (int ci = 0; ci < cin; ++ci) {
    float* plane = dx + static_cast<std::ptrdiff_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* row =
            col + static_cast<std::ptrdiff_t>((ci * kh + ky) * kw + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  check_4d(x, "conv2d input");
  check_4d(w, "conv2d weight");
  const int b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw shape_error("conv2d weight expects " + std::to_string(w.dim(1)) +
                      " input channels, input has " + std::to_string(cin));
  }
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) {
    throw shape_error("conv2d output would be empty for input " +
                      shape_str(x.shape()));
  }
  count_op(OpKind::kConv2d);
  Tensor out = Tensor::zeros({b, cout, ho, wo});
  const int kdim = cin * kh * kw;
  const int hw = ho * wo;
  {
    Tensor col = Tensor::zeros({kdim, hw});  // scratch, reused per image
    for (int i = 0; i < b; ++i) {
      im2col(x.data() + static_cast<std::ptrdiff_t>(i) * cin * h * wd, cin, h,
             wd, kh, kw, stride, pad, ho, wo, col.data());
      gemm(false, false, cout, hw, kdim, 1.0f, w.data(), kdim, col.data(), hw,
           0.0f, out.data() + static_cast<std::ptrdiff_t>(i) * cout * hw, hw);
    }
  }

  if (taping({&x, &w})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, oc = out;
    active_tape()->record([xc, wc, oc, stride, pad, b, cin, h, wd, cout, kh,
                           kw, ho, wo, kdim, hw]() mutable {
      const float* gy = oc.grad();
      Tensor col = Tensor::zeros({kdim, hw});
      Tensor dcol = Tensor::zeros({kdim, hw});
      float* gw = wc.requires_grad() ? wc.grad() : nullptr;
      float* gx = xc.requires_grad() ? xc.grad() : nullptr;
      for (int i = 0; i < b; ++i) {
        const float* gy_i = gy + static_cast<std::ptrdiff_t>(i) * cout * hw;
        if (gw) {
          im2col(xc.data() + static_cast<std::ptrdiff_t>(i) * cin * h * wd,
                 cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
          gemm(false, true, cout, kdim, hw, 1.0f, gy_i, hw, col.data(), hw,
               1.0f, gw, kdim);
        }
        if (gx) {
          gemm(true, false, kdim, hw, cout, 1.0f, wc.data(), kdim, gy_i, hw,
               0.0f, dcol.data(), hw);
          col2im_add(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                     gx + static_cast<std::ptrdiff_t>(i) * cin * h * wd);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  count_op(OpKind::kRelu);
  Tensor out = Tensor::zeros(x.shape());
  const float* in = x.data();
  float* o = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;

  if (taping({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc]() mutable {
      const float* gy = oc.grad();
      const float* y = oc.data();
      float* gx = xc.grad();
      const std::int64_t m = xc.numel();
      for (std::int64_t i = 0; i < m; ++i) {
        if (y[i] > 0.0f) gx[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor max_pool(const Tensor& x, int k, int s) {
  check_4d(x, "max_pool input");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < k || w < k) {
    throw shape_error("max_pool window exceeds input " + shape_str(x.shape()));
  }
  const int ho = (h - k) / s + 1;
  const int wo = (w - k) / s + 1;
  count_op(OpKind::kMaxPool);
  Tensor out = Tensor::zeros({b, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      static_cast<std::size_t>(out.numel()));
  const float* in = x.data();
  float* o = out.data();
  std::int64_t oi = 0;
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const float* plane =
          in + (static_cast<std::ptrdiff_t>(bi) * c + ci) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          int best_idx = 0;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * s + ky, ix = ox * s + kx;
              const float v = plane[iy * w + ix];
              if (v > best) {
                best = v;
                best_idx = iy * w + ix;
              }
            }
          }
          o[oi] = best;
          (*argmax)[static_cast<std::size_t>(oi)] =
              static_cast<std::int32_t>(best_idx);  // offset within plane
        }
      }
    }
  }

  if (taping({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, argmax, b, c, h, w, ho, wo]() mutable {
      const float* gy = oc.grad();
      float* gx = xc.grad();
      std::int64_t oi = 0;
      for (int bi = 0; bi < b; ++bi) {
        for (int ci = 0; ci < c; ++ci) {
          float* plane = gx + (static_cast<std::ptrdiff_t>(bi) * c + ci) * h * w;
          for (int p = 0; p < ho * wo; ++p, ++oi) {
            plane[(*argmax)[static_cast<std::size_t>(oi)]] += gy[oi];
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check_4d(x, "global_avg_pool input");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  count_op(OpKind::kGlobalAvgPool);
  Tensor out = Tensor::zeros({b, c});
  const float* in = x.data();
  float* o = out.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const float* plane = in + (static_cast<std::ptrdiff_t>(bi) * c + ci) * hw;
      double acc = 0.0;
      for (int i = 0; i < hw; ++i) acc += plane[i];
      o[bi * c + ci] = static_cast<float>(acc / hw);
    }
  }

  if (taping({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, b, c, hw]() mutable {
      const float* gy = oc.grad();
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        for (int ci = 0; ci < c; ++ci) {
          const float g = gy[bi * c + ci] / static_cast<float>(hw);
          float* plane = gx + (static_cast<std::ptrdiff_t>(bi) * c + ci) * hw;
          for (int i = 0; i < hw; ++i) plane[i] += g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch norm

float soft_shrink(float x, float lambda) {
  if (x > lambda) return x - lambda;
  if (x < -lambda) return x + lambda;
  return 0.0f;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var,
                  const BatchNormOpts& opts) {
  check_4d(x, "batch_norm input");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c) {
    throw shape_error("batch_norm parameter extent mismatch for input " +
                      shape_str(x.shape()));
  }
  count_op(OpKind::kBatchNorm);
  Tensor out = Tensor::zeros(x.shape());
  const float* in = x.data();
  const float* g = gamma.data();
  const float* bt = beta.data();
  float* o = out.data();
  const std::int64_t plane = static_cast<std::int64_t>(hw);
  const std::int64_t n_per_c = static_cast<std::int64_t>(b) * hw;

  if (opts.mode == NormMode::kBatchStats) {
    std::vector<float> mean(static_cast<std::size_t>(c));
    std::vector<float> invstd(static_cast<std::size_t>(c));
    std::vector<float> var(static_cast<std::size_t>(c));
    for (int ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const float* p = in + (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane;
        for (int i = 0; i < hw; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(n_per_c);
      double vacc = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const float* p = in + (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane;
        for (int i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          vacc += d * d;
        }
      }
      const double v = vacc / static_cast<double>(n_per_c);  // biased
      mean[static_cast<std::size_t>(ci)] = static_cast<float>(mu);
      var[static_cast<std::size_t>(ci)] = static_cast<float>(v);
      invstd[static_cast<std::size_t>(ci)] =
          static_cast<float>(1.0 / std::sqrt(v + opts.eps));
    }
    // Save normalized activations for backward.
    auto xhat = std::make_shared<Buffer>(static_cast<std::size_t>(x.numel()));
    float* xh = xhat->data();
    for (int bi = 0; bi < b; ++bi) {
      for (int ci = 0; ci < c; ++ci) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane;
        const float mu = mean[static_cast<std::size_t>(ci)];
        const float is = invstd[static_cast<std::size_t>(ci)];
        const float gg = g[ci], bb = bt[ci];
        for (int i = 0; i < hw; ++i) {
          const float h = (in[off + i] - mu) * is;
          xh[off + i] = h;
          o[off + i] = gg * h + bb;
        }
      }
    }
    if (opts.update_running) {
      float* rm = running_mean.data();
      float* rv = running_var.data();
      const float m = opts.momentum;
      for (int ci = 0; ci < c; ++ci) {
        const float unbiased =
            n_per_c > 1 ? var[static_cast<std::size_t>(ci)] *
                              (static_cast<float>(n_per_c) /
                               static_cast<float>(n_per_c - 1))
                        : var[static_cast<std::size_t>(ci)];
        rm[ci] = (1.0f - m) * rm[ci] + m * mean[static_cast<std::size_t>(ci)];
        rv[ci] = (1.0f - m) * rv[ci] + m * unbiased;
      }
    }
    if (taping({&x, &gamma, &beta})) {
      out.set_requires_grad(true);
      Tensor xc = x, gc = gamma, bc = beta, oc = out;
      auto invstd_s = std::make_shared<std::vector<float>>(std::move(invstd));
      active_tape()->record([xc, gc, bc, oc, xhat, invstd_s, b, c, hw,
                             n_per_c]() mutable {
        const float* gy = oc.grad();
        const float* xh = xhat->data();
        const std::int64_t plane2 = hw;
        const float* gv = gc.data();
        // Per-channel reductions (double accumulators).
        std::vector<double> sum_gy(static_cast<std::size_t>(c), 0.0);
        std::vector<double> sum_gy_xh(static_cast<std::size_t>(c), 0.0);
        for (int bi = 0; bi < b; ++bi) {
          for (int ci = 0; ci < c; ++ci) {
            const std::ptrdiff_t off =
                (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane2;
            double a0 = 0.0, a1 = 0.0;
            for (int i = 0; i < hw; ++i) {
              a0 += gy[off + i];
              a1 += static_cast<double>(gy[off + i]) * xh[off + i];
            }
            sum_gy[static_cast<std::size_t>(ci)] += a0;
            sum_gy_xh[static_cast<std::size_t>(ci)] += a1;
          }
        }
        if (gc.requires_grad()) {
          float* gg = gc.grad();
          for (int ci = 0; ci < c; ++ci) {
            gg[ci] += static_cast<float>(sum_gy_xh[static_cast<std::size_t>(ci)]);
          }
        }
        if (bc.requires_grad()) {
          float* gb = bc.grad();
          for (int ci = 0; ci < c; ++ci) {
            gb[ci] += static_cast<float>(sum_gy[static_cast<std::size_t>(ci)]);
          }
        }
        if (xc.requires_grad()) {
          float* gx = xc.grad();
          const double inv_n = 1.0 / static_cast<double>(n_per_c);
          for (int bi = 0; bi < b; ++bi) {
            for (int ci = 0; ci < c; ++ci) {
              const std::ptrdiff_t off =
                  (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane2;
              const double k1 = sum_gy[static_cast<std::size_t>(ci)] * inv_n;
              const double k2 = sum_gy_xh[static_cast<std::size_t>(ci)] * inv_n;
              const float scale =
                  gv[ci] * (*invstd_s)[static_cast<std::size_t>(ci)];
              for (int i = 0; i < hw; ++i) {
                const double t = gy[off + i] - k1 - xh[off + i] * k2;
                gx[off + i] += static_cast<float>(scale * t);
              }
            }
          }
        }
      });
    }
    return out;
  }

  if (opts.mode == NormMode::kRunningStats) {
    const float* rm = running_mean.data();
    const float* rv = running_var.data();
    std::vector<float> invstd(static_cast<std::size_t>(c));
    for (int ci = 0; ci < c; ++ci) {
      invstd[static_cast<std::size_t>(ci)] =
          1.0f / std::sqrt(rv[ci] + opts.eps);
    }
    auto xhat = std::make_shared<Buffer>(static_cast<std::size_t>(x.numel()));
    float* xh = xhat->data();
    for (int bi = 0; bi < b; ++bi) {
      for (int ci = 0; ci < c; ++ci) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane;
        const float mu = rm[ci], is = invstd[static_cast<std::size_t>(ci)];
        const float gg = g[ci], bb = bt[ci];
        for (int i = 0; i < hw; ++i) {
          const float h = (in[off + i] - mu) * is;
          xh[off + i] = h;
          o[off + i] = gg * h + bb;
        }
      }
    }
    if (taping({&x, &gamma, &beta})) {
      out.set_requires_grad(true);
      Tensor xc = x, gc = gamma, bc = beta, oc = out;
      auto invstd_s = std::make_shared<std::vector<float>>(std::move(invstd));
      active_tape()->record([xc, gc, bc, oc, xhat, invstd_s, b, c, hw]() mutable {
        const float* gy = oc.grad();
        const float* xh = xhat->data();
        if (gc.requires_grad() || bc.requires_grad()) {
          std::vector<double> sum_gy(static_cast<std::size_t>(c), 0.0);
          std::vector<double> sum_gy_xh(static_cast<std::size_t>(c), 0.0);
          for (int bi = 0; bi < b; ++bi) {
            for (int ci = 0; ci < c; ++ci) {
              const std::ptrdiff_t off =
                  (static_cast<std::ptrdiff_t>(bi) * c + ci) *
                  static_cast<std::ptrdiff_t>(hw);
              double a0 = 0.0, a1 = 0.0;
              for (int i = 0; i < hw; ++i) {
                a0 += gy[off + i];
                a1 += static_cast<double>(gy[off + i]) * xh[off + i];
              }
              sum_gy[static_cast<std::size_t>(ci)] += a0;
              sum_gy_xh[static_cast<std::size_t>(ci)] += a1;
            }
          }
          if (gc.requires_grad()) {
            float* gg = gc.grad();
            for (int ci = 0; ci < c; ++ci) {
              gg[ci] +=
                  static_cast<float>(sum_gy_xh[static_cast<std::size_t>(ci)]);
            }
          }
          if (bc.requires_grad()) {
            float* gb = bc.grad();
            for (int ci = 0; ci < c; ++ci) {
              gb[ci] += static_cast<float>(sum_gy[static_cast<std::size_t>(ci)]);
            }
          }
        }
        if (xc.requires_grad()) {
          float* gx = xc.grad();
          const float* gv = gc.data();
          for (int bi = 0; bi < b; ++bi) {
            for (int ci = 0; ci < c; ++ci) {
              const std::ptrdiff_t off =
                  (static_cast<std::ptrdiff_t>(bi) * c + ci) *
                  static_cast<std::ptrdiff_t>(hw);
              const float scale =
                  gv[ci] * (*invstd_s)[static_cast<std::size_t>(ci)];
              for (int i = 0; i < hw; ++i) gx[off + i] += scale * gy[off + i];
            }
          }
        }
      });
    }
    return out;
  }

  // kInstanceAware: per-sample statistics corrected toward running stats.
  {
    if (x.requires_grad()) {
      throw numeric_error(
          "instance-aware batch_norm does not support input gradients");
    }
    const float* rm = running_mean.data();
    const float* rv = running_var.data();
    const int l = hw;
    auto xhat = std::make_shared<Buffer>(static_cast<std::size_t>(x.numel()));
    float* xh = xhat->data();
    for (int bi = 0; bi < b; ++bi) {
      for (int ci = 0; ci < c; ++ci) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(bi) * c + ci) * plane;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += in[off + i];
        const double mu_inst = acc / l;
        double vacc = 0.0;
        for (int i = 0; i < hw; ++i) {
          const double d = in[off + i] - mu_inst;
          vacc += d * d;
        }
        const double var_inst = vacc / l;
        const float s_mu = std::sqrt((rv[ci] + opts.eps) / static_cast<float>(l));
        const float s_var =
            (rv[ci] + opts.eps) *
            std::sqrt(2.0f / static_cast<float>(std::max(l - 1, 1)));
        const float used_mu =
            rm[ci] + soft_shrink(static_cast<float>(mu_inst) - rm[ci],
                                 opts.iabn_alpha * s_mu);
        float used_var =
            rv[ci] + soft_shrink(static_cast<float>(var_inst) - rv[ci],
                                 opts.iabn_alpha * s_var);
        if (used_var < 0.0f) used_var = 0.0f;
        const float is = 1.0f / std::sqrt(used_var + opts.eps);
        const float gg = g[ci], bb = bt[ci];
        for (int i = 0; i < hw; ++i) {
          const float hv = (in[off + i] - used_mu) * is;
          xh[off + i] = hv;
          o[off + i] = gg * hv + bb;
        }
      }
    }
    if (taping({&gamma, &beta})) {
      out.set_requires_grad(true);
      Tensor gc = gamma, bc = beta, oc = out;
      active_tape()->record([gc, bc, oc, xhat, b, c, hw]() mutable {
        const float* gy = oc.grad();
        const float* xh = xhat->data();
        std::vector<double> sum_gy(static_cast<std::size_t>(c), 0.0);
        std::vector<double> sum_gy_xh(static_cast<std::size_t>(c), 0.0);
        for (int bi = 0; bi < b; ++bi) {
          for (int ci = 0; ci < c; ++ci) {
            const std::ptrdiff_t off =
                (static_cast<std::ptrdiff_t>(bi) * c + ci) *
                static_cast<std::ptrdiff_t>(hw);
            double a0 = 0.0, a1 = 0.0;
            for (int i = 0; i < hw; ++i) {
              a0 += gy[off + i];
              a1 += static_cast<double>(gy[off + i]) * xh[off + i];
            }
            sum_gy[static_cast<std::size_t>(ci)] += a0;
            sum_gy_xh[static_cast<std::size_t>(ci)] += a1;
          }
        }
        if (gc.requires_grad()) {
          float* gg = gc.grad();
          for (int ci = 0; ci < c; ++ci) {
            gg[ci] += static_cast<float>(sum_gy_xh[static_cast<std::size_t>(ci)]);
          }
        }
        if (bc.requires_grad()) {
          float* gb = bc.grad();
          for (int ci = 0; ci < c; ++ci) {
            gb[ci] += static_cast<float>(sum_gy[static_cast<std::size_t>(ci)]);
          }
        }
      });
    }
    return out;
  }
}

// ---------------------------------------------------------------------------

Tensor linear_bias_add(const Tensor& x, const Tensor& bias) {
  check_2d(x, "linear_bias_add input");
  const int b = x.dim(0), c = x.dim(1);
  if (bias.numel() != c) {
    throw shape_error("linear_bias_add bias extent " +
                      std::to_string(bias.numel()) + " vs columns " +
                      std::to_string(c));
  }
  count_op(OpKind::kLinearBiasAdd);
  Tensor out = Tensor::zeros(x.shape());
  const float* in = x.data();
  const float* bs = bias.data();
  float* o = out.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) o[bi * c + ci] = in[bi * c + ci] + bs[ci];
  }
  if (taping({&x, &bias})) {
    out.set_requires_grad(true);
    Tensor xc = x, bc = bias, oc = out;
    active_tape()->record([xc, bc, oc, b, c]() mutable {
      const float* gy = oc.grad();
      if (xc.requires_grad()) {
        float* gx = xc.grad();
        for (std::int64_t i = 0; i < xc.numel(); ++i) gx[i] += gy[i];
      }
      if (bc.requires_grad()) {
        float* gb = bc.grad();
        for (int ci = 0; ci < c; ++ci) {
          double acc = 0.0;
          for (int bi = 0; bi < b; ++bi) acc += gy[bi * c + ci];
          gb[ci] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

namespace {

// Row-wise log-softmax into `out`, double accumulation for the log-sum-exp.
void log_softmax_rows(const float* z, int b, int c, float* out) {
  for (int bi = 0; bi < b; ++bi) {
    const float* row = z + static_cast<std::ptrdiff_t>(bi) * c;
    float* orow = out + static_cast<std::ptrdiff_t>(bi) * c;
    float m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(static_cast<double>(row[j] - m));
    const double lse = static_cast<double>(m) + std::log(se);
    for (int j = 0; j < c; ++j) {
      orow[j] = static_cast<float>(row[j] - lse);
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  check_2d(logits, "softmax input");
  const int b = logits.dim(0), c = logits.dim(1);
  count_op(OpKind::kSoftmax);
  Tensor out = Tensor::zeros(logits.shape());
  log_softmax_rows(logits.data(), b, c, out.data());
  float* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = std::exp(o[i]);
  if (taping({&logits})) {
    out.set_requires_grad(true);
    Tensor xc = logits, oc = out;
    active_tape()->record([xc, oc, b, c]() mutable {
      const float* gy = oc.grad();
      const float* y = oc.data();
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(bi) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += static_cast<double>(gy[off + j]) * y[off + j];
        for (int j = 0; j < c; ++j) {
          gx[off + j] += y[off + j] * (gy[off + j] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  check_2d(logits, "log_softmax input");
  const int b = logits.dim(0), c = logits.dim(1);
  count_op(OpKind::kLogSoftmax);
  Tensor out = Tensor::zeros(logits.shape());
  log_softmax_rows(logits.data(), b, c, out.data());
  if (taping({&logits})) {
    out.set_requires_grad(true);
    Tensor xc = logits, oc = out;
    active_tape()->record([xc, oc, b, c]() mutable {
      const float* gy = oc.grad();
      const float* y = oc.data();
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(bi) * c;
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += gy[off + j];
        for (int j = 0; j < c; ++j) {
          gx[off + j] += gy[off + j] -
                         std::exp(y[off + j]) * static_cast<float>(sum);
        }
      }
    });
  }
  return out;
}

Tensor elementwise_add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("elementwise_add shape mismatch: " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  count_op(OpKind::kElementwiseAdd);
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = pa[i] + pb[i];
  if (taping({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc]() mutable {
      const float* gy = oc.grad();
      if (ac.requires_grad()) {
        float* ga = ac.grad();
        for (std::int64_t i = 0; i < ac.numel(); ++i) ga[i] += gy[i];
      }
      if (bc.requires_grad()) {
        float* gb = bc.grad();
        for (std::int64_t i = 0; i < bc.numel(); ++i) gb[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor scalar_scale(const Tensor& a, float s) {
  count_op(OpKind::kScalarScale);
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = s * pa[i];
  if (taping({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc, s]() mutable {
      const float* gy = oc.grad();
      float* ga = ac.grad();
      for (std::int64_t i = 0; i < ac.numel(); ++i) ga[i] += s * gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

namespace {

void check_logits(const Tensor& logits, const char* op) {
  check_2d(logits, op);
  if (logits.dim(0) < 1 || logits.dim(1) < 2) {
    throw shape_error(std::string(op) + " requires B>=1, C>=2, got " +
                      shape_str(logits.shape()));
  }
}

Tensor entropy_impl(const Tensor& logits, const std::vector<float>* weights) {
  const int b = logits.dim(0), c = logits.dim(1);
  std::vector<float> logp(static_cast<std::size_t>(logits.numel()));
  log_softmax_rows(logits.data(), b, c, logp.data());
  double wsum = 0.0;
  double total = 0.0;
  std::vector<double> row_h(static_cast<std::size_t>(b));
  for (int bi = 0; bi < b; ++bi) {
    const float* lp = logp.data() + static_cast<std::ptrdiff_t>(bi) * c;
    double h = 0.0;
    for (int j = 0; j < c; ++j) {
      h -= std::exp(static_cast<double>(lp[j])) * lp[j];
    }
    row_h[static_cast<std::size_t>(bi)] = h;
    const double w = weights ? (*weights)[static_cast<std::size_t>(bi)] : 1.0;
    wsum += w;
    total += w * h;
  }
  if (wsum <= 0.0) throw numeric_error("entropy weights sum to zero");
  Tensor out = Tensor::scalar(static_cast<float>(total / wsum));
  if (!out.all_finite()) throw numeric_error("mean_entropy is not finite");

  if (taping({&logits})) {
    out.set_requires_grad(true);
    Tensor xc = logits, oc = out;
    auto logp_s = std::make_shared<std::vector<float>>(std::move(logp));
    auto rowh_s = std::make_shared<std::vector<double>>(std::move(row_h));
    auto w_s = weights ? std::make_shared<std::vector<float>>(*weights)
                       : nullptr;
    active_tape()->record([xc, oc, logp_s, rowh_s, w_s, b, c, wsum]() mutable {
      const float g0 = oc.grad()[0];
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        const double w = w_s ? (*w_s)[static_cast<std::size_t>(bi)] : 1.0;
        if (w == 0.0) continue;
        const double scale = g0 * w / wsum;
        const float* lp = logp_s->data() + static_cast<std::ptrdiff_t>(bi) * c;
        const double h = (*rowh_s)[static_cast<std::size_t>(bi)];
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(static_cast<double>(lp[j]));
          gx[static_cast<std::ptrdiff_t>(bi) * c + j] +=
              static_cast<float>(-scale * p * (lp[j] + h));
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor mean_entropy(const Tensor& logits) {
  check_logits(logits, "mean_entropy");
  count_op(OpKind::kMeanEntropy);
  return entropy_impl(logits, nullptr);
}

Tensor mean_entropy_weighted(const Tensor& logits,
                             const std::vector<float>& row_weights) {
  check_logits(logits, "mean_entropy");
  if (static_cast<int>(row_weights.size()) != logits.dim(0)) {
    throw shape_error("entropy weights length mismatch");
  }
  count_op(OpKind::kMeanEntropy);
  return entropy_impl(logits, &row_weights);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          float label_smoothing) {
  check_logits(logits, "cross_entropy_mean");
  const int b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw shape_error("cross_entropy labels length " +
                      std::to_string(labels.size()) + " vs batch " +
                      std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || y >= c) throw shape_error("label out of range");
  }
  count_op(OpKind::kCrossEntropyMean);
  std::vector<float> logp(static_cast<std::size_t>(logits.numel()));
  log_softmax_rows(logits.data(), b, c, logp.data());
  const float eps = label_smoothing;
  double total = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    const float* lp = logp.data() + static_cast<std::ptrdiff_t>(bi) * c;
    double row = -(1.0 - eps) * lp[labels[static_cast<std::size_t>(bi)]];
    if (eps > 0.0f) {
      double u = 0.0;
      for (int j = 0; j < c; ++j) u -= lp[j];
      row += (eps / c) * u;
    }
    total += row;
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / b));
  if (!out.all_finite()) throw numeric_error("cross_entropy is not finite");

  if (taping({&logits})) {
    out.set_requires_grad(true);
    Tensor xc = logits, oc = out;
    auto logp_s = std::make_shared<std::vector<float>>(std::move(logp));
    auto labels_s = std::make_shared<std::vector<int>>(labels);
    active_tape()->record([xc, oc, logp_s, labels_s, b, c, eps]() mutable {
      const float g0 = oc.grad()[0];
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        const float* lp = logp_s->data() + static_cast<std::ptrdiff_t>(bi) * c;
        const int y = (*labels_s)[static_cast<std::size_t>(bi)];
        for (int j = 0; j < c; ++j) {
          const float p = std::exp(lp[j]);
          const float t = (j == y ? 1.0f - eps : 0.0f) + eps / c;
          gx[static_cast<std::ptrdiff_t>(bi) * c + j] +=
              g0 * (p - t) / static_cast<float>(b);
        }
      }
    });
  }
  return out;
}

Tensor mean_softmax_entropy(const Tensor& logits) {
  check_logits(logits, "mean_softmax_entropy");
  const int b = logits.dim(0), c = logits.dim(1);
  count_op(OpKind::kMeanSoftmaxEntropy);
  std::vector<float> logp(static_cast<std::size_t>(logits.numel()));
  log_softmax_rows(logits.data(), b, c, logp.data());
  std::vector<double> q(static_cast<std::size_t>(c), 0.0);
  for (int bi = 0; bi < b; ++bi) {
    const float* lp = logp.data() + static_cast<std::ptrdiff_t>(bi) * c;
    for (int j = 0; j < c; ++j) {
      q[static_cast<std::size_t>(j)] += std::exp(static_cast<double>(lp[j]));
    }
  }
  std::vector<double> logq(static_cast<std::size_t>(c));
  double h = 0.0;
  for (int j = 0; j < c; ++j) {
    q[static_cast<std::size_t>(j)] /= b;
    logq[static_cast<std::size_t>(j)] =
        std::log(std::max(q[static_cast<std::size_t>(j)], 1e-12));
    h -= q[static_cast<std::size_t>(j)] * logq[static_cast<std::size_t>(j)];
  }
  Tensor out = Tensor::scalar(static_cast<float>(h));
  if (!out.all_finite()) throw numeric_error("mean_softmax_entropy not finite");

  if (taping({&logits})) {
    out.set_requires_grad(true);
    Tensor xc = logits, oc = out;
    auto logp_s = std::make_shared<std::vector<float>>(std::move(logp));
    auto logq_s = std::make_shared<std::vector<double>>(std::move(logq));
    active_tape()->record([xc, oc, logp_s, logq_s, b, c]() mutable {
      const float g0 = oc.grad()[0];
      float* gx = xc.grad();
      for (int bi = 0; bi < b; ++bi) {
        const float* lp = logp_s->data() + static_cast<std::ptrdiff_t>(bi) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) {
          dot += std::exp(static_cast<double>(lp[j])) *
                 (*logq_s)[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(static_cast<double>(lp[j]));
          gx[static_cast<std::ptrdiff_t>(bi) * c + j] += static_cast<float>(
              g0 * (p / b) * (dot - (*logq_s)[static_cast<std::size_t>(j)]));
        }
      }
    });
  }
  return out;
}

std::vector<float> row_entropies(const Tensor& logits) {
  check_logits(logits, "row_entropies");
  const int b = logits.dim(0), c = logits.dim(1);
  std::vector<float> logp(static_cast<std::size_t>(logits.numel()));
  log_softmax_rows(logits.data(), b, c, logp.data());
  std::vector<float> out(static_cast<std::size_t>(b));
  for (int bi = 0; bi < b; ++bi) {
    const float* lp = logp.data() + static_cast<std::ptrdiff_t>(bi) * c;
    double h = 0.0;
    for (int j = 0; j < c; ++j) {
      h -= std::exp(static_cast<double>(lp[j])) * lp[j];
    }
    out[static_cast<std::size_t>(bi)] = static_cast<float>(h);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  check_2d(logits, "argmax_rows input");
  const int b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(b));
  const float* z = logits.data();
  for (int bi = 0; bi < b; ++bi) {
    const float* row = z + static_cast<std::ptrdiff_t>(bi) * c;
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    }
    out[static_cast<std::size_t>(bi)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dispatcher

Tensor forward_op(OpKind kind, std::span<Tensor> inputs, const OpCtx& ctx) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].all_finite()) {
      throw numeric_error(std::string("non-finite input to ") +
                          op_kind_name(kind) + " at operand " +
                          std::to_string(i));
    }
  }
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw shape_error(std::string(op_kind_name(kind)) + " expects " +
                        std::to_string(n) + " inputs, got " +
                        std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul:
      need(2);
      return matmul(inputs[0], inputs[1], ctx.trans_a, ctx.trans_b);
    case OpKind::kConv2d:
      need(2);
      return conv2d(inputs[0], inputs[1], ctx.stride, ctx.pad);
    case OpKind::kRelu:
      need(1);
      return relu(inputs[0]);
    case OpKind::kMaxPool:
      need(1);
      return max_pool(inputs[0], ctx.kernel, ctx.stride);
    case OpKind::kGlobalAvgPool:
      need(1);
      return global_avg_pool(inputs[0]);
    case OpKind::kBatchNorm:
      need(5);
      return batch_norm(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4],
                        ctx.bn);
    case OpKind::kLinearBiasAdd:
      need(2);
      return linear_bias_add(inputs[0], inputs[1]);
    case OpKind::kSoftmax:
      need(1);
      return softmax(inputs[0]);
    case OpKind::kLogSoftmax:
      need(1);
      return log_softmax(inputs[0]);
    case OpKind::kElementwiseAdd:
      need(2);
      return elementwise_add(inputs[0], inputs[1]);
    case OpKind::kScalarScale:
      need(1);
      return scalar_scale(inputs[0], ctx.scale);
    case OpKind::kMeanEntropy:
      need(1);
      return mean_entropy(inputs[0]);
    case OpKind::kMeanSoftmaxEntropy:
      need(1);
      return mean_softmax_entropy(inputs[0]);
    case OpKind::kCrossEntropyMean:
    case OpKind::kCount:
      break;
  }
  throw shape_error("unsupported op kind for dispatcher");
}

}  // namespace ttb
