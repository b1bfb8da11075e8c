// Double-precision naive reference implementations used as independent
// oracles by the unit and acceptance suites. Deliberately loop-based and
// independent of the engine's kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace refops {

using dvec = std::vector<double>;

inline dvec matmul(const dvec& a, const dvec& b, int m, int k, int n,
                   bool trans_a = false, bool trans_b = false) {
  dvec c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[static_cast<std::size_t>(p) * m + i]
                                  : a[static_cast<std::size_t>(i) * k + p];
        const double bv = trans_b ? b[static_cast<std::size_t>(j) * k + p]
                                  : b[static_cast<std::size_t>(p) * n + j];
        acc += av * bv;
      }
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
  return c;
}

inline dvec conv2d(const dvec& x, const dvec& w, int b, int cin, int h,
                   int wd, int cout, int kh, int kw, int stride, int pad) {
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  dvec y(static_cast<std::size_t>(b) * cout * ho * wo, 0.0);
  for (int bi = 0; bi < b; ++bi) {
    for (int co = 0; co < cout; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x[((static_cast<std::size_t>(bi) * cin + ci) * h + iy) * wd + ix] *
                       w[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
              }
            }
          }
          y[((static_cast<std::size_t>(bi) * cout + co) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
  return y;
}

inline dvec relu(const dvec& x) {
  dvec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(0.0, x[i]);
  return y;
}

inline dvec max_pool(const dvec& x, int b, int c, int h, int w, int k, int s) {
  const int ho = (h - k) / s + 1;
  const int wo = (w - k) / s + 1;
  dvec y(static_cast<std::size_t>(b) * c * ho * wo);
  std::size_t oi = 0;
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const double* plane = x.data() + (static_cast<std::size_t>(bi) * c + ci) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          double best = -1e300;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              best = std::max(best, plane[(oy * s + ky) * w + ox * s + kx]);
            }
          }
          y[oi] = best;
        }
      }
    }
  }
  return y;
}

inline dvec global_avg_pool(const dvec& x, int b, int c, int hw) {
  dvec y(static_cast<std::size_t>(b) * c);
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      const double* plane = x.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
      for (int i = 0; i < hw; ++i) acc += plane[i];
      y[static_cast<std::size_t>(bi) * c + ci] = acc / hw;
    }
  }
  return y;
}

// mode: true = batch statistics (biased variance), false = running stats.
// When `running_out` is non-null in batch mode, writes the EMA update with
// unbiased variance, matching the engine contract.
inline dvec batch_norm(const dvec& x, const dvec& gamma, const dvec& beta,
                       const dvec& rmean, const dvec& rvar, int b, int c,
                       int hw, bool batch_mode, double eps = 1e-5) {
  dvec y(x.size());
  for (int ci = 0; ci < c; ++ci) {
    double mu, var;
    if (batch_mode) {
      double acc = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const double* p = x.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
        for (int i = 0; i < hw; ++i) acc += p[i];
      }
      mu = acc / (static_cast<double>(b) * hw);
      double vacc = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const double* p = x.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
        for (int i = 0; i < hw; ++i) vacc += (p[i] - mu) * (p[i] - mu);
      }
      var = vacc / (static_cast<double>(b) * hw);
    } else {
      mu = rmean[static_cast<std::size_t>(ci)];
      var = rvar[static_cast<std::size_t>(ci)];
    }
    const double invstd = 1.0 / std::sqrt(var + eps);
    for (int bi = 0; bi < b; ++bi) {
      const std::size_t off = (static_cast<std::size_t>(bi) * c + ci) * hw;
      for (int i = 0; i < hw; ++i) {
        y[off + i] = gamma[static_cast<std::size_t>(ci)] *
                         ((x[off + i] - mu) * invstd) +
                     beta[static_cast<std::size_t>(ci)];
      }
    }
  }
  return y;
}

inline dvec linear_bias_add(const dvec& x, const dvec& bias, int b, int c) {
  dvec y(x.size());
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      y[static_cast<std::size_t>(bi) * c + ci] =
          x[static_cast<std::size_t>(bi) * c + ci] + bias[static_cast<std::size_t>(ci)];
    }
  }
  return y;
}

inline dvec log_softmax_rows(const dvec& z, int b, int c) {
  dvec out(z.size());
  for (int bi = 0; bi < b; ++bi) {
    const double* row = z.data() + static_cast<std::size_t>(bi) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(row[j] - m);
    const double lse = m + std::log(se);
    for (int j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(bi) * c + j] = row[j] - lse;
    }
  }
  return out;
}

inline dvec softmax_rows(const dvec& z, int b, int c) {
  dvec out = log_softmax_rows(z, b, c);
  for (auto& v : out) v = std::exp(v);
  return out;
}

inline double mean_entropy(const dvec& logits, int b, int c,
                           const dvec* weights = nullptr) {
  const dvec lp = log_softmax_rows(logits, b, c);
  double total = 0.0, wsum = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    double h = 0.0;
    for (int j = 0; j < c; ++j) {
      const double l = lp[static_cast<std::size_t>(bi) * c + j];
      h -= std::exp(l) * l;
    }
    const double w = weights ? (*weights)[static_cast<std::size_t>(bi)] : 1.0;
    total += w * h;
    wsum += w;
  }
  return total / wsum;
}

inline double cross_entropy_mean(const dvec& logits,
                                 const std::vector<int>& labels, int b, int c,
                                 double eps = 0.0) {
  const dvec lp = log_softmax_rows(logits, b, c);
  double total = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    double row = -(1.0 - eps) * lp[static_cast<std::size_t>(bi) * c +
                                   labels[static_cast<std::size_t>(bi)]];
    if (eps > 0.0) {
      double u = 0.0;
      for (int j = 0; j < c; ++j) u -= lp[static_cast<std::size_t>(bi) * c + j];
      row += (eps / c) * u;
    }
    total += row;
  }
  return total / b;
}

inline double mean_softmax_entropy(const dvec& logits, int b, int c) {
  const dvec p = softmax_rows(logits, b, c);
  double h = 0.0;
  for (int j = 0; j < c; ++j) {
    double q = 0.0;
    for (int bi = 0; bi < b; ++bi) q += p[static_cast<std::size_t>(bi) * c + j];
    q /= b;
    h -= q * std::log(std::max(q, 1e-12));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Full reference classifier forward (the engine's smallcnn-32 architecture)
// with cross-entropy loss, in double precision. Parameters are a name->dvec
// map mirroring the engine's parameter names.

struct SmallCnnDims {
  int classes = 10;
  int widths[3] = {32, 64, 128};
};

inline double smallcnn_ce_loss(const std::map<std::string, dvec>& params,
                               const dvec& images, const std::vector<int>& labels,
                               int b, bool batch_mode,
                               const SmallCnnDims& dims = {}) {
  dvec h = images;
  int cin = 3, side = 32;
  for (int li = 1; li <= 3; ++li) {
    const std::string idx = std::to_string(li);
    const int cout = dims.widths[li - 1];
    h = conv2d(h, params.at("conv" + idx + ".w"), b, cin, side, side, cout, 3,
               3, 1, 1);
    h = batch_norm(h, params.at("bn" + idx + ".gamma"),
                   params.at("bn" + idx + ".beta"),
                   params.at("bn" + idx + ".rmean"),
                   params.at("bn" + idx + ".rvar"), b, cout, side * side,
                   batch_mode);
    h = relu(h);
    h = max_pool(h, b, cout, side, side, 2, 2);
    side /= 2;
    cin = cout;
  }
  dvec emb = global_avg_pool(h, b, cin, side * side);
  dvec scores = matmul(emb, params.at("head.w"), b, cin, dims.classes, false, true);
  dvec logits = linear_bias_add(scores, params.at("head.b"), b, dims.classes);
  return cross_entropy_mean(logits, labels, b, dims.classes);
}

}  // namespace refops
