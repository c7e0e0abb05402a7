#pragma once

// Plain-loop reference implementations used as independent oracles. These are
// written scatter-style (iterating input contributions) so they do not share
// structure with the library's gather-style kernels.

#include <cmath>
#include <vector>

#include "tpcnet/tensor.hpp"

namespace oracle {

using tpc::Tensor;

// weight (cout, cin/groups, k*k), zero 'same' padding, stride 1
inline Tensor<double> conv2d_ref(const Tensor<double>& x, const Tensor<double>& w,
                                 const Tensor<double>& b, int k, int groups = 1) {
  int cpg = x.c / groups, opg = w.c / groups;
  Tensor<double> y(w.c, x.h, x.w);
  for (int co = 0; co < w.c; ++co)
    for (int oy = 0; oy < x.h; ++oy)
      for (int ox = 0; ox < x.w; ++ox) y.at(co, oy, ox) = b.v[co];
  int pad = k / 2;
  for (int ci = 0; ci < x.c; ++ci) {
    int g = ci / cpg;
    for (int iy = 0; iy < x.h; ++iy)
      for (int ix = 0; ix < x.w; ++ix) {
        double xv = x.at(ci, iy, ix);
        for (int oc = 0; oc < opg; ++oc) {
          int co = g * opg + oc;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int oy = iy - ky + pad, ox = ix - kx + pad;
              if (oy < 0 || oy >= x.h || ox < 0 || ox >= x.w) continue;
              double wv = w.v[(static_cast<size_t>(co) * cpg + (ci - g * cpg)) * k * k + ky * k + kx];
              y.at(co, oy, ox) += wv * xv;
            }
        }
      }
  }
  return y;
}

inline Tensor<double> concat_ref(const std::vector<Tensor<double>>& xs) {
  int c = 0;
  for (const auto& x : xs) c += x.c;
  Tensor<double> y(c, xs[0].h, xs[0].w);
  size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.v.begin(), x.v.end(), y.v.begin() + off);
    off += x.size();
  }
  return y;
}

inline Tensor<double> slice_ref(const Tensor<double>& x, int c0, int len) {
  Tensor<double> y(len, x.h, x.w);
  size_t plane = static_cast<size_t>(x.h) * x.w;
  std::copy(x.v.begin() + c0 * plane, x.v.begin() + (c0 + len) * plane, y.v.begin());
  return y;
}

// explicit matrix attention for one head: rows of q/k/vp are channels
inline std::vector<std::vector<double>> head_attention_ref(
    const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& k,
    const std::vector<std::vector<double>>& vp, double alpha) {
  size_t hk = q.size(), n = q[0].size();
  std::vector<std::vector<double>> scores(hk, std::vector<double>(hk, 0.0));
  for (size_t i = 0; i < hk; ++i)
    for (size_t j = 0; j < hk; ++j) {
      double acc = 0;
      for (size_t p = 0; p < n; ++p) acc += q[i][p] * k[j][p];
      scores[i][j] = acc / alpha;
    }
  for (size_t i = 0; i < hk; ++i) {
    double mx = scores[i][0];
    for (double s : scores[i]) mx = std::max(mx, s);
    double z = 0;
    for (size_t j = 0; j < hk; ++j) {
      scores[i][j] = std::exp(scores[i][j] - mx);
      z += scores[i][j];
    }
    for (size_t j = 0; j < hk; ++j) scores[i][j] /= z;
  }
  std::vector<std::vector<double>> out(hk, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < hk; ++i)
    for (size_t j = 0; j < hk; ++j)
      for (size_t p = 0; p < n; ++p) out[i][p] += scores[i][j] * vp[j][p];
  return out;
}

}  // namespace oracle
