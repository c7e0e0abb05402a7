#pragma once

#include <string>

#include "tpcnet/blocks.hpp"

// Light and reflectivity feature estimators. The illumination-invariant input
// map is a log-gradient stand-in with one learnable smoothing scale: global
// multiplicative brightness turns into an additive log offset, which the
// spatial gradient removes.

namespace tpc {
namespace estimators {

using ad::Var;

// Central difference along x or y with replicated borders, so constant fields
// map to exactly zero.
template <typename T>
Var<T> central_diff(Var<T> f, bool along_x) {
  const auto& fv = f.val();
  ad::Tape<T>& t = *f.tape;
  Tensor<T> y(fv.c, fv.h, fv.w);
  for (int c = 0; c < fv.c; ++c)
    for (int iy = 0; iy < fv.h; ++iy)
      for (int ix = 0; ix < fv.w; ++ix) {
        int ip = along_x ? std::min(ix + 1, fv.w - 1) : ix;
        int im = along_x ? std::max(ix - 1, 0) : ix;
        int jp = along_x ? iy : std::min(iy + 1, fv.h - 1);
        int jm = along_x ? iy : std::max(iy - 1, 0);
        y.at(c, iy, ix) = (fv.at(c, jp, ip) - fv.at(c, jm, im)) * T(0.5);
      }
  int id = t.push(std::move(y), t.wants(f.id),
                  [f = f.id, along_x, self = (int)t.size()](ad::Tape<T>& t) {
    if (!t.wants(f)) return;
    const auto& gy = t.grad(self);
    auto& gf = t.grad(f);
    for (int c = 0; c < gy.c; ++c)
      for (int iy = 0; iy < gy.h; ++iy)
        for (int ix = 0; ix < gy.w; ++ix) {
          T g = gy.at(c, iy, ix) * T(0.5);
          int ip = along_x ? std::min(ix + 1, gy.w - 1) : ix;
          int im = along_x ? std::max(ix - 1, 0) : ix;
          int jp = along_x ? iy : std::min(iy + 1, gy.h - 1);
          int jm = along_x ? iy : std::max(iy - 1, 0);
          gf.at(c, jp, ip) += g;
          gf.at(c, jm, im) -= g;
        }
  });
  return t.var(id);
}

// W = |grad G_sigma(log(mean_c(I) + eps))|, eps = 1e-4.
template <typename T>
Var<T> illumination_invariant(Var<T> image, Var<T> sigma) {
  Var<T> intensity = ad::channel_mean(image);
  Var<T> logi = ad::map_unary(
      ad::add_const(intensity, 1e-4), [](double v) { return std::log(v); },
      [](double v) { return 1.0 / v; });
  Var<T> smooth = ad::gaussian_blur(logi, sigma);
  Var<T> gx = central_diff(smooth, true);
  Var<T> gy = central_diff(smooth, false);
  return ad::sqrt_op(ad::add(ad::mul(gx, gx), ad::mul(gy, gy)));
}

template <typename T>
struct LfeVars {
  Var<T> e_hat;       // C x H x W
  Var<T> alpha_hat;   // 1 x H x W, sigmoid range
  Var<T> L_hat;       // alpha * e, sum-exact split
  Var<T> L_bar_hat;   // complement
};

template <typename T>
void declare_lfe(ArchBuilder<T>& b, const std::string& p, int c) {
  b.scalar(p + ".ciconv.log_sigma", 0.0);  // smoothing scale, exp-reparameterized
  b.conv(p + ".fuse", 4, c, 3);
  b.conv(p + ".e", c, c, 3);
  b.conv(p + ".alpha", c, 1, 3);
}

template <typename T>
LfeVars<T> lfe_forward(ParamVars<T>& P, const std::string& p, Var<T> image) {
  Var<T> sigma = ad::exp_op(P(p + ".ciconv.log_sigma"));
  Var<T> w = illumination_invariant(image, sigma);
  Var<T> fused = ad::conv2d(ad::concat_channels<T>({image, w}), P(p + ".fuse.w"), P(p + ".fuse.b"), 3);
  Var<T> e_hat = ad::conv2d(fused, P(p + ".e.w"), P(p + ".e.b"), 3);
  Var<T> alpha = ad::sigmoid(ad::conv2d(fused, P(p + ".alpha.w"), P(p + ".alpha.b"), 3));
  auto [L, Lbar] = ad::illumination_split(alpha, e_hat);
  return {e_hat, alpha, L, Lbar};
}

// Ablated light path (split/recovery off): e routed directly, complement learned.
template <typename T>
void declare_lfe_no_split(ArchBuilder<T>& b, const std::string& p, int c) {
  b.conv(p + ".lbar", c, c, 3);
}

template <typename T>
LfeVars<T> lfe_forward_no_split(ParamVars<T>& P, const std::string& p, LfeVars<T> base) {
  Var<T> lbar = ad::conv2d(base.e_hat, P(p + ".lbar.w"), P(p + ".lbar.b"), 3);
  return {base.e_hat, base.alpha_hat, base.e_hat, lbar};
}

template <typename T>
struct RfeVars {
  Var<T> E_hat;        // C x H x W
  Var<T> L_prime_hat;  // reciprocal proxy
  Var<T> R_hat;        // (E - Lbar/2) * L'
};

template <typename T>
void declare_rfe(ArchBuilder<T>& b, const std::string& p, int c, int heads) {
  b.conv(p + ".embed", 3, c, 3);
  blocks::declare_cgab(b, p + ".cgab", c, heads, CgabVariant::kBase, 1);
  b.conv(p + ".proj", 2 * c, c, 1);  // single-stream use: A = B = input, back to C
  b.conv(p + ".lprime", c, c, 3);
}

template <typename T>
RfeVars<T> rfe_forward(ParamVars<T>& P, const std::string& p, Var<T> image, Var<T> l_bar_hat,
                       int heads, bool use_recovery) {
  Var<T> emb = ad::conv2d(image, P(p + ".embed.w"), P(p + ".embed.b"), 3);
  Var<T> g = blocks::cgab_forward(P, p + ".cgab", emb, emb, heads, CgabVariant::kBase);
  Var<T> e_hat = ad::conv2d(g, P(p + ".proj.w"), P(p + ".proj.b"), 1);
  if (!use_recovery) {
    // split/recovery off: plain learned mapping, no subtraction or product wiring
    Var<T> r = ad::conv2d(e_hat, P(p + ".lprime.w"), P(p + ".lprime.b"), 3);
    return {e_hat, r, r};
  }
  Var<T> d = ad::sub(e_hat, ad::scale(l_bar_hat, 0.5));
  Var<T> l_prime = ad::conv2d(d, P(p + ".lprime.w"), P(p + ".lprime.b"), 3);
  Var<T> r_hat = ad::mul(d, l_prime);
  return {e_hat, l_prime, r_hat};
}

}  // namespace estimators
}  // namespace tpc
