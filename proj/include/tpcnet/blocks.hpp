#pragma once

#include <stdexcept>
#include <string>

#include "tpcnet/attention.hpp"
#include "tpcnet/params.hpp"

// CGAB transformer blocks and the U-structure resampling blocks. Every block
// comes as a declare_*/forward pair sharing one naming scheme; declare_* runs
// against the ArchBuilder (parameter creation and analytic cost), forward
// against ParamVars on a tape.

namespace tpc {

enum class CgabVariant { kBase, kV, kM, kVM };

inline bool cgab_uses_pair_downsample(CgabVariant v) {
  return v == CgabVariant::kBase || v == CgabVariant::kV;
}
inline bool cgab_single_stream_residual(CgabVariant v) {
  return v == CgabVariant::kV || v == CgabVariant::kVM;
}

namespace blocks {

using ad::Var;

// ---- IEL: gated feed-forward, expansion factor 2, tanh gating ----

template <typename T>
void declare_iel(ArchBuilder<T>& b, const std::string& p, int c, int scale_div) {
  int gc = 2 * c;
  b.conv(p + ".b1.pw", c, gc, 1, 1, scale_div);
  b.conv(p + ".b1.dw", gc, gc, 3, gc, scale_div);
  b.conv(p + ".b2.pw", c, gc, 1, 1, scale_div);
  b.conv(p + ".b2.dw", gc, gc, 3, gc, scale_div);
  b.conv(p + ".out", gc, c, 1, 1, scale_div);
}

template <typename T>
Var<T> iel_forward(ParamVars<T>& P, const std::string& p, Var<T> x) {
  int gc = 2 * x.c();
  Var<T> b1 = ad::conv2d(ad::conv2d(x, P(p + ".b1.pw.w"), P(p + ".b1.pw.b"), 1),
                         P(p + ".b1.dw.w"), P(p + ".b1.dw.b"), 3, gc);
  Var<T> b2 = ad::conv2d(ad::conv2d(x, P(p + ".b2.pw.w"), P(p + ".b2.pw.b"), 1),
                         P(p + ".b2.dw.w"), P(p + ".b2.dw.b"), 3, gc);
  Var<T> gated = ad::mul(b1, ad::tanh_op(b2));
  return ad::conv2d(gated, P(p + ".out.w"), P(p + ".out.b"), 1);
}

// ---- CG-MSA parameter block ----

template <typename T>
void declare_cg_msa(ArchBuilder<T>& b, const std::string& p, int c, int heads,
                    CgabVariant variant, int scale_div) {
  bool pd = cgab_uses_pair_downsample(variant);
  int att_div = pd ? scale_div * 2 : scale_div;  // projections act on half resolution when pair-downsampled
  b.conv(p + ".qv.pw", 2 * c, 2 * c, 1, 1, att_div);
  b.conv(p + ".qv.dw", 2 * c, 2 * c, 3, 2 * c, att_div);
  b.conv(p + ".kv.pw", 2 * c, 2 * c, 1, 1, att_div);
  b.conv(p + ".kv.dw", 2 * c, 2 * c, 3, 2 * c, att_div);
  b.conv(p + ".fuse", 2 * c, c, 3, 1, att_div);
  if (c % heads) throw std::invalid_argument("declare_cg_msa: channels not divisible by heads");
  double hk = static_cast<double>(c) / heads;
  b.vec(p + ".alpha", heads, 0.5 * std::log(hk));  // alpha_H = exp(.) starts at sqrt(h_k)
  if (pd)
    b.conv(p + ".expand", c, 8 * c, 1, 1, att_div);
  else
    b.conv(p + ".expand", c, 2 * c, 1, 1, att_div);
  int pos_in = cgab_single_stream_residual(variant) ? c : 2 * c;
  b.conv(p + ".pos", pos_in, 2 * c, 1, 1, scale_div);
  b.attention_site(c, heads, scale_div, pd);
}

template <typename T>
Var<T> cg_msa_forward(ParamVars<T>& P, const std::string& p, Var<T> fa, Var<T> fb,
                      int heads, CgabVariant variant) {
  attn::CgMsaParams<T> mp{
      {P(p + ".qv.pw.w"), P(p + ".qv.pw.b"), P(p + ".qv.dw.w"), P(p + ".qv.dw.b"),
       P(p + ".kv.pw.w"), P(p + ".kv.pw.b"), P(p + ".kv.dw.w"), P(p + ".kv.dw.b")},
      P(p + ".fuse.w"), P(p + ".fuse.b"),
      P(p + ".alpha"),
      P(p + ".expand.w"), P(p + ".expand.b"),
      P(p + ".pos.w"), P(p + ".pos.b")};
  attn::CgMsaOptions opt{heads, cgab_uses_pair_downsample(variant),
                         cgab_single_stream_residual(variant)};
  return attn::cg_msa(fa, fb, mp, opt);
}

// ---- CGAB: LN + CG-MSA + IEL, output 2C ----

template <typename T>
void declare_cgab(ArchBuilder<T>& b, const std::string& p, int c, int heads,
                  CgabVariant variant, int scale_div) {
  b.layer_norm(p + ".ln_a", c);
  b.layer_norm(p + ".ln_b", c);
  declare_cg_msa(b, p + ".msa", c, heads, variant, scale_div);
  if (cgab_single_stream_residual(variant)) b.conv(p + ".vres", c, 2 * c, 1, 1, scale_div);
  b.layer_norm(p + ".ln_x", 2 * c);
  declare_iel(b, p + ".iel", 2 * c, scale_div);
}

template <typename T>
Var<T> cgab_forward(ParamVars<T>& P, const std::string& p, Var<T> fa, Var<T> fb,
                    int heads, CgabVariant variant) {
  if (fa.c() != fb.c()) throw std::invalid_argument("cgab_forward: stream channel mismatch");
  Var<T> la = ad::layer_norm_cw(fa, P(p + ".ln_a.gamma"), P(p + ".ln_a.beta"));
  Var<T> lb = ad::layer_norm_cw(fb, P(p + ".ln_b.gamma"), P(p + ".ln_b.beta"));
  Var<T> msa = cg_msa_forward(P, p + ".msa", la, lb, heads, variant);
  Var<T> residual = cgab_single_stream_residual(variant)
                        ? ad::conv2d(fa, P(p + ".vres.w"), P(p + ".vres.b"), 1)
                        : ad::concat_channels<T>({fa, fb});
  Var<T> x = ad::add(residual, msa);
  Var<T> lx = ad::layer_norm_cw(x, P(p + ".ln_x.gamma"), P(p + ".ln_x.beta"));
  return ad::add(x, iel_forward(P, p + ".iel", lx));
}

// ---- Resampling blocks: conv3x3 conversion, bilinear scale, PReLU ----

template <typename T>
void declare_downsample(ArchBuilder<T>& b, const std::string& p, int cin, int cout, int scale_div) {
  b.conv(p + ".conv", cin, cout, 3, 1, scale_div);
  b.scalar(p + ".prelu", 0.25);
}

template <typename T>
Var<T> downsample_block(ParamVars<T>& P, const std::string& p, Var<T> f) {
  Var<T> y = ad::conv2d(f, P(p + ".conv.w"), P(p + ".conv.b"), 3);
  y = ad::bilinear(y, f.h() / 2, f.w() / 2);
  return ad::prelu(y, P(p + ".prelu"));
}

template <typename T>
void declare_upsample(ArchBuilder<T>& b, const std::string& p, int cin, int cmid, int cskip,
                      int cout, int scale_div_in) {
  b.conv(p + ".conv", cin, cmid, 3, 1, scale_div_in);
  b.conv(p + ".fuse", cmid + cskip, cout, 1, 1, scale_div_in / 2);
  b.scalar(p + ".prelu", 0.25);
}

template <typename T>
Var<T> upsample_block(ParamVars<T>& P, const std::string& p, Var<T> f, Var<T> skip) {
  Var<T> y = ad::conv2d(f, P(p + ".conv.w"), P(p + ".conv.b"), 3);
  y = ad::bilinear(y, f.h() * 2, f.w() * 2);
  if (skip.h() != y.h() || skip.w() != y.w())
    throw std::invalid_argument("upsample_block: skip dims do not match upscaled feature");
  y = ad::conv2d(ad::concat_channels<T>({y, skip}), P(p + ".fuse.w"), P(p + ".fuse.b"), 1);
  return ad::prelu(y, P(p + ".prelu"));
}

}  // namespace blocks
}  // namespace tpc
