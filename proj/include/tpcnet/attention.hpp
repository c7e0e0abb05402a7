#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "tpcnet/autodiff.hpp"

// Cross-guided multi-head self-attention. Feature pairs are pair-downsampled
// into half-resolution sub-features, cross-concatenated, projected to Q/V*
// and K/V with shared-capacity layers, and attended over channels (the score
// matrix is h_k x h_k, so cost is linear in spatial size).

namespace tpc {

struct AttentionConfig {
  int channels = 0;  // channel count of Q/K/V'
  int heads = 1;

  int per_head() const { return channels / heads; }
  void validate() const {
    if (channels <= 0 || heads <= 0 || channels % heads != 0)
      throw std::invalid_argument("AttentionConfig: channels must be a positive multiple of heads");
  }
};

enum class MsaVariant { kCrossGuided, kConventional };

// Counts only the two attention matrix multiplications (multiply-accumulate
// pairs counted as 2 ops each side collapses to the closed forms
// H*W*C^2/(2k) and 2*H*W*C^2/k).
inline long long count_attention_flops(int H, int W, int C, int k, MsaVariant variant) {
  if (C <= 0 || k <= 0 || C % k != 0)
    throw std::invalid_argument("count_attention_flops: C must be a positive multiple of k");
  if (H <= 0 || W <= 0) throw std::invalid_argument("count_attention_flops: bad spatial dims");
  long long hk = C / k;
  if (variant == MsaVariant::kCrossGuided) {
    if (H % 2 || W % 2)
      throw std::invalid_argument("count_attention_flops: pair downsampling needs even H and W");
    long long positions = static_cast<long long>(H) * W / 4;
    return 2ll * k * positions * hk * hk;
  }
  long long positions = static_cast<long long>(H) * W;
  return 2ll * k * positions * hk * hk;
}

namespace attn {

using ad::Var;

// (F1, F2): fixed-kernel stride-2 averages, [[0,.5],[.5,0]] and [[.5,0],[0,.5]].
template <typename T>
std::pair<Var<T>, Var<T>> pair_downsample(Var<T> f) {
  return {ad::pair_down(f, /*diagonal=*/false), ad::pair_down(f, /*diagonal=*/true)};
}

template <typename T>
std::pair<Var<T>, Var<T>> cross_concat(Var<T> f1a, Var<T> f2a, Var<T> f1b, Var<T> f2b) {
  return {ad::concat_channels<T>({f1a, f2b}), ad::concat_channels<T>({f2a, f1b})};
}

template <typename T>
struct QvKvParams {
  Var<T> qv_pw_w, qv_pw_b, qv_dw_w, qv_dw_b;
  Var<T> kv_pw_w, kv_pw_b, kv_dw_w, kv_dw_b;
};

// QV* = dwconv3x3(conv1x1(F1_M)), KV = dwconv3x3(conv1x1(F2_M)); each output
// splits in half along channels into (Q, V*) and (K, V).
template <typename T>
std::array<Var<T>, 4> project_qv_kv(Var<T> f1m, Var<T> f2m, const QvKvParams<T>& p) {
  int d = f1m.c();
  if (d % 2) throw std::invalid_argument("project_qv_kv: channel count must be even");
  Var<T> qv = ad::conv2d(ad::conv2d(f1m, p.qv_pw_w, p.qv_pw_b, 1), p.qv_dw_w, p.qv_dw_b, 3, d);
  Var<T> kv = ad::conv2d(ad::conv2d(f2m, p.kv_pw_w, p.kv_pw_b, 1), p.kv_dw_w, p.kv_dw_b, 3, d);
  Var<T> q = ad::slice_channels(qv, 0, d / 2);
  Var<T> v_star = ad::slice_channels(qv, d / 2, d / 2);
  Var<T> k = ad::slice_channels(kv, 0, d / 2);
  Var<T> v = ad::slice_channels(kv, d / 2, d / 2);
  return {q, v_star, k, v};
}

// V' = conv3x3(concat(V, V*)) with C output channels.
template <typename T>
Var<T> fuse_values(Var<T> v, Var<T> v_star, Var<T> w, Var<T> b) {
  return ad::conv2d(ad::concat_channels<T>({v, v_star}), w, b, 3);
}

// Per head j: out_j = Softmax(Q_j K_j^T / alpha_j) V'_j, softmax over the last
// axis of the h_k x h_k score matrix. alpha_log holds one log-scale per head
// (positive via exp).
template <typename T>
Var<T> cg_attention(Var<T> q, Var<T> k, Var<T> v_prime, Var<T> alpha_log, int heads) {
  AttentionConfig cfg{q.c(), heads};
  cfg.validate();
  if (k.c() != q.c() || v_prime.c() != q.c())
    throw std::invalid_argument("cg_attention: channel mismatch");
  if (alpha_log.val().c != heads || alpha_log.val().h != 1 || alpha_log.val().w != 1)
    throw std::invalid_argument("cg_attention: alpha_log must be heads x 1 x 1");
  int hk = cfg.per_head();
  int H = q.h(), W = q.w();
  int n = H * W;
  Var<T> alpha = ad::exp_op(alpha_log);
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (int j = 0; j < heads; ++j) {
    Var<T> qj = ad::reshape(ad::slice_channels(q, j * hk, hk), 1, hk, n);
    Var<T> kj = ad::reshape(ad::slice_channels(k, j * hk, hk), 1, hk, n);
    Var<T> vj = ad::reshape(ad::slice_channels(v_prime, j * hk, hk), 1, hk, n);
    Var<T> scores = ad::matmul(qj, kj, false, true);          // h_k x h_k
    Var<T> scaled = ad::div_scalar_var(scores, ad::slice_channels(alpha, j, 1));
    Var<T> att = ad::softmax_rows(scaled);
    Var<T> outj = ad::matmul(att, vj);                        // h_k x n
    outs.push_back(ad::reshape(outj, hk, H, W));
  }
  return ad::concat_channels<T>(outs);
}

template <typename T>
struct CgMsaParams {
  QvKvParams<T> proj;
  Var<T> fuse_w, fuse_b;      // conv3x3, 2C -> C
  Var<T> alpha_log;           // heads x 1 x 1
  Var<T> expand_w, expand_b;  // conv1x1, C -> 8C (pair-downsampled) or C -> 2C (M)
  Var<T> pos_w, pos_b;        // conv1x1 positional encoding to 2C
};

struct CgMsaOptions {
  int heads = 1;
  bool pair_downsampled = true;    // false in the M variants
  bool pos_from_first_only = false;  // true in the V variants
};

// Full pipeline: C x H x W stream pair -> 2C x H x W cross-guided features.
// With pair downsampling the attention runs at half resolution and a 1x1
// expansion to 8C feeds the pixel shuffle back to full size; the M variants
// keep full resolution with F1_M = concat(A,B), F2_M = concat(B,A) and a 1x1
// expansion to 2C. The positional encoding conv is added last.
template <typename T>
Var<T> cg_msa(Var<T> fa, Var<T> fb, const CgMsaParams<T>& p, const CgMsaOptions& opt) {
  if (fa.c() != fb.c() || fa.h() != fb.h() || fa.w() != fb.w())
    throw std::invalid_argument("cg_msa: stream shapes differ");
  Var<T> f1m, f2m;
  if (opt.pair_downsampled) {
    auto [f1a, f2a] = pair_downsample(fa);
    auto [f1b, f2b] = pair_downsample(fb);
    std::tie(f1m, f2m) = cross_concat(f1a, f2a, f1b, f2b);
  } else {
    f1m = ad::concat_channels<T>({fa, fb});
    f2m = ad::concat_channels<T>({fb, fa});
  }
  auto [q, v_star, k, v] = project_qv_kv(f1m, f2m, p.proj);
  Var<T> v_prime = fuse_values(v, v_star, p.fuse_w, p.fuse_b);
  Var<T> att = cg_attention(q, k, v_prime, p.alpha_log, opt.heads);
  Var<T> up = ad::conv2d(att, p.expand_w, p.expand_b, 1);
  if (opt.pair_downsampled) up = ad::pixel_shuffle2(up);
  Var<T> pos_in = opt.pos_from_first_only ? fa : ad::concat_channels<T>({fa, fb});
  Var<T> pos = ad::conv2d(pos_in, p.pos_w, p.pos_b, 1);
  return ad::add(up, pos);
}

}  // namespace attn
}  // namespace tpc
