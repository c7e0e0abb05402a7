#include "doctest.h"

#include <cmath>

#include "oracle_utils.hpp"
#include "tpcnet/attention.hpp"
#include "tpcnet/params.hpp"

using tpc::Tensor;
namespace ad = tpc::ad;
namespace attn = tpc::attn;

namespace {

Tensor<double> rnd(uint64_t seed, int c, int h, int w, double lo = -1, double hi = 1) {
  tpc::Rng rng(seed);
  return tpc::random_tensor<double>(rng, c, h, w, lo, hi);
}

}  // namespace

TEST_CASE("count_attention_flops: closed forms and the 25% ratio") {
  using tpc::MsaVariant;
  // H=W=16, C=8, k=2 -> 16*16*64/4 = 4096
  CHECK(tpc::count_attention_flops(16, 16, 8, 2, MsaVariant::kCrossGuided) == 4096);
  // k = C (h_k = 1) -> H*W*C/2
  CHECK(tpc::count_attention_flops(8, 10, 6, 6, MsaVariant::kCrossGuided) == 8 * 10 * 6 / 2);

  int idx = 0;
  for (int H : {8, 16, 32, 64, 128})
    for (int C : {4, 8, 16, 64})
      for (int k : {1, 2, 4}) {
        long long cg = tpc::count_attention_flops(H, H, C, k, MsaVariant::kCrossGuided);
        long long conv = tpc::count_attention_flops(H, H, C, k, MsaVariant::kConventional);
        CHECK(cg == static_cast<long long>(H) * H * C * C / (2 * k));
        CHECK(cg * 4 == conv);  // exactly 25%
        ++idx;
      }
  CHECK(idx >= 20);
  CHECK_THROWS_AS(tpc::count_attention_flops(16, 16, 7, 2, tpc::MsaVariant::kCrossGuided),
                  std::invalid_argument);
}

TEST_CASE("cross_concat: channel layout and slicing recovery") {
  ad::Tape<double> t;
  auto f1a = ad::constant(t, Tensor<double>::full(2, 3, 3, 1.0));
  auto f2a = ad::constant(t, Tensor<double>::full(2, 3, 3, 2.0));
  auto f1b = ad::constant(t, Tensor<double>::full(2, 3, 3, 3.0));
  auto f2b = ad::constant(t, Tensor<double>::full(2, 3, 3, 4.0));
  auto [m1, m2] = attn::cross_concat(f1a, f2a, f1b, f2b);
  CHECK(m1.c() == 4);
  CHECK(m1.val().at(0, 0, 0) == 1.0);  // F1_M = [F1A, F2B]
  CHECK(m1.val().at(2, 0, 0) == 4.0);
  CHECK(m2.val().at(0, 0, 0) == 2.0);  // F2_M = [F2A, F1B]
  CHECK(m2.val().at(2, 0, 0) == 3.0);

  // random inputs: channel slices recover the originals exactly
  auto ra = ad::constant(t, rnd(1, 3, 4, 4));
  auto rb = ad::constant(t, rnd(2, 3, 4, 4));
  auto rc = ad::constant(t, rnd(3, 3, 4, 4));
  auto rd = ad::constant(t, rnd(4, 3, 4, 4));
  auto [x1, x2] = attn::cross_concat(ra, rb, rc, rd);
  CHECK(tpc::max_abs_diff(ad::slice_channels(x1, 0, 3).val(), ra.val()) == 0.0);
  CHECK(tpc::max_abs_diff(ad::slice_channels(x1, 3, 3).val(), rd.val()) == 0.0);
  CHECK(tpc::max_abs_diff(ad::slice_channels(x2, 0, 3).val(), rb.val()) == 0.0);
  CHECK(tpc::max_abs_diff(ad::slice_channels(x2, 3, 3).val(), rc.val()) == 0.0);
}

TEST_CASE("project_qv_kv: zero weights, identity parameters, conv oracle") {
  int C = 2;  // per projection half
  ad::Tape<double> t;
  auto f1m = ad::constant(t, rnd(10, 2 * C, 4, 4));
  auto f2m = ad::constant(t, rnd(11, 2 * C, 4, 4));

  auto zeros = [&](int c, int h, int w) { return ad::constant(t, Tensor<double>(c, h, w)); };

  SUBCASE("all-zero weights give zero projections") {
    attn::QvKvParams<double> p{zeros(2 * C, 2 * C, 1), zeros(2 * C, 1, 1), zeros(2 * C, 1, 9),
                               zeros(2 * C, 1, 1),     zeros(2 * C, 2 * C, 1), zeros(2 * C, 1, 1),
                               zeros(2 * C, 1, 9),     zeros(2 * C, 1, 1)};
    auto [q, vs, k, v] = attn::project_qv_kv(f1m, f2m, p);
    CHECK(q.val().max() == 0.0);
    CHECK(vs.val().min() == 0.0);
    CHECK(k.val().max() == 0.0);
    CHECK(v.val().max() == 0.0);
  }

  SUBCASE("identity 1x1 and delta depthwise reproduce the channel halves") {
    Tensor<double> eye(2 * C, 2 * C, 1);
    for (int i = 0; i < 2 * C; ++i) eye.at(i, i, 0) = 1.0;
    Tensor<double> delta(2 * C, 1, 9);
    for (int i = 0; i < 2 * C; ++i) delta.at(i, 0, 4) = 1.0;  // center tap
    attn::QvKvParams<double> p{ad::constant(t, eye),  zeros(2 * C, 1, 1), ad::constant(t, delta),
                               zeros(2 * C, 1, 1),    ad::constant(t, eye), zeros(2 * C, 1, 1),
                               ad::constant(t, delta), zeros(2 * C, 1, 1)};
    auto [q, vs, k, v] = attn::project_qv_kv(f1m, f2m, p);
    CHECK(tpc::max_abs_diff(q.val(), oracle::slice_ref(f1m.val(), 0, C)) == 0.0);
    CHECK(tpc::max_abs_diff(vs.val(), oracle::slice_ref(f1m.val(), C, C)) == 0.0);
    CHECK(tpc::max_abs_diff(k.val(), oracle::slice_ref(f2m.val(), 0, C)) == 0.0);
    CHECK(tpc::max_abs_diff(v.val(), oracle::slice_ref(f2m.val(), C, C)) == 0.0);
  }

  SUBCASE("random parameters match the loop-based convolution oracle") {
    auto pw_w = rnd(30, 2 * C, 2 * C, 1), pw_b = rnd(31, 2 * C, 1, 1);
    auto dw_w = rnd(32, 2 * C, 1, 9), dw_b = rnd(33, 2 * C, 1, 1);
    attn::QvKvParams<double> p{ad::constant(t, pw_w), ad::constant(t, pw_b), ad::constant(t, dw_w),
                               ad::constant(t, dw_b), ad::constant(t, pw_w), ad::constant(t, pw_b),
                               ad::constant(t, dw_w), ad::constant(t, dw_b)};
    auto [q, vs, k, v] = attn::project_qv_kv(f1m, f2m, p);
    auto qv_ref = oracle::conv2d_ref(oracle::conv2d_ref(f1m.val(), pw_w, pw_b, 1), dw_w, dw_b, 3, 2 * C);
    CHECK(tpc::max_abs_diff(q.val(), oracle::slice_ref(qv_ref, 0, C)) < 1e-12);
    CHECK(tpc::max_abs_diff(vs.val(), oracle::slice_ref(qv_ref, C, C)) < 1e-12);
  }
}

TEST_CASE("fuse_values: zero weights, selector kernel, conv oracle") {
  int C = 3;
  ad::Tape<double> t;
  auto v = ad::constant(t, rnd(40, C, 4, 4));
  auto vs = ad::constant(t, rnd(41, C, 4, 4));

  SUBCASE("zero weights give bias only") {
    auto w = ad::constant(t, Tensor<double>(C, 2 * C, 9));
    auto b = ad::constant(t, Tensor<double>::full(C, 1, 1, 0.3));
    auto out = attn::fuse_values(v, vs, w, b);
    for (double x : out.val().v) CHECK(x == 0.3);
  }

  SUBCASE("delta taps selecting V reproduce V") {
    Tensor<double> w(C, 2 * C, 9);
    for (int i = 0; i < C; ++i) w.v[(static_cast<size_t>(i) * 2 * C + i) * 9 + 4] = 1.0;
    auto out = attn::fuse_values(v, vs, ad::constant(t, w), ad::constant(t, Tensor<double>(C, 1, 1)));
    CHECK(tpc::max_abs_diff(out.val(), v.val()) == 0.0);
  }

  SUBCASE("random weights match the loop oracle") {
    auto w = rnd(42, C, 2 * C, 9);
    auto b = rnd(43, C, 1, 1);
    auto out = attn::fuse_values(v, vs, ad::constant(t, w), ad::constant(t, b));
    auto ref = oracle::conv2d_ref(oracle::concat_ref({v.val(), vs.val()}), w, b, 3);
    CHECK(tpc::max_abs_diff(out.val(), ref) < 1e-12);
  }
}

TEST_CASE("cg_attention: uniform softmax under zero queries") {
  int C = 4, heads = 2, H = 3, W = 3;
  ad::Tape<double> t;
  auto q = ad::constant(t, Tensor<double>(C, H, W));
  auto k = ad::constant(t, rnd(50, C, H, W));
  auto vp = ad::constant(t, rnd(51, C, H, W));
  auto alog = ad::constant(t, Tensor<double>(heads, 1, 1));
  auto out = attn::cg_attention(q, k, vp, alog, heads);
  int hk = C / heads;
  // each output row is the mean of the head's V' rows
  for (int j = 0; j < heads; ++j)
    for (int r = 0; r < hk; ++r)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double mean = 0;
          for (int rr = 0; rr < hk; ++rr) mean += vp.val().at(j * hk + rr, y, x);
          mean /= hk;
          CHECK(out.val().at(j * hk + r, y, x) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("cg_attention: degenerate single-channel heads return V'") {
  int C = 3, heads = 3;
  ad::Tape<double> t;
  auto q = ad::constant(t, rnd(60, C, 4, 4));
  auto k = ad::constant(t, rnd(61, C, 4, 4));
  auto vp = ad::constant(t, rnd(62, C, 4, 4));
  auto alog = ad::constant(t, rnd(63, heads, 1, 1));
  auto out = attn::cg_attention(q, k, vp, alog, heads);
  CHECK(tpc::max_abs_diff(out.val(), vp.val()) < 1e-15);
}

TEST_CASE("cg_attention: brute-force matmul oracle, 2 heads, h_k = 2") {
  int C = 4, heads = 2, H = 2, W = 2;
  Tensor<double> qv(C, H, W), kv(C, H, W), vv(C, H, W);
  for (size_t i = 0; i < qv.size(); ++i) {
    qv.v[i] = static_cast<double>((i * 7 + 3) % 5) - 2.0;
    kv.v[i] = static_cast<double>((i * 3 + 1) % 7) - 3.0;
    vv.v[i] = static_cast<double>((i * 5 + 2) % 11) - 5.0;
  }
  Tensor<double> alog(heads, 1, 1);
  alog.v = {std::log(1.5), std::log(0.7)};

  ad::Tape<double> t;
  auto out = attn::cg_attention(ad::constant(t, qv), ad::constant(t, kv), ad::constant(t, vv),
                                ad::constant(t, alog), heads);

  int hk = C / heads, n = H * W;
  size_t plane = static_cast<size_t>(H) * W;
  for (int j = 0; j < heads; ++j) {
    std::vector<std::vector<double>> qm(hk), km(hk), vm(hk);
    for (int r = 0; r < hk; ++r) {
      qm[r].assign(qv.v.begin() + (j * hk + r) * plane, qv.v.begin() + (j * hk + r + 1) * plane);
      km[r].assign(kv.v.begin() + (j * hk + r) * plane, kv.v.begin() + (j * hk + r + 1) * plane);
      vm[r].assign(vv.v.begin() + (j * hk + r) * plane, vv.v.begin() + (j * hk + r + 1) * plane);
    }
    auto ref = oracle::head_attention_ref(qm, km, vm, std::exp(alog.v[j]));
    for (int r = 0; r < hk; ++r)
      for (int p = 0; p < n; ++p)
        CHECK(out.val().v[(j * hk + r) * plane + p] == doctest::Approx(ref[r][p]).epsilon(1e-12));
  }
}

TEST_CASE("cg_attention: huge alpha drives heads to uniform averaging") {
  int C = 6, heads = 2, H = 4, W = 4;
  ad::Tape<double> t;
  auto q = ad::constant(t, rnd(70, C, H, W));
  auto k = ad::constant(t, rnd(71, C, H, W));
  auto vp = ad::constant(t, rnd(72, C, H, W));
  auto alog = ad::constant(t, Tensor<double>::full(heads, 1, 1, std::log(1e6)));
  auto out = attn::cg_attention(q, k, vp, alog, heads);
  int hk = C / heads;
  double worst = 0;
  for (int j = 0; j < heads; ++j)
    for (int r = 0; r < hk; ++r)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double mean = 0;
          for (int rr = 0; rr < hk; ++rr) mean += vp.val().at(j * hk + rr, y, x);
          mean /= hk;
          worst = std::max(worst, std::abs(out.val().at(j * hk + r, y, x) - mean));
        }
  CHECK(worst < 1e-3);
}

TEST_CASE("cg_attention: permutation equivariance over positions under uniform scores") {
  int C = 4, heads = 2, H = 2, W = 3;
  ad::Tape<double> t;
  auto q = ad::constant(t, Tensor<double>(C, H, W));
  auto k = ad::constant(t, rnd(80, C, H, W));
  auto vp_t = rnd(81, C, H, W);
  auto alog = ad::constant(t, Tensor<double>(heads, 1, 1));
  auto base = attn::cg_attention(q, k, ad::constant(t, vp_t), alog, heads).val();

  // permute spatial positions of V' (reverse scan order)
  int n = H * W;
  Tensor<double> vp_p(C, H, W);
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < n; ++p) vp_p.v[c * n + p] = vp_t.v[c * n + (n - 1 - p)];
  auto perm = attn::cg_attention(q, k, ad::constant(t, vp_p), alog, heads).val();
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < n; ++p)
      CHECK(perm.v[c * n + p] == doctest::Approx(base.v[c * n + (n - 1 - p)]).epsilon(1e-12));
}

namespace {

// registers one standalone cg_msa parameter set and returns the tree
tpc::ParamTree<double> make_msa_tree(int C, int heads, bool pair_down, uint64_t seed) {
  tpc::ParamTree<double> tree;
  tpc::Rng rng(seed);
  tpc::ArchBuilder<double> b;
  b.tree = &tree;
  b.rng = &rng;
  b.conv("qv.pw", 2 * C, 2 * C, 1);
  b.conv("qv.dw", 2 * C, 2 * C, 3, 2 * C);
  b.conv("kv.pw", 2 * C, 2 * C, 1);
  b.conv("kv.dw", 2 * C, 2 * C, 3, 2 * C);
  b.conv("fuse", 2 * C, C, 3);
  b.vec("alpha", heads, 0.5 * std::log(static_cast<double>(C) / heads));
  b.conv("expand", C, pair_down ? 8 * C : 2 * C, 1);
  b.conv("pos", 2 * C, 2 * C, 1);
  return tree;
}

attn::CgMsaParams<double> bind_msa(tpc::ParamVars<double>& P) {
  return {{P("qv.pw.w"), P("qv.pw.b"), P("qv.dw.w"), P("qv.dw.b"),
           P("kv.pw.w"), P("kv.pw.b"), P("kv.dw.w"), P("kv.dw.b")},
          P("fuse.w"), P("fuse.b"), P("alpha"), P("expand.w"), P("expand.b"),
          P("pos.w"), P("pos.b")};
}

}  // namespace

TEST_CASE("cg_msa: shape contract C x 16 x 16 -> 2C x 16 x 16") {
  for (int C : {2, 4}) {
    auto tree = make_msa_tree(C, 2, true, 99);
    ad::Tape<double> t;
    tpc::ParamVars<double> P(t, tree, false);
    auto fa = ad::constant(t, rnd(100 + C, C, 16, 16));
    auto fb = ad::constant(t, rnd(101 + C, C, 16, 16));
    auto out = attn::cg_msa(fa, fb, bind_msa(P), {2, true, false});
    CHECK(out.c() == 2 * C);
    CHECK(out.h() == 16);
    CHECK(out.w() == 16);
  }
}

TEST_CASE("cg_msa: zero params except identity positional taps pass through concat") {
  int C = 3;
  auto tree = make_msa_tree(C, 1, true, 5);
  for (size_t i = 0; i < tree.size(); ++i)
    for (auto& x : tree.item(i).second.v) x = 0.0;
  // pos conv = identity on concat(FA, FB)
  auto& posw = tree.at("pos.w");
  for (int i = 0; i < 2 * C; ++i) posw.at(i, i, 0) = 1.0;

  ad::Tape<double> t;
  tpc::ParamVars<double> P(t, tree, false);
  auto fa = ad::constant(t, rnd(110, C, 8, 8));
  auto fb = ad::constant(t, rnd(111, C, 8, 8));
  auto out = attn::cg_msa(fa, fb, bind_msa(P), {1, true, false});
  auto ref = oracle::concat_ref({fa.val(), fb.val()});
  CHECK(tpc::max_abs_diff(out.val(), ref) == 0.0);
}

TEST_CASE("cg_msa: end-to-end against a composition of oracles on a 4-channel 4x4 case") {
  int C = 4, heads = 2;
  auto tree = make_msa_tree(C, heads, true, 777);
  ad::Tape<double> t;
  tpc::ParamVars<double> P(t, tree, false);
  Tensor<double> fa_t = rnd(120, C, 4, 4), fb_t = rnd(121, C, 4, 4);
  auto out = attn::cg_msa(ad::constant(t, fa_t), ad::constant(t, fb_t), bind_msa(P),
                          {heads, true, false});

  // independent recomputation with plain loops
  auto pd = [](const Tensor<double>& f, bool diag) {
    Tensor<double> y(f.c, f.h / 2, f.w / 2);
    for (int c = 0; c < f.c; ++c)
      for (int oy = 0; oy < y.h; ++oy)
        for (int ox = 0; ox < y.w; ++ox)
          y.at(c, oy, ox) = diag ? (f.at(c, 2 * oy, 2 * ox) + f.at(c, 2 * oy + 1, 2 * ox + 1)) / 2
                                 : (f.at(c, 2 * oy, 2 * ox + 1) + f.at(c, 2 * oy + 1, 2 * ox)) / 2;
    return y;
  };
  auto f1m = oracle::concat_ref({pd(fa_t, false), pd(fb_t, true)});
  auto f2m = oracle::concat_ref({pd(fa_t, true), pd(fb_t, false)});
  auto qv = oracle::conv2d_ref(oracle::conv2d_ref(f1m, tree.at("qv.pw.w"), tree.at("qv.pw.b"), 1),
                               tree.at("qv.dw.w"), tree.at("qv.dw.b"), 3, 2 * C);
  auto kv = oracle::conv2d_ref(oracle::conv2d_ref(f2m, tree.at("kv.pw.w"), tree.at("kv.pw.b"), 1),
                               tree.at("kv.dw.w"), tree.at("kv.dw.b"), 3, 2 * C);
  auto q = oracle::slice_ref(qv, 0, C), vs = oracle::slice_ref(qv, C, C);
  auto k = oracle::slice_ref(kv, 0, C), v = oracle::slice_ref(kv, C, C);
  auto vp = oracle::conv2d_ref(oracle::concat_ref({v, vs}), tree.at("fuse.w"), tree.at("fuse.b"), 3);

  int hk = C / heads, n = 2 * 2;
  size_t plane = 4;
  Tensor<double> att(C, 2, 2);
  for (int j = 0; j < heads; ++j) {
    std::vector<std::vector<double>> qm(hk), km(hk), vm(hk);
    for (int r = 0; r < hk; ++r) {
      qm[r].assign(q.v.begin() + (j * hk + r) * plane, q.v.begin() + (j * hk + r + 1) * plane);
      km[r].assign(k.v.begin() + (j * hk + r) * plane, k.v.begin() + (j * hk + r + 1) * plane);
      vm[r].assign(vp.v.begin() + (j * hk + r) * plane, vp.v.begin() + (j * hk + r + 1) * plane);
    }
    auto h = oracle::head_attention_ref(qm, km, vm, std::exp(tree.at("alpha").v[j]));
    for (int r = 0; r < hk; ++r)
      for (int p = 0; p < n; ++p) att.v[(j * hk + r) * plane + p] = h[r][p];
  }
  auto expanded = oracle::conv2d_ref(att, tree.at("expand.w"), tree.at("expand.b"), 1);
  Tensor<double> shuffled(2 * C, 4, 4);
  for (int c = 0; c < 2 * C; ++c)
    for (int a = 0; a < 2; ++a)
      for (int bb = 0; bb < 2; ++bb)
        for (int y = 0; y < 2; ++y)
          for (int x = 0; x < 2; ++x)
            shuffled.at(c, 2 * y + a, 2 * x + bb) = expanded.at(4 * c + 2 * a + bb, y, x);
  auto pos = oracle::conv2d_ref(oracle::concat_ref({fa_t, fb_t}), tree.at("pos.w"), tree.at("pos.b"), 1);
  auto ref = shuffled + pos;
  CHECK(tpc::max_abs_diff(out.val(), ref) < 1e-12);
}
