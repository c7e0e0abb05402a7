#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tpcnet/network.hpp"

using tpc::NetworkConfig;
using tpc::Tensor;
namespace ad = tpc::ad;
namespace net = tpc::net;

namespace {

Tensor<double> rnd(uint64_t seed, int c, int h, int w, double lo = 0, double hi = 1) {
  tpc::Rng rng(seed);
  return tpc::random_tensor<double>(rng, c, h, w, lo, hi);
}

NetworkConfig tiny_cfg() {
  NetworkConfig cfg;
  cfg.base_channels = 4;
  cfg.heads_base = 1;
  return cfg;
}

// mirrors the op sequence of apply_output_constraint elementwise
template <typename T>
T expected_composition(T a, T e, T r) {
  T lit = (a * e) * r;
  T na = static_cast<T>(a * -1.0);
  T om = static_cast<T>(na + 1.0);
  T amb = static_cast<T>((om * e) * 0.5);
  return lit + amb;
}

}  // namespace

TEST_CASE("dcgt: shape contract at 32x32") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<double>(cfg, 3);
  ad::Tape<double> t;
  tpc::ParamVars<double> P(t, params, false);
  int C = cfg.base_channels;
  auto r = ad::constant(t, rnd(1, C, 32, 32));
  auto e = ad::constant(t, rnd(2, C, 32, 32));
  auto fc = ad::constant(t, rnd(3, C, 32, 32));
  auto alpha = ad::constant(t, rnd(4, 1, 32, 32));
  auto out = net::dcgt_forward(P, cfg, r, e, fc, alpha);
  for (auto v : {out.R_star, out.e_star, out.F_C_star}) {
    CHECK(v.c() == C);
    CHECK(v.h() == 32);
    CHECK(v.w() == 32);
  }
}

TEST_CASE("dcgt: color stream parameters do not affect R*/e*") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<double>(cfg, 5);
  auto zeroed = params;
  for (size_t i = 0; i < zeroed.size(); ++i) {
    const auto& name = zeroed.item(i).first;
    if (name.rfind("enc.col.", 0) == 0 || name.rfind("dec.col.", 0) == 0 ||
        name.rfind("bott.col", 0) == 0)
      for (auto& x : zeroed.item(i).second.v) x = 0.0;
  }
  int C = cfg.base_channels;
  Tensor<double> r = rnd(6, C, 32, 32), e = rnd(7, C, 32, 32), fc = rnd(8, C, 32, 32),
                 al = rnd(9, 1, 32, 32);
  auto run = [&](const tpc::ParamTree<double>& tree) {
    ad::Tape<double> t;
    tpc::ParamVars<double> P(t, tree, false);
    auto out = net::dcgt_forward(P, cfg, ad::constant(t, r), ad::constant(t, e),
                                 ad::constant(t, fc), ad::constant(t, al));
    return std::make_pair(out.R_star.val(), out.e_star.val());
  };
  auto [r1, e1] = run(params);
  auto [r2, e2] = run(zeroed);
  CHECK(tpc::max_abs_diff(r1, r2) == 0.0);
  CHECK(tpc::max_abs_diff(e1, e2) == 0.0);
}

TEST_CASE("dcgt: deterministic for fixed params and input") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<double>(cfg, 11);
  int C = cfg.base_channels;
  Tensor<double> r = rnd(12, C, 32, 32), e = rnd(13, C, 32, 32), fc = rnd(14, C, 32, 32),
                 al = rnd(15, 1, 32, 32);
  Tensor<double> first;
  for (int rep = 0; rep < 2; ++rep) {
    ad::Tape<double> t;
    tpc::ParamVars<double> P(t, params, false);
    auto out = net::dcgt_forward(P, cfg, ad::constant(t, r), ad::constant(t, e),
                                 ad::constant(t, fc), ad::constant(t, al));
    if (rep == 0)
      first = out.F_C_star.val();
    else
      CHECK(first.v == out.F_C_star.val().v);
  }
}

TEST_CASE("apply_output_constraint: closed forms and elementwise oracle") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<double>(cfg, 20);
  ad::Tape<double> t;
  tpc::ParamVars<double> P(t, params, false);
  int C = 3;
  auto r = ad::constant(t, rnd(21, C, 4, 4, -1, 1));
  auto e = ad::constant(t, rnd(22, C, 4, 4, -1, 1));

  auto ones = ad::constant(t, Tensor<double>::full(1, 4, 4, 1.0));
  auto out1 = net::apply_output_constraint(P, r, e, ones, true);
  auto prod = ad::mul(e, r);
  CHECK(tpc::max_abs_diff(out1.val(), prod.val()) < 1e-15);

  auto zeros = ad::constant(t, Tensor<double>(1, 4, 4));
  auto out0 = net::apply_output_constraint(P, r, e, zeros, true);
  for (size_t i = 0; i < out0.val().size(); ++i)
    CHECK(out0.val().v[i] == doctest::Approx(e.val().v[i] / 2).epsilon(1e-15));

  auto alpha = ad::constant(t, rnd(23, 1, 4, 4));
  auto outa = net::apply_output_constraint(P, r, e, alpha, true);
  size_t plane = 16;
  for (int c = 0; c < C; ++c)
    for (size_t i = 0; i < plane; ++i) {
      size_t j = c * plane + i;
      CHECK(outa.val().v[j] ==
            expected_composition(alpha.val().v[i], e.val().v[j], r.val().v[j]));
    }
}

TEST_CASE("cam_assemble: zero heads fall back to the (clamped) identity") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<double>(cfg, 30);
  for (const char* nm : {"cam.ycolor.w", "cam.ycolor.b", "cam.bright.w", "cam.bright.b"})
    for (auto& x : params.at(nm).v) x = 0.0;
  ad::Tape<double> t;
  tpc::ParamVars<double> P(t, params, false);
  Tensor<double> img = rnd(31, 3, 8, 8);
  auto i_color = net::from_rgb_op(ad::constant(t, img), "ycbcr");
  int C = cfg.base_channels;
  auto out = net::cam_assemble(P, ad::constant(t, rnd(32, C, 8, 8)),
                               ad::constant(t, rnd(33, C, 8, 8)), i_color, "ycbcr");
  CHECK(tpc::max_abs_diff(out.val(), img) < 1e-12);
  CHECK(out.val().min() >= 0.0);
  CHECK(out.val().max() <= 1.0);
}

TEST_CASE("tpcnet_forward: shape contract and output range") {
  auto cfg = tiny_cfg();
  auto nn = tpc::TpcNet<double>::make(cfg, 40);
  for (int hw : {32, 64}) {
    auto out = nn.enhance(rnd(41, 3, hw, hw));
    CHECK(out.c == 3);
    CHECK(out.h == hw);
    CHECK(out.w == hw);
    CHECK(out.min() >= 0.0);
    CHECK(out.max() <= 1.0);
    CHECK(out.all_finite());
  }
  CHECK_THROWS(nn.enhance(rnd(42, 3, 30, 30)));
}

TEST_CASE("tpcnet_forward: constraint identities hold exactly via probes") {
  for (uint64_t seed : {50ull, 51ull, 52ull, 53ull, 54ull}) {
    auto cfg = tiny_cfg();
    auto nn = tpc::TpcNet<double>::make(cfg, seed);
    net::ForwardProbes<double> pr;
    (void)nn.enhance(rnd(seed + 100, 3, 32, 32), &pr);

    size_t plane = 32 * 32;
    // illumination sum: L + Lbar == e, bit-exact
    for (size_t j = 0; j < pr.e_hat.size(); ++j)
      CHECK(pr.L_hat.v[j] + pr.L_bar_hat.v[j] == pr.e_hat.v[j]);
    // recovery wiring: R == (E - Lbar/2) * L', bit-exact
    for (size_t j = 0; j < pr.R_hat.size(); ++j) {
      double d = pr.E_hat.v[j] - pr.L_bar_hat.v[j] * 0.5;
      CHECK(pr.R_hat.v[j] == d * pr.L_prime_hat.v[j]);
    }
    // output composition: E* from (R*, e*, alpha), bit-exact
    for (size_t j = 0; j < pr.E_star.size(); ++j)
      CHECK(pr.E_star.v[j] ==
            expected_composition(pr.alpha_hat.v[j % plane], pr.e_star.v[j], pr.R_star.v[j]));
  }
}

TEST_CASE("tpcnet_forward: no NaN/Inf over random inputs at init") {
  auto cfg = tiny_cfg();
  auto nn = tpc::TpcNet<double>::make(cfg, 60);
  for (uint64_t s = 0; s < 20; ++s) {
    auto out = nn.enhance(rnd(1000 + s, 3, 32, 32));
    CHECK(out.all_finite());
  }
}

TEST_CASE("tpcnet_forward: every declared parameter is touched") {
  for (bool compose : {true, false})
    for (bool split : {true, false}) {
      auto cfg = tiny_cfg();
      cfg.use_composition = compose;
      cfg.use_split_recovery = split;
      auto params = tpc::build_tpcnet_params<double>(cfg, 70);
      ad::Tape<double> t;
      tpc::ParamVars<double> P(t, params, false);
      (void)net::tpcnet_forward(P, cfg, ad::constant(t, rnd(71, 3, 32, 32)));
      CHECK(P.touched().size() == params.size());
    }
}

TEST_CASE("checkpoint: bit-exact round trip") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<float>(cfg, 80);
  auto path = std::filesystem::temp_directory_path() / "tpcnet_test_ck.bin";
  tpc::save_checkpoint(path, params, cfg, 1234);
  auto loaded = tpc::load_checkpoint(path);
  CHECK(loaded.step == 1234);
  CHECK(loaded.cfg.base_channels == cfg.base_channels);
  CHECK(loaded.cfg.color_space == cfg.color_space);
  REQUIRE(loaded.params.size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(loaded.params.item(i).first == params.item(i).first);
    CHECK(loaded.params.item(i).second.v == params.item(i).second.v);
  }
  tpc::audit_checkpoint_shapes(loaded);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: truncation and corruption are detected") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<float>(cfg, 90);
  auto path = std::filesystem::temp_directory_path() / "tpcnet_test_ck2.bin";
  tpc::save_checkpoint(path, params, cfg, 7);

  std::ifstream f(path, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();

  auto tpath = std::filesystem::temp_directory_path() / "tpcnet_test_ck3.bin";
  {
    std::ofstream g(tpath, std::ios::binary);
    g.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  CHECK_THROWS_AS(tpc::load_checkpoint(tpath), tpc::CheckpointError);

  {
    std::ofstream g(tpath, std::ios::binary);
    g << "NOTACKPT 1\n";
  }
  CHECK_THROWS_AS(tpc::load_checkpoint(tpath), tpc::CheckpointError);

  // version bump
  std::string bumped = all;
  bumped[std::string(tpc::kCheckpointMagic).size() + 1] = '9';
  {
    std::ofstream g(tpath, std::ios::binary);
    g.write(bumped.data(), static_cast<std::streamsize>(bumped.size()));
  }
  CHECK_THROWS_AS(tpc::load_checkpoint(tpath), tpc::CheckpointError);

  std::filesystem::remove(path);
  std::filesystem::remove(tpath);
}

TEST_CASE("checkpoint: config drives shape reconstruction (audit catches edits)") {
  auto cfg = tiny_cfg();
  auto params = tpc::build_tpcnet_params<float>(cfg, 95);
  auto path = std::filesystem::temp_directory_path() / "tpcnet_test_ck4.bin";
  NetworkConfig wrong = cfg;
  wrong.base_channels = 8;  // manifest will disagree with these shapes
  tpc::save_checkpoint(path, params, wrong, 0);
  auto loaded = tpc::load_checkpoint(path);
  CHECK_THROWS_AS(tpc::audit_checkpoint_shapes(loaded), tpc::CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("count_params_flops: closed-form conv count and attention delegation") {
  // single conv 3->16, k=3: params = 3*16*9 + 16 = 448; the builder counts
  // through the same path as the model profiler
  tpc::ParamTree<float> tree;
  tpc::Rng rng(0);
  tpc::ArchBuilder<float> b;
  b.tree = &tree;
  b.rng = &rng;
  b.ref_h = 256;
  b.ref_w = 256;
  b.conv("c", 3, 16, 3);
  CHECK(tree.total_elements() == 448);
  CHECK(b.conv_flops == 2ll * 9 * 3 * 16 * 256 * 256);

  // attention term equals count_attention_flops exactly
  tpc::ArchBuilder<float> b2;
  b2.ref_h = 64;
  b2.ref_w = 64;
  b2.attention_site(16, 2, 2, true);
  CHECK(b2.attn_flops == tpc::count_attention_flops(32, 32, 16, 2, tpc::MsaVariant::kCrossGuided));
  b2.attn_flops = 0;
  b2.attention_site(16, 2, 8, false);
  CHECK(b2.attn_flops == tpc::count_attention_flops(8, 8, 16, 2, tpc::MsaVariant::kConventional));

  auto cost = tpc::count_params_flops(tiny_cfg(), 256, 256);
  CHECK(cost.params > 0);
  CHECK(cost.attn_flops > 0);
  CHECK(cost.conv_flops > cost.attn_flops);
}

TEST_CASE("ablation matrix: every constraint/color combination builds and runs") {
  for (bool compose : {true, false})
    for (bool split : {true, false})
      for (const char* space : {"ycbcr", "lab"}) {
        auto cfg = tiny_cfg();
        cfg.use_composition = compose;
        cfg.use_split_recovery = split;
        cfg.color_space = space;
        auto nn = tpc::TpcNet<double>::make(cfg, 99);
        auto out = nn.enhance(rnd(100, 3, 32, 32));
        CHECK(out.c == 3);
        CHECK(out.h == 32);
        CHECK(out.all_finite());
      }
}

TEST_CASE("reflection padding pads to multiples and crops back") {
  auto img = rnd(110, 3, 37, 50);
  int ph = 0, pw = 0;
  auto padded = tpc::reflect_pad_to_multiple(img, 16, ph, pw);
  CHECK(padded.h % 16 == 0);
  CHECK(padded.w % 16 == 0);
  CHECK(padded.h == 48);
  CHECK(padded.w == 64);
  // mirrored content, no edge duplication
  CHECK(padded.at(0, 37, 0) == img.at(0, 35, 0));
  CHECK(padded.at(1, 0, 50) == img.at(1, 0, 48));
  auto back = tpc::crop_top_left(padded, 37, 50);
  CHECK(tpc::max_abs_diff(back, img) == 0.0);

  // mirroring cannot synthesize more than h-1 rows
  auto tiny = rnd(111, 3, 4, 40);
  CHECK_THROWS_AS(tpc::reflect_pad_to_multiple(tiny, 16, ph, pw), std::invalid_argument);
}
