#pragma once

#include <functional>
#include <iomanip>
#include <ostream>
#include <string>

#include "tpcnet/dataset.hpp"
#include "tpcnet/evaluation.hpp"
#include "tpcnet/network.hpp"
#include "tpcnet/training.hpp"

// In-binary property suite behind the `selftest` command: the physical
// constraint identities, the attention complexity ratio, shape contracts,
// color round-trips and a small gradient check.

namespace tpc {

inline bool run_selftest(std::ostream& os) {
  int failures = 0;
  auto check = [&](const std::string& name, const std::function<bool()>& fn) {
    bool ok = false;
    std::string err;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      err = e.what();
    }
    os << (ok ? "[ok]   " : "[FAIL] ") << name;
    if (!ok && !err.empty()) os << " (" << err << ")";
    os << "\n";
    if (!ok) ++failures;
  };

  check("tpc round-trip recovers reflectivity to 1e-9", [] {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      auto s = make_synthetic_scene<double>(seed, 3, 32, 32);
      auto pair = split_illumination(s.e, s.alpha);
      Tensor<double> inv(3, 32, 32);
      for (size_t i = 0; i < inv.size(); ++i) inv.v[i] = 1.0 / pair.L.v[i];
      if (max_abs_diff(recover_reflectivity(s.E_approx, pair.L_bar, inv), s.R) >= 1e-9) return false;
    }
    return true;
  });

  check("taylor truncation bound", [] {
    const double eps = std::numeric_limits<double>::epsilon();
    for (uint64_t seed = 0; seed < 10; ++seed) {
      auto s = make_synthetic_scene<double>(seed, 3, 16, 16);
      size_t plane = 256;
      for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i) {
          size_t j = c * plane + i;
          double bound = s.rho_f.v[i] * s.rho_f.v[i] * s.e.v[j] * s.R.v[j];
          double slop =
              16 * eps * (std::abs(s.e.v[j]) + std::abs(s.E_exact.v[j]) + std::abs(s.E_approx.v[j]));
          if (std::abs(s.E_exact.v[j] - s.E_approx.v[j]) > bound + slop) return false;
        }
    }
    return true;
  });

  check("constraint identities inside the forward pass", [] {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    auto nn = TpcNet<double>::make(cfg, 7);
    Rng rng(8);
    net::ForwardProbes<double> pr;
    (void)nn.enhance(random_tensor<double>(rng, 3, 32, 32, 0, 1), &pr);
    size_t plane = 32 * 32;
    for (size_t j = 0; j < pr.e_hat.size(); ++j)
      if (pr.L_hat.v[j] + pr.L_bar_hat.v[j] != pr.e_hat.v[j]) return false;
    for (size_t j = 0; j < pr.R_hat.size(); ++j)
      if (pr.R_hat.v[j] != (pr.E_hat.v[j] - pr.L_bar_hat.v[j] * 0.5) * pr.L_prime_hat.v[j]) return false;
    for (size_t j = 0; j < pr.E_star.size(); ++j) {
      double a = pr.alpha_hat.v[j % plane];
      double lit = (a * pr.e_star.v[j]) * pr.R_star.v[j];
      double amb = ((a * -1.0 + 1.0) * pr.e_star.v[j]) * 0.5;
      if (pr.E_star.v[j] != lit + amb) return false;
    }
    return true;
  });

  check("attention cost ratio is exactly 1/4", [] {
    for (int H : {16, 32, 64, 128, 256})
      for (int C : {8, 16, 64})
        for (int k : {1, 2, 4}) {
          long long cg = count_attention_flops(H, H, C, k, MsaVariant::kCrossGuided);
          long long conv = count_attention_flops(H, H, C, k, MsaVariant::kConventional);
          if (cg * 4 != conv) return false;
          if (cg != static_cast<long long>(H) * H * C * C / (2 * k)) return false;
        }
    return true;
  });

  check("shape suite across variants and sizes", [] {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    auto params = build_tpcnet_params<float>(cfg, 3);
    for (int hw : {32, 64}) {
      ad::Tape<float> t;
      ParamVars<float> P(t, params, false);
      Rng rng(hw);
      auto out = net::tpcnet_forward(P, cfg, ad::constant(t, random_tensor<float>(rng, 3, hw, hw, 0, 1)));
      if (out.c() != 3 || out.h() != hw || out.w() != hw) return false;
    }
    return true;
  });

  check("color round-trips (ycbcr < 1e-4, lab < 1e-3)", [] {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
      auto img = random_tensor<double>(rng, 3, 1, 1, 0, 1);
      if (max_abs_diff(ycbcr_to_rgb(rgb_to_ycbcr(img)), img) >= 1e-4) return false;
      if (max_abs_diff(lab_to_rgb(rgb_to_lab(img)), img) >= 1e-3) return false;
    }
    return true;
  });

  check("gradient check on a tiny network", [] {
    NetworkConfig cfg;
    cfg.base_channels = 2;
    auto params = build_tpcnet_params<double>(cfg, 50);
    Rng rng(51);
    auto low = random_tensor<double>(rng, 3, 32, 32, 0.15, 0.45);
    auto high = random_tensor<double>(rng, 3, 32, 32, 0.4, 0.85);
    loss::LossWeights w;

    ad::Tape<double> tape;
    ParamVars<double> P(tape, params);
    auto l = training_loss(tape, P, cfg, low, high, w);
    tape.backward(l.id);
    auto grads = params.zeros_like();
    P.accumulate_grads(grads);

    auto eval = [&](const ParamTree<double>& tree) {
      ad::Tape<double> t2;
      ParamVars<double> P2(t2, tree, false);
      return training_loss(t2, P2, cfg, low, high, w).val().v[0];
    };
    Rng pick(52);
    for (int probe = 0; probe < 5; ++probe) {
      size_t pi = static_cast<size_t>(pick.uniform_int(static_cast<int>(params.size())));
      const auto& name = params.item(pi).first;
      size_t idx = static_cast<size_t>(pick.uniform_int(static_cast<int>(params.item(pi).second.size())));
      auto plus = params, minus = params;
      plus.at(name).v[idx] += 1e-4;
      minus.at(name).v[idx] -= 1e-4;
      double fd = (eval(plus) - eval(minus)) / 2e-4;
      double an = grads.at(name).v[idx];
      if (std::abs(fd - an) / std::max({1e-8, std::abs(fd), std::abs(an)}) >= 1e-3) return false;
    }
    return true;
  });

  check("checkpoint round-trip is bit-exact", [] {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    auto params = build_tpcnet_params<float>(cfg, 9);
    auto path = std::filesystem::temp_directory_path() / "tpcnet_selftest_ck.tpc";
    save_checkpoint(path, params, cfg, 42);
    auto loaded = load_checkpoint(path);
    std::filesystem::remove(path);
    if (loaded.step != 42 || loaded.params.size() != params.size()) return false;
    for (size_t i = 0; i < params.size(); ++i)
      if (loaded.params.item(i).second.v != params.item(i).second.v) return false;
    return true;
  });

  os << (failures == 0 ? "selftest passed" : "selftest FAILED") << "\n";
  return failures == 0;
}

}  // namespace tpc
