#pragma once

#include <stdexcept>

#include "tpcnet/tensor.hpp"

// Kubelka-Munk image formation on plain value grids, and the synthetic-scene
// oracle used by the constraint tests. All operations are pure functions.
//
// Conventions: scalar fields (rho_f, alpha) are 1 x H x W and broadcast across
// the channels of C x H x W maps. The reflected-light composition is always
// evaluated elementwise as (alpha*e)*R + ((1-alpha)*e)*0.5 so that independent
// evaluations of the same inputs agree bit for bit.

namespace tpc {

template <typename T>
struct IlluminationPair {
  Tensor<T> L;      // alpha * e
  Tensor<T> L_bar;  // e - L, so L + L_bar == e holds exactly
};

template <typename T>
struct SceneGroundTruth {
  Tensor<T> e;         // C x H x W illumination, > 0
  Tensor<T> rho_f;     // 1 x H x W specular coefficient, [0, 0.5)
  Tensor<T> alpha;     // 1 - 2*rho_f
  Tensor<T> R;         // C x H x W reflectivity, [0, 1]
  Tensor<T> E_exact;   // per the quadratic KM form
  Tensor<T> E_approx;  // per the first-order split form
};

namespace detail {

template <typename T>
void require_scalar_field(const Tensor<T>& f, const char* what) {
  if (f.c != 1) throw std::invalid_argument(std::string(what) + ": expected 1 x H x W, got " + f.shape_str());
}

template <typename T>
void require_same_hw(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument(std::string(what) + ": spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Shared scalar kernel for the first-order composition; the network-side
// constraint probe re-evaluates exactly this expression.
template <typename T>
inline T compose_scalar(T alpha, T e, T R) {
  return (alpha * e) * R + ((T(1) - alpha) * e) * T(0.5);
}

}  // namespace detail

// alpha(x) = 1 - 2*rho_f(x); rejects rho_f outside [0, 0.5).
template <typename T>
Tensor<T> alpha_from_rho(const Tensor<T>& rho_f) {
  detail::require_scalar_field(rho_f, "alpha_from_rho");
  Tensor<T> a(1, rho_f.h, rho_f.w);
  for (size_t i = 0; i < rho_f.size(); ++i) {
    T r = rho_f.v[i];
    if (!(r >= T(0) && r < T(0.5)))
      throw std::domain_error("alpha_from_rho: rho_f must lie in [0, 0.5)");
    a.v[i] = T(1) - T(2) * r;
  }
  return a;
}

// E = e * ((1 - rho_f)^2 * R + rho_f), rho_f broadcast across channels.
template <typename T>
Tensor<T> exact_km_reflected(const Tensor<T>& e, const Tensor<T>& rho_f, const Tensor<T>& R) {
  detail::require_scalar_field(rho_f, "exact_km_reflected");
  detail::require_same_hw(e, rho_f, "exact_km_reflected");
  if (!e.same_shape(R)) throw std::invalid_argument("exact_km_reflected: e/R shape mismatch");
  Tensor<T> E(e.c, e.h, e.w);
  size_t plane = static_cast<size_t>(e.h) * e.w;
  for (int ci = 0; ci < e.c; ++ci)
    for (size_t i = 0; i < plane; ++i) {
      size_t j = static_cast<size_t>(ci) * plane + i;
      T rho = rho_f.v[i];
      T om = T(1) - rho;
      E.v[j] = e.v[j] * ((om * om) * R.v[j] + rho);
    }
  return E;
}

// E = alpha*e*R + (1-alpha)*e/2, alpha broadcast across channels.
template <typename T>
Tensor<T> compose_reflected(const Tensor<T>& e, const Tensor<T>& alpha, const Tensor<T>& R) {
  detail::require_scalar_field(alpha, "compose_reflected");
  detail::require_same_hw(e, alpha, "compose_reflected");
  if (!e.same_shape(R)) throw std::invalid_argument("compose_reflected: e/R shape mismatch");
  Tensor<T> E(e.c, e.h, e.w);
  size_t plane = static_cast<size_t>(e.h) * e.w;
  for (int ci = 0; ci < e.c; ++ci)
    for (size_t i = 0; i < plane; ++i) {
      size_t j = static_cast<size_t>(ci) * plane + i;
      E.v[j] = detail::compose_scalar(alpha.v[i], e.v[j], R.v[j]);
    }
  return E;
}

namespace detail {

// Split e into (L, L_bar) with L + L_bar == e bit-exact. Start from L = a*e
// and L_bar = e - L. When a*e < e/2 the subtraction may round such that the
// re-added sum misses e by one ulp; in that case L_bar >= e/2, so e - L_bar
// is exact by Sterbenz and re-deriving L (a one-ulp nudge) pins the sum.
template <typename T>
inline void exact_split(T a, T e, T& L, T& L_bar) {
  L = a * e;
  L_bar = e - L;
  if (L + L_bar != e) L = e - L_bar;
}

}  // namespace detail

// L = alpha*e (to within one ulp of e), L_bar the complement; the pair sums
// to e exactly.
template <typename T>
IlluminationPair<T> split_illumination(const Tensor<T>& e, const Tensor<T>& alpha) {
  detail::require_scalar_field(alpha, "split_illumination");
  detail::require_same_hw(e, alpha, "split_illumination");
  IlluminationPair<T> p{Tensor<T>(e.c, e.h, e.w), Tensor<T>(e.c, e.h, e.w)};
  size_t plane = static_cast<size_t>(e.h) * e.w;
  for (int ci = 0; ci < e.c; ++ci)
    for (size_t i = 0; i < plane; ++i) {
      size_t j = static_cast<size_t>(ci) * plane + i;
      detail::exact_split(alpha.v[i], e.v[j], p.L.v[j], p.L_bar.v[j]);
    }
  return p;
}

// R = (E - L_bar/2) * L_inv. Product form only; the caller supplies the
// reciprocal proxy (the oracle uses 1/L, the network a learned map).
template <typename T>
Tensor<T> recover_reflectivity(const Tensor<T>& E, const Tensor<T>& L_bar, const Tensor<T>& L_inv) {
  if (!E.same_shape(L_bar) || !E.same_shape(L_inv))
    throw std::invalid_argument("recover_reflectivity: shape mismatch");
  Tensor<T> R(E.c, E.h, E.w);
  for (size_t i = 0; i < E.size(); ++i) R.v[i] = (E.v[i] - L_bar.v[i] * T(0.5)) * L_inv.v[i];
  return R;
}

// Deterministic synthetic scene: e in [0.5, 2], rho_f in [0, 0.2], R in [0, 1].
// The rho_f range keeps the Taylor truncation term rho^2*e*R small.
template <typename T>
SceneGroundTruth<T> make_synthetic_scene(uint64_t seed, int C, int H, int W) {
  if (C < 1 || H < 1 || W < 1) throw std::invalid_argument("make_synthetic_scene: dims must be >= 1");
  Rng rng(seed);
  SceneGroundTruth<T> s;
  s.e = random_tensor<T>(rng, C, H, W, 0.5, 2.0);
  s.rho_f = random_tensor<T>(rng, 1, H, W, 0.0, 0.2);
  s.R = random_tensor<T>(rng, C, H, W, 0.0, 1.0);
  s.alpha = alpha_from_rho(s.rho_f);
  s.E_exact = exact_km_reflected(s.e, s.rho_f, s.R);
  s.E_approx = compose_reflected(s.e, s.alpha, s.R);
  return s;
}

}  // namespace tpc
