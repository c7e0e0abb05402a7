#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpc {

// Dense C x H x W grid, row-major with channel as the slowest axis.
// Used for feature maps (C x H x W), scalar fields (1 x H x W), images
// (3 x H x W) and, by convention, convolution weights (C_out x C_in/g x K*K).
template <typename T>
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, T(0)) {
    if (c_ < 0 || h_ < 0 || w_ < 0) throw std::invalid_argument("Tensor: negative dims");
  }

  static Tensor full(int c, int h, int w, T x) {
    Tensor t(c, h, w);
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

  T& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
  const T& at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }

  T min() const { return v.empty() ? T(0) : *std::min_element(v.begin(), v.end()); }
  T max() const { return v.empty() ? T(0) : *std::max_element(v.begin(), v.end()); }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  std::string shape_str() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  assert(a.same_shape(b));
  Tensor<T> r = a;
  for (size_t i = 0; i < r.size(); ++i) r.v[i] += b.v[i];
  return r;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  assert(a.same_shape(b));
  Tensor<T> r = a;
  for (size_t i = 0; i < r.size(); ++i) r.v[i] -= b.v[i];
  return r;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  assert(a.same_shape(b));
  T m = T(0);
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

template <typename T, typename U>
Tensor<U> tensor_cast(const Tensor<T>& a) {
  Tensor<U> r(a.c, a.h, a.w);
  for (size_t i = 0; i < a.size(); ++i) r.v[i] = static_cast<U>(a.v[i]);
  return r;
}

// Deterministic, platform-independent RNG (splitmix64 core). Standard-library
// distributions are implementation-defined, so all sampling goes through this.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (s_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    assert(n > 0);
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<int>(last - first);
    for (int i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_int(i + 1)]);
  }

 private:
  uint64_t s_;
};

template <typename T>
Tensor<T> random_tensor(Rng& rng, int c, int h, int w, double lo, double hi) {
  Tensor<T> t(c, h, w);
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace tpc
