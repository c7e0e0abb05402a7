#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include "tpcnet/tensor.hpp"

// Color transforms separating brightness from chroma. Built-in spaces are
// full-range BT.601 YCbCr and CIELAB (D65), both rescaled so every channel
// lives in [0,1] with the brightness channel at index 0. Additional spaces
// can be registered as plugins under a config-visible name.

namespace tpc {

template <typename T>
struct ColorImage {
  Tensor<T> values;      // 3 x H x W
  std::string space_id;  // "ycbcr" | "lab" | plugin name
  int luma_channel_index = 0;
};

namespace color_detail {

// Full-range BT.601. Cb/Cr offsets put the neutral axis at 0.5.
inline constexpr double kYR = 0.299, kYG = 0.587, kYB = 0.114;
inline constexpr double kCbDiv = 1.772;  // 2*(1 - kYB)
inline constexpr double kCrDiv = 1.402;  // 2*(1 - kYR)

// Row-major 3x3 matrices applied as out_i = m[3i]*c0 + m[3i+1]*c1 + m[3i+2]*c2 + off_i.
inline constexpr double kRgbToYcbcrM[9] = {
    kYR, kYG, kYB,
    -kYR / kCbDiv, -kYG / kCbDiv, (1.0 - kYB) / kCbDiv,
    (1.0 - kYR) / kCrDiv, -kYG / kCrDiv, -kYB / kCrDiv};
inline constexpr double kRgbToYcbcrOff[3] = {0.0, 0.5, 0.5};

inline constexpr double kYcbcrToRgbM[9] = {
    1.0, 0.0, kCrDiv,
    1.0, -kYB * kCbDiv / kYG, -kYR * kCrDiv / kYG,
    1.0, kCbDiv, 0.0};
inline constexpr double kYcbcrToRgbOff[3] = {0.0, -0.5, -0.5};  // applied to inputs

// sRGB <-> linear electro-optical transfer.
inline double srgb_to_linear(double u) {
  return u <= 0.04045 ? u / 12.92 : std::pow((u + 0.055) / 1.055, 2.4);
}
inline double srgb_to_linear_d(double u) {
  return u <= 0.04045 ? 1.0 / 12.92 : (2.4 / 1.055) * std::pow((u + 0.055) / 1.055, 1.4);
}
inline double linear_to_srgb(double v) {
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}
inline double linear_to_srgb_d(double v) {
  return v <= 0.0031308 ? 12.92 : (1.055 / 2.4) * std::pow(v, 1.0 / 2.4 - 1.0);
}

inline constexpr double kLabDelta = 6.0 / 29.0;
inline double lab_f(double t) {
  const double d3 = kLabDelta * kLabDelta * kLabDelta;
  return t > d3 ? std::cbrt(t) : t / (3.0 * kLabDelta * kLabDelta) + 4.0 / 29.0;
}
inline double lab_f_d(double t) {
  const double d3 = kLabDelta * kLabDelta * kLabDelta;
  return t > d3 ? std::cbrt(t) == 0.0 ? 0.0 : 1.0 / (3.0 * std::cbrt(t) * std::cbrt(t))
                : 1.0 / (3.0 * kLabDelta * kLabDelta);
}
inline double lab_f_inv(double t) {
  return t > kLabDelta ? t * t * t : 3.0 * kLabDelta * kLabDelta * (t - 4.0 / 29.0);
}
inline double lab_f_inv_d(double t) {
  return t > kLabDelta ? 3.0 * t * t : 3.0 * kLabDelta * kLabDelta;
}

// sRGB primaries, D65 white.
inline constexpr double kRgbToXyzM[9] = {
    0.4124564, 0.3575761, 0.1804375,
    0.2126729, 0.7151522, 0.0721750,
    0.0193339, 0.1191920, 0.9503041};
inline constexpr double kXyzToRgbM[9] = {
    3.2404542, -1.5371385, -0.4985314,
    -0.9692660, 1.8760108, 0.0415560,
    0.0556434, -0.2040259, 1.0572252};
inline constexpr double kWhiteX = 0.95047, kWhiteY = 1.0, kWhiteZ = 1.08883;

// Affine rescale of (L*, a*, b*) into [0,1] channels and back.
inline constexpr double kLabLScale = 1.0 / 100.0;
inline constexpr double kLabAbScale = 1.0 / 255.0;

template <typename T>
inline void apply_mat3(const double m[9], const double off_in[3], const double off_out[3],
                       T c0, T c1, T c2, T& o0, T& o1, T& o2) {
  double a = static_cast<double>(c0) + off_in[0];
  double b = static_cast<double>(c1) + off_in[1];
  double c = static_cast<double>(c2) + off_in[2];
  o0 = static_cast<T>(m[0] * a + m[1] * b + m[2] * c + off_out[0]);
  o1 = static_cast<T>(m[3] * a + m[4] * b + m[5] * c + off_out[1]);
  o2 = static_cast<T>(m[6] * a + m[7] * b + m[8] * c + off_out[2]);
}

template <typename T>
inline void rgb_to_lab_px(T r, T g, T b, T& l_out, T& a_out, T& b_out) {
  double rl = srgb_to_linear(static_cast<double>(r));
  double gl = srgb_to_linear(static_cast<double>(g));
  double bl = srgb_to_linear(static_cast<double>(b));
  double x = kRgbToXyzM[0] * rl + kRgbToXyzM[1] * gl + kRgbToXyzM[2] * bl;
  double y = kRgbToXyzM[3] * rl + kRgbToXyzM[4] * gl + kRgbToXyzM[5] * bl;
  double z = kRgbToXyzM[6] * rl + kRgbToXyzM[7] * gl + kRgbToXyzM[8] * bl;
  double fx = lab_f(x / kWhiteX), fy = lab_f(y / kWhiteY), fz = lab_f(z / kWhiteZ);
  l_out = static_cast<T>((116.0 * fy - 16.0) * kLabLScale);
  a_out = static_cast<T>(500.0 * (fx - fy) * kLabAbScale + 0.5);
  b_out = static_cast<T>(200.0 * (fy - fz) * kLabAbScale + 0.5);
}

template <typename T>
inline void lab_to_rgb_px(T l_in, T a_in, T b_in, T& r, T& g, T& b) {
  double L = static_cast<double>(l_in) / kLabLScale;
  double A = (static_cast<double>(a_in) - 0.5) / kLabAbScale;
  double B = (static_cast<double>(b_in) - 0.5) / kLabAbScale;
  double fy = (L + 16.0) / 116.0;
  double fx = fy + A / 500.0;
  double fz = fy - B / 200.0;
  double x = kWhiteX * lab_f_inv(fx);
  double y = kWhiteY * lab_f_inv(fy);
  double z = kWhiteZ * lab_f_inv(fz);
  double rl = kXyzToRgbM[0] * x + kXyzToRgbM[1] * y + kXyzToRgbM[2] * z;
  double gl = kXyzToRgbM[3] * x + kXyzToRgbM[4] * y + kXyzToRgbM[5] * z;
  double bl = kXyzToRgbM[6] * x + kXyzToRgbM[7] * y + kXyzToRgbM[8] * z;
  r = static_cast<T>(std::clamp(linear_to_srgb(rl), 0.0, 1.0));
  g = static_cast<T>(std::clamp(linear_to_srgb(gl), 0.0, 1.0));
  b = static_cast<T>(std::clamp(linear_to_srgb(bl), 0.0, 1.0));
}

template <typename T>
void require_rgb(const Tensor<T>& img, const char* what) {
  if (img.c != 3) throw std::invalid_argument(std::string(what) + ": expected 3 x H x W");
}

}  // namespace color_detail

template <typename T>
ColorImage<T> rgb_to_ycbcr(const Tensor<T>& img) {
  color_detail::require_rgb(img, "rgb_to_ycbcr");
  ColorImage<T> out{Tensor<T>(3, img.h, img.w), "ycbcr", 0};
  size_t plane = static_cast<size_t>(img.h) * img.w;
  const double off_in[3] = {0, 0, 0};
  for (size_t i = 0; i < plane; ++i)
    color_detail::apply_mat3(color_detail::kRgbToYcbcrM, off_in, color_detail::kRgbToYcbcrOff,
                             img.v[i], img.v[plane + i], img.v[2 * plane + i],
                             out.values.v[i], out.values.v[plane + i], out.values.v[2 * plane + i]);
  return out;
}

template <typename T>
Tensor<T> ycbcr_to_rgb(const ColorImage<T>& c) {
  if (c.space_id != "ycbcr") throw std::invalid_argument("ycbcr_to_rgb: space_id is '" + c.space_id + "'");
  Tensor<T> out(3, c.values.h, c.values.w);
  size_t plane = static_cast<size_t>(c.values.h) * c.values.w;
  const double off_out[3] = {0, 0, 0};
  for (size_t i = 0; i < plane; ++i) {
    color_detail::apply_mat3(color_detail::kYcbcrToRgbM, color_detail::kYcbcrToRgbOff, off_out,
                             c.values.v[i], c.values.v[plane + i], c.values.v[2 * plane + i],
                             out.v[i], out.v[plane + i], out.v[2 * plane + i]);
    out.v[i] = std::clamp(out.v[i], T(0), T(1));
    out.v[plane + i] = std::clamp(out.v[plane + i], T(0), T(1));
    out.v[2 * plane + i] = std::clamp(out.v[2 * plane + i], T(0), T(1));
  }
  return out;
}

template <typename T>
ColorImage<T> rgb_to_lab(const Tensor<T>& img) {
  color_detail::require_rgb(img, "rgb_to_lab");
  ColorImage<T> out{Tensor<T>(3, img.h, img.w), "lab", 0};
  size_t plane = static_cast<size_t>(img.h) * img.w;
  for (size_t i = 0; i < plane; ++i)
    color_detail::rgb_to_lab_px(img.v[i], img.v[plane + i], img.v[2 * plane + i],
                                out.values.v[i], out.values.v[plane + i], out.values.v[2 * plane + i]);
  return out;
}

template <typename T>
Tensor<T> lab_to_rgb(const ColorImage<T>& c) {
  if (c.space_id != "lab") throw std::invalid_argument("lab_to_rgb: space_id is '" + c.space_id + "'");
  Tensor<T> out(3, c.values.h, c.values.w);
  size_t plane = static_cast<size_t>(c.values.h) * c.values.w;
  for (size_t i = 0; i < plane; ++i)
    color_detail::lab_to_rgb_px(c.values.v[i], c.values.v[plane + i], c.values.v[2 * plane + i],
                                out.v[i], out.v[plane + i], out.v[2 * plane + i]);
  return out;
}

// Registered plugin spaces (e.g. HVI) provide both directions and a luma
// channel index; the rest of the pipeline treats them like the built-ins.
template <typename T>
struct ColorSpacePlugin {
  int luma_channel_index = 0;
  std::function<Tensor<T>(const Tensor<T>&)> to_space;
  std::function<Tensor<T>(const Tensor<T>&)> to_rgb;
};

template <typename T>
std::map<std::string, ColorSpacePlugin<T>>& color_space_plugins() {
  static std::map<std::string, ColorSpacePlugin<T>> reg;
  return reg;
}

template <typename T>
void register_color_space(const std::string& name, ColorSpacePlugin<T> plugin) {
  if (name == "ycbcr" || name == "lab")
    throw std::invalid_argument("register_color_space: '" + name + "' is built in");
  color_space_plugins<T>()[name] = std::move(plugin);
}

template <typename T>
bool color_space_known(const std::string& space_id) {
  return space_id == "ycbcr" || space_id == "lab" || color_space_plugins<T>().count(space_id) > 0;
}

template <typename T>
ColorImage<T> rgb_to_space(const Tensor<T>& img, const std::string& space_id) {
  if (space_id == "ycbcr") return rgb_to_ycbcr(img);
  if (space_id == "lab") return rgb_to_lab(img);
  auto it = color_space_plugins<T>().find(space_id);
  if (it == color_space_plugins<T>().end())
    throw std::invalid_argument("unknown color space '" + space_id + "'");
  return ColorImage<T>{it->second.to_space(img), space_id, it->second.luma_channel_index};
}

template <typename T>
Tensor<T> space_to_rgb(const ColorImage<T>& c) {
  if (c.space_id == "ycbcr") return ycbcr_to_rgb(c);
  if (c.space_id == "lab") return lab_to_rgb(c);
  auto it = color_space_plugins<T>().find(c.space_id);
  if (it == color_space_plugins<T>().end())
    throw std::invalid_argument("unknown color space '" + c.space_id + "'");
  return it->second.to_rgb(c.values);
}

template <typename T>
int color_space_luma_index(const std::string& space_id) {
  if (space_id == "ycbcr" || space_id == "lab") return 0;
  auto it = color_space_plugins<T>().find(space_id);
  if (it == color_space_plugins<T>().end())
    throw std::invalid_argument("unknown color space '" + space_id + "'");
  return it->second.luma_channel_index;
}

// (brightness 1xHxW, chroma 2xHxW); chroma keeps the non-luma channels in
// ascending index order.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_luma_chroma(const ColorImage<T>& c) {
  const Tensor<T>& x = c.values;
  if (x.c != 3) throw std::invalid_argument("split_luma_chroma: expected 3 channels");
  Tensor<T> luma(1, x.h, x.w), chroma(2, x.h, x.w);
  size_t plane = static_cast<size_t>(x.h) * x.w;
  int k = 0;
  for (int ch = 0; ch < 3; ++ch) {
    const T* src = x.v.data() + ch * plane;
    T* dst = (ch == c.luma_channel_index) ? luma.v.data() : chroma.v.data() + (k++) * plane;
    std::copy(src, src + plane, dst);
  }
  return {luma, chroma};
}

template <typename T>
ColorImage<T> merge_luma_chroma(const Tensor<T>& luma, const Tensor<T>& chroma,
                                const std::string& space_id) {
  if (luma.c != 1 || chroma.c != 2 || luma.h != chroma.h || luma.w != chroma.w)
    throw std::invalid_argument("merge_luma_chroma: bad shapes");
  int luma_idx = color_space_luma_index<T>(space_id);
  ColorImage<T> out{Tensor<T>(3, luma.h, luma.w), space_id, luma_idx};
  size_t plane = static_cast<size_t>(luma.h) * luma.w;
  int k = 0;
  for (int ch = 0; ch < 3; ++ch) {
    const T* src = (ch == luma_idx) ? luma.v.data() : chroma.v.data() + (k++) * plane;
    std::copy(src, src + plane, out.values.v.data() + ch * plane);
  }
  return out;
}

}  // namespace tpc
