#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tpcnet/png_io.hpp"
#include "tpcnet/tensor.hpp"

// Reference metrics on [0,1] images and batch evaluation over paired
// directories of matching filenames.

namespace tpc {

// 10*log10(1/MSE); identical images report the +inf sentinel.
template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    double d = static_cast<double>(x.v[i]) - static_cast<double>(y.v[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

// 11x11 Gaussian window, sigma 1.5, normalized; shared by metric and loss.
inline const std::vector<double>& ssim_window_1d() {
  static const std::vector<double> w = [] {
    std::vector<double> k(11);
    double z = 0;
    for (int i = 0; i < 11; ++i) {
      double d = i - 5;
      k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      z += k[i];
    }
    for (auto& v : k) v /= z;
    return k;
  }();
  return w;
}

inline constexpr double kSsimC1 = 0.01 * 0.01;  // (K1*L)^2 on [0,1] range
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Mean windowed SSIM over valid positions, averaged across channels.
template <typename T>
double ssim_metric(const Tensor<T>& x, const Tensor<T>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("ssim_metric: shape mismatch");
  if (x.h < 11 || x.w < 11) throw std::invalid_argument("ssim_metric: image smaller than the 11x11 window");
  const auto& k = ssim_window_1d();
  int oh = x.h - 10, ow = x.w - 10;
  double total = 0;
  long long count = 0;
  for (int c = 0; c < x.c; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            double w = k[i] * k[j];
            double a = static_cast<double>(x.at(c, oy + i, ox + j));
            double b = static_cast<double>(y.at(c, oy + i, ox + j));
            mx += w * a;
            my += w * b;
            mxx += w * a * a;
            myy += w * b * b;
            mxy += w * a * b;
          }
        double vx = mxx - mx * mx, vy = myy - my * my, vxy = mxy - mx * my;
        double num = (2 * mx * my + kSsimC1) * (2 * vxy + kSsimC2);
        double den = (mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2);
        total += num / den;
        ++count;
      }
  return total / static_cast<double>(count);
}

// Slot for perceptual metrics (they need pretrained models, so none ships in
// core); registered metrics run per pair and appear in the report under their
// registered name.
template <typename T>
using MetricPlugin = std::function<double(const Tensor<T>&, const Tensor<T>&)>;

template <typename T>
std::map<std::string, MetricPlugin<T>>& metric_plugins() {
  static std::map<std::string, MetricPlugin<T>> reg;
  return reg;
}

template <typename T>
void register_metric(const std::string& name, MetricPlugin<T> fn) {
  if (name == "psnr" || name == "ssim")
    throw std::invalid_argument("register_metric: '" + name + "' is built in");
  metric_plugins<T>()[name] = std::move(fn);
}

struct PairMetrics {
  std::string name;
  double psnr = 0;
  double ssim = 0;
  std::vector<std::pair<std::string, double>> extra;  // registered plugin metrics
};

struct MetricReport {
  std::vector<PairMetrics> per_image;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::vector<std::pair<std::string, double>> mean_extra;
  std::vector<std::string> errors;
  long long params = -1;  // optional profiler fields
  long long flops = -1;

  bool ok() const { return errors.empty() && !per_image.empty(); }
};

inline MetricReport evaluate_pairs(const std::filesystem::path& pred_dir,
                                   const std::filesystem::path& gt_dir) {
  namespace fs = std::filesystem;
  MetricReport rep;
  for (const auto& dir : {pred_dir, gt_dir})
    if (!fs::is_directory(dir)) {
      rep.errors.push_back("not a directory: " + dir.string());
      return rep;
    }
  auto list_pngs = [](const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  auto preds = list_pngs(pred_dir);
  auto gts = list_pngs(gt_dir);
  for (const auto& n : preds)
    if (!std::binary_search(gts.begin(), gts.end(), n))
      rep.errors.push_back("missing ground truth for '" + n + "'");
  for (const auto& n : gts)
    if (!std::binary_search(preds.begin(), preds.end(), n))
      rep.errors.push_back("missing prediction for '" + n + "'");

  double sum_p = 0, sum_s = 0;
  std::map<std::string, double> sum_extra;
  for (const auto& n : preds) {
    if (!std::binary_search(gts.begin(), gts.end(), n)) continue;
    try {
      auto a = read_png<double>(pred_dir / n);
      auto b = read_png<double>(gt_dir / n);
      if (!a.same_shape(b)) {
        rep.errors.push_back("size mismatch for '" + n + "'");
        continue;
      }
      PairMetrics m{n, psnr(a, b), ssim_metric(a, b), {}};
      for (const auto& [mname, fn] : metric_plugins<double>()) {
        double v = fn(a, b);
        m.extra.emplace_back(mname, v);
        sum_extra[mname] += v;
      }
      sum_p += m.psnr;
      sum_s += m.ssim;
      rep.per_image.push_back(m);
    } catch (const PngError& e) {
      rep.errors.push_back(e.what());
    }
  }
  if (!rep.per_image.empty()) {
    rep.mean_psnr = sum_p / static_cast<double>(rep.per_image.size());
    rep.mean_ssim = sum_s / static_cast<double>(rep.per_image.size());
    for (const auto& [mname, total] : sum_extra)
      rep.mean_extra.emplace_back(mname, total / static_cast<double>(rep.per_image.size()));
  }
  return rep;
}

inline void print_report(std::ostream& os, const MetricReport& rep) {
  os << std::fixed << std::setprecision(4);
  for (const auto& m : rep.per_image) {
    os << "image " << m.name << " psnr " << m.psnr << " ssim " << m.ssim;
    for (const auto& [mname, v] : m.extra) os << " " << mname << " " << v;
    os << "\n";
  }
  if (!rep.per_image.empty()) {
    os << "mean over " << rep.per_image.size() << " images: psnr " << rep.mean_psnr << " ssim "
       << rep.mean_ssim;
    for (const auto& [mname, v] : rep.mean_extra) os << " " << mname << " " << v;
    os << "\n";
  }
  if (rep.params >= 0) os << "params " << rep.params << "\n";
  if (rep.flops >= 0) os << "flops " << rep.flops << "\n";
  for (const auto& e : rep.errors) os << "error " << e << "\n";
}

inline void write_report(const std::filesystem::path& path, const MetricReport& rep) {
  std::ostringstream ss;
  print_report(ss, rep);
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write report '" + path.string() + "'");
    f << ss.str();
  }
  fs::rename(tmp, path);
}

}  // namespace tpc
