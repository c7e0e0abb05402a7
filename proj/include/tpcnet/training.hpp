#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <vector>

#include "tpcnet/evaluation.hpp"
#include "tpcnet/network.hpp"

// Loss functions, Adam with cosine-annealed learning rate, paired
// augmentation, and the training loop. Training runs in float32 so the
// in-memory parameters round-trip bit-exactly through checkpoints; gradient
// checking instantiates the same graph in float64.

namespace tpc {

struct TrainConfig {
  double lr_init = 2.5e-4;
  double lr_final = 1e-7;
  int epochs = 1500;
  int batch_size = 8;
  int crop = 320;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double w_l1 = 1.0;
  double w_ssim = 0.2;
  double w_edge = 0.1;
  double w_perc = 0.0;  // perceptual plugin weight; no plugin in core
  uint64_t seed = 0;
  bool augment = true;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only

  void validate() const {
    if (!(lr_final < lr_init)) throw std::invalid_argument("TrainConfig: lr_final must be < lr_init");
    if (crop % 16) throw std::invalid_argument("TrainConfig: crop must be divisible by 16");
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad epochs/batch");
    if (w_l1 < 0 || w_ssim < 0 || w_edge < 0 || w_perc < 0)
      throw std::invalid_argument("TrainConfig: negative loss weights rejected");
  }
};

// Cosine annealing from lr_init at step 0 to lr_final at total_steps.
inline double lr_at(long long step, long long total_steps, const TrainConfig& cfg) {
  double t = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 1.0;
  return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(M_PI * t));
}

template <typename T>
struct AdamState {
  ParamTree<T> m, v;
  long long t = 0;

  static AdamState make(const ParamTree<T>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
};

// Standard bias-corrected Adam; moments decay even under zero gradients.
template <typename T>
void adam_step(ParamTree<T>& params, const ParamTree<T>& grads, AdamState<T>& st, double lr,
               const TrainConfig& cfg) {
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params.item(i).second;
    const auto& g = grads.at(params.item(i).first);
    auto& m = st.m.item(i).second;
    auto& v = st.v.item(i).second;
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = static_cast<double>(g.v[j]);
      double mj = cfg.beta1 * static_cast<double>(m.v[j]) + (1.0 - cfg.beta1) * gj;
      double vj = cfg.beta2 * static_cast<double>(v.v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m.v[j] = static_cast<T>(mj);
      v.v[j] = static_cast<T>(vj);
      double mhat = mj / bc1, vhat = vj / bc2;
      p.v[j] = static_cast<T>(static_cast<double>(p.v[j]) - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

namespace loss {

using ad::Var;

template <typename T>
Var<T> l1_loss(Var<T> x, Var<T> y) {
  return ad::mean_all(ad::abs_op(ad::sub(x, y)));
}

// 1 - mean windowed SSIM (Gaussian 11x11, sigma 1.5, valid positions).
template <typename T>
Var<T> ssim_loss(Var<T> x, Var<T> y) {
  if (x.h() < 11 || x.w() < 11) throw std::invalid_argument("ssim_loss: image smaller than window");
  ad::Tape<T>& t = *x.tape;
  int C = x.c();
  const auto& k1 = ssim_window_1d();
  Tensor<T> wt(C, 1, 121);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 11; ++i)
      for (int j = 0; j < 11; ++j) wt.v[c * 121 + i * 11 + j] = static_cast<T>(k1[i] * k1[j]);
  Var<T> w = ad::constant(t, wt);
  Var<T> zb = ad::constant(t, Tensor<T>(C, 1, 1));
  auto win = [&](Var<T> v) { return ad::conv2d(v, w, zb, 11, C, /*valid=*/true); };

  Var<T> mx = win(x), my = win(y);
  Var<T> mxx = win(ad::mul(x, x)), myy = win(ad::mul(y, y)), mxy = win(ad::mul(x, y));
  Var<T> vx = ad::sub(mxx, ad::mul(mx, mx));
  Var<T> vy = ad::sub(myy, ad::mul(my, my));
  Var<T> vxy = ad::sub(mxy, ad::mul(mx, my));
  Var<T> num = ad::mul(ad::add_const(ad::scale(ad::mul(mx, my), 2.0), kSsimC1),
                       ad::add_const(ad::scale(vxy, 2.0), kSsimC2));
  Var<T> den = ad::mul(ad::add_const(ad::add(ad::mul(mx, mx), ad::mul(my, my)), kSsimC1),
                       ad::add_const(ad::add(vx, vy), kSsimC2));
  Var<T> ssim = ad::mean_all(ad::div_elem(num, den));
  return ad::add_const(ad::neg(ssim), 1.0);
}

// Mean absolute difference of Sobel gradient magnitudes on a brightness
// plane: the designated luma channel when there is one, else the channel mean.
template <typename T>
Var<T> edge_loss(Var<T> x, Var<T> y, int luma_channel = -1) {
  ad::Tape<T>& t = *x.tape;
  Tensor<T> sx(1, 1, 9), sy(1, 1, 9);
  const double gx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double gy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int i = 0; i < 9; ++i) {
    sx.v[i] = static_cast<T>(gx[i]);
    sy.v[i] = static_cast<T>(gy[i]);
  }
  Var<T> wx = ad::constant(t, sx), wy = ad::constant(t, sy);
  Var<T> zb = ad::constant(t, Tensor<T>(1, 1, 1));
  auto grad_mag = [&](Var<T> img) {
    Var<T> gray = luma_channel >= 0 ? ad::slice_channels(img, luma_channel, 1) : ad::channel_mean(img);
    Var<T> dx = ad::conv2d(gray, wx, zb, 3);
    Var<T> dy = ad::conv2d(gray, wy, zb, 3);
    return ad::sqrt_op(ad::add_const(ad::add(ad::mul(dx, dx), ad::mul(dy, dy)), 1e-12));
  };
  return ad::mean_all(ad::abs_op(ad::sub(grad_mag(x), grad_mag(y))));
}

// Optional perceptual plugin; absent in core (weight contributes zero).
template <typename T>
using PerceptualLoss = std::function<Var<T>(Var<T> pred, Var<T> gt)>;

template <typename T>
struct LossParts {
  double l1 = 0, ssim = 0, edge = 0, perc = 0, total = 0;
};

struct LossWeights {
  double l1 = 1.0, ssim = 0.2, edge = 0.1, perc = 0.0;
};

// Sum over {RGB, color space} of the weighted terms. Both images of each pair
// must already live in the same space; luma indices select the edge plane.
template <typename T>
Var<T> total_loss(Var<T> pred_rgb, Var<T> gt_rgb, Var<T> pred_color, Var<T> gt_color,
                  const LossWeights& w, int color_luma_index, LossParts<T>* parts = nullptr,
                  const PerceptualLoss<T>* perceptual = nullptr) {
  if (w.l1 < 0 || w.ssim < 0 || w.edge < 0 || w.perc < 0)
    throw std::invalid_argument("total_loss: negative weights rejected");
  Var<T> l1 = ad::add(l1_loss(pred_rgb, gt_rgb), l1_loss(pred_color, gt_color));
  Var<T> ss = ad::add(ssim_loss(pred_rgb, gt_rgb), ssim_loss(pred_color, gt_color));
  Var<T> ed = ad::add(edge_loss(pred_rgb, gt_rgb, -1),
                      edge_loss(pred_color, gt_color, color_luma_index));
  Var<T> total = ad::add(ad::add(ad::scale(l1, w.l1), ad::scale(ss, w.ssim)), ad::scale(ed, w.edge));
  double perc_val = 0;
  if (perceptual && *perceptual && w.perc > 0) {
    Var<T> pc = ad::add((*perceptual)(pred_rgb, gt_rgb), (*perceptual)(pred_color, gt_color));
    perc_val = static_cast<double>(pc.val().v[0]);
    total = ad::add(total, ad::scale(pc, w.perc));
  }
  if (parts) {
    parts->l1 = static_cast<double>(l1.val().v[0]);
    parts->ssim = static_cast<double>(ss.val().v[0]);
    parts->edge = static_cast<double>(ed.val().v[0]);
    parts->perc = perc_val;
    parts->total = static_cast<double>(total.val().v[0]);
  }
  return total;
}

}  // namespace loss

// ---- paired augmentation ----

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h, x.w);
  for (int c = 0; c < x.c; ++c)
    for (int iy = 0; iy < x.h; ++iy)
      for (int ix = 0; ix < x.w; ++ix) y.at(c, iy, ix) = x.at(c, iy, x.w - 1 - ix);
  return y;
}

template <typename T>
Tensor<T> flip_vertical(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h, x.w);
  for (int c = 0; c < x.c; ++c)
    for (int iy = 0; iy < x.h; ++iy)
      for (int ix = 0; ix < x.w; ++ix) y.at(c, iy, ix) = x.at(c, x.h - 1 - iy, ix);
  return y;
}

// counter-clockwise quarter turn
template <typename T>
Tensor<T> rotate90(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.w, x.h);
  for (int c = 0; c < x.c; ++c)
    for (int iy = 0; iy < x.h; ++iy)
      for (int ix = 0; ix < x.w; ++ix) y.at(c, x.w - 1 - ix, iy) = x.at(c, iy, ix);
  return y;
}

struct AugmentChoice {
  bool hflip = false, vflip = false;
  int quarter_turns = 0;
};

inline AugmentChoice draw_augment(Rng& rng) {
  AugmentChoice a;
  a.hflip = rng.uniform() < 0.5;
  a.vflip = rng.uniform() < 0.5;
  a.quarter_turns = rng.uniform_int(4);
  return a;
}

template <typename T>
Tensor<T> apply_augment(const Tensor<T>& x, const AugmentChoice& a) {
  Tensor<T> y = x;
  if (a.hflip) y = flip_horizontal(y);
  if (a.vflip) y = flip_vertical(y);
  for (int i = 0; i < a.quarter_turns; ++i) y = rotate90(y);
  return y;
}

// identical transform applied to both images of the pair
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const std::pair<Tensor<T>, Tensor<T>>& pair, uint64_t seed) {
  Rng rng(seed);
  AugmentChoice a = draw_augment(rng);
  return {apply_augment(pair.first, a), apply_augment(pair.second, a)};
}

// ---- training loop ----

struct TrainLogEntry {
  long long step = 0;
  double lr = 0, total = 0, l1 = 0, ssim = 0, edge = 0, perc = 0, psnr = 0;
};

inline std::string format_log_entry(const TrainLogEntry& e) {
  std::ostringstream ss;
  ss << "step " << e.step << " lr " << std::scientific << std::setprecision(6) << e.lr
     << std::fixed << std::setprecision(6) << " loss " << e.total << " l1 " << e.l1 << " ssim "
     << e.ssim << " edge " << e.edge << " perc " << e.perc << " psnr " << std::setprecision(3)
     << e.psnr;
  return ss.str();
}

struct TrainResult {
  ParamTree<float> params;
  NetworkConfig cfg;
  long long steps = 0;
  std::vector<TrainLogEntry> log;
};

using TrainSample = std::pair<Tensor<float>, Tensor<float>>;  // (low, high)

// Builds the full forward + loss graph for one sample; shared between the
// float32 training loop and the float64 gradient checker.
template <typename T>
ad::Var<T> training_loss(ad::Tape<T>& tape, ParamVars<T>& P, const NetworkConfig& net_cfg,
                         const Tensor<T>& low, const Tensor<T>& high, const loss::LossWeights& w,
                         loss::LossParts<T>* parts = nullptr, Tensor<T>* pred_out = nullptr) {
  ad::Var<T> input = ad::constant(tape, low);
  ad::Var<T> gt = ad::constant(tape, high);
  ad::Var<T> pred = net::tpcnet_forward(P, net_cfg, input);
  ad::Var<T> pred_color = net::from_rgb_op(pred, net_cfg.color_space);
  ad::Var<T> gt_color = net::from_rgb_op(gt, net_cfg.color_space);
  int luma = color_space_luma_index<T>(net_cfg.color_space);
  if (pred_out) *pred_out = pred.val();
  return loss::total_loss(pred, gt, pred_color, gt_color, w, luma, parts);
}

inline TrainResult train(const std::vector<TrainSample>& dataset, const NetworkConfig& net_cfg,
                         const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         std::ostream* log_stream = nullptr) {
  net_cfg.validate();
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& [lo, hi] : dataset) {
    if (!lo.same_shape(hi)) throw std::invalid_argument("train: low/high shape mismatch");
    if (lo.h < cfg.crop || lo.w < cfg.crop)
      throw std::invalid_argument("train: crop " + std::to_string(cfg.crop) +
                                  " exceeds image size " + lo.shape_str());
  }

  TrainResult result;
  result.cfg = net_cfg;
  result.params = build_tpcnet_params<float>(net_cfg, cfg.seed);
  auto adam = AdamState<float>::make(result.params);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  int n = static_cast<int>(dataset.size());
  long long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  long long total_steps = steps_per_epoch * cfg.epochs;
  loss::LossWeights weights{cfg.w_l1, cfg.w_ssim, cfg.w_edge, cfg.w_perc};

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  long long step = 0;

  auto save = [&](long long s) {
    if (out_dir) save_checkpoint(*out_dir / ("checkpoint_" + std::to_string(s) + ".tpc"),
                                 result.params, net_cfg, s);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      int bsz = std::min(cfg.batch_size, n - b0);
      auto grads = result.params.zeros_like();
      TrainLogEntry entry;
      entry.step = step;
      entry.lr = lr_at(step, total_steps, cfg);
      double psnr_sum = 0;
      for (int bi = 0; bi < bsz; ++bi) {
        const auto& [low_full, high_full] = dataset[order[b0 + bi]];
        int oy = low_full.h == cfg.crop ? 0 : rng.uniform_int(low_full.h - cfg.crop + 1);
        int ox = low_full.w == cfg.crop ? 0 : rng.uniform_int(low_full.w - cfg.crop + 1);
        auto crop = [&](const Tensor<float>& t) {
          Tensor<float> c(t.c, cfg.crop, cfg.crop);
          for (int ch = 0; ch < t.c; ++ch)
            for (int y = 0; y < cfg.crop; ++y)
              for (int x = 0; x < cfg.crop; ++x) c.at(ch, y, x) = t.at(ch, oy + y, ox + x);
          return c;
        };
        Tensor<float> low = crop(low_full), high = crop(high_full);
        if (cfg.augment) {
          AugmentChoice a = draw_augment(rng);
          low = apply_augment(low, a);
          high = apply_augment(high, a);
        }
        ad::Tape<float> tape;
        ParamVars<float> P(tape, result.params);
        loss::LossParts<float> parts;
        Tensor<float> pred;
        auto l = training_loss(tape, P, net_cfg, low, high, weights, &parts, &pred);
        tape.backward(l.id);
        P.accumulate_grads(grads);
        entry.total += parts.total;
        entry.l1 += parts.l1;
        entry.ssim += parts.ssim;
        entry.edge += parts.edge;
        entry.perc += parts.perc;
        psnr_sum += std::min(psnr(pred, high), 99.0);  // cap the identical-image sentinel
      }
      double inv = 1.0 / bsz;
      for (size_t i = 0; i < grads.size(); ++i)
        for (auto& g : grads.item(i).second.v) g = static_cast<float>(g * inv);
      entry.total *= inv;
      entry.l1 *= inv;
      entry.ssim *= inv;
      entry.edge *= inv;
      entry.perc *= inv;
      entry.psnr = psnr_sum * inv;
      adam_step(result.params, grads, adam, entry.lr, cfg);
      result.log.push_back(entry);
      if (log_stream) (*log_stream) << format_log_entry(entry) << "\n";
      ++step;
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs)
      save(step);
  }
  result.steps = step;
  save(step);
  return result;
}

inline void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogEntry>& log) {
  std::ostringstream ss;
  for (const auto& e : log) ss << format_log_entry(e) << "\n";
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write log '" + path.string() + "'");
    f << ss.str();
  }
  fs::rename(tmp, path);
}

}  // namespace tpc
