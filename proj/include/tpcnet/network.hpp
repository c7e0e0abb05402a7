#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpcnet/estimators.hpp"

// TPCNet assembly: the four-scale dual-stream cross-guided U-structure, the
// output composition constraint, the color-association mechanism, checkpoints
// and analytic parameter/FLOP accounting.

namespace tpc {

struct NetworkConfig {
  int base_channels = 12;          // channels at full resolution; scale i uses base*2^i
  int heads_base = 1;              // heads at scale i: heads_base*2^i (constant h_k)
  std::string color_space = "ycbcr";
  bool use_composition = true;             // output composed by the reflected-light formula
  bool use_split_recovery = true;           // illumination split + product-form recovery

  static constexpr int kScales = 4;

  int scale_channels(int i) const { return base_channels << i; }
  int heads(int i) const { return heads_base << i; }

  void validate() const {
    if (base_channels < 1 || heads_base < 1)
      throw std::invalid_argument("NetworkConfig: channels and heads must be positive");
    for (int i = 0; i < kScales; ++i)
      if (scale_channels(i) % heads(i))
        throw std::invalid_argument("NetworkConfig: scale channels not divisible by heads");
    if (color_space.empty()) throw std::invalid_argument("NetworkConfig: empty color space");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"heads_base", c.heads_base},
                     {"color_space", c.color_space},
                     {"use_composition", c.use_composition},
                     {"use_split_recovery", c.use_split_recovery}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  j.at("base_channels").get_to(c.base_channels);
  j.at("heads_base").get_to(c.heads_base);
  j.at("color_space").get_to(c.color_space);
  j.at("use_composition").get_to(c.use_composition);
  j.at("use_split_recovery").get_to(c.use_split_recovery);
}

// One walk declares every parameter and cost site. Builders with a tree
// create initialized parameters; builders with ref dims accumulate FLOPs.
template <typename T>
void declare_tpcnet(ArchBuilder<T>& b, const NetworkConfig& cfg) {
  cfg.validate();
  int C = cfg.base_channels;
  estimators::declare_lfe(b, "lfe", C);
  if (!cfg.use_split_recovery) estimators::declare_lfe_no_split(b, "lfe", C);
  estimators::declare_rfe(b, "rfe", C, cfg.heads_base);
  b.conv("color.embed", 3, C, 3);

  for (int i = 0; i < 3; ++i) {
    int ci = cfg.scale_channels(i), cn = cfg.scale_channels(i + 1), ki = cfg.heads(i);
    int div = 1 << i;
    std::string si = std::to_string(i);
    blocks::declare_cgab(b, "enc.rl." + si, ci, ki, CgabVariant::kBase, div);
    blocks::declare_downsample(b, "enc.rl." + si + ".down", 2 * ci, 2 * cn, div);
    blocks::declare_cgab(b, "enc.col." + si, ci, ki, CgabVariant::kBase, div);
    blocks::declare_downsample(b, "enc.col." + si + ".down", 2 * ci, cn, div);
  }
  int c3 = cfg.scale_channels(3), k3 = cfg.heads(3);
  blocks::declare_cgab(b, "bott.rl", c3, k3, CgabVariant::kM, 8);
  blocks::declare_cgab(b, "bott.col", c3, k3, CgabVariant::kVM, 8);
  for (int i = 2; i >= 0; --i) {
    int ci = cfg.scale_channels(i), cn = cfg.scale_channels(i + 1), ki = cfg.heads(i);
    int div_in = 1 << (i + 1);
    std::string si = std::to_string(i);
    blocks::declare_upsample(b, "dec.rl." + si + ".up", 2 * cn, 2 * ci, 2 * ci, 2 * ci, div_in);
    blocks::declare_cgab(b, "dec.rl." + si, ci, ki, CgabVariant::kBase, 1 << i);
    blocks::declare_upsample(b, "dec.col." + si + ".up", 2 * cn, ci, 2 * ci, ci, div_in);
    blocks::declare_cgab(b, "dec.col." + si, ci, ki, CgabVariant::kBase, 1 << i);
  }
  b.conv("dec.col.proj", 2 * C, C, 1);
  if (!cfg.use_composition) b.conv("out.learned", 2 * C, C, 3);
  b.conv("cam.ycolor", C, 2, 3);
  b.conv("cam.bright", C, 1, 3);
}

template <typename T>
ParamTree<T> build_tpcnet_params(const NetworkConfig& cfg, uint64_t seed) {
  ParamTree<T> tree;
  Rng rng(seed);
  ArchBuilder<T> b;
  b.tree = &tree;
  b.rng = &rng;
  declare_tpcnet(b, cfg);
  return tree;
}

struct ModelCost {
  long long params = 0;
  long long conv_flops = 0;
  long long attn_flops = 0;
  long long total_flops() const { return conv_flops + attn_flops; }
};

// Exact parameter count plus analytic FLOPs at the stated input size
// (convs: 2*k^2*Cin_pg*Cout*H*W; attention sites: the closed attention forms).
inline ModelCost count_params_flops(const NetworkConfig& cfg, int H, int W) {
  if (H % 16 || W % 16) throw std::invalid_argument("count_params_flops: dims must be multiples of 16");
  ParamTree<float> tree;
  Rng rng(0);
  ArchBuilder<float> b;
  b.tree = &tree;
  b.rng = &rng;
  b.ref_h = H;
  b.ref_w = W;
  declare_tpcnet(b, cfg);
  return {tree.total_elements(), b.conv_flops, b.attn_flops};
}

namespace net {

using ad::Var;

template <typename T>
struct DcgtOut {
  Var<T> R_star, e_star, F_C_star;
};

// Four-scale dual-stream U-structure. The color stream is guided at every
// scale by the current R*e product, recomputed from the live illumination
// stream rather than reused from scale 0. alpha_hat rides along for scale-wise
// consumers; the default wiring applies it only in the output constraint.
template <typename T>
DcgtOut<T> dcgt_forward(ParamVars<T>& P, const NetworkConfig& cfg, Var<T> r_hat, Var<T> e_hat,
                        Var<T> f_color, [[maybe_unused]] Var<T> alpha_hat) {
  if (r_hat.h() % 16 || r_hat.w() % 16)
    throw std::invalid_argument("dcgt_forward: H and W must be divisible by 16");
  Var<T> r_cur = r_hat, e_cur = e_hat, c_cur = f_color;
  std::array<Var<T>, 3> skips_rl, skips_col;
  for (int i = 0; i < 3; ++i) {
    std::string si = std::to_string(i);
    int ki = cfg.heads(i), ci = cfg.scale_channels(i);
    Var<T> guide = ad::mul(r_cur, e_cur);
    Var<T> f_rl = blocks::cgab_forward(P, "enc.rl." + si, r_cur, e_cur, ki, CgabVariant::kBase);
    Var<T> f_col = blocks::cgab_forward(P, "enc.col." + si, c_cur, guide, ki, CgabVariant::kBase);
    skips_rl[i] = f_rl;
    skips_col[i] = f_col;
    Var<T> x_rl = blocks::downsample_block(P, "enc.rl." + si + ".down", f_rl);
    r_cur = ad::slice_channels(x_rl, 0, cfg.scale_channels(i + 1));
    e_cur = ad::slice_channels(x_rl, cfg.scale_channels(i + 1), cfg.scale_channels(i + 1));
    c_cur = blocks::downsample_block(P, "enc.col." + si + ".down", f_col);
    (void)ci;
  }
  Var<T> guide3 = ad::mul(r_cur, e_cur);
  Var<T> x_rl = blocks::cgab_forward(P, "bott.rl", r_cur, e_cur, cfg.heads(3), CgabVariant::kM);
  Var<T> x_col = blocks::cgab_forward(P, "bott.col", c_cur, guide3, cfg.heads(3), CgabVariant::kVM);
  for (int i = 2; i >= 0; --i) {
    std::string si = std::to_string(i);
    int ki = cfg.heads(i), ci = cfg.scale_channels(i);
    Var<T> u_rl = blocks::upsample_block(P, "dec.rl." + si + ".up", x_rl, skips_rl[i]);
    Var<T> r_d = ad::slice_channels(u_rl, 0, ci);
    Var<T> e_d = ad::slice_channels(u_rl, ci, ci);
    Var<T> guide_d = ad::mul(r_d, e_d);
    x_rl = blocks::cgab_forward(P, "dec.rl." + si, r_d, e_d, ki, CgabVariant::kBase);
    Var<T> u_col = blocks::upsample_block(P, "dec.col." + si + ".up", x_col, skips_col[i]);
    x_col = blocks::cgab_forward(P, "dec.col." + si, u_col, guide_d, ki, CgabVariant::kBase);
  }
  int C = cfg.base_channels;
  Var<T> r_star = ad::slice_channels(x_rl, 0, C);
  Var<T> e_star = ad::slice_channels(x_rl, C, C);
  Var<T> f_c_star = ad::conv2d(x_col, P("dec.col.proj.w"), P("dec.col.proj.b"), 1);
  return {r_star, e_star, f_c_star};
}

// E* = alpha*e*R + (1-alpha)*e/2 when the constraint is on; otherwise a
// learned 3x3 mapping of the concatenated streams (ablation path).
template <typename T>
Var<T> apply_output_constraint(ParamVars<T>& P, Var<T> r_star, Var<T> e_star, Var<T> alpha_hat,
                               bool use_composition) {
  if (!use_composition)
    return ad::conv2d(ad::concat_channels<T>({r_star, e_star}), P("out.learned.w"), P("out.learned.b"), 3);
  Var<T> lit = ad::mul(ad::mul(alpha_hat, e_star), r_star);
  Var<T> ambient = ad::scale(ad::mul(ad::add_const(ad::neg(alpha_hat), 1.0), e_star), 0.5);
  return ad::add(lit, ambient);
}

template <typename T>
Var<T> to_rgb_op(Var<T> x, const std::string& space_id) {
  if (space_id == "ycbcr") return ad::ycbcr_to_rgb_op(x);
  if (space_id == "lab") return ad::lab_to_rgb_op(x);
  // plugin spaces run value-only; training through them is rejected
  auto it = color_space_plugins<T>().find(space_id);
  if (it == color_space_plugins<T>().end())
    throw std::invalid_argument("unknown color space '" + space_id + "'");
  ad::Tape<T>& t = *x.tape;
  Tensor<T> y = it->second.to_rgb(x.val());
  int id = t.push(std::move(y), t.wants(x.id), [](ad::Tape<T>&) -> void {
    throw std::runtime_error("plugin color spaces do not support training");
  });
  return ad::clamp01(t.var(id));
}

template <typename T>
Var<T> from_rgb_op(Var<T> x, const std::string& space_id) {
  if (space_id == "ycbcr") return ad::rgb_to_ycbcr_op(x);
  if (space_id == "lab") return ad::rgb_to_lab_op(x);
  auto it = color_space_plugins<T>().find(space_id);
  if (it == color_space_plugins<T>().end())
    throw std::invalid_argument("unknown color space '" + space_id + "'");
  ad::Tape<T>& t = *x.tape;
  Tensor<T> y = it->second.to_space(x.val());
  int id = t.push(std::move(y), t.wants(x.id), [](ad::Tape<T>&) -> void {
    throw std::runtime_error("plugin color spaces do not support training");
  });
  return t.var(id);
}

// Maps color features to 2 chroma channels and the reflected-light feature to
// 1 brightness channel, merges by the space's luma index, adds the I_color
// residual and inverts the color transform. Output clamped to [0,1].
template <typename T>
Var<T> cam_assemble(ParamVars<T>& P, Var<T> f_c_star, Var<T> e_star_feat, Var<T> i_color,
                    const std::string& space_id) {
  Var<T> chroma = ad::conv2d(f_c_star, P("cam.ycolor.w"), P("cam.ycolor.b"), 3);
  Var<T> bright = ad::conv2d(e_star_feat, P("cam.bright.w"), P("cam.bright.b"), 3);
  int luma_idx = color_space_luma_index<T>(space_id);
  std::vector<Var<T>> chans;
  int k = 0;
  for (int ch = 0; ch < 3; ++ch)
    chans.push_back(ch == luma_idx ? bright : ad::slice_channels(chroma, k++, 1));
  Var<T> merged = ad::concat_channels<T>(chans);
  Var<T> residual = ad::add(merged, i_color);
  return ad::clamp01(to_rgb_op(residual, space_id));
}

template <typename T>
struct ForwardProbes {
  Tensor<T> e_hat, alpha_hat, L_hat, L_bar_hat;
  Tensor<T> E_hat, L_prime_hat, R_hat;
  Tensor<T> R_star, e_star, E_star;
  Tensor<T> I_color, F_C_star, I_en;
};

// Full computational graph: estimators, constraint wiring, enhancer, output
// composition, color association.
template <typename T>
Var<T> tpcnet_forward(ParamVars<T>& P, const NetworkConfig& cfg, Var<T> image,
                      ForwardProbes<T>* probes = nullptr) {
  if (image.c() != 3) throw std::invalid_argument("tpcnet_forward: expected 3 x H x W input");
  if (image.h() % 16 || image.w() % 16)
    throw std::invalid_argument("tpcnet_forward: H and W must be divisible by 16");
  auto lfe = estimators::lfe_forward(P, "lfe", image);
  if (!cfg.use_split_recovery) lfe = estimators::lfe_forward_no_split(P, "lfe", lfe);
  auto rfe = estimators::rfe_forward(P, "rfe", image, lfe.L_bar_hat, cfg.heads_base, cfg.use_split_recovery);
  Var<T> i_color = from_rgb_op(image, cfg.color_space);
  Var<T> f_c = ad::conv2d(i_color, P("color.embed.w"), P("color.embed.b"), 3);
  auto dcgt = dcgt_forward(P, cfg, rfe.R_hat, lfe.e_hat, f_c, lfe.alpha_hat);
  Var<T> e_star_feat = apply_output_constraint(P, dcgt.R_star, dcgt.e_star, lfe.alpha_hat, cfg.use_composition);
  Var<T> i_en = cam_assemble(P, dcgt.F_C_star, e_star_feat, i_color, cfg.color_space);
  if (probes) {
    probes->e_hat = lfe.e_hat.val();
    probes->alpha_hat = lfe.alpha_hat.val();
    probes->L_hat = lfe.L_hat.val();
    probes->L_bar_hat = lfe.L_bar_hat.val();
    probes->E_hat = rfe.E_hat.val();
    probes->L_prime_hat = rfe.L_prime_hat.val();
    probes->R_hat = rfe.R_hat.val();
    probes->R_star = dcgt.R_star.val();
    probes->e_star = dcgt.e_star.val();
    probes->E_star = e_star_feat.val();
    probes->I_color = i_color.val();
    probes->F_C_star = dcgt.F_C_star.val();
    probes->I_en = i_en.val();
  }
  return i_en;
}

}  // namespace net

// Value-level convenience wrapper owning config + parameters.
template <typename T>
struct TpcNet {
  NetworkConfig cfg;
  ParamTree<T> params;

  static TpcNet make(const NetworkConfig& cfg, uint64_t seed) {
    return {cfg, build_tpcnet_params<T>(cfg, seed)};
  }

  Tensor<T> enhance(const Tensor<T>& image, net::ForwardProbes<T>* probes = nullptr) const {
    ad::Tape<T> tape;
    ParamVars<T> P(tape, params, /*requires_grad=*/false);
    auto out = net::tpcnet_forward(P, cfg, ad::constant(tape, image), probes);
    return out.val();
  }
};

// ---- reflection padding for arbitrary input sizes ----

template <typename T>
Tensor<T> reflect_pad_to_multiple(const Tensor<T>& x, int multiple, int& pad_h, int& pad_w) {
  pad_h = (multiple - x.h % multiple) % multiple;
  pad_w = (multiple - x.w % multiple) % multiple;
  // mirroring without edge repetition covers at most h-1 (w-1) extra rows
  if (pad_h > x.h - 1 || pad_w > x.w - 1)
    throw std::invalid_argument("reflect_pad: image " + x.shape_str() +
                                " too small to pad to a multiple of " + std::to_string(multiple));
  Tensor<T> y(x.c, x.h + pad_h, x.w + pad_w);
  for (int c = 0; c < x.c; ++c)
    for (int iy = 0; iy < y.h; ++iy)
      for (int ix = 0; ix < y.w; ++ix) {
        int sy = iy < x.h ? iy : 2 * x.h - 2 - iy;
        int sx = ix < x.w ? ix : 2 * x.w - 2 - ix;
        y.at(c, iy, ix) = x.at(c, sy, sx);
      }
  return y;
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& x, int h, int w) {
  Tensor<T> y(x.c, h, w);
  for (int c = 0; c < x.c; ++c)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) y.at(c, iy, ix) = x.at(c, iy, ix);
  return y;
}

// ---- checkpoint: text manifest + raw little-endian float32 buffers ----

inline constexpr const char* kCheckpointMagic = "TPCNETCKPT";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void put_f32_le(std::string& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>((u >> 8) & 0xff));
  out.push_back(static_cast<char>((u >> 16) & 0xff));
  out.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline float get_f32_le(const char* p) {
  uint32_t u = (static_cast<uint32_t>(static_cast<unsigned char>(p[0]))) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ParamTree<float>& params,
                            const NetworkConfig& cfg, long long step) {
  std::ostringstream head;
  nlohmann::json jc = cfg;
  head << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  head << "config " << jc.dump() << "\n";
  head << "step " << step << "\n";
  head << "tensors " << params.size() << "\n";
  std::string data;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, v] = params.item(i);
    head << name << " " << v.c << " " << v.h << " " << v.w << " " << data.size() << "\n";
    for (float f : v.v) detail::put_f32_le(data, f);
  }
  head << "data " << data.size() << "\n";
  detail::atomic_write(path, head.str() + data);
}

struct LoadedCheckpoint {
  ParamTree<float> params;
  NetworkConfig cfg;
  long long step = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::istringstream in(all);
  std::string magic;
  int version = -1;
  if (!(in >> magic >> version)) throw CheckpointError("corrupt checkpoint: missing header");
  if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: got " + std::to_string(version));
  in.ignore(1);

  std::string line;
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0)
    throw CheckpointError("corrupt checkpoint: missing config");
  LoadedCheckpoint out;
  try {
    out.cfg = nlohmann::json::parse(line.substr(7)).get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }

  std::string key;
  size_t count = 0;
  if (!(in >> key >> out.step) || key != "step") throw CheckpointError("corrupt checkpoint: missing step");
  if (!(in >> key >> count) || key != "tensors")
    throw CheckpointError("corrupt checkpoint: missing tensor count");
  struct Entry {
    std::string name;
    int c, h, w;
    size_t offset;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries)
    if (!(in >> e.name >> e.c >> e.h >> e.w >> e.offset))
      throw CheckpointError("corrupt checkpoint: truncated manifest");
  size_t data_size = 0;
  if (!(in >> key >> data_size) || key != "data")
    throw CheckpointError("corrupt checkpoint: missing data marker");
  in.ignore(1);
  size_t data_start = static_cast<size_t>(in.tellg());
  if (data_start + data_size > all.size()) throw CheckpointError("corrupt checkpoint: truncated data");

  for (const auto& e : entries) {
    if (e.c < 1 || e.h < 1 || e.w < 1) throw CheckpointError("corrupt checkpoint: bad shape");
    size_t n = static_cast<size_t>(e.c) * e.h * e.w;
    if (e.offset + 4 * n > data_size)
      throw CheckpointError("corrupt checkpoint: tensor '" + e.name + "' exceeds data block");
    Tensor<float> t(e.c, e.h, e.w);
    const char* p = all.data() + data_start + e.offset;
    for (size_t i = 0; i < n; ++i) t.v[i] = detail::get_f32_le(p + 4 * i);
    out.params.add(e.name, std::move(t));
  }
  return out;
}

// Rebuilds the parameter shapes from the config and verifies the checkpoint
// tree matches name-for-name.
inline void audit_checkpoint_shapes(const LoadedCheckpoint& ck) {
  ParamTree<float> expect = build_tpcnet_params<float>(ck.cfg, 0);
  if (expect.size() != ck.params.size())
    throw CheckpointError("checkpoint shape audit: parameter count mismatch");
  for (size_t i = 0; i < expect.size(); ++i) {
    const auto& [name, v] = expect.item(i);
    if (!ck.params.has(name)) throw CheckpointError("checkpoint shape audit: missing '" + name + "'");
    const auto& got = ck.params.at(name);
    if (!got.same_shape(v))
      throw CheckpointError("checkpoint shape audit: '" + name + "' is " + got.shape_str() +
                            ", expected " + v.shape_str());
  }
}

}  // namespace tpc
