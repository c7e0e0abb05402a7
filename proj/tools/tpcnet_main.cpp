#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tpcnet/dataset.hpp"
#include "tpcnet/evaluation.hpp"
#include "tpcnet/network.hpp"
#include "tpcnet/selftest.hpp"
#include "tpcnet/training.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  auto rc = tpc::load_run_config(config_path);
  tpc::apply_seed_env(rc);
  auto index = tpc::load_pairs(data_dir);
  auto dataset = tpc::load_dataset(index);
  std::cout << "training on " << dataset.size() << " pairs, " << rc.train.epochs << " epochs, crop "
            << rc.train.crop << ", seed " << rc.train.seed << "\n";
  fs::create_directories(out_dir);
  std::ofstream log_file(fs::path(out_dir) / "train_log.txt", std::ios::trunc);
  auto result = tpc::train(dataset, rc.net, rc.train, fs::path(out_dir), &log_file);
  log_file.close();
  tpc::write_train_log(fs::path(out_dir) / "train_log.txt", result.log);  // atomic final copy
  tpc::save_checkpoint(fs::path(out_dir) / "model.tpc", result.params, result.cfg, result.steps);
  std::cout << "finished " << result.steps << " steps; final loss "
            << (result.log.empty() ? 0.0 : result.log.back().total) << "; checkpoints in " << out_dir
            << "\n";
  return 0;
}

tpc::Tensor<float> enhance_one(const tpc::TpcNet<float>& nn, const tpc::Tensor<float>& img,
                               tpc::net::ForwardProbes<float>* probes = nullptr) {
  int ph = 0, pw = 0;
  auto padded = tpc::reflect_pad_to_multiple(img, 16, ph, pw);
  auto out = nn.enhance(padded, probes);
  return tpc::crop_top_left(out, img.h, img.w);
}

// --debug-constraints: re-evaluate the wired identities from the probe
// tensors and report the (expected zero) maxima.
void report_constraint_probes(const tpc::net::ForwardProbes<float>& pr, const std::string& name) {
  float sum_err = 0, rec_err = 0, comp_err = 0;
  for (size_t j = 0; j < pr.e_hat.size(); ++j)
    sum_err = std::max(sum_err, std::abs(pr.L_hat.v[j] + pr.L_bar_hat.v[j] - pr.e_hat.v[j]));
  for (size_t j = 0; j < pr.R_hat.size(); ++j)
    rec_err = std::max(rec_err, std::abs(pr.R_hat.v[j] - (pr.E_hat.v[j] - pr.L_bar_hat.v[j] * 0.5f) *
                                                             pr.L_prime_hat.v[j]));
  size_t plane = pr.alpha_hat.size();
  for (size_t j = 0; j < pr.E_star.size(); ++j) {
    float a = pr.alpha_hat.v[j % plane];
    float lit = (a * pr.e_star.v[j]) * pr.R_star.v[j];
    float amb = static_cast<float>((static_cast<float>(a * -1.0) + 1.0f) * pr.e_star.v[j] * 0.5);
    comp_err = std::max(comp_err, std::abs(pr.E_star.v[j] - (lit + amb)));
  }
  std::cout << "constraints " << name << ": |L+Lbar-e| " << sum_err << ", |R-(E-Lbar/2)L'| "
            << rec_err << ", |E*-compose| " << comp_err << "\n";
}

int cmd_enhance(const std::string& ckpt_path, const std::string& input, const std::string& output,
                bool side_by_side, bool debug_constraints) {
  auto ck = tpc::load_checkpoint(ckpt_path);
  tpc::audit_checkpoint_shapes(ck);
  tpc::TpcNet<float> nn{ck.cfg, std::move(ck.params)};

  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) {
      std::cerr << "no .png files in " << input << "\n";
      return 1;
    }
  } else if (fs::is_regular_file(input)) {
    inputs.push_back(input);
  } else {
    std::cerr << "input not found: " << input << "\n";
    return 1;
  }

  fs::create_directories(output);
  for (const auto& p : inputs) {
    auto img = tpc::read_png<float>(p);
    tpc::net::ForwardProbes<float> probes;
    auto out = enhance_one(nn, img, debug_constraints ? &probes : nullptr);
    if (debug_constraints) report_constraint_probes(probes, p.filename().string());
    tpc::write_png(fs::path(output) / p.filename(), out);
    if (side_by_side) {
      tpc::Tensor<float> sbs(3, img.h, img.w * 2);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y) {
          for (int x = 0; x < img.w; ++x) sbs.at(c, y, x) = img.at(c, y, x);
          for (int x = 0; x < img.w; ++x) sbs.at(c, y, img.w + x) = out.at(c, y, x);
        }
      // kept out of the output directory so eval pairing stays clean
      tpc::write_png(fs::path(output) / "sidebyside" / p.filename(), sbs);
    }
    std::cout << "enhanced " << p.filename().string() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& report_path) {
  auto rep = tpc::evaluate_pairs(pred, gt);
  tpc::print_report(std::cout, rep);
  if (!report_path.empty()) tpc::write_report(report_path, rep);
  return rep.ok() ? 0 : 1;
}

int cmd_flops(int height, int width, int channels, int heads, bool full_model,
              const std::string& config_path) {
  long long cg = tpc::count_attention_flops(height, width, channels, heads,
                                            tpc::MsaVariant::kCrossGuided);
  long long conv = tpc::count_attention_flops(height, width, channels, heads,
                                              tpc::MsaVariant::kConventional);
  std::cout << "cross-guided attention:  " << cg << " flops\n";
  std::cout << "conventional attention:  " << conv << " flops\n";
  std::cout << "ratio: " << std::fixed << std::setprecision(4)
            << static_cast<double>(cg) / static_cast<double>(conv) << "\n";
  if (full_model) {
    tpc::NetworkConfig net;
    if (!config_path.empty()) net = tpc::load_run_config(config_path).net;
    auto cost = tpc::count_params_flops(net, height, width);
    std::cout << "model params: " << cost.params << " (" << std::setprecision(2)
              << cost.params / 1e6 << "M)\n";
    std::cout << "model flops at " << height << "x" << width << ": " << cost.total_flops() << " ("
              << cost.total_flops() / 1e9 << "G; conv " << cost.conv_flops / 1e9 << "G, attention "
              << cost.attn_flops / 1e9 << "G)\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TPCNet low-light image enhancement"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir;
  auto* train = app.add_subcommand("train", "train a model on a paired dataset");
  train->add_option("--config", config_path, "JSON run configuration")->required();
  train->add_option("--data", data_dir, "dataset root containing low/ and high/")->required();
  train->add_option("--out", out_dir, "output directory for checkpoints and logs")->required();

  std::string ckpt, input, output;
  bool side_by_side = false;
  auto* enhance = app.add_subcommand("enhance", "enhance images with a trained checkpoint");
  enhance->add_option("--ckpt", ckpt, "checkpoint file")->required();
  enhance->add_option("--input", input, "input PNG file or directory")->required();
  enhance->add_option("--output", output, "output directory")->required();
  enhance->add_flag("--save-sidebyside", side_by_side, "also write input|output comparisons");
  bool debug_constraints = false;
  enhance->add_flag("--debug-constraints", debug_constraints,
                    "print the internal constraint residuals per image");

  std::string pred_dir, gt_dir, report_path;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over paired directories");
  eval->add_option("--pred", pred_dir, "predictions directory")->required();
  eval->add_option("--gt", gt_dir, "ground-truth directory")->required();
  eval->add_option("--report", report_path, "report file to write")->required();

  int height = 256, width = 256, channels = 64, heads = 4;
  bool full_model = false;
  std::string flops_config;
  auto* flops = app.add_subcommand("flops", "analytic attention/model cost");
  flops->add_option("--height", height, "input height");
  flops->add_option("--width", width, "input width");
  flops->add_option("--channels", channels, "attention channels");
  flops->add_option("--heads", heads, "attention heads");
  flops->add_flag("--full-model", full_model, "also profile the full model");
  flops->add_option("--config", flops_config, "run configuration for --full-model");

  auto* selftest = app.add_subcommand("selftest", "run the built-in property suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, data_dir, out_dir);
    if (enhance->parsed()) return cmd_enhance(ckpt, input, output, side_by_side, debug_constraints);
    if (eval->parsed()) return cmd_eval(pred_dir, gt_dir, report_path);
    if (flops->parsed()) return cmd_flops(height, width, channels, heads, full_model, flops_config);
    if (selftest->parsed()) return tpc::run_selftest(std::cout) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
