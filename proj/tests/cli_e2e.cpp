// Drives the installed CLI binary end to end on a synthetic dataset:
// train -> enhance -> eval -> flops, plus the main failure exits.
// Usage: tpcnet_cli_e2e <path-to-tpcnet-binary>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tpcnet/imaging_physics.hpp"
#include "tpcnet/png_io.hpp"

namespace fs = std::filesystem;

namespace {

int failures = 0;

void expect(bool ok, const std::string& what) {
  std::printf("%s %s\n", ok ? "[ok]  " : "[FAIL]", what.c_str());
  if (!ok) ++failures;
}

int run(const std::string& cmd, std::string* output = nullptr) {
  fs::path out = fs::temp_directory_path() / "tpcnet_e2e_cmd_out.txt";
  int rc = std::system((cmd + " > " + out.string() + " 2>&1").c_str());
  if (output) {
    std::ifstream f(out);
    std::stringstream ss;
    ss << f.rdbuf();
    *output = ss.str();
  }
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: tpcnet_cli_e2e <tpcnet-binary>\n");
    return 2;
  }
  std::string bin = argv[1];
  fs::path root = fs::temp_directory_path() / "tpcnet_e2e";
  fs::remove_all(root);
  fs::create_directories(root / "data" / "low");
  fs::create_directories(root / "data" / "high");

  // three 40x56 pairs (non-multiple-of-16 exercises reflection padding)
  for (int i = 0; i < 3; ++i) {
    tpc::Rng rng(500 + i);
    tpc::Tensor<double> high(3, 40, 56);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 56; ++x)
          high.at(c, y, x) = std::clamp(
              0.6 + 0.3 * std::sin(0.4 * x + c) * std::cos(0.3 * y) + 0.05 * rng.uniform(), 0.02, 1.0);
    tpc::Tensor<double> e_fld(3, 40, 56), alpha(1, 40, 56);
    for (auto& v : e_fld.v) v = 0.25 + 0.05 * rng.uniform();
    for (auto& v : alpha.v) v = 0.9;
    auto low = tpc::compose_reflected(e_fld, alpha, high);
    for (auto& v : low.v) v = std::clamp(v, 0.0, 1.0);
    std::string name = "pair" + std::to_string(i) + ".png";
    tpc::write_png(root / "data" / "high" / name, high);
    tpc::write_png(root / "data" / "low" / name, low);
  }

  {
    std::ofstream cfg(root / "config.json");
    cfg << R"({"base_channels": 4, "epochs": 2, "batch_size": 2, "crop": 32,
               "seed": 5, "checkpoint_every": 1})";
  }

  std::string out;
  int rc = run(bin + " train --config " + (root / "config.json").string() + " --data " +
                   (root / "data").string() + " --out " + (root / "run").string(),
               &out);
  expect(rc == 0, "train exits 0");
  expect(fs::exists(root / "run" / "model.tpc"), "final checkpoint written");
  expect(fs::exists(root / "run" / "train_log.txt"), "training log written");
  {
    std::ifstream log(root / "run" / "train_log.txt");
    std::string first;
    std::getline(log, first);
    expect(first.rfind("step 0 lr ", 0) == 0, "log lines carry step/lr/loss records");
  }

  rc = run(bin + " enhance --ckpt " + (root / "run" / "model.tpc").string() + " --input " +
               (root / "data" / "low").string() + " --output " + (root / "enhanced").string() +
               " --save-sidebyside",
           &out);
  expect(rc == 0, "enhance exits 0");
  bool sizes_ok = true;
  for (int i = 0; i < 3; ++i) {
    auto p = root / "enhanced" / ("pair" + std::to_string(i) + ".png");
    if (!fs::exists(p)) {
      sizes_ok = false;
      break;
    }
    auto img = tpc::read_png<float>(p);
    if (img.h != 40 || img.w != 56) sizes_ok = false;
  }
  expect(sizes_ok, "enhanced outputs keep the original (padded/cropped) sizes");
  expect(fs::exists(root / "enhanced" / "sidebyside" / "pair0.png"), "side-by-side comparisons written");

  rc = run(bin + " eval --pred " + (root / "enhanced").string() + " --gt " +
               (root / "data" / "high").string() + " --report " + (root / "report.txt").string(),
           &out);
  expect(rc == 0, "eval exits 0");
  expect(out.find("mean over 3 images") != std::string::npos, "eval prints the mean record");
  {
    std::ifstream rep(root / "report.txt");
    std::stringstream ss;
    ss << rep.rdbuf();
    expect(ss.str().find("psnr") != std::string::npos, "report file holds per-image records");
  }

  // eval over mismatched directories reports the missing file and fails
  fs::remove(root / "enhanced" / "pair1.png");
  rc = run(bin + " eval --pred " + (root / "enhanced").string() + " --gt " +
               (root / "data" / "high").string() + " --report " + (root / "report2.txt").string(),
           &out);
  expect(rc != 0, "eval exits nonzero on unmatched files");
  expect(out.find("pair1.png") != std::string::npos, "pairing error names the missing file");

  rc = run("TPCNET_SEED=4242 " + bin + " train --config " + (root / "config.json").string() +
               " --data " + (root / "data").string() + " --out " + (root / "run_env").string(),
           &out);
  expect(rc == 0 && out.find("seed 4242") != std::string::npos,
         "TPCNET_SEED overrides the configured seed");

  rc = run(bin + " enhance --ckpt " + (root / "run" / "model.tpc").string() + " --input " +
               (root / "data" / "low" / "pair0.png").string() + " --output " +
               (root / "probe_out").string() + " --debug-constraints",
           &out);
  expect(rc == 0 && out.find("constraints pair0.png: |L+Lbar-e| 0, ") != std::string::npos,
         "debug flag reports zero constraint residuals");

  rc = run(bin + " flops --height 256 --width 256 --channels 64 --heads 4", &out);
  expect(rc == 0 && out.find("ratio: 0.2500") != std::string::npos, "flops prints the exact 0.25 ratio");
  rc = run(bin + " flops --height 16 --width 16 --channels 7 --heads 2", &out);
  expect(rc != 0, "flops rejects invalid channel/head divisibility");

  rc = run(bin + " flops --full-model --height 256 --width 256", &out);
  expect(rc == 0 && out.find("model params:") != std::string::npos, "full-model profile prints totals");

  // unknown config key fails before any side effect
  {
    std::ofstream cfg(root / "bad.json");
    cfg << R"({"chanels": 4})";
  }
  rc = run(bin + " train --config " + (root / "bad.json").string() + " --data " +
               (root / "data").string() + " --out " + (root / "run2").string(),
           &out);
  expect(rc != 0 && !fs::exists(root / "run2" / "model.tpc"), "unknown config key rejected");

  fs::remove_all(root);
  if (failures) std::printf("%d e2e check(s) FAILED\n", failures);
  else std::printf("cli end-to-end checks passed\n");
  return failures == 0 ? 0 : 1;
}
