#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpcnet/png_io.hpp"
#include "tpcnet/training.hpp"

// Paired-dataset ingestion (root/low/*.png + root/high/*.png) and the flat
// JSON run configuration shared by the CLI commands.

namespace tpc {

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::pair<std::filesystem::path, std::filesystem::path>> pairs;
};

struct DatasetError : std::runtime_error {
  explicit DatasetError(const std::string& what) : std::runtime_error(what) {}
};

// Sorted, name-matched pairs; decode check on the first pair.
inline DatasetIndex load_pairs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::path low_dir = root / "low", high_dir = root / "high";
  for (const auto& d : {low_dir, high_dir})
    if (!fs::is_directory(d)) throw DatasetError("missing dataset directory: " + d.string());

  auto list_pngs = [](const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png")
        names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  auto lows = list_pngs(low_dir);
  auto highs = list_pngs(high_dir);
  for (const auto& n : lows)
    if (!std::binary_search(highs.begin(), highs.end(), n))
      throw DatasetError("unmatched filename: low/" + n + " has no counterpart in high/");
  for (const auto& n : highs)
    if (!std::binary_search(lows.begin(), lows.end(), n))
      throw DatasetError("unmatched filename: high/" + n + " has no counterpart in low/");
  if (lows.empty()) throw DatasetError("dataset is empty: " + root.string());

  DatasetIndex idx;
  idx.root = root;
  for (const auto& n : lows) idx.pairs.emplace_back(low_dir / n, high_dir / n);
  (void)read_png<float>(idx.pairs.front().first);  // decode check
  (void)read_png<float>(idx.pairs.front().second);
  return idx;
}

inline std::vector<TrainSample> load_dataset(const DatasetIndex& idx) {
  std::vector<TrainSample> out;
  out.reserve(idx.pairs.size());
  for (const auto& [lo, hi] : idx.pairs) {
    auto a = read_png<float>(lo);
    auto b = read_png<float>(hi);
    if (!a.same_shape(b))
      throw DatasetError("pair size mismatch: " + lo.filename().string() + " is " + a.shape_str() +
                         " vs " + b.shape_str());
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

// Flat-key JSON configuration. Unknown keys are rejected so typos fail loudly.
struct RunConfig {
  NetworkConfig net;
  TrainConfig train;
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "base_channels", "heads_base", "color_space", "use_composition", "use_split_recovery",
      "lr_init", "lr_final", "epochs", "batch_size", "crop",
      "beta1", "beta2", "w_l1", "w_ssim", "w_edge", "w_perc",
      "seed", "augment", "checkpoint_every"};
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown config key '" + key + "'");

  RunConfig rc;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("base_channels", rc.net.base_channels);
  get("heads_base", rc.net.heads_base);
  get("color_space", rc.net.color_space);
  get("use_composition", rc.net.use_composition);
  get("use_split_recovery", rc.net.use_split_recovery);
  get("lr_init", rc.train.lr_init);
  get("lr_final", rc.train.lr_final);
  get("epochs", rc.train.epochs);
  get("batch_size", rc.train.batch_size);
  get("crop", rc.train.crop);
  get("beta1", rc.train.beta1);
  get("beta2", rc.train.beta2);
  get("w_l1", rc.train.w_l1);
  get("w_ssim", rc.train.w_ssim);
  get("w_edge", rc.train.w_edge);
  get("w_perc", rc.train.w_perc);
  get("seed", rc.train.seed);
  get("augment", rc.train.augment);
  get("checkpoint_every", rc.train.checkpoint_every);
  rc.net.validate();
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config parse error in '" + path.string() + "': " + e.what());
  }
  return parse_run_config(j);
}

// TPCNET_SEED overrides the configured seed when set.
inline void apply_seed_env(RunConfig& rc) {
  if (const char* env = std::getenv("TPCNET_SEED")) rc.train.seed = std::strtoull(env, nullptr, 10);
}

}  // namespace tpc
