#pragma once

// Experiment configuration document. Every key is optional and falls back to
// the default shown by `modeseg config --defaults`; unknown keys are errors.
//
//   {
//     "seed": 0,
//     "model":     {"arch", "depth", "base_channels", "dropout",
//                   "norm": {"kind", "modes", "epsilon", "momentum", "em_iters", "min_mode_weight"}},
//     "train":     {"batch_size", "max_epochs", "patience", "restore_best", "min_delta", "threshold"},
//     "optimizer": {"kind", "learning_rate", "beta1", "beta2", "epsilon", "momentum"},
//     "loss":      {"kind", "alpha", "focal_gamma", "smooth_eps", "dice_weight", "focal_weight"},
//     "data":      {"raster", "mask", "tile_size", "split": [train, val, test], "cv_val_fraction",
//                   "synth": {"width", "height", "seed", "coverage", "water_mean_db", ...}},
//     "run_id": ""
//   }
//
// When data.raster is empty the scene is generated from data.synth.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <modeseg/datapipe.hpp>
#include <modeseg/models.hpp>
#include <modeseg/objectives.hpp>
#include <modeseg/optim.hpp>
#include <modeseg/trainer.hpp>

namespace modeseg::cli {

struct DataConfig {
  std::string raster;
  std::string mask;
  std::size_t tile_size = 64;
  std::array<double, 3> split{0.7, 0.1, 0.2};
  double cv_val_fraction = 0.1;
  std::size_t synth_width = 512;
  std::size_t synth_height = 512;
  std::uint64_t synth_seed = 0;
  SynthConfig synth;

  bool synthetic() const { return raster.empty(); }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelSpec model;
  TrainConfig train;
  OptimizerConfig optimizer;
  LossConfig loss;
  DataConfig data;
  std::string run_id;

  /// Throws ConfigError on the first invalid field.
  void validate() const;
};

/// Throws ConfigError on malformed JSON, wrong value types or unknown keys.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);

}  // namespace modeseg::cli
