#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geoseg/training.hpp"

namespace geoseg {

/// Everything one experiment needs. Every key has a default, so an empty file
/// is a valid configuration.
///
///   seed = 0                      # applied to the network, training and evaluation
///   [data]    train, eval (point files, whitespace separated), synthetic_train,
///             synthetic_eval, synthetic_extent, synthetic_density, synthetic_seed
///   [network] classes, ratios, widths, width_scale, k1, k2, k_eig, propagate_k,
///             boundary_radius, boundary_radius_growth, use_eigen, use_gcfr,
///             use_color, use_residual, use_positions
///   [loss]    lambda1, lambda2, tau
///   [train]   epochs, batch, steps_per_epoch, column_points, column_section,
///             learning_rate, lr_decay, beta1, beta2, eps, rotate_z, scale,
///             scale_min, scale_max, jitter, eval_every, recalibrate_batches, threads,
///             checkpoint, log
///   [eval]    column_points, column_section, absent_classes (exclude | zero)
struct ExperimentConfig {
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> eval_files;
  std::size_t synthetic_train = 0;  // generated two-class scenes, used when no files are given
  std::size_t synthetic_eval = 0;
  double synthetic_extent = 3.0;
  double synthetic_density = 120.0;
  std::uint64_t synthetic_seed = 0;

  TrainConfig train;
  EvalOptions eval;
  std::filesystem::path checkpoint = "model.ckpt";
  std::filesystem::path log = "train_log.csv";

  /// Sets the network, training and evaluation seeds together.
  void set_seed(std::uint64_t seed);
  void validate() const;
  /// Canonical text form; parse_experiment(to_text()) reproduces the config.
  std::string to_text() const;
};

/// Unknown sections or keys raise ConfigError naming the line.
ExperimentConfig parse_experiment(const std::string& text);
/// Relative data paths are taken relative to the file's directory.
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Training and evaluation scenes: loaded files, or generated two-class scenes.
struct Datasets {
  std::vector<LabeledCloud> train;
  std::vector<LabeledCloud> eval;
};
Datasets load_datasets(const ExperimentConfig& cfg);

}  // namespace geoseg
