#pragma once

#include <span>
#include <string>
#include <vector>

#include "geoseg/config.hpp"

namespace geoseg {

/// One runnable configuration of a loss-weight or block-removal study.
struct SweepVariant {
  std::string name;
  ExperimentConfig cfg;
};

/// Loss-weight grid: every (lambda1, lambda2) pair, named `lambda1=..,lambda2=..`.
std::vector<SweepVariant> loss_weight_grid(const ExperimentConfig& base, std::span<const double> lambda1s,
                                           std::span<const double> lambda2s);

/// The full model followed by one variant per removed block: eigenvalue and
/// polar blocks, polar block, residual units, color block, contrastive
/// boundary term (lambda2 = 0) and stage supervision (lambda1 = 0).
std::vector<SweepVariant> ablation_variants(const ExperimentConfig& base);

struct SweepRow {
  std::string name;
  double lambda1 = 0, lambda2 = 0;
  bool use_eigen = true, use_gcfr = true, use_color = true, use_residual = true;
  Scores scores;  // last evaluated epoch
  double boundary_miou = 0;
  double final_loss = 0;  // mean total loss of the last epoch
  bool diverged = false;
};

/// Trains the variant on `data` and scores its last epoch.
SweepRow run_variant(const SweepVariant& variant, const Datasets& data);

/// `name,lambda1,lambda2,use_eigen,use_gcfr,use_color,use_residual,OA,mIoU,mACC,boundary_mIoU,loss,diverged`.
std::string sweep_header();
std::string sweep_row(const SweepRow& row);

}  // namespace geoseg
