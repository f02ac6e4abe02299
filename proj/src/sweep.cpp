#include "geoseg/sweep.hpp"

#include <sstream>

namespace geoseg {

namespace {

std::string number(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

std::vector<SweepVariant> loss_weight_grid(const ExperimentConfig& base, std::span<const double> lambda1s,
                                           std::span<const double> lambda2s) {
  std::vector<SweepVariant> out;
  for (double l1 : lambda1s)
    for (double l2 : lambda2s) {
      SweepVariant v{"lambda1=" + number(l1) + ",lambda2=" + number(l2), base};
      v.cfg.train.loss.lambda1 = l1;
      v.cfg.train.loss.lambda2 = l2;
      v.cfg.validate();
      out.push_back(std::move(v));
    }
  return out;
}

std::vector<SweepVariant> ablation_variants(const ExperimentConfig& base) {
  std::vector<SweepVariant> out;
  auto add = [&](std::string name, auto&& edit) {
    SweepVariant v{std::move(name), base};
    edit(v.cfg);
    v.cfg.validate();
    out.push_back(std::move(v));
  };
  add("full", [](ExperimentConfig&) {});
  add("no_eigen_no_gcfr", [](ExperimentConfig& c) {
    c.train.net.use_eigen = false;
    c.train.net.use_gcfr = false;
  });
  add("no_gcfr", [](ExperimentConfig& c) { c.train.net.use_gcfr = false; });
  add("no_residual", [](ExperimentConfig& c) { c.train.net.use_residual = false; });
  add("no_color", [](ExperimentConfig& c) { c.train.net.use_color = false; });
  add("no_cbl", [](ExperimentConfig& c) { c.train.loss.lambda2 = 0; });
  add("no_multistage", [](ExperimentConfig& c) { c.train.loss.lambda1 = 0; });
  return out;
}

SweepRow run_variant(const SweepVariant& variant, const Datasets& data) {
  const TrainConfig& t = variant.cfg.train;
  SweepRow row;
  row.name = variant.name;
  row.lambda1 = t.loss.lambda1;
  row.lambda2 = t.loss.lambda2;
  row.use_eigen = t.net.use_eigen;
  row.use_gcfr = t.net.use_gcfr;
  row.use_color = t.net.use_color;
  row.use_residual = t.net.use_residual;
  const TrainResult r = train(data.train, data.eval, t);
  row.diverged = r.diverged;
  if (!r.log.empty()) {
    const EpochLog& last = r.log.back();
    row.scores = last.eval;
    row.boundary_miou = last.boundary_miou;
    row.final_loss = last.loss.total;
  }
  return row;
}

std::string sweep_header() {
  return "name,lambda1,lambda2,use_eigen,use_gcfr,use_color,use_residual,OA,mIoU,mACC,boundary_mIoU,loss,diverged";
}

std::string sweep_row(const SweepRow& r) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << '"' << r.name << "\"," << r.lambda1 << ',' << r.lambda2 << ',' << r.use_eigen << ','
    << r.use_gcfr << ',' << r.use_color << ',' << r.use_residual << ',' << r.scores.oa << ',' << r.scores.miou << ','
    << r.scores.macc << ',' << r.boundary_miou << ',' << r.final_loss << ',' << r.diverged;
  return s.str();
}

}  // namespace geoseg
