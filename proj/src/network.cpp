#include "geoseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "geoseg/errors.hpp"

namespace geoseg {

using ad::Mode;
using ad::ParameterStore;
using ad::Value;

// --- NetworkConfig -----------------------------------------------------------

void NetworkConfig::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
  if (ratios[0] != 1.0) throw ConfigError("the first stage keeps every input point (ratio 1)");
  for (double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("stage ratios must lie in (0, 1]");
  for (auto w : widths)
    if (w < 1) throw ConfigError("stage widths must be positive");
  if (k1 < 1 || k2 < 1 || k_eig < 1 || propagate_k < 1) throw ConfigError("neighbor counts must be positive");
  if (!(k1 < k2)) throw ConfigError("k1 must be smaller than k2");
  if (!(boundary_radius > 0) || !(boundary_radius_growth >= 1.0))
    throw ConfigError("boundary radius must be positive and its growth at least 1");
  if (lambda1 < 0 || lambda2 < 0) throw ConfigError("loss weights must be non-negative");
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
}

std::size_t NetworkConfig::min_points() const {
  double product = 1.0;
  for (double r : ratios) product *= r;
  return static_cast<std::size_t>(std::ceil(1.0 / product - 1e-9));
}

std::array<std::size_t, kStages> NetworkConfig::stage_sizes(std::size_t n) const {
  std::array<std::size_t, kStages> out{};
  double product = 1.0;
  for (std::size_t s = 0; s < kStages; ++s) {
    product *= ratios[s];
    out[s] = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * product - 1e-9));
  }
  return out;
}

NetworkConfig NetworkConfig::scaled_widths(double factor) const {
  NetworkConfig c = *this;
  for (auto& w : c.widths)
    w = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(static_cast<double>(w) * factor)));
  return c;
}

namespace {

template <class T, std::size_t N>
std::string join(const std::array<T, N>& a) {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < N; ++i) ss << (i ? " " : "") << a[i];
  return ss.str();
}

std::string num(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

std::map<std::string, std::string> NetworkConfig::to_meta() const {
  return {
      {"net.num_classes", std::to_string(num_classes)},
      {"net.ratios", join(ratios)},
      {"net.widths", join(widths)},
      {"net.k1", std::to_string(k1)},
      {"net.k2", std::to_string(k2)},
      {"net.k_eig", std::to_string(k_eig)},
      {"net.propagate_k", std::to_string(propagate_k)},
      {"net.boundary_radius", num(boundary_radius)},
      {"net.boundary_radius_growth", num(boundary_radius_growth)},
      {"net.lambda1", num(lambda1)},
      {"net.lambda2", num(lambda2)},
      {"net.tau", num(tau)},
      {"net.use_eigen", use_eigen ? "1" : "0"},
      {"net.use_gcfr", use_gcfr ? "1" : "0"},
      {"net.use_color", use_color ? "1" : "0"},
      {"net.use_residual", use_residual ? "1" : "0"},
      {"net.use_positions", use_positions ? "1" : "0"},
      {"net.seed", std::to_string(seed)},
  };
}

NetworkConfig NetworkConfig::from_meta(const std::map<std::string, std::string>& meta) {
  NetworkConfig c;
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = meta.find("net." + key);
    if (it == meta.end()) throw ConfigError("checkpoint lacks network key '" + key + "'");
    return it->second;
  };
  auto as_size = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  c.num_classes = std::stoi(get("num_classes"));
  {
    std::istringstream ss(get("ratios"));
    for (auto& r : c.ratios) ss >> r;
    std::istringstream ws(get("widths"));
    for (auto& w : c.widths) ws >> w;
    if (!ss || !ws) throw ConfigError("malformed stage schedule in checkpoint");
  }
  c.k1 = as_size("k1");
  c.k2 = as_size("k2");
  c.k_eig = as_size("k_eig");
  c.propagate_k = as_size("propagate_k");
  c.boundary_radius = std::stod(get("boundary_radius"));
  c.boundary_radius_growth = std::stod(get("boundary_radius_growth"));
  c.lambda1 = std::stod(get("lambda1"));
  c.lambda2 = std::stod(get("lambda2"));
  c.tau = std::stod(get("tau"));
  c.use_eigen = get("use_eigen") == "1";
  c.use_gcfr = get("use_gcfr") == "1";
  c.use_color = get("use_color") == "1";
  c.use_residual = get("use_residual") == "1";
  c.use_positions = get("use_positions") == "1";
  c.seed = std::stoull(get("seed"));
  c.validate();
  return c;
}

std::size_t polar_channel_count(const NetworkConfig& cfg) { return cfg.use_gcfr ? 3 : 0; }

std::size_t context_channel_count(const NetworkConfig& cfg) {
  return 3 + (cfg.use_gcfr ? 1 : 0) + (cfg.use_color ? ColorFeatures::kChannels : 0);
}

// --- geometry preparation ------------------------------------------------------

namespace {

NeighborTable prefix(const NeighborTable& t, std::size_t k) {
  NeighborTable out;
  out.rows = t.rows;
  out.k = k;
  out.indices.reserve(t.rows * k);
  out.distances.reserve(t.rows * k);
  for (std::size_t i = 0; i < t.rows; ++i) {
    out.indices.insert(out.indices.end(), t.row(i).begin(), t.row(i).begin() + static_cast<std::ptrdiff_t>(k));
    out.distances.insert(out.distances.end(), t.row_distances(i).begin(),
                         t.row_distances(i).begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

BranchGeometry build_branch(const StageState& st, const NeighborTable& euclid, const LocalDensity& density,
                            const NetworkConfig& cfg) {
  BranchGeometry g;
  const std::size_t m = st.size();
  g.k_euclid = euclid.k;
  g.k_eig = cfg.use_eigen ? st.knn_eig.k : 0;
  const std::size_t w = g.width();
  g.table.resize(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(euclid.row(i).begin(), euclid.row(i).end(), g.table.begin() + static_cast<std::ptrdiff_t>(i * w));
    if (g.k_eig)
      std::copy(st.knn_eig.row(i).begin(), st.knn_eig.row(i).end(),
                g.table.begin() + static_cast<std::ptrdiff_t>(i * w + g.k_euclid));
  }

  g.polar_channels = polar_channel_count(cfg);
  if (g.polar_channels) {
    const GcfrFeatures near = gcfr_features(st.positions, euclid);
    GcfrFeatures far;
    if (g.k_eig) far = gcfr_features_in_frame(st.positions, st.knn_eig, near.centroid_azimuth, near.centroid_elevation);
    g.polar.resize(m * w * 3);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const GcfrFeatures& src = j < g.k_euclid ? near : far;
        const std::size_t sj = i * src.k + (j < g.k_euclid ? j : j - g.k_euclid);
        double* dst = g.polar.data() + (i * w + j) * 3;
        dst[0] = src.distance[sj];
        dst[1] = src.rel_azimuth[sj];
        dst[2] = src.rel_elevation[sj];
      }
  }

  g.context_channels = context_channel_count(cfg);
  g.context.assign(m * w * g.context_channels, 0.0);
  ColorFeatures near_color, far_color;
  if (cfg.use_color) {
    near_color = color_features(st.colors, euclid);
    if (g.k_eig) far_color = color_features(st.colors, st.knn_eig);
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double* dst = g.context.data() + (i * w + j) * g.context_channels;
      std::size_t c = 0;
      for (int a = 0; a < 3; ++a) dst[c++] = cfg.use_positions ? st.positions[i][a] : 0.0;
      if (cfg.use_gcfr) dst[c++] = density.ratio[i];
      if (cfg.use_color) {
        const ColorFeatures& src = j < g.k_euclid ? near_color : far_color;
        const std::size_t sj = i * src.k + (j < g.k_euclid ? j : j - g.k_euclid);
        for (int a = 0; a < 6; ++a) dst[c++] = src.per_neighbor[sj * 6 + a];
        // Variance always describes the Euclidean neighborhood.
        for (int a = 0; a < 3; ++a) dst[c++] = near_color.variance[i * 3 + a];
      }
    }
  return g;
}

}  // namespace

InterpolationWeights interpolation_weights(std::span<const Point3> coarse, std::span<const Point3> fine) {
  if (coarse.empty()) throw Error("interpolation needs at least one coarse point");
  InterpolationWeights w;
  w.k = std::min<std::size_t>(3, coarse.size());
  const KdTree tree(coarse);
  const NeighborTable t = tree.knn(fine, w.k);
  w.indices = t.indices;
  w.weights.resize(t.indices.size());
  for (std::size_t i = 0; i < t.rows; ++i) {
    double* wi = w.weights.data() + i * w.k;
    const auto d = t.row_distances(i);
    if (d[0] == 0.0) {
      std::fill_n(wi, w.k, 0.0);
      wi[0] = 1.0;
      continue;
    }
    double total = 0;
    for (std::size_t j = 0; j < w.k; ++j) total += wi[j] = 1.0 / (d[j] + 1e-8);
    for (std::size_t j = 0; j < w.k; ++j) wi[j] /= total;
  }
  return w;
}

Value nn_interpolate_up(const Value& coarse_features, const InterpolationWeights& w) {
  const std::size_t fine = w.indices.size() / w.k;
  const Value gathered = ad::gather_rows(coarse_features, w.indices, {fine, w.k});
  const Value weights = Value::constant({fine, w.k, 1}, w.weights);
  return ad::reduce_sum(gathered * weights, 1);
}

Value nn_interpolate_up(const Value& coarse_features, std::span<const Point3> coarse_positions,
                        std::span<const Point3> fine_positions) {
  if (coarse_features.rank() != 2 || coarse_features.shape()[0] != coarse_positions.size())
    throw ShapeError("nn_interpolate_up: features " + ad::to_string(coarse_features.shape()) +
                     " do not match " + std::to_string(coarse_positions.size()) + " coarse points");
  return nn_interpolate_up(coarse_features, interpolation_weights(coarse_positions, fine_positions));
}

PreparedCloud encode(const LabeledCloud& cloud, const NetworkConfig& cfg) {
  cfg.validate();
  cloud.validate();
  if (cloud.num_classes > cfg.num_classes)
    throw ClassMismatchError("cloud has " + std::to_string(cloud.num_classes) + " classes, network expects " +
                             std::to_string(cfg.num_classes));
  const std::size_t n = cloud.size();
  if (n < cfg.min_points())
    throw Error("encode: " + std::to_string(n) + " points cannot be reduced over five stages; need at least " +
                std::to_string(cfg.min_points()));
  const auto sizes = cfg.stage_sizes(n);

  PreparedCloud out;
  out.num_classes = cfg.num_classes;
  out.sphere = centroid_bounding_sphere(cloud.positions);
  const double global_radius = std::max(out.sphere.radius, 1e-12);

  for (std::size_t s = 0; s < kStages; ++s) {
    StageState& st = out.stages[s];
    st.stage = s;
    if (s == 0) {
      st.parent_rows.resize(n);
      for (std::size_t i = 0; i < n; ++i) st.parent_rows[i] = static_cast<Index>(i);
      st.cloud_rows = st.parent_rows;
      st.positions = cloud.positions;
      st.colors = cloud.colors;
    } else {
      const StageState& prev = out.stages[s - 1];
      st.parent_rows = farthest_point_sample(prev.positions, sizes[s], derive_seed(cfg.seed, s));
      for (Index r : st.parent_rows) {
        st.cloud_rows.push_back(prev.cloud_rows[r]);
        st.positions.push_back(prev.positions[r]);
        st.colors.push_back(prev.colors[r]);
      }
    }
    const std::size_t m = st.size();
    const KdTree tree(st.positions);
    st.knn_k2 = tree.knn(st.positions, std::min(cfg.k2, m));
    st.knn_k1 = prefix(st.knn_k2, std::min(cfg.k1, m));
    st.eigen = local_covariance_eigenvalues(st.positions, st.knn_k1);
    if (cfg.use_eigen) st.knn_eig = eigenspace_knn(st.eigen, std::min(cfg.k_eig, m));
    st.density_k1 = local_density(st.positions, st.knn_k1, out.sphere.center, global_radius);
    st.density_k2 = local_density(st.positions, st.knn_k2, out.sphere.center, global_radius);
    st.branches[0] = build_branch(st, st.knn_k1, st.density_k1, cfg);
    st.branches[1] = build_branch(st, st.knn_k2, st.density_k2, cfg);

    if (s == 0) {
      st.label_distribution = LabelDistribution::one_hot(cloud.labels, cfg.num_classes);
    } else {
      const StageState& prev = out.stages[s - 1];
      st.label_distribution = propagate_label_distributions(prev.label_distribution, prev.positions, st.positions,
                                                            std::min(cfg.propagate_k, prev.size()));
    }
    st.hard_labels = st.label_distribution.argmax();
    const double radius = cfg.boundary_radius * std::pow(cfg.boundary_radius_growth, static_cast<double>(s));
    st.boundary = mine_boundaries(st.positions, st.hard_labels, radius);
  }
  for (std::size_t s = 0; s + 1 < kStages; ++s) {
    const auto w = interpolation_weights(out.stages[s + 1].positions, out.stages[s].positions);
    out.stages[s].up_indices = w.indices;
    out.stages[s].up_weights = w.weights;
    out.stages[s].up_k = w.k;
  }
  return out;
}

// --- building blocks -------------------------------------------------------------

ResidualBlock::ResidualBlock(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                             bool residual, std::mt19937_64& rng)
    : residual_(residual), project_(residual && in != out) {
  const ad::DenseOptions unit{.bias = true, .normalize = true, .activate = true};
  first_ = ad::DenseLayer(store, name + ".unit1", in, out, unit, rng);
  if (residual_) {
    second_ = ad::DenseLayer(store, name + ".unit2", out, out, unit, rng);
    if (project_) skip_ = ad::DenseLayer(store, name + ".skip", in, out, {.bias = true, .normalize = true}, rng);
  }
}

Value ResidualBlock::forward(ParameterStore& store, const Value& x, Mode mode) const {
  Value y = first_.forward(store, x, mode);
  if (!residual_) return y;
  y = second_.forward(store, y, mode);
  return y + (project_ ? skip_.forward(store, x, mode) : x);
}

AttentivePool::AttentivePool(ParameterStore& store, const std::string& name, std::size_t channels,
                             std::mt19937_64& rng)
    : score_(store, name + ".score", channels, channels, {.bias = true}, rng) {}

Value AttentivePool::weights(ParameterStore& store, const Value& neighbor_features, Mode mode) const {
  if (neighbor_features.rank() != 3)
    throw ShapeError("attentive pool expects [N, K, C], got " + ad::to_string(neighbor_features.shape()));
  return ad::softmax(score_.forward(store, neighbor_features, mode), 1);
}

Value AttentivePool::forward(ParameterStore& store, const Value& neighbor_features, Mode mode) const {
  return ad::reduce_sum(weights(store, neighbor_features, mode) * neighbor_features, 1);
}

GeometryBranch::GeometryBranch(ParameterStore& store, const std::string& name, std::size_t in_features,
                               std::size_t polar_channels, std::size_t context_channels, std::size_t width,
                               bool residual, std::mt19937_64& rng)
    : in_features_(in_features),
      polar_channels_(polar_channels),
      context_channels_(context_channels),
      has_pre_(in_features + polar_channels > 0) {
  if (has_pre_) pre_geometry_ = ResidualBlock(store, name + ".pre_geometry", in_features + polar_channels, width, residual, rng);
  pre_context_ = ResidualBlock(store, name + ".pre_context", (has_pre_ ? width : 0) + context_channels, width, residual, rng);
  pool_ = AttentivePool(store, name + ".pool", width, rng);
  post_ = ResidualBlock(store, name + ".post", width, width, residual, rng);
}

Value GeometryBranch::forward(ParameterStore& store, const Value& point_features, const BranchGeometry& geo,
                              Mode mode) const {
  if (geo.polar_channels != polar_channels_ || geo.context_channels != context_channels_)
    throw ShapeError("geometry branch built for different feature channels");
  const std::size_t w = geo.width();
  const std::size_t rows = geo.table.size() / w;
  std::vector<Value> context_parts;
  if (has_pre_) {
    std::vector<Value> geometric;
    if (in_features_) {
      if (!point_features.defined() || point_features.rank() != 2 || point_features.shape()[1] != in_features_ ||
          point_features.shape()[0] != rows)
        throw ShapeError("geometry branch expects point features [" + std::to_string(rows) + ", " +
                         std::to_string(in_features_) + "]");
      geometric.push_back(ad::gather_rows(point_features, geo.table, {rows, w}));
    }
    if (polar_channels_) geometric.push_back(Value::constant({rows, w, polar_channels_}, geo.polar));
    const Value fg = geometric.size() == 1 ? geometric[0] : ad::concat(geometric, 2);
    context_parts.push_back(pre_geometry_.forward(store, fg, mode));
  }
  context_parts.push_back(Value::constant({rows, w, context_channels_}, geo.context));
  const Value g = pre_context_.forward(store, context_parts.size() == 1 ? context_parts[0] : ad::concat(context_parts, 2), mode);
  return post_.forward(store, pool_.forward(store, g, mode), mode);
}

namespace {

template <typename T>
void append(std::vector<T>& dst, const std::vector<T>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

void append_offset(std::vector<Index>& dst, const std::vector<Index>& src, std::size_t offset) {
  for (Index i : src) dst.push_back(static_cast<Index>(i + offset));
}

void append_table(NeighborTable& dst, const NeighborTable& src, std::size_t offset) {
  if (dst.rows == 0) dst.k = src.k;
  if (src.k != dst.k) throw ShapeError("merge_prepared: neighbor counts differ");
  dst.rows += src.rows;
  append_offset(dst.indices, src.indices, offset);
  append(dst.distances, src.distances);
}

}  // namespace

PreparedCloud merge_prepared(std::span<const PreparedCloud> items) {
  if (items.empty()) throw Error("merge_prepared: no items");
  if (items.size() == 1) return items[0];
  PreparedCloud out;
  out.sphere = items[0].sphere;
  out.num_classes = items[0].num_classes;
  std::array<std::size_t, kStages> offset{};
  for (const PreparedCloud& item : items) {
    if (item.num_classes != out.num_classes) throw ClassMismatchError("merge_prepared: class counts differ");
    for (std::size_t s = 0; s < kStages; ++s) {
      const StageState& src = item.stages[s];
      StageState& dst = out.stages[s];
      dst.stage = s;
      append_offset(dst.parent_rows, src.parent_rows, s > 0 ? offset[s - 1] : offset[0]);
      append_offset(dst.cloud_rows, src.cloud_rows, offset[0]);
      append(dst.positions, src.positions);
      append(dst.colors, src.colors);
      append_table(dst.knn_k1, src.knn_k1, offset[s]);
      append_table(dst.knn_k2, src.knn_k2, offset[s]);
      append_table(dst.knn_eig, src.knn_eig, offset[s]);
      append(dst.eigen, src.eigen);
      append(dst.density_k1.ratio, src.density_k1.ratio);
      append(dst.density_k1.degenerate, src.density_k1.degenerate);
      append(dst.density_k2.ratio, src.density_k2.ratio);
      append(dst.density_k2.degenerate, src.density_k2.degenerate);
      for (std::size_t b = 0; b < 2; ++b) {
        const BranchGeometry& g = src.branches[b];
        BranchGeometry& d = dst.branches[b];
        if (d.table.empty()) {
          d.k_euclid = g.k_euclid;
          d.k_eig = g.k_eig;
          d.polar_channels = g.polar_channels;
          d.context_channels = g.context_channels;
        } else if (d.k_euclid != g.k_euclid || d.k_eig != g.k_eig || d.polar_channels != g.polar_channels ||
                   d.context_channels != g.context_channels) {
          throw ShapeError("merge_prepared: branch layouts differ");
        }
        append_offset(d.table, g.table, offset[s]);
        append(d.polar, g.polar);
        append(d.context, g.context);
      }
      dst.label_distribution.rows += src.label_distribution.rows;
      dst.label_distribution.classes = src.label_distribution.classes;
      append(dst.label_distribution.data, src.label_distribution.data);
      append(dst.hard_labels, src.hard_labels);
      append(dst.boundary, src.boundary);
      if (s + 1 < kStages) {
        if (dst.up_indices.empty()) dst.up_k = src.up_k;
        if (src.up_k != dst.up_k) throw ShapeError("merge_prepared: interpolation widths differ");
        append_offset(dst.up_indices, src.up_indices, offset[s + 1]);
        append(dst.up_weights, src.up_weights);
      }
    }
    for (std::size_t s = 0; s < kStages; ++s) offset[s] += item.stages[s].size();
  }
  return out;
}

// --- GeoSegNet -----------------------------------------------------------------------

GeoSegNet::GeoSegNet(const NetworkConfig& cfg, ParameterStore& store) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t polar = polar_channel_count(cfg_);
  const std::size_t context = context_channel_count(cfg_);
  for (std::size_t s = 0; s < kStages; ++s)
    for (std::size_t b = 0; b < 2; ++b)
      encoder_[s][b] = GeometryBranch(store, "enc" + std::to_string(s) + ".k" + std::to_string(b + 1),
                                      stage_input_width(s), polar, context, cfg_.widths[s], cfg_.use_residual, rng);
  const ad::DenseOptions unit{.bias = true, .normalize = true, .activate = true};
  for (std::size_t s = kStages; s-- > 0;) {
    const std::size_t in = s + 1 == kStages ? cfg_.widths[s] : cfg_.widths[s + 1] + cfg_.widths[s];
    decoder_[s] = ad::DenseLayer(store, "dec" + std::to_string(s), in, cfg_.widths[s], unit, rng);
    heads_[s] = ad::DenseLayer(store, "head" + std::to_string(s), cfg_.widths[s],
                               static_cast<std::size_t>(cfg_.num_classes), {.bias = true}, rng);
  }
  const std::size_t hidden = std::max<std::size_t>(cfg_.widths[0] / 2, 2);
  final_hidden_ = ad::DenseLayer(store, "final.hidden", cfg_.widths[0], hidden, unit, rng);
  final_out_ = ad::DenseLayer(store, "final.out", hidden, static_cast<std::size_t>(cfg_.num_classes), {.bias = true}, rng);
}

std::size_t GeoSegNet::stage_input_width(std::size_t s) const {
  return (s > 0 ? cfg_.widths[s - 1] : 0) + (cfg_.use_eigen ? 3 : 0);
}

Value GeoSegNet::encode_stage(std::size_t s, const PreparedCloud& cloud, const Value& input, ParameterStore& store,
                              Mode mode) const {
  const StageState& st = cloud.stages[s];
  if (branch_mask_ == 0 || branch_mask_ == 1)
    return encoder_[s][branch_mask_].forward(store, input, st.branches[branch_mask_], mode);
  return encoder_[s][0].forward(store, input, st.branches[0], mode) +
         encoder_[s][1].forward(store, input, st.branches[1], mode);
}

NetworkOutput GeoSegNet::forward(const PreparedCloud& cloud, ParameterStore& store, Mode mode) const {
  if (cloud.num_classes != cfg_.num_classes)
    throw ClassMismatchError("prepared cloud has " + std::to_string(cloud.num_classes) + " classes, network expects " +
                             std::to_string(cfg_.num_classes));
  NetworkOutput out;
  Value previous;
  for (std::size_t s = 0; s < kStages; ++s) {
    const StageState& st = cloud.stages[s];
    std::vector<Value> parts;
    if (s > 0) parts.push_back(ad::gather_rows(previous, st.parent_rows, {st.size()}));
    if (cfg_.use_eigen) {
      std::vector<double> eig(st.size() * 3);
      for (std::size_t i = 0; i < st.size(); ++i) std::copy(st.eigen[i].begin(), st.eigen[i].end(), eig.begin() + static_cast<std::ptrdiff_t>(3 * i));
      parts.push_back(Value::constant({st.size(), 3}, std::move(eig)));
    }
    Value input;
    if (parts.size() == 1) input = parts[0];
    else if (parts.size() > 1) input = ad::concat(parts, 1);
    previous = encode_stage(s, cloud, input, store, mode);
    out.encoder_features[s] = previous;
  }

  Value decoded;
  for (std::size_t s = kStages; s-- > 0;) {
    Value in = out.encoder_features[s];
    if (s + 1 < kStages) {
      const StageState& st = cloud.stages[s];
      const InterpolationWeights w{st.up_k, st.up_indices, st.up_weights};
      in = ad::concat({nn_interpolate_up(decoded, w), out.encoder_features[s]}, 1);
    }
    decoded = decoder_[s].forward(store, in, mode);
    out.decoder_features[s] = decoded;
    out.stage_logits[s] = heads_[s].forward(store, decoded, mode);
  }
  out.final_logits = final_out_.forward(store, final_hidden_.forward(store, decoded, mode), mode);
  return out;
}

}  // namespace geoseg
