#include "geoseg/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "geoseg/errors.hpp"
#include "geoseg/kvconfig.hpp"

namespace geoseg {

void LabeledCloud::validate() const {
  if (positions.empty()) throw Error("cloud is empty");
  if (colors.size() != positions.size() || labels.size() != positions.size())
    throw Error("cloud fields have different lengths");
  if (num_classes < 1) throw Error("cloud needs at least one class");
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw Error("label " + std::to_string(labels[i]) + " out of range at row " +
                  std::to_string(i));
    for (int c = 0; c < 3; ++c) {
      if (!std::isfinite(positions[i][c])) throw Error("non-finite position at row " + std::to_string(i));
      if (!(colors[i][c] >= 0.0 && colors[i][c] <= 1.0))
        throw Error("color out of [0,1] at row " + std::to_string(i));
    }
  }
}

LabeledCloud LabeledCloud::select(std::span<const std::uint32_t> rows) const {
  LabeledCloud out;
  out.num_classes = num_classes;
  out.positions.reserve(rows.size());
  out.colors.reserve(rows.size());
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    out.positions.push_back(positions.at(r));
    out.colors.push_back(colors.at(r));
    out.labels.push_back(labels.at(r));
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

LabeledCloud parse_cloud(const std::string& text, std::optional<int> num_classes) {
  LabeledCloud cloud;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  int max_label = -1;
  bool byte_colors = false;
  std::vector<std::string> tok;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    tok.clear();
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty() || tok.front().front() == '#') continue;
    // Prediction files carry an extra column; it is ignored on load.
    if (tok.size() != 7 && tok.size() != 8)
      throw ParseError("expected 7 fields `x y z r g b label`, got " + std::to_string(tok.size()),
                       line_no);
    Point3 p{}, c{};
    for (int i = 0; i < 3; ++i) p[i] = kv::parse_double(tok[i], line_no);
    for (int i = 0; i < 3; ++i) c[i] = kv::parse_double(tok[3 + i], line_no);
    const double lab = kv::parse_double(tok[6], line_no);
    if (lab < 0 || lab != std::floor(lab)) throw ParseError("label must be a non-negative integer", line_no);
    for (int i = 0; i < 3; ++i) {
      if (!std::isfinite(p[i])) throw ParseError("non-finite coordinate", line_no);
      if (c[i] < 0 || c[i] > 255) throw ParseError("color outside [0,255]", line_no);
      byte_colors = byte_colors || c[i] > 1.0;
    }
    cloud.positions.push_back(p);
    cloud.colors.push_back(c);
    cloud.labels.push_back(static_cast<int>(lab));
    max_label = std::max(max_label, static_cast<int>(lab));
  }
  if (cloud.positions.empty()) throw ParseError("no points in input", 0);
  if (byte_colors)
    for (auto& c : cloud.colors)
      for (auto& v : c) v /= 255.0;
  cloud.num_classes = num_classes.value_or(max_label + 1);
  if (max_label >= cloud.num_classes)
    throw ClassMismatchError("label " + std::to_string(max_label) + " exceeds class count " +
                             std::to_string(cloud.num_classes));
  return cloud;
}

LabeledCloud load_cloud(const std::filesystem::path& path, std::optional<int> num_classes) {
  return parse_cloud(read_text_file(path), num_classes);
}

void save_cloud(const LabeledCloud& cloud, const std::filesystem::path& path, std::span<const int> extra) {
  if (!extra.empty() && extra.size() != cloud.size())
    throw Error("extra column has " + std::to_string(extra.size()) + " entries, cloud has " +
                std::to_string(cloud.size()));
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::setprecision(9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    const auto& c = cloud.colors[i];
    out << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << c[0] << ' ' << c[1] << ' ' << c[2] << ' '
        << cloud.labels[i];
    if (!extra.empty()) out << ' ' << extra[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void save_labels(const LabeledCloud& cloud, std::span<const int> predicted,
                 const std::filesystem::path& path) {
  if (predicted.size() != cloud.size())
    throw Error("prediction count " + std::to_string(predicted.size()) + " != cloud size " +
                std::to_string(cloud.size()));
  save_cloud(cloud, path, predicted);
}

// --- scene generation -------------------------------------------------------

void SceneSpec::validate() const {
  for (double e : extent)
    if (!(e > 0)) throw ConfigError("scene extent must be positive");
  if (!(density > 0)) throw ConfigError("scene density must be positive");
  if (num_classes < 1) throw ConfigError("scene needs at least one class");
  if (color_noise < 0 || jitter < 0) throw ConfigError("noise levels must be non-negative");
  auto check = [&](int c, const char* what) {
    if (c >= num_classes) throw ConfigError(std::string(what) + " class exceeds class count");
  };
  check(floor_class, "floor");
  check(wall_class, "wall");
  check(ceiling_class, "ceiling");
  for (const auto& o : objects) {
    if (o.class_id < 0 || o.class_id >= num_classes)
      throw ConfigError("object class out of range");
    for (int a = 0; a < 3; ++a)
      if (!(o.max[a] > o.min[a])) throw ConfigError("object box must have positive size");
  }
}

namespace {

// Axis-aligned rectangle on the plane `axis == offset`.
struct Face {
  int axis;
  double offset;
  Point3 lo, hi;
  int class_id;
  Point3 color;
  std::size_t order;  // 0 for room surfaces, 1 + object index for objects
};

constexpr double kSurfaceTol = 1e-9;

bool strictly_inside(const Point3& p, const SceneObject& o) {
  for (int a = 0; a < 3; ++a)
    if (!(p[a] > o.min[a] + kSurfaceTol && p[a] < o.max[a] - kSurfaceTol)) return false;
  return true;
}

bool inside_closed(const Point3& p, const SceneObject& o) {
  for (int a = 0; a < 3; ++a)
    if (p[a] < o.min[a] - kSurfaceTol || p[a] > o.max[a] + kSurfaceTol) return false;
  return true;
}

std::vector<Face> collect_faces(const SceneSpec& s) {
  std::vector<Face> faces;
  const auto& e = s.extent;
  if (s.floor_class >= 0) faces.push_back({2, 0.0, {0, 0, 0}, {e[0], e[1], 0}, s.floor_class, s.floor_color, 0});
  if (s.ceiling_class >= 0)
    faces.push_back({2, e[2], {0, 0, e[2]}, {e[0], e[1], e[2]}, s.ceiling_class, s.ceiling_color, 0});
  if (s.wall_class >= 0) {
    faces.push_back({0, 0.0, {0, 0, 0}, {0, e[1], e[2]}, s.wall_class, s.wall_color, 0});
    faces.push_back({0, e[0], {e[0], 0, 0}, {e[0], e[1], e[2]}, s.wall_class, s.wall_color, 0});
    faces.push_back({1, 0.0, {0, 0, 0}, {e[0], 0, e[2]}, s.wall_class, s.wall_color, 0});
    faces.push_back({1, e[1], {0, e[1], 0}, {e[0], e[1], e[2]}, s.wall_class, s.wall_color, 0});
  }
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    for (int axis = 0; axis < 3; ++axis) {
      for (int side = 0; side < 2; ++side) {
        const double off = side ? o.max[axis] : o.min[axis];
        if (axis == 2 && side == 0 && s.floor_class >= 0 && off <= kSurfaceTol) continue;
        Point3 lo = o.min, hi = o.max;
        lo[axis] = hi[axis] = off;
        faces.push_back({axis, off, lo, hi, o.class_id, o.color, i + 1});
      }
    }
  }
  return faces;
}

}  // namespace

LabeledCloud generate_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  LabeledCloud cloud;
  cloud.num_classes = spec.num_classes;
  for (const Face& f : collect_faces(spec)) {
    double area = 1.0;
    for (int a = 0; a < 3; ++a)
      if (a != f.axis) area *= f.hi[a] - f.lo[a];
    const auto count = static_cast<std::size_t>(std::llround(area * spec.density));
    for (std::size_t n = 0; n < count; ++n) {
      Point3 p{};
      for (int a = 0; a < 3; ++a)
        p[a] = a == f.axis ? f.offset : f.lo[a] + (f.hi[a] - f.lo[a]) * unit(rng);
      Point3 color{};
      for (int a = 0; a < 3; ++a) color[a] = std::clamp(f.color[a] + spec.color_noise * gauss(rng), 0.0, 1.0);
      Point3 jitter{};
      if (spec.jitter > 0)
        for (auto& j : jitter) j = spec.jitter * gauss(rng);

      int label = f.class_id;
      bool dropped = false;
      // Objects listed later take precedence over surfaces generated before them.
      for (std::size_t j = f.order; j < spec.objects.size(); ++j) {
        const auto& o = spec.objects[j];
        if (strictly_inside(p, o)) {
          dropped = true;
          break;
        }
        if (inside_closed(p, o)) label = o.class_id;
      }
      if (dropped) continue;
      for (int a = 0; a < 3; ++a) p[a] += jitter[a];
      cloud.positions.push_back(p);
      cloud.colors.push_back(color);
      cloud.labels.push_back(label);
    }
  }
  if (cloud.positions.empty()) throw Error("scene spec produced no points");
  return cloud;
}

SceneSpec parse_scene_spec(const std::string& text) {
  SceneSpec spec;
  for (const auto& section : kv::parse(text)) {
    if (section.name.empty()) {
      for (const auto& e : section.entries) {
        if (e.key == "extent") spec.extent = kv::to_point(e);
        else if (e.key == "classes") spec.num_classes = static_cast<int>(kv::to_int(e));
        else if (e.key == "floor_class") spec.floor_class = static_cast<int>(kv::to_int(e));
        else if (e.key == "wall_class") spec.wall_class = static_cast<int>(kv::to_int(e));
        else if (e.key == "ceiling_class") spec.ceiling_class = static_cast<int>(kv::to_int(e));
        else if (e.key == "floor_color") spec.floor_color = kv::to_point(e);
        else if (e.key == "wall_color") spec.wall_color = kv::to_point(e);
        else if (e.key == "ceiling_color") spec.ceiling_color = kv::to_point(e);
        else if (e.key == "density") spec.density = kv::to_double(e);
        else if (e.key == "color_noise") spec.color_noise = kv::to_double(e);
        else if (e.key == "jitter") spec.jitter = kv::to_double(e);
        else if (e.key == "seed") spec.seed = static_cast<std::uint64_t>(kv::to_int(e));
        else throw ConfigError("line " + std::to_string(e.line) + ": unknown scene key '" + e.key + "'");
      }
    } else if (section.name == "object") {
      SceneObject obj;
      bool has_min = false, has_max = false;
      for (const auto& e : section.entries) {
        if (e.key == "class") obj.class_id = static_cast<int>(kv::to_int(e));
        else if (e.key == "min") obj.min = kv::to_point(e), has_min = true;
        else if (e.key == "max") obj.max = kv::to_point(e), has_max = true;
        else if (e.key == "color") obj.color = kv::to_point(e);
        else throw ConfigError("line " + std::to_string(e.line) + ": unknown object key '" + e.key + "'");
      }
      if (!has_min || !has_max)
        throw ConfigError("line " + std::to_string(section.line) + ": object needs min and max");
      spec.objects.push_back(obj);
    } else {
      throw ConfigError("line " + std::to_string(section.line) + ": unknown section '" +
                        section.name + "'");
    }
  }
  spec.validate();
  return spec;
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
  return parse_scene_spec(read_text_file(path));
}

ColumnSample sample_column(const LabeledCloud& cloud, std::size_t n, double section,
                           std::uint64_t seed) {
  if (cloud.size() == 0) throw Error("cannot sample a column from an empty cloud");
  std::mt19937_64 rng(seed);
  const auto center_row = std::uniform_int_distribution<std::size_t>(0, cloud.size() - 1)(rng);
  return sample_column_at(cloud, n, section, center_row, rng());
}

ColumnSample sample_column_at(const LabeledCloud& cloud, std::size_t n, double section,
                              std::size_t center_row, std::uint64_t seed) {
  if (center_row >= cloud.size()) throw Error("column center row out of range");
  if (n == 0) throw Error("column sample size must be at least 1");
  if (!(section > 0)) throw Error("column section must be positive");
  std::mt19937_64 rng(seed);
  const Point3 center = cloud.positions[center_row];
  const double half = section / 2.0;

  std::vector<std::uint32_t> pool{static_cast<std::uint32_t>(center_row)};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    if (i != center_row && std::abs(p[0] - center[0]) <= half && std::abs(p[1] - center[1]) <= half)
      pool.push_back(static_cast<std::uint32_t>(i));
  }

  ColumnSample out;
  out.center = center;
  if (pool.size() >= n) {
    for (std::size_t i = 1; i < n; ++i) {
      const auto j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    out.source_rows = std::move(pool);
  } else {
    out.with_replacement = true;
    out.source_rows = pool;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    while (out.source_rows.size() < n) out.source_rows.push_back(pool[pick(rng)]);
    std::shuffle(out.source_rows.begin(), out.source_rows.end(), rng);
  }
  out.cloud = cloud.select(out.source_rows);
  return out;
}

}  // namespace geoseg
