#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace geoseg {

using Point3 = std::array<double, 3>;

/// Points with normalized colors and ground-truth class labels.
struct LabeledCloud {
  std::vector<Point3> positions;
  std::vector<Point3> colors;  // each channel in [0, 1]
  std::vector<int> labels;     // each in [0, num_classes)
  int num_classes = 0;

  std::size_t size() const noexcept { return positions.size(); }

  /// Throws geoseg::Error when the invariants do not hold.
  void validate() const;

  /// Sub-cloud made of the given rows (duplicates allowed).
  LabeledCloud select(std::span<const std::uint32_t> rows) const;
};

struct SceneObject {
  int class_id = 0;
  Point3 min{};
  Point3 max{};
  Point3 color{0.5, 0.5, 0.5};
};

/// Synthetic room description. Surfaces whose class is negative are not generated.
struct SceneSpec {
  Point3 extent{4.0, 4.0, 3.0};
  int num_classes = 2;
  int floor_class = 0;
  int wall_class = -1;
  int ceiling_class = -1;
  Point3 floor_color{0.55, 0.45, 0.35};
  Point3 wall_color{0.85, 0.85, 0.8};
  Point3 ceiling_color{0.95, 0.95, 0.95};
  std::vector<SceneObject> objects;
  double density = 100.0;  // points per square meter
  double color_noise = 0.02;
  double jitter = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses `x y z r g b label` lines. Colors are divided by 255 when any
/// channel in the file exceeds 1. Blank lines and lines starting with `#` are skipped.
LabeledCloud load_cloud(const std::filesystem::path& path,
                        std::optional<int> num_classes = std::nullopt);
LabeledCloud parse_cloud(const std::string& text, std::optional<int> num_classes = std::nullopt);

/// Writes `x y z r g b label` lines, plus one integer column when `extra` is
/// nonempty (one entry per point).
void save_cloud(const LabeledCloud& cloud, const std::filesystem::path& path, std::span<const int> extra = {});

/// Writes `x y z r g b gt pred` lines; load_cloud reads back the gt column.
void save_labels(const LabeledCloud& cloud, std::span<const int> predicted,
                 const std::filesystem::path& path);

/// Deterministic in `spec` (seed included). Floor, walls and ceiling are
/// sampled first, then every object face except a bottom face resting on the
/// floor. A point strictly inside a later object is dropped; a point on the
/// surface of a later object takes that object's class.
LabeledCloud generate_scene(const SceneSpec& spec);

/// Grammar: `key = value` lines, `#` comments, repeated `[object]` sections.
/// Top-level keys: extent, classes, floor_class, wall_class, ceiling_class,
/// floor_color, wall_color, ceiling_color, density, color_noise, jitter, seed.
/// Object keys: class, min, max, color. Vectors are whitespace separated.
SceneSpec parse_scene_spec(const std::string& text);
SceneSpec load_scene_spec(const std::filesystem::path& path);

struct ColumnSample {
  LabeledCloud cloud;
  std::vector<std::uint32_t> source_rows;  // rows of the input cloud, in output order
  Point3 center{};
  bool with_replacement = false;
};

/// Picks a random center point, keeps points whose (x, y) fall in the
/// `section` x `section` square around it, and draws exactly `n` of them.
/// When fewer than `n` are available every point is kept once and the rest
/// are random duplicates.
ColumnSample sample_column(const LabeledCloud& cloud, std::size_t n, double section,
                           std::uint64_t seed);

/// Same with a fixed center row, which is always part of the sample.
ColumnSample sample_column_at(const LabeledCloud& cloud, std::size_t n, double section,
                              std::size_t center_row, std::uint64_t seed);

/// Independent child seed for stream `stream` of `seed` (splitmix64 mixing).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Reads a whole text file; throws IoError when it cannot be opened.
std::string read_text_file(const std::filesystem::path& path);

}  // namespace geoseg
