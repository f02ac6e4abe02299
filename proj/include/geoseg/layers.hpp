#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "geoseg/autodiff.hpp"

namespace geoseg::ad {

enum class Mode { Train, Eval };

/// Update weight of the running normalization statistics per training forward pass.
inline constexpr double kNormMomentum = 0.1;

/// Named tensors owned by a model: trainable parameters plus non-trainable
/// buffers such as running normalization statistics.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Value value;
    bool trainable = true;
  };

  std::size_t add(std::string name, Shape shape, std::vector<double> data, bool trainable = true);
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Value& value(std::size_t i) { return entries_.at(i).value; }
  const Value& value(std::size_t i) const { return entries_.at(i).value; }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  std::size_t size() const noexcept { return entries_.size(); }

  /// Number of trainable scalars.
  std::size_t parameter_count() const;
  void zero_grads();

  /// Deep copy with fresh leaf nodes, so graphs built on the copy are independent.
  ParameterStore clone() const;
  /// Adds `other`'s gradients into this store's gradients (same layout required).
  void accumulate_grads(const ParameterStore& other);
  /// Copies every tensor value from `other` (same layout required).
  void copy_values(const ParameterStore& other);

  /// Checkpoint layout: one version byte, a text header (`meta key value`
  /// and `tensor name trainable rank dims... offset` lines, closed by `end`),
  /// then little-endian float64 data; offsets count doubles from the data start.
  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta = {}) const;
  static ParameterStore load(const std::filesystem::path& path, std::map<std::string, std::string>* meta = nullptr);

  static constexpr unsigned char kCheckpointVersion = 1;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
};

struct DenseOptions {
  bool bias = true;
  bool normalize = false;
  bool activate = false;
  double slope = 0.01;
};

/// x W + b, optionally followed by channel normalization and a leaky rectifier.
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
             DenseOptions options, std::mt19937_64& rng);

  Value forward(ParameterStore& store, const Value& x, Mode mode) const;

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  std::size_t parameter_count() const noexcept;

 private:
  std::size_t in_ = 0, out_ = 0;
  DenseOptions options_;
  std::size_t weight_ = 0, bias_ = 0, gamma_ = 0, beta_ = 0, running_mean_ = 0, running_var_ = 0;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer over every trainable entry of a store.
class Adam {
 public:
  Adam(const ParameterStore& store, AdamOptions options = {});
  void step(ParameterStore& store);
  std::size_t steps() const noexcept { return t_; }
  AdamOptions& options() noexcept { return options_; }

 private:
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace geoseg::ad
