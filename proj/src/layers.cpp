#include "geoseg/layers.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "geoseg/errors.hpp"

namespace geoseg::ad {

std::size_t ParameterStore::add(std::string name, Shape shape, std::vector<double> data, bool trainable) {
  if (by_name_.contains(name)) throw Error("duplicate parameter name '" + name + "'");
  Value v = trainable ? Value::parameter(std::move(shape), std::move(data))
                      : Value::constant(std::move(shape), std::move(data));
  by_name_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(v), trainable});
  return entries_.size() - 1;
}

std::size_t ParameterStore::index(std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw Error("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

bool ParameterStore::contains(std::string_view name) const { return by_name_.find(name) != by_name_.end(); }

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.value.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& e : entries_)
    if (e.trainable) e.value.zero_grad();
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& e : entries_)
    out.add(e.name, e.value.shape(), std::vector<double>(e.value.data().begin(), e.value.data().end()), e.trainable);
  return out;
}

void ParameterStore::accumulate_grads(const ParameterStore& other) {
  if (other.size() != size()) throw Error("accumulate_grads: store layouts differ");
  for (std::size_t i = 0; i < size(); ++i) {
    if (!entries_[i].trainable) continue;
    auto dst = entries_[i].value.mutable_grad();
    const auto src = other.entries_[i].value.grad();
    if (src.size() != dst.size()) throw Error("accumulate_grads: size mismatch for '" + entries_[i].name + "'");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

void ParameterStore::copy_values(const ParameterStore& other) {
  if (other.size() != size()) throw Error("copy_values: store layouts differ");
  for (std::size_t i = 0; i < size(); ++i) {
    auto dst = entries_[i].value.mutable_data();
    const auto src = other.entries_[i].value.data();
    if (src.size() != dst.size()) throw Error("copy_values: size mismatch for '" + entries_[i].name + "'");
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void ParameterStore::save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian");
  std::ostringstream header;
  header << "GEOSEG-CHECKPOINT\n";
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw Error("checkpoint metadata must be single-line and keys space-free");
    header << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    header << "tensor " << e.name << ' ' << (e.trainable ? 1 : 0) << ' ' << e.value.rank();
    for (auto d : e.value.shape()) header << ' ' << d;
    header << ' ' << offset << '\n';
    offset += e.value.size();
  }
  header << "end\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.put(static_cast<char>(kCheckpointVersion));
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& e : entries_)
    out.write(reinterpret_cast<const char*>(e.value.data().data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  if (!out) throw IoError("checkpoint write failed for '" + path.string() + "'");
}

ParameterStore ParameterStore::load(const std::filesystem::path& path, std::map<std::string, std::string>* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const int version = in.get();
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 0);
  std::string line;
  std::getline(in, line);
  if (line != "GEOSEG-CHECKPOINT") throw ParseError("not a checkpoint file", 1);

  struct Pending {
    std::string name;
    bool trainable;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Pending> tensors;
  std::size_t line_no = 1;
  bool closed = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "end") {
      closed = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      if (meta) (*meta)[key] = value;
    } else if (kind == "tensor") {
      Pending p;
      int trainable = 0;
      std::size_t rank = 0;
      ls >> p.name >> trainable >> rank;
      p.trainable = trainable != 0;
      p.shape.resize(rank);
      for (auto& d : p.shape) ls >> d;
      ls >> p.offset;
      if (!ls || rank == 0 || rank > 3) throw ParseError("bad tensor header", line_no);
      tensors.push_back(std::move(p));
    } else {
      throw ParseError("unknown header line '" + kind + "'", line_no);
    }
  }
  if (!closed) throw ParseError("checkpoint header not terminated", line_no);

  std::vector<double> blob;
  {
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() % sizeof(double) != 0) throw ParseError("checkpoint data is truncated", 0);
    blob.resize(raw.size() / sizeof(double));
    std::memcpy(blob.data(), raw.data(), raw.size());
  }
  ParameterStore store;
  for (auto& t : tensors) {
    const std::size_t n = numel(t.shape);
    if (t.offset + n > blob.size()) throw ParseError("tensor '" + t.name + "' extends past end of data", 0);
    store.add(t.name, t.shape,
              std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(t.offset),
                                  blob.begin() + static_cast<std::ptrdiff_t>(t.offset + n)),
              t.trainable);
  }
  return store;
}

// --- DenseLayer ---------------------------------------------------------------

DenseLayer::DenseLayer(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                       DenseOptions options, std::mt19937_64& rng)
    : in_(in), out_(out), options_(options) {
  if (in == 0 || out == 0) throw Error("dense layer '" + name + "' needs nonzero widths");
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> w(in * out);
  for (auto& x : w) x = dist(rng);
  weight_ = store.add(name + ".weight", {in, out}, std::move(w));
  if (options_.bias) bias_ = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  if (options_.normalize) {
    gamma_ = store.add(name + ".norm.gamma", {out}, std::vector<double>(out, 1.0));
    beta_ = store.add(name + ".norm.beta", {out}, std::vector<double>(out, 0.0));
    running_mean_ = store.add(name + ".norm.running_mean", {out}, std::vector<double>(out, 0.0), false);
    running_var_ = store.add(name + ".norm.running_var", {out}, std::vector<double>(out, 1.0), false);
  }
}

std::size_t DenseLayer::parameter_count() const noexcept {
  return in_ * out_ + (options_.bias ? out_ : 0) + (options_.normalize ? 2 * out_ : 0);
}

Value DenseLayer::forward(ParameterStore& store, const Value& x, Mode mode) const {
  if (x.shape().back() != in_)
    throw ShapeError("dense layer expects " + std::to_string(in_) + " channels, got " + to_string(x.shape()));
  Value y = matmul(x, store.value(weight_));
  if (options_.bias) y = add(y, store.value(bias_));
  if (options_.normalize)
    y = normalize_channels(y, store.value(gamma_), store.value(beta_), store.value(running_mean_).mutable_data(),
                           store.value(running_var_).mutable_data(), mode == Mode::Train, kNormMomentum);
  if (options_.activate) y = leaky_relu(y, options_.slope);
  return y;
}

// --- Adam -----------------------------------------------------------------------

Adam::Adam(const ParameterStore& store, AdamOptions options) : options_(options) {
  m_.resize(store.size());
  v_.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.entry(i).trainable) {
      m_[i].assign(store.value(i).size(), 0.0);
      v_[i].assign(store.value(i).size(), 0.0);
    }
}

void Adam::step(ParameterStore& store) {
  if (store.size() != m_.size()) throw Error("optimizer was built for a different store");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.entry(i).trainable) continue;
    auto p = store.value(i).mutable_data();
    const auto g = store.value(i).grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = b1 * m_[i][j] + (1 - b1) * g[j];
      v_[i][j] = b2 * v_[i][j] + (1 - b2) * g[j] * g[j];
      const double mhat = m_[i][j] / c1;
      const double vhat = v_[i][j] / c2;
      p[j] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace geoseg::ad
