#include "geoseg/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

#include "geoseg/errors.hpp"

namespace geoseg::ad {

namespace {
thread_local BranchRecorder* active_recorder = nullptr;
using MatrixMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace

std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& s) {
  if (s.empty() || s.size() > 3) throw ShapeError("tensors need 1 to 3 axes, got " + to_string(s));
}

std::size_t normalize_axis(std::size_t rank, int axis) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x dim x inner view of a tensor around `axis`.
struct AxisView {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Value make(Shape shape, std::vector<double> data, std::vector<Value> parents, const char* op,
           std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    for (auto& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(bw);
  }
  return Value(std::move(node));
}

// Gradient buffer of a parent, or nullptr when it does not need one.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad.data() : nullptr;
}

struct Broadcast {
  Shape out;
  std::array<std::size_t, 3> dims{}, a_stride{}, b_stride{};
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  const std::size_t rank = std::max(a.size(), b.size());
  std::array<std::size_t, 3> a3{1, 1, 1}, b3{1, 1, 1};
  std::copy(a.begin(), a.end(), a3.begin() + (3 - a.size()));
  std::copy(b.begin(), b.end(), b3.begin() + (3 - b.size()));
  for (int d = 0; d < 3; ++d) {
    if (a3[d] == b3[d] || b3[d] == 1) bc.dims[d] = a3[d];
    else if (a3[d] == 1) bc.dims[d] = b3[d];
    else throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
  }
  auto strides = [&](const std::array<std::size_t, 3>& s3, std::array<std::size_t, 3>& st) {
    std::size_t acc = 1;
    for (int d = 2; d >= 0; --d) {
      st[d] = (s3[d] == 1 && bc.dims[d] != 1) ? 0 : acc;
      acc *= s3[d];
    }
  };
  strides(a3, bc.a_stride);
  strides(b3, bc.b_stride);
  bc.out.assign(bc.dims.begin() + (3 - rank), bc.dims.end());
  bc.same = a == b;
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (std::size_t i = 0; i < bc.dims[0]; ++i)
    for (std::size_t j = 0; j < bc.dims[1]; ++j)
      for (std::size_t k = 0; k < bc.dims[2]; ++k, ++o)
        f(o, i * bc.a_stride[0] + j * bc.a_stride[1] + k * bc.a_stride[2],
          i * bc.b_stride[0] + j * bc.b_stride[1] + k * bc.b_stride[2]);
}

// f(a, b) with partial derivatives fa, fb evaluated at (a, b).
template <class F, class Fa, class Fb>
Value binary(const Value& a, const Value& b, const char* op, F f, Fa fa, Fb fb) {
  const Broadcast bc = broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(numel(bc.out));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(ad[ia], bd[ib]); });
  return make(bc.out, std::move(out), {a, b}, op, [bc, fa, fb](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    const auto& g = self.grad;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * fa(av[ia], bv[ib]);
      if (gb) gb[ib] += g[o] * fb(av[ia], bv[ib]);
    });
  });
}

// f(x) with derivative df(x, y) where y = f(x).
template <class F, class Df>
Value unary(const Value& a, const char* op, F f, Df df) {
  std::vector<double> out(a.size());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return make(a.shape(), std::move(out), {a}, op, [df](Node& self) {
    const auto& x = self.parents[0]->data;
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

}  // namespace

// --- Value ----------------------------------------------------------------

Value Value::constant(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (numel(shape) != data.size())
    throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return Value(std::move(node));
}

Value Value::constant(Shape shape, double fill) {
  const auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, fill));
}

Value Value::parameter(Shape shape, std::vector<double> data) {
  Value v = constant(std::move(shape), std::move(data));
  v.node_->requires_grad = true;
  v.node_->grad.assign(v.node_->data.size(), 0.0);
  return v;
}

std::size_t Value::dim(int axis) const { return shape()[normalize_axis(rank(), axis)]; }

double Value::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

void Value::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

BranchRecorder::BranchRecorder() : previous_(active_recorder) { active_recorder = this; }
BranchRecorder::~BranchRecorder() { active_recorder = previous_; }

void BranchRecorder::record(std::uint64_t branch) noexcept {
  std::uint64_t z = signature_ ^ (branch + 0x9e3779b97f4a7c15ull + (signature_ << 6) + (signature_ >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  signature_ = z ^ (z >> 31);
}

void backward(const Value& loss) {
  if (!loss.defined()) throw Error("backward on an undefined value");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// --- elementwise ------------------------------------------------------------

Value add(const Value& a, const Value& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value scale(const Value& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Value add_scalar(const Value& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Value square(const Value& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Value exp(const Value& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value log(const Value& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value leaky_relu(const Value& a, double slope) {
  if (active_recorder) {
    // Pack 64 signs per record.
    std::uint64_t bits = 0;
    std::size_t i = 0;
    for (double x : a.data()) {
      bits = (bits << 1) | (x > 0 ? 1u : 0u);
      if (++i % 64 == 0) active_recorder->record(std::exchange(bits, 0));
    }
    active_recorder->record(bits);
  }
  return unary(a, "leaky_relu", [slope](double x) { return x > 0 ? x : slope * x; },
               [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

// --- structural -------------------------------------------------------------

Value matmul(const Value& x, const Value& w) {
  if (w.rank() != 2) throw ShapeError("matmul: weight must be 2-D, got " + to_string(w.shape()));
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  if (x.shape().back() != in)
    throw ShapeError("matmul: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  std::vector<double> y(rows * out);
  ConstMatrixMap xm(x.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
  ConstMatrixMap wm(w.data().data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  MatrixMap(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out)).noalias() = xm * wm;
  return make(std::move(shape), std::move(y), {x, w}, "matmul", [rows, in, out](Node& self) {
    const auto r = static_cast<Eigen::Index>(rows), i = static_cast<Eigen::Index>(in), o = static_cast<Eigen::Index>(out);
    ConstMatrixMap g(self.grad.data(), r, o);
    if (double* gx = grad_of(self, 0)) MatrixMap(gx, r, i).noalias() += g * ConstMatrixMap(self.parents[1]->data.data(), i, o).transpose();
    if (double* gw = grad_of(self, 1)) MatrixMap(gw, i, o).noalias() += ConstMatrixMap(self.parents[0]->data.data(), r, i).transpose() * g;
  });
}

Value concat(std::span<const Value> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t rank = parts[0].rank();
  const std::size_t ax = normalize_axis(rank, axis);
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    for (std::size_t d = 0; d < rank; ++d)
      if (d != ax && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    shape[ax] += p.shape()[ax];
  }
  const AxisView out_view = axis_view(shape, ax);
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> chunk(parts.size()), offset(parts.size());
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    chunk[p] = parts[p].shape()[ax] * out_view.inner;
    offset[p] = off;
    off += chunk[p];
  }
  const std::size_t row = off;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    for (std::size_t o = 0; o < out_view.outer; ++o)
      std::copy_n(src.data() + o * chunk[p], chunk[p], out.data() + o * row + offset[p]);
  }
  std::vector<Value> parents(parts.begin(), parts.end());
  return make(std::move(shape), std::move(out), std::move(parents), "concat",
              [chunk, offset, row, outer = out_view.outer](Node& self) {
                for (std::size_t p = 0; p < chunk.size(); ++p) {
                  double* gp = grad_of(self, p);
                  if (!gp) continue;
                  for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = self.grad.data() + o * row + offset[p];
                    double* dst = gp + o * chunk[p];
                    for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += src[i];
                  }
                }
              });
}

Value concat(std::initializer_list<Value> parts, int axis) {
  return concat(std::span<const Value>(parts.begin(), parts.size()), axis);
}

Value reshape(const Value& a, Shape shape) {
  check_shape(shape);
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  std::vector<double> data(a.data().begin(), a.data().end());
  return make(std::move(shape), std::move(data), {a}, "reshape", [](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Value gather_rows(const Value& x, std::span<const std::uint32_t> indices, Shape index_shape) {
  if (x.rank() > 2) throw ShapeError("gather_rows: source must be 1-D or 2-D, got " + to_string(x.shape()));
  check_shape(index_shape);
  if (numel(index_shape) != indices.size())
    throw ShapeError("gather_rows: index count does not match index shape " + to_string(index_shape));
  const std::size_t rows = x.shape()[0];
  const std::size_t width = x.rank() == 2 ? x.shape()[1] : 1;
  Shape shape = index_shape;
  if (x.rank() == 2) shape.push_back(width);
  check_shape(shape);
  std::vector<double> out(indices.size() * width);
  const auto xd = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " + to_string(x.shape()));
    std::copy_n(xd.data() + indices[i] * width, width, out.data() + i * width);
  }
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return make(std::move(shape), std::move(out), {x}, "gather_rows", [idx = std::move(idx), width](Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = self.grad.data() + i * width;
      double* dst = gx + idx[i] * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
}

// --- reductions ---------------------------------------------------------------

namespace {

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) out[axis] = 1;
  else out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out.empty()) out = {1};
  return out;
}

}  // namespace

Value reduce_sum(const Value& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(a.rank(), axis);
  const AxisView v = axis_view(a.shape(), ax);
  std::vector<double> out(v.outer * v.inner, 0.0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t d = 0; d < v.dim; ++d)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += ad[(o * v.dim + d) * v.inner + i];
  return make(reduced_shape(a.shape(), ax, keepdim), std::move(out), {a}, "reduce_sum", [v](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t d = 0; d < v.dim; ++d)
        for (std::size_t i = 0; i < v.inner; ++i) g[(o * v.dim + d) * v.inner + i] += self.grad[o * v.inner + i];
  });
}

Value reduce_mean(const Value& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(a.rank(), axis);
  return scale(reduce_sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

Value reduce_max(const Value& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(a.rank(), axis);
  const AxisView v = axis_view(a.shape(), ax);
  std::vector<double> out(v.outer * v.inner, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(v.outer * v.inner, 0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t d = 0; d < v.dim; ++d)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t src = (o * v.dim + d) * v.inner + i;
        if (ad[src] > out[o * v.inner + i]) {
          out[o * v.inner + i] = ad[src];
          arg[o * v.inner + i] = src;
        }
      }
  if (active_recorder)
    for (std::size_t i : arg) active_recorder->record(i);
  return make(reduced_shape(a.shape(), ax, keepdim), std::move(out), {a}, "reduce_max",
              [arg = std::move(arg)](Node& self) {
                double* g = grad_of(self, 0);
                for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
              });
}

Value sum_all(const Value& a) {
  const double total = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make({1}, {total}, {a}, "sum_all", [](Node& self) {
    double* g = grad_of(self, 0);
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

Value mean_all(const Value& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Value norm(const Value& a, int axis) {
  const std::size_t ax = normalize_axis(a.rank(), axis);
  const AxisView v = axis_view(a.shape(), ax);
  std::vector<double> out(v.outer * v.inner, 0.0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t d = 0; d < v.dim; ++d)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const double x = ad[(o * v.dim + d) * v.inner + i];
        out[o * v.inner + i] += x * x;
      }
  for (auto& x : out) x = std::sqrt(x);
  if (active_recorder)
    for (double x : out) active_recorder->record(x == 0.0);
  return make(reduced_shape(a.shape(), ax, false), std::move(out), {a}, "norm", [v](Node& self) {
    const auto& x = self.parents[0]->data;
    double* g = grad_of(self, 0);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const double n = self.data[o * v.inner + i];
        if (n == 0.0) continue;
        const double s = self.grad[o * v.inner + i] / n;
        for (std::size_t d = 0; d < v.dim; ++d) {
          const std::size_t src = (o * v.dim + d) * v.inner + i;
          g[src] += s * x[src];
        }
      }
  });
}

Value softmax(const Value& a, int axis) {
  const std::size_t ax = normalize_axis(a.rank(), axis);
  const AxisView v = axis_view(a.shape(), ax);
  std::vector<double> out(a.size());
  const auto ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t d) { return (o * v.dim + d) * v.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t d = 0; d < v.dim; ++d) mx = std::max(mx, ad[at(d)]);
      double total = 0;
      for (std::size_t d = 0; d < v.dim; ++d) total += out[at(d)] = std::exp(ad[at(d)] - mx);
      for (std::size_t d = 0; d < v.dim; ++d) out[at(d)] /= total;
    }
  return make(a.shape(), std::move(out), {a}, "softmax", [v](Node& self) {
    double* g = grad_of(self, 0);
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        auto at = [&](std::size_t d) { return (o * v.dim + d) * v.inner + i; };
        double dot = 0;
        for (std::size_t d = 0; d < v.dim; ++d) dot += gy[at(d)] * y[at(d)];
        for (std::size_t d = 0; d < v.dim; ++d) g[at(d)] += y[at(d)] * (gy[at(d)] - dot);
      }
  });
}

Value logsumexp(const Value& a, int axis, std::span<const char> mask) {
  if (!mask.empty() && mask.size() != a.size())
    throw ShapeError("logsumexp: mask size does not match " + to_string(a.shape()));
  const std::size_t ax = normalize_axis(a.rank(), axis);
  const AxisView v = axis_view(a.shape(), ax);
  std::vector<char> m(mask.begin(), mask.end());
  if (m.empty()) m.assign(a.size(), 1);
  std::vector<double> out(v.outer * v.inner);
  std::vector<double> weights(a.size(), 0.0);  // masked softmax, reused by backward
  const auto ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t d) { return (o * v.dim + d) * v.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t d = 0; d < v.dim; ++d)
        if (m[at(d)]) mx = std::max(mx, ad[at(d)]);
      if (!std::isfinite(mx)) throw Error("logsumexp: a reduced slice has no unmasked finite entry");
      double total = 0;
      for (std::size_t d = 0; d < v.dim; ++d)
        if (m[at(d)]) total += weights[at(d)] = std::exp(ad[at(d)] - mx);
      for (std::size_t d = 0; d < v.dim; ++d) weights[at(d)] /= total;
      out[o * v.inner + i] = mx + std::log(total);
    }
  return make(reduced_shape(a.shape(), ax, false), std::move(out), {a}, "logsumexp",
              [v, w = std::move(weights)](Node& self) {
                double* g = grad_of(self, 0);
                for (std::size_t o = 0; o < v.outer; ++o)
                  for (std::size_t d = 0; d < v.dim; ++d)
                    for (std::size_t i = 0; i < v.inner; ++i) {
                      const std::size_t src = (o * v.dim + d) * v.inner + i;
                      g[src] += self.grad[o * v.inner + i] * w[src];
                    }
              });
}

Value normalize_channels(const Value& x, const Value& gamma, const Value& beta,
                         std::span<double> running_mean, std::span<double> running_var,
                         bool training, double momentum, double eps) {
  const std::size_t ch = x.shape().back();
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch || running_var.size() != ch)
    throw ShapeError("normalize_channels: parameter width does not match input " + to_string(x.shape()));
  const std::size_t rows = x.size() / ch;
  const auto xd = x.data();
  std::vector<double> mean(ch, 0.0), inv_std(ch, 0.0);
  if (training) {
    std::vector<double> var(ch, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < ch; ++c) mean[c] += xd[r * ch + c];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < ch; ++c) {
        const double d = xd[r * ch + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < ch; ++c) {
      var[c] /= static_cast<double>(rows);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
      const double unbiased = rows > 1 ? var[c] * static_cast<double>(rows) / static_cast<double>(rows - 1) : var[c];
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  std::vector<double> xhat(x.size()), y(x.size());
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t i = r * ch + c;
      xhat[i] = (xd[i] - mean[c]) * inv_std[c];
      y[i] = gd[c] * xhat[i] + bd[c];
    }
  return make(x.shape(), std::move(y), {x, gamma, beta}, "normalize_channels",
              [rows, ch, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                double* gx = grad_of(self, 0);
                double* gg = grad_of(self, 1);
                double* gb = grad_of(self, 2);
                const auto& gamma_v = self.parents[1]->data;
                const auto& gy = self.grad;
                std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t c = 0; c < ch; ++c) {
                    sum_g[c] += gy[r * ch + c];
                    sum_gx[c] += gy[r * ch + c] * xhat[r * ch + c];
                  }
                if (gg)
                  for (std::size_t c = 0; c < ch; ++c) gg[c] += sum_gx[c];
                if (gb)
                  for (std::size_t c = 0; c < ch; ++c) gb[c] += sum_g[c];
                if (!gx) return;
                const double n = static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t c = 0; c < ch; ++c) {
                    const std::size_t i = r * ch + c;
                    if (training)
                      gx[i] += gamma_v[c] * inv_std[c] * (gy[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n);
                    else
                      gx[i] += gamma_v[c] * inv_std[c] * gy[i];
                  }
              });
}

Value cross_entropy(const Value& logits, std::span<const int> labels, std::span<const char> ignore) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, C], got " + to_string(logits.shape()));
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + to_string(logits.shape()));
  if (!ignore.empty() && ignore.size() != n) throw ShapeError("cross_entropy: ignore mask length mismatch");
  const auto ld = logits.data();
  std::vector<double> probs(n * c, 0.0);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!ignore.empty() && ignore[r]) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw Error("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " + std::to_string(c) + " classes");
    const double* row = ld.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += probs[r * c + k] = std::exp(row[k] - mx);
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] /= s;
    total += mx + std::log(s) - row[labels[r]];
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every row is ignored");
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<char> ign(ignore.begin(), ignore.end());
  const double inv = 1.0 / static_cast<double>(count);
  return make({1}, {total * inv}, {logits}, "cross_entropy",
              [n, c, inv, probs = std::move(probs), lab = std::move(lab), ign = std::move(ign)](Node& self) {
                double* g = grad_of(self, 0);
                const double s = self.grad[0] * inv;
                for (std::size_t r = 0; r < n; ++r) {
                  if (!ign.empty() && ign[r]) continue;
                  for (std::size_t k = 0; k < c; ++k)
                    g[r * c + k] += s * (probs[r * c + k] - (static_cast<int>(k) == lab[r] ? 1.0 : 0.0));
                }
              });
}

}  // namespace geoseg::ad
