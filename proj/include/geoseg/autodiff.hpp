#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace geoseg::ad {

/// Up to three axes, typically (points, neighbors, channels).
using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& s);
std::size_t numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaves: allocated with requires_grad; interior nodes: by backward()
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents
  const char* op = "leaf";
  bool requires_grad = false;
};

/// Handle to a node of the dynamically built graph. Copies share the node.
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Value constant(Shape shape, std::vector<double> data);
  static Value constant(Shape shape, double fill);
  static Value parameter(Shape shape, std::vector<double> data);
  static Value scalar(double v) { return constant({1}, std::vector<double>{v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op() const { return node_->op; }
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Populates gradients of every node reachable from `loss` (a single-element
/// Value). Interior gradients are recomputed on each call; leaf gradients
/// accumulate across calls until zero_grad().
void backward(const Value& loss);

/// While alive, non-smooth ops on this thread (leaky ReLU sign, max argument,
/// norm at zero) fold the branch they take into signature(). Two evaluations
/// with equal signatures ran the same smooth piece of the function.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  std::uint64_t signature() const noexcept { return signature_; }
  void record(std::uint64_t branch) noexcept;

 private:
  BranchRecorder* previous_;
  std::uint64_t signature_ = 0x9e3779b97f4a7c15ull;
};

// --- elementwise and broadcasting ops ------------------------------------
// Binary ops broadcast numpy-style (trailing axes aligned, size-1 axes stretch).

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value neg(const Value& a);
Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);
Value square(const Value& a);
Value exp(const Value& a);
Value log(const Value& a);
Value leaky_relu(const Value& a, double slope = 0.01);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }
inline Value operator-(const Value& a) { return neg(a); }

// --- structural ops ------------------------------------------------------

/// x[..., in] times w[in, out] -> [..., out].
Value matmul(const Value& x, const Value& w);
Value concat(std::span<const Value> parts, int axis);
Value concat(std::initializer_list<Value> parts, int axis);
Value reshape(const Value& a, Shape shape);

/// Rows of `x` ([M] or [M, C]) picked by an index array of shape `index_shape`
/// ([N] or [N, K]); result shape is index_shape followed by C.
Value gather_rows(const Value& x, std::span<const std::uint32_t> indices, Shape index_shape);

// --- reductions (the reduced axis is removed unless keepdim) -------------

Value reduce_sum(const Value& a, int axis, bool keepdim = false);
Value reduce_mean(const Value& a, int axis, bool keepdim = false);
Value reduce_max(const Value& a, int axis, bool keepdim = false);
Value sum_all(const Value& a);
Value mean_all(const Value& a);

/// Euclidean norm along `axis`; the gradient at a zero vector is taken as zero.
Value norm(const Value& a, int axis);
Value softmax(const Value& a, int axis);
/// log(sum(exp(a))) along `axis` restricted to entries with mask != 0.
/// Every reduced slice must contain at least one unmasked entry.
Value logsumexp(const Value& a, int axis, std::span<const char> mask = {});

/// Per-channel (last axis) normalization over all other axes followed by
/// gamma * xhat + beta. Training mode uses batch statistics and updates the
/// running estimates in place; eval mode uses the running estimates.
Value normalize_channels(const Value& x, const Value& gamma, const Value& beta,
                         std::span<double> running_mean, std::span<double> running_var,
                         bool training, double momentum = 0.1, double eps = 1e-5);

/// Mean over rows with mask == 0 of -log softmax(logits)[label]. `ignore`
/// may be empty. Throws when every row is ignored or a label is out of range.
Value cross_entropy(const Value& logits, std::span<const int> labels,
                    std::span<const char> ignore = {});

}  // namespace geoseg::ad
