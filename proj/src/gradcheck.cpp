#include "geoseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "geoseg/errors.hpp"
#include "geoseg/layers.hpp"
#include "geoseg/network.hpp"
#include "geoseg/training.hpp"

namespace geoseg {

using ad::Value;

GradCheckResult check_gradients(const std::string& name, std::vector<Value> inputs,
                                const std::function<Value()>& loss, const GradCheckOptions& opts) {
  for (const auto& in : inputs)
    if (!in.defined() || !in.requires_grad() || !in.is_leaf())
      throw Error("gradcheck '" + name + "': inputs must be trainable leaves");
  for (auto& in : inputs) in.zero_grad();
  // Evaluates the loss and the branch signature of its non-smooth ops.
  auto evaluate = [&loss]() {
    ad::BranchRecorder recorder;
    Value v = loss();
    return std::pair{v, recorder.signature()};
  };
  const auto [base, base_branches] = evaluate();
  const double center = base.item();
  ad::backward(base);

  GradCheckResult r;
  r.name = name;
  std::mt19937_64 rng(opts.seed);
  for (auto& in : inputs) {
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> entries(in.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opts.max_entries_per_input && entries.size() > opts.max_entries_per_input) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opts.max_entries_per_input);
    }
    auto data = in.mutable_data();
    for (std::size_t i : entries) {
      const double saved = data[i];
      // Loss at x + offset, and whether it lies on the same smooth piece as x.
      auto at = [&](double offset) {
        data[i] = saved + offset;
        const auto [v, branches] = evaluate();
        data[i] = saved;
        return std::pair{v.item(), branches == base_branches};
      };
      const double h = opts.eps;
      const auto [up, up_smooth] = at(h);
      const auto [down, down_smooth] = at(-h);
      const auto [up2, up2_smooth] = at(h / 2);
      const auto [down2, down2_smooth] = at(-h / 2);
      // Central differences at eps and eps / 2 combined to cancel the eps^2
      // truncation term. They are only meaningful when no non-smooth op
      // switched branch inside [x - eps, x + eps]; when one side stays on the
      // base piece, a third-order one-sided stencil over that side is used.
      double numeric = 0;
      if (up_smooth && down_smooth && up2_smooth && down2_smooth) {
        const double wide = (up - down) / (2.0 * h);
        const double narrow = (up2 - down2) / h;
        numeric = (4.0 * narrow - wide) / 3.0;
      } else {
        const bool right = up_smooth && up2_smooth;
        const bool left = down_smooth && down2_smooth;
        if (right == left) {  // kinks on both sides
          ++r.skipped;
          continue;
        }
        const double dir = right ? 1.0 : -1.0;
        const auto [f1, f1_smooth] = at(dir * h / 3);
        const auto [f2, f2_smooth] = at(dir * 2 * h / 3);
        if (!f1_smooth || !f2_smooth) {
          ++r.skipped;
          continue;
        }
        const double f3 = right ? up : down;
        numeric = dir * (-11.0 * center + 18.0 * f1 - 9.0 * f2 + 2.0 * f3) / (2.0 * h);
        ++r.one_sided;
      }
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel_err = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, rel_err);
      ++r.entries;
    }
  }
  return r;
}

namespace {

class Suite {
 public:
  Suite(std::uint64_t seed, const GradCheckOptions& opts) : rng_(seed), opts_(opts) {}

  Value param(ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> d(ad::numel(shape));
    for (auto& v : d) v = u(rng_);
    return Value::parameter(std::move(shape), std::move(d));
  }

  /// Values bounded away from zero, random sign.
  Value away_from_zero(ad::Shape shape) {
    Value v = param(std::move(shape), 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (auto& x : v.mutable_data())
      if (flip(rng_)) x = -x;
    return v;
  }

  /// sum(out * R) with a fixed random R, so every output entry gets its own weight.
  std::function<Value(const Value&)> probe(const ad::Shape& shape) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> w(ad::numel(shape));
    for (auto& v : w) v = u(rng_);
    const Value r = Value::constant(shape, std::move(w));
    return [r](const Value& out) { return ad::sum_all(ad::mul(out, r)); };
  }

  void run(const std::string& name, std::vector<Value> inputs, const std::function<Value()>& f,
           std::size_t max_entries = 0) {
    GradCheckOptions o = opts_;
    o.seed = rng_();
    if (max_entries) o.max_entries_per_input = max_entries;
    results_.push_back(check_gradients(name, std::move(inputs), f, o));
  }

  /// Check of a function of the inputs through a random linear probe.
  void run_probed(const std::string& name, std::vector<Value> inputs, const std::function<Value()>& op,
                  std::size_t max_entries = 0) {
    const auto p = probe(op().shape());
    run(name, std::move(inputs), [&op, p] { return p(op()); }, max_entries);
  }

  static std::vector<Value> trainables(const ad::ParameterStore& store) {
    std::vector<Value> out;
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store.entry(i).trainable) out.push_back(store.value(i));
    return out;
  }

  std::mt19937_64& rng() { return rng_; }
  std::vector<GradCheckResult> take() { return std::move(results_); }

 private:
  std::mt19937_64 rng_;
  GradCheckOptions opts_;
  std::vector<GradCheckResult> results_;
};

LabeledCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  LabeledCloud c;
  c.num_classes = 2;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng);
    const int label = x + 0.3 * y > 0.6 ? 1 : 0;
    c.positions.push_back({x, y, label ? 0.3 * u(rng) : 0.02 * u(rng)});
    c.colors.push_back({u(rng), u(rng), label ? 0.8 : 0.2});
    c.labels.push_back(label);
  }
  return c;
}

void elementwise(Suite& s) {
  using namespace ad;
  {
    Value a = s.param({2, 3, 4}), b = s.param({3, 1});
    s.run_probed("add", {a, b}, [=] { return add(a, b); });
    s.run_probed("sub", {a, b}, [=] { return sub(a, b); });
    s.run_probed("mul", {a, b}, [=] { return mul(a, b); });
  }
  {
    Value a = s.param({3, 4});
    s.run_probed("neg", {a}, [=] { return neg(a); });
    s.run_probed("scale", {a}, [=] { return scale(a, -1.7); });
    s.run_probed("add_scalar", {a}, [=] { return add_scalar(a, 0.3); });
    s.run_probed("square", {a}, [=] { return square(a); });
    s.run_probed("exp", {a}, [=] { return exp(a); });
  }
  {
    Value a = s.param({3, 4}, 0.5, 2.0);
    s.run_probed("log", {a}, [=] { return log(a); });
  }
  {
    Value a = s.away_from_zero({4, 5});
    s.run_probed("leaky_relu", {a}, [=] { return leaky_relu(a, 0.01); });
  }
}

void structural(Suite& s) {
  using namespace ad;
  {
    Value x = s.param({2, 3, 4}), w = s.param({4, 5});
    s.run_probed("matmul", {x, w}, [=] { return matmul(x, w); });
  }
  {
    Value a = s.param({2, 3, 2}), b = s.param({2, 3, 4});
    s.run_probed("concat", {a, b}, [=] { return concat({a, b}, 2); });
    Value c = s.param({3, 4}), d = s.param({1, 4});
    s.run_probed("concat_rows", {c, d}, [=] { return concat({c, d}, 0); });
  }
  {
    Value a = s.param({2, 6});
    s.run_probed("reshape", {a}, [=] { return reshape(a, {3, 2, 2}); });
  }
  {
    Value x = s.param({5, 3});
    const std::vector<std::uint32_t> idx{0, 4, 4, 2, 1, 0, 3, 4};
    s.run_probed("gather_rows", {x}, [=] { return gather_rows(x, idx, {4, 2}); });
  }
}

void reductions(Suite& s) {
  using namespace ad;
  Value a = s.param({3, 4, 5});
  s.run_probed("reduce_sum", {a}, [=] { return reduce_sum(a, 1); });
  s.run_probed("reduce_mean", {a}, [=] { return reduce_mean(a, 2, true); });
  s.run_probed("reduce_max", {a}, [=] { return reduce_max(a, 1); });
  s.run_probed("sum_all", {a}, [=] { return sum_all(a); });
  s.run_probed("mean_all", {a}, [=] { return mean_all(a); });
  s.run_probed("norm", {a}, [=] { return norm(a, 2); });
  s.run_probed("softmax", {a}, [=] { return softmax(a, 1); });
  std::vector<char> mask(3 * 4 * 5, 1);
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 0;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 5; ++i) mask[(o * 4 + 1) * 5 + i] = 1;  // each slice keeps an entry
  s.run_probed("logsumexp", {a}, [=] { return logsumexp(a, 1, mask); });
}

void losses_and_norm(Suite& s) {
  using namespace ad;
  {
    Value x = s.param({4, 6, 3}, -2.0, 2.0), g = s.param({3}, 0.5, 1.5), b = s.param({3});
    auto rm = std::make_shared<std::vector<double>>(3, 0.0);
    auto rv = std::make_shared<std::vector<double>>(3, 1.0);
    s.run_probed("normalize_channels", {x, g, b},
                 [=] { return normalize_channels(x, g, b, *rm, *rv, true); });
    auto em = std::make_shared<std::vector<double>>(std::vector<double>{0.1, -0.2, 0.3});
    auto ev = std::make_shared<std::vector<double>>(std::vector<double>{0.5, 1.5, 2.0});
    s.run_probed("normalize_channels_eval", {x, g, b},
                 [=] { return normalize_channels(x, g, b, *em, *ev, false); });
  }
  {
    Value logits = s.param({6, 4}, -2.0, 2.0);
    const std::vector<int> labels{0, 3, 1, 1, 2, 0};
    const std::vector<char> ignore{0, 0, 1, 0, 0, 0};
    s.run("cross_entropy", {logits}, [=] { return cross_entropy(logits, labels, ignore); });
  }
}

void blocks(Suite& s) {
  using namespace ad;
  std::mt19937_64 init(s.rng()());
  {
    ParameterStore store;
    const DenseLayer layer(store, "dense", 5, 4, {.bias = true, .normalize = true, .activate = true}, init);
    Value x = s.param({6, 5});
    auto inputs = Suite::trainables(store);
    inputs.push_back(x);
    s.run_probed("dense_layer", inputs, [=, &store] { return layer.forward(store, x, Mode::Train); });
  }
  {
    ParameterStore store;
    const ResidualBlock block(store, "res", 5, 6, true, init);
    Value x = s.param({4, 3, 5});
    auto inputs = Suite::trainables(store);
    inputs.push_back(x);
    s.run_probed("residual_block", inputs, [=, &store] { return block.forward(store, x, Mode::Train); });
  }
  {
    ParameterStore store;
    const AttentivePool pool(store, "pool", 6, init);
    Value x = s.param({5, 4, 6});
    auto inputs = Suite::trainables(store);
    inputs.push_back(x);
    s.run_probed("attentive_pool", inputs, [=, &store] { return pool.forward(store, x, Mode::Train); });
  }
}

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.num_classes = 2;
  cfg.ratios = {1.0, 0.5, 0.5, 0.5, 0.5};
  cfg.widths = {4, 6, 6, 8, 8};
  cfg.k1 = 6;
  cfg.k2 = 10;
  cfg.k_eig = 4;
  cfg.propagate_k = 4;
  cfg.boundary_radius = 0.15;
  return cfg;
}

void geometry(Suite& s) {
  using namespace ad;
  std::mt19937_64 init(s.rng()());
  const LabeledCloud cloud = random_cloud(64, s.rng());
  const NetworkConfig cfg = small_config();
  const PreparedCloud prepared = encode(cloud, cfg);
  {
    ParameterStore store;
    const auto& geo = prepared.stages[0].branches[1];
    const GeometryBranch branch(store, "rgm", 3, geo.polar_channels, geo.context_channels, 5, true, init);
    Value features = s.param({64, 3}, 0.0, 1.0);
    auto inputs = Suite::trainables(store);
    inputs.push_back(features);
    s.run_probed("residual_geometry_module", inputs,
                 [=, &store, &geo] { return branch.forward(store, features, geo, Mode::Train); }, 4);
  }
  {
    const StageState& fine = prepared.stages[0];
    const StageState& coarse = prepared.stages[1];
    Value x = s.param({coarse.size(), 3});
    s.run_probed("interpolate_up", {x},
                 [=, &fine, &coarse] { return nn_interpolate_up(x, coarse.positions, fine.positions); });
  }
  {
    Value features = s.param({64, 5});
    const StageState& st = prepared.stages[0];
    s.run("cbl_loss", {features}, [=, &st] { return cbl_loss(features, st.knn_k1, st.hard_labels, st.boundary, 0.7).loss; });
  }
  {
    // Two supervised stages of three points each.
    Value final_logits = s.param({3, 2}), l0 = s.param({3, 2}), l1 = s.param({3, 2});
    Value f0 = s.param({3, 4}), f1 = s.param({3, 4});
    NeighborTable t;
    t.rows = 3;
    t.k = 2;
    t.indices = {1, 2, 0, 2, 0, 1};
    t.distances.assign(6, 1.0);
    const std::vector<int> labels{0, 0, 1};
    const BoundaryMask boundary{1, 1, 1};
    s.run("multi_stage_loss", {final_logits, l0, l1, f0, f1}, [=] {
      const std::vector<StageSupervision> stages{{l0, f0, labels, boundary, t}, {l1, f1, labels, boundary, t}};
      return multi_stage_loss(final_logits, labels, stages, {.lambda1 = 0.1, .lambda2 = 0.2, .tau = 1.0}).total;
    });
  }
}

void end_to_end(Suite& s) {
  using namespace ad;
  const LabeledCloud cloud = random_cloud(64, s.rng());
  NetworkConfig cfg = small_config();
  cfg.seed = s.rng()();
  const PreparedCloud prepared = encode(cloud, cfg);
  ParameterStore store;
  const GeoSegNet net(cfg, store);
  s.run("network_64_points", Suite::trainables(store), [&] {
    const NetworkOutput out = net.forward(prepared, store, Mode::Train);
    return multi_stage_loss(out, prepared, {.lambda1 = 0.1, .lambda2 = 0.2, .tau = 1.0}).total;
  }, 3);
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& opts) {
  Suite s(seed, opts);
  elementwise(s);
  structural(s);
  reductions(s);
  losses_and_norm(s);
  blocks(s);
  geometry(s);
  end_to_end(s);
  return s.take();
}

}  // namespace geoseg
