#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "geoseg/autodiff.hpp"
#include "geoseg/errors.hpp"
#include "geoseg/gradcheck.hpp"
#include "geoseg/layers.hpp"

using namespace geoseg;
using namespace geoseg::ad;

namespace {

Value random_param(std::mt19937_64& rng, Shape s) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> d(numel(s));
  for (auto& v : d) v = u(rng);
  return Value::parameter(std::move(s), std::move(d));
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("elementwise ops broadcast trailing axes") {
  const Value a = Value::constant({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Value b = Value::constant({3}, std::vector<double>{10, 20, 30});
  CHECK(vec((a + b).data()) == std::vector<double>{11, 22, 33, 14, 25, 36});
  const Value col = Value::constant({2, 1}, std::vector<double>{2, 3});
  CHECK(vec((a * col).data()) == std::vector<double>{2, 4, 6, 12, 15, 18});
  CHECK(vec(sub(a, b).data())[0] == -9);
  CHECK_THROWS_AS(add(a, Value::constant({2}, 1.0)), ShapeError);
  CHECK(leaky_relu(Value::constant({2}, std::vector<double>{-2, 3}), 0.1).data()[0] == doctest::Approx(-0.2));
}

TEST_CASE("structural ops: matmul, concat, reshape, gather") {
  const Value x = Value::constant({2, 2}, std::vector<double>{1, 2, 3, 4});
  const Value w = Value::constant({2, 3}, std::vector<double>{1, 0, 1, 0, 1, 1});
  CHECK(vec(matmul(x, w).data()) == std::vector<double>{1, 2, 3, 3, 4, 7});
  CHECK(concat({x, x}, 1).shape() == Shape{2, 4});
  CHECK(concat({x, x}, 0).shape() == Shape{4, 2});
  CHECK_THROWS_AS(reshape(x, {3}), ShapeError);
  const std::vector<std::uint32_t> idx{1, 0, 1};
  const Value g = gather_rows(x, idx, {3});
  CHECK(vec(g.data()) == std::vector<double>{3, 4, 1, 2, 3, 4});
}

TEST_CASE("reductions, softmax and masked logsumexp") {
  const Value a = Value::constant({2, 3}, std::vector<double>{1, 5, 3, -1, 0, 2});
  CHECK(vec(reduce_sum(a, 1).data()) == std::vector<double>{9, 1});
  CHECK(vec(reduce_max(a, 0).data()) == std::vector<double>{1, 5, 3});
  CHECK(norm(a, 1).data()[0] == doctest::Approx(std::sqrt(35.0)));
  const Value s = softmax(a, 1);
  CHECK(s.data()[0] + s.data()[1] + s.data()[2] == doctest::Approx(1.0));
  const std::vector<char> mask{1, 0, 1, 0, 1, 1};
  const Value l = logsumexp(a, 1, mask);
  CHECK(l.data()[0] == doctest::Approx(std::log(std::exp(1.0) + std::exp(3.0))));
  CHECK(l.data()[1] == doctest::Approx(std::log(1.0 + std::exp(2.0))));
}

TEST_CASE("cross entropy of uniform logits is ln C") {
  for (int c : {2, 5, 13}) {
    const Value logits = Value::constant({7, static_cast<std::size_t>(c)}, 0.25);
    const std::vector<int> labels(7, c - 1);
    CHECK(std::abs(cross_entropy(logits, labels).item() - std::log(double(c))) < 1e-12);
  }
  const Value logits = Value::constant({2, 2}, std::vector<double>{0, 0, 10, -10});
  const std::vector<int> labels{0, 1};
  const std::vector<char> ignore{0, 1};
  CHECK(cross_entropy(logits, labels, ignore).item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS(cross_entropy(logits, labels, std::vector<char>{1, 1}));
  CHECK_THROWS(cross_entropy(logits, std::vector<int>{0, 2}));
}

TEST_CASE("leaf gradients accumulate until zero_grad") {
  Value x = Value::parameter({2}, {1.0, 2.0});
  backward(sum_all(square(x)));
  CHECK(vec(x.grad()) == std::vector<double>{2, 4});
  backward(sum_all(square(x)));
  CHECK(vec(x.grad()) == std::vector<double>{4, 8});
  x.zero_grad();
  CHECK(vec(x.grad()) == std::vector<double>{0, 0});
  CHECK_THROWS(backward(square(x)));  // not a scalar
}

TEST_CASE("channel normalization in train and eval mode") {
  std::mt19937_64 rng(11);
  const Value x = random_param(rng, {50, 3});
  const Value gamma = Value::constant({3}, 1.0), beta = Value::constant({3}, 0.0);
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  const Value y = normalize_channels(x, gamma, beta, rm, rv, true);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0, xm = 0;
    for (int i = 0; i < 50; ++i) m += y.data()[i * 3 + c] / 50, xm += x.data()[i * 3 + c] / 50;
    for (int i = 0; i < 50; ++i) v += std::pow(y.data()[i * 3 + c] - m, 2) / 50;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(rm[c] == doctest::Approx(0.1 * xm));
  }
  std::vector<double> fm{1, 2, 3}, fv{4, 4, 4};
  const Value e = normalize_channels(x, gamma, beta, fm, fv, false);
  CHECK(e.data()[0] == doctest::Approx((x.data()[0] - 1) / std::sqrt(4 + 1e-5)));
  CHECK(fm == std::vector<double>{1, 2, 3});
}

TEST_CASE("branch recorder separates smooth pieces") {
  auto sig = [](double v) {
    BranchRecorder r;
    leaky_relu(Value::constant({2}, std::vector<double>{v, 1.0}));
    return r.signature();
  };
  CHECK(sig(0.5) == sig(0.7));
  CHECK(sig(0.5) != sig(-0.5));
}

TEST_CASE("gradient check accepts correct and rejects wrong gradients") {
  std::mt19937_64 rng(12);
  Value x = random_param(rng, {3, 4});
  Value w = random_param(rng, {4, 2});
  const auto ok = check_gradients("matmul_softmax", {x, w}, [&] { return sum_all(square(softmax(matmul(x, w), 1))); });
  CHECK(ok.passed());
  CHECK(ok.max_rel_error < 1e-6);
  // Treating one factor of x * x as constant halves the analytic gradient.
  const auto bad = check_gradients("wrong", {x}, [&] {
    const Value frozen = Value::constant(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    return sum_all(mul(x, frozen));
  });
  CHECK_FALSE(bad.passed());
}

TEST_CASE("gradient check handles inputs sitting next to a kink") {
  Value x = Value::parameter({4}, {0.3, -0.2, 5e-5, -5e-5});
  const auto r = check_gradients("leaky", {x}, [&] { return sum_all(leaky_relu(x, 0.1)); });
  CHECK(r.passed());
  CHECK(r.one_sided == 2);
  CHECK(r.entries == 4);
}

TEST_CASE("parameter store clone, save and load") {
  std::mt19937_64 rng(13);
  ParameterStore store;
  DenseLayer layer(store, "fc", 3, 2, {.bias = true, .normalize = true, .activate = true}, rng);
  CHECK(store.parameter_count() == layer.parameter_count());
  ParameterStore copy = store.clone();
  copy.value(0).mutable_data()[0] += 1;
  CHECK(copy.value(0).data()[0] != store.value(0).data()[0]);
  const auto path = std::filesystem::temp_directory_path() / "geoseg_store.ckpt";
  store.save(path, {{"k", "v"}});
  std::map<std::string, std::string> meta;
  const ParameterStore back = ParameterStore::load(path, &meta);
  CHECK(meta.at("k") == "v");
  REQUIRE(back.size() == store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(back.entry(i).name == store.entry(i).name);
    CHECK(vec(back.value(i).data()) == vec(store.value(i).data()));
  }
  std::filesystem::remove(path);
  CHECK_THROWS(ParameterStore::load(path));
  CHECK_THROWS(store.add("fc.weight", {1}, {0.0}));
}

TEST_CASE("first Adam step moves each parameter by about the learning rate") {
  ParameterStore store;
  store.add("w", {3}, {1.0, -1.0, 0.5});
  Adam adam(store, {.learning_rate = 0.01});
  Value w = store.value(0);
  backward(sum_all(mul(w, Value::constant({3}, std::vector<double>{2.0, -3.0, 0.0}))));
  adam.step(store);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(-1.0 + 0.01).epsilon(1e-6));
  CHECK(w.data()[2] == doctest::Approx(0.5));
  CHECK(adam.steps() == 1);
}
