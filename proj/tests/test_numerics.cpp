#include <cmath>

#include "dck/optim.hpp"
#include "dck/tensor.hpp"
#include "doctest.h"

using namespace dck;

TEST_SUITE("numerics") {

TEST_CASE("tensor shape/data consistency is enforced") {
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1.0, 2.0}), Error);
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.at(1, 0) == 3.0);
}

TEST_CASE("masked_softmax uniform over equal logits") {
  Tensor x = Tensor::from_data({3}, {0, 0, 0});
  Tensor m = Tensor::from_data({3}, {1, 1, 1});
  Tensor y = masked_softmax(x, m, 0);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("masked_softmax closed-form two-way split") {
  // exp(2)/(exp(1)+exp(2)) = e/(1+e), frozen from the closed form
  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor m = Tensor::from_data({3}, {1, 1, 0});
  Tensor y = masked_softmax(x, m, 0);
  CHECK(y.at(0) == doctest::Approx(0.2689414213699951).epsilon(1e-10));
  CHECK(y.at(1) == doctest::Approx(0.7310585786300049).epsilon(1e-10));
  CHECK(y.at(2) == 0.0);
}

TEST_CASE("masked_softmax empty support") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor m = Tensor::from_data({3}, {0, 0, 0});
  CHECK_THROWS_AS(masked_softmax(x, m, 0, /*strict=*/true), Error);
  Tensor y = masked_softmax(x, m, 0, /*strict=*/false);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("masked_softmax rows sum to one with zeros at masked slots") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 1 + static_cast<int>(rng.next_below(5));
    const int n = 2 + static_cast<int>(rng.next_below(6));
    std::vector<double> logits(static_cast<size_t>(m) * n), mask(static_cast<size_t>(m) * n);
    bool any = false;
    for (size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-4, 4);
    for (int r = 0; r < m; ++r) {
      int support = 0;
      for (int c = 0; c < n; ++c) {
        mask[static_cast<size_t>(r) * n + c] = rng.next_below(3) > 0 ? 1.0 : 0.0;
        support += mask[static_cast<size_t>(r) * n + c] != 0.0;
      }
      if (support == 0) mask[static_cast<size_t>(r) * n] = 1.0;
      any = true;
    }
    REQUIRE(any);
    Tensor y = masked_softmax(Tensor::from_data({m, n}, logits), Tensor::from_data({m, n}, mask), 1);
    for (int r = 0; r < m; ++r) {
      double sum = 0;
      for (int c = 0; c < n; ++c) {
        const double v = y.at(r, c);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (mask[static_cast<size_t>(r) * n + c] == 0.0) CHECK(v == 0.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("masked_softmax preserves order of unmasked logits") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + static_cast<int>(rng.next_below(5));
    std::vector<double> logits(static_cast<size_t>(n)), mask(static_cast<size_t>(n), 1.0);
    for (auto& v : logits) v = rng.uniform(-3, 3);
    mask[rng.next_below(static_cast<uint64_t>(n))] = 0.0;
    Tensor y = masked_softmax(Tensor::from_data({n}, logits), Tensor::from_data({n}, mask), 0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (mask[static_cast<size_t>(i)] == 0.0 || mask[static_cast<size_t>(j)] == 0.0) continue;
        if (logits[static_cast<size_t>(i)] < logits[static_cast<size_t>(j)])
          CHECK(y.at(i) < y.at(j));
      }
  }
}

TEST_CASE("layer_norm constant row maps to bias") {
  Tensor x = Tensor::from_data({3}, {5, 5, 5});
  Tensor g = Tensor::constant({3}, 1.0);
  Tensor b = Tensor::constant({3}, 0.0);
  Tensor y = layer_norm(x, g, b, 1e-6);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("layer_norm two-point row") {
  // mean 2, population std 1
  Tensor x = Tensor::from_data({2}, {1, 3});
  Tensor y = layer_norm(x, Tensor::constant({2}, 1.0), Tensor::constant({2}, 0.0), 1e-12);
  CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm affine collapse") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, -4, 0, 2});
  Tensor y = layer_norm(x, Tensor::constant({3}, 0.0), Tensor::constant({3}, 7.0), 1e-6);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(y.at(i, j) == 7.0);
}

TEST_CASE("layer_norm normalizes rows") {
  Rng rng(5);
  std::vector<double> data(12);
  for (auto& v : data) v = rng.uniform(-2, 2);
  Tensor y = layer_norm(Tensor::from_data({3, 4}, data), Tensor::constant({4}, 1.0),
                        Tensor::constant({4}, 0.0), 1e-10);
  for (int i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (int j = 0; j < 4; ++j) mean += y.at(i, j);
    mean /= 4;
    for (int j = 0; j < 4; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 4;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("adam zero gradient is the identity from fresh state") {
  ParameterStore store;
  store.create("w", {3}, {1.0, -2.0, 0.5});
  std::map<std::string, std::vector<double>> grads{{"w", {0, 0, 0}}};
  store.adam_step(grads, AdamHyper{});
  Tensor w = store.get("w");
  CHECK(w.at(0) == 1.0);
  CHECK(w.at(1) == -2.0);
  CHECK(w.at(2) == 0.5);
  CHECK(store.step_count("w") == 1);
}

TEST_CASE("adam first step moves by -lr * sign(g)") {
  ParameterStore store;
  store.create("w", {1}, {2.0});
  AdamHyper hyper;
  hyper.learning_rate = 0.01;
  hyper.epsilon = 1e-12;  // negligible next to |g|
  store.adam_step({{"w", {0.37}}}, hyper);
  CHECK(store.get("w").at(0) == doctest::Approx(2.0 - 0.01).epsilon(1e-9));
  ParameterStore store2;
  store2.create("w", {1}, {2.0});
  store2.adam_step({{"w", {-5.0}}}, hyper);
  CHECK(store2.get("w").at(0) == doctest::Approx(2.0 + 0.01).epsilon(1e-9));
}

TEST_CASE("adam matches a hand-unrolled scalar recurrence") {
  ParameterStore store;
  store.create("w", {1}, {1.0});
  AdamHyper h;
  h.learning_rate = 0.1;
  const double g = 0.8;
  store.adam_step({{"w", {g}}}, h);
  store.adam_step({{"w", {g}}}, h);

  double w = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    m = h.beta1 * m + (1 - h.beta1) * g;
    v = h.beta2 * v + (1 - h.beta2) * g * g;
    const double mhat = m / (1 - std::pow(h.beta1, t));
    const double vhat = v / (1 - std::pow(h.beta2, t));
    w -= h.learning_rate * mhat / (std::sqrt(vhat) + h.epsilon);
  }
  CHECK(store.get("w").at(0) == doctest::Approx(w).epsilon(1e-12));
}

TEST_CASE("adam rejects missing gradient keys") {
  ParameterStore store;
  store.create("a", {1}, {0.0});
  store.create("b", {1}, {0.0});
  std::map<std::string, std::vector<double>> grads{{"a", {0.1}}};
  CHECK_THROWS_AS(store.adam_step(grads, AdamHyper{}), Error);
}

TEST_CASE("adam hyperparameter validation") {
  AdamHyper h;
  h.learning_rate = 0.0;
  CHECK_THROWS_AS(h.validate(), Error);
  h = AdamHyper{};
  h.beta1 = 1.0;
  CHECK_THROWS_AS(h.validate(), Error);
}

TEST_CASE("gradient_check on a quadratic") {
  ParameterStore store;
  store.create("w", {1}, {3.0});
  Tensor w = store.get("w");
  auto f = [&] { return mul(w, w); };
  CHECK(gradient_check(f, store) < 1e-8);
  GradMap g = backward(f());
  CHECK(g.at(w.node())[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("gradient_check flags a corrupted gradient") {
  // Half the forward value flows through a detached copy, so the analytic
  // gradient is half the true one; the check must report a large error.
  ParameterStore store;
  store.create("w", {1}, {1.3});
  Tensor w = store.get("w");
  auto f = [&] {
    Tensor detached = Tensor::from_data({1}, {w.at(0)});
    return add(mul(w, w), mul(detached, detached));
  };
  CHECK(gradient_check(f, store) > 0.3);
}

TEST_CASE("forward computation is deterministic") {
  Rng rng(9);
  std::vector<double> a(20), b(20);
  for (auto& v : a) v = rng.uniform(-1, 1);
  for (auto& v : b) v = rng.uniform(-1, 1);
  auto run = [&] {
    Tensor x = Tensor::from_data({4, 5}, a);
    Tensor y = Tensor::from_data({5, 4}, b);
    Tensor z = tanh_op(matmul(x, y));
    return masked_softmax(z, Tensor::constant({4, 4}, 1.0), 1);
  };
  Tensor r1 = run();
  Tensor r2 = run();
  for (size_t i = 0; i < r1.data().size(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
}

TEST_CASE("backward accumulates across shared consumers") {
  // y = w*w + 3w -> dy/dw = 2w + 3
  ParameterStore store;
  store.create("w", {1}, {1.7});
  Tensor w = store.get("w");
  Tensor y = add(mul(w, w), scale(w, 3.0));
  GradMap g = backward(y);
  CHECK(g.at(w.node())[0] == doctest::Approx(2 * 1.7 + 3).epsilon(1e-12));
}

TEST_CASE("log_sum_exp matches direct evaluation and shifts exactly") {
  Tensor x = Tensor::from_data({3}, {0.25, -1.5, 2.0});
  double direct = std::log(std::exp(0.25) + std::exp(-1.5) + std::exp(2.0));
  CHECK(log_sum_exp(x).at(0) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("no_grad evaluation records no graph") {
  ParameterStore store;
  store.create("w", {2}, {1.0, 2.0});
  Tensor w = store.get("w");
  NoGradGuard guard;
  Tensor y = mul(w, w);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

}  // TEST_SUITE
