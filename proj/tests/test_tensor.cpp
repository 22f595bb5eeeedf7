#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ptal/gradcheck.hpp"
#include "ptal/tensor.hpp"

using namespace ptal;

TEST_CASE("softmax of a constant row is uniform", "[tensor]") {
  Tensor x = Tensor::from({3}, {0.0f, 0.0f, 0.0f});
  Tensor s = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(s.at(i) == Catch::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("cosine similarity of a vector with itself is 1", "[tensor]") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor v = Tensor::randn({1, 8}, rng);
    Tensor c = cosine_pairs(v, v);
    CHECK(c.at(0) == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("top-k mean of column [1,2,3,4] with k=2 is 3.5", "[tensor]") {
  Tensor s = Tensor::from({4, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor p = topk_mean_cols(s, 2);
  CHECK(p.at(0) == Catch::Approx(3.5));
}

TEST_CASE("backward of sum(x*x) gives 2x", "[tensor]") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  GradientTape tape;
  Tensor loss = sum(mul(x, x));
  GradMap grads = tape.backward(loss);
  Tensor g = grads.grad_for(x);
  CHECK(g.at(0) == Catch::Approx(2.0));
  CHECK(g.at(1) == Catch::Approx(4.0));
}

TEST_CASE("leaf not participating in the loss has zero gradient", "[tensor]") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  Tensor w = Tensor::from({2}, {3.0f, 4.0f}, true);
  GradientTape tape;
  Tensor loss = sum(mul(x, x));
  GradMap grads = tape.backward(loss);
  Tensor gw = grads.grad_for(w);
  CHECK(gw.at(0) == 0.0f);
  CHECK(gw.at(1) == 0.0f);
}

TEST_CASE("gradients accumulate additively when a leaf is reused", "[tensor]") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  GradientTape tape;
  Tensor loss = add(sum(x), sum(mul(x, x)));  // d/dx = 1 + 2x
  GradMap grads = tape.backward(loss);
  Tensor g = grads.grad_for(x);
  CHECK(g.at(0) == Catch::Approx(3.0));
  CHECK(g.at(1) == Catch::Approx(5.0));
}

TEST_CASE("backward rejects non-scalar losses", "[tensor]") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  GradientTape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("ops reject shape mismatches", "[tensor]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("non-finite outputs are rejected", "[tensor]") {
  Tensor z = Tensor::from({1}, {0.0f});
  CHECK_THROWS_AS(log(z), std::runtime_error);
  CHECK_THROWS_AS(divide(Tensor::scalar(1.0f), Tensor::scalar(0.0f)), std::runtime_error);
}

TEST_CASE("composite conv->relu->topk->CE matches finite differences", "[tensor]") {
  Rng rng(42);
  const int t_len = 6, cin = 3, cout = 4;
  Tensor w = Tensor::randn({cout, cin, 3}, rng, 0.5f);
  Tensor b = Tensor::randn({cout}, rng, 0.1f);
  std::vector<float> target = {0.1f, 0.2f, 0.3f, 0.4f};

  auto f = [&](const Tensor& x) {
    Tensor h = relu(conv1d(x, w, b));
    Tensor pooled = topk_mean_cols(h, 2);
    return cross_entropy(target, pooled);
  };
  Tensor x = Tensor::randn({t_len, cin}, rng);
  CHECK(grad_check(f, x, 1e-3) < 1e-3);
}

TEST_CASE("grad_check on f=sum is exact to 1e-8", "[tensor]") {
  Rng rng(7);
  Tensor x = Tensor::randn({3, 3}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-3) < 1e-8);
}

TEST_CASE("matmul and matmul_nt agree with finite differences", "[tensor]") {
  Rng rng(3);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  Tensor bt = Tensor::randn({2, 4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul(t, b), matmul(t, b))); }, a) <
        1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(matmul_nt(a, t))); }, bt) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(matmul(a, t))); }, b) < 1e-3);
}

TEST_CASE("softmax/log_softmax/sigmoid/exp/log/sqrt pass finite differences", "[tensor]") {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 3}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(square(softmax(t, 1))); }, x) < 1e-3);
  CHECK(grad_check([](const Tensor& t) { return sum(square(log_softmax(t, 1))); }, x) < 1e-3);
  CHECK(grad_check([](const Tensor& t) { return sum(square(softmax(t, 0))); }, x) < 1e-3);
  CHECK(grad_check([](const Tensor& t) { return sum(sigmoid(t)); }, x) < 1e-3);
  CHECK(grad_check([](const Tensor& t) { return sum(ptal::exp(mul_scalar(t, 0.3))); }, x) < 1e-3);
  Tensor pos = add_scalar(square(x), 0.5);
  CHECK(grad_check([](const Tensor& t) { return sum(ptal::log(t)); }, pos) < 1e-3);
  CHECK(grad_check([](const Tensor& t) { return sum(ptal::sqrt(t)); }, pos) < 1e-3);
}

TEST_CASE("structural ops pass finite differences", "[tensor]") {
  Rng rng(9);
  Tensor x = Tensor::randn({4, 3}, rng);
  Tensor y = Tensor::randn({4, 2}, rng);
  Tensor a = Tensor::randn({4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(concat_cols(t, y))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(concat_rows(t, x))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(slice_cols(t, 1, 3))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(gather_rows(t, {2, 0, 2}))); }, x) <
        1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(repeat_rows(t, 3))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(group_mean_rows(repeat_rows(t, 2), 2))); },
                   x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(scale_rows(x, t))); }, a) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(scale_rows(t, a))); }, x) < 1e-3);
  Tensor v = Tensor::randn({3}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(add_rowvec(x, t))); }, v) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(add_rowvec(t, v))); }, x) < 1e-3);
  Tensor s = Tensor::from({1}, {1.7f});
  CHECK(grad_check([&](const Tensor& t) { return sum(square(divide_by_scalar(x, t))); }, s) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(divide_by_scalar(t, s))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(reshape(t, {3, 4}))); }, x) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(clamp_min(t, 0.2)); }, x) < 1e-2);
}

TEST_CASE("cosine ops pass finite differences", "[tensor]") {
  Rng rng(13);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({3, 4}, rng);
  Tensor m = Tensor::randn({2, 4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(cosine_pairs(t, b))); }, a) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(cosine_pairs(a, t))); }, b) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(cosine_matrix(t, m))); }, a) < 1e-3);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(cosine_matrix(a, t))); }, m) < 1e-3);
}

TEST_CASE("backward is deterministic", "[tensor]") {
  Rng rng(21);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0f, true);
  Tensor w = Tensor::randn({3, 4, 3}, rng, 0.5f, true);
  auto run = [&]() {
    GradientTape tape;
    Tensor h = relu(conv1d(x, w));
    Tensor loss = mean(square(softmax(h, 1)));
    GradMap grads = tape.backward(loss);
    return std::make_pair(grads.grad_for(x), grads.grad_for(w));
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(gx1.vals() == gx2.vals());
  CHECK(gw1.vals() == gw2.vals());
}

TEST_CASE("gradient of a*f + b*g is linear in the pieces", "[tensor]") {
  Rng rng(31);
  Tensor x = Tensor::randn({4}, rng, 1.0f, true);
  const double a = 0.7, b = -1.3;
  auto grad_of = [&](const std::function<Tensor(const Tensor&)>& fn) {
    GradientTape tape;
    GradMap grads = tape.backward(fn(x));
    return grads.grad_for(x);
  };
  Tensor gf = grad_of([](const Tensor& t) { return sum(mul(t, t)); });
  Tensor gg = grad_of([](const Tensor& t) { return sum(sigmoid(t)); });
  Tensor gc = grad_of([&](const Tensor& t) {
    return add(mul_scalar(sum(mul(t, t)), a), mul_scalar(sum(sigmoid(t)), b));
  });
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(gc.at(static_cast<int>(i)) ==
          Catch::Approx(a * gf.at(static_cast<int>(i)) + b * gg.at(static_cast<int>(i)))
              .margin(1e-5));
}

TEST_CASE("video prediction style pipeline is permutation invariant", "[tensor]") {
  Rng rng(17);
  Tensor s = Tensor::randn({6, 3}, rng);
  Tensor p1 = softmax(topk_mean_cols(s, 2));
  std::vector<float> perm(s.vals());
  // rotate rows by two
  std::rotate(perm.begin(), perm.begin() + 6, perm.end());
  Tensor p2 = softmax(topk_mean_cols(Tensor::from({6, 3}, perm), 2));
  for (int i = 0; i < 3; ++i) CHECK(p1.at(i) == Catch::Approx(p2.at(i)).margin(1e-6));
}
