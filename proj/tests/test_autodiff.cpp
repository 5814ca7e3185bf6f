#include <catch2/catch_amalgamated.hpp>

#include "muxformer/grad_check.hpp"
#include "muxformer/ops.hpp"
#include "support.hpp"

using namespace muxformer;

namespace {

// Scalarises a tensor-valued op with fixed random weights so grad_check can
// probe every input coordinate through a non-degenerate output combination.
Tensor weighted_sum(Tape& tape, const Tensor& y, const Tensor& w) {
  return ops::sum_all(&tape, ops::mul(&tape, y, w));
}

}  // namespace

TEST_CASE("backward of sum is all ones") {
  Tape tape;
  Tensor x = Tensor(Shape{3}, {5, -2, 7}).as_param();
  Tensor loss = ops::sum_all(&tape, x);
  GradMap grads = tape.backward(loss);
  Tensor g = tape.grad_of(grads, x);
  CHECK(testutil::bitwise_equal(g, Tensor::ones({3})));
}

TEST_CASE("backward of mean of squares matches the hand derivative") {
  Tape tape;
  Tensor x = Tensor(Shape{3}, {1, 2, 3}).as_param();
  Tensor loss = ops::mean_all(&tape, ops::mul(&tape, x, x));
  GradMap grads = tape.backward(loss);
  Tensor g = tape.grad_of(grads, x);
  Tensor expected(Shape{3}, {2.0f / 3.0f, 4.0f / 3.0f, 2.0f});
  CHECK(testutil::max_abs_diff(g, expected) < 1e-7);
}

TEST_CASE("matmul gradient of sum equals ones times b-transpose") {
  Rng rng(41);
  Tensor a = testutil::rand_tensor(rng, {5, 7});
  Tensor b = testutil::rand_tensor(rng, {7, 3});

  Tape tape;
  Tensor ap = a.as_param();
  Tensor loss = ops::sum_all(&tape, ops::matmul(&tape, ap, b));
  GradMap grads = tape.backward(loss);
  Tensor da = tape.grad_of(grads, ap);

  Tensor expected =
      ops::matmul(nullptr, Tensor::ones({5, 3}), ops::transpose(nullptr, b, 0, 1));
  CHECK(testutil::max_abs_diff(da, expected) < 1e-5);

  double err = grad_check(
      [&](Tape& t, const Tensor& x) { return ops::sum_all(&t, ops::matmul(&t, x, b)); }, a,
      1e-3);
  CHECK(err < 1e-3);
}

TEST_CASE("untouched leaves receive zero gradients") {
  Tape tape;
  Tensor used = Tensor(Shape{2}, {1, 2}).as_param();
  Tensor unused = Tensor(Shape{3}, {1, 2, 3}).as_param();
  tape.watch(unused);
  Tensor loss = ops::sum_all(&tape, used);
  GradMap grads = tape.backward(loss);
  CHECK(testutil::bitwise_equal(tape.grad_of(grads, unused), Tensor::zeros({3})));
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape tape;
  Tensor x = Tensor(Shape{2}, {1, 2}).as_param();
  Tensor y = ops::mul(&tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  Tensor off_tape = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(tape.backward(off_tape), ContractError);
}

TEST_CASE("tape nodes are topologically ordered") {
  Tape tape;
  Rng rng(4);
  Tensor x = testutil::rand_tensor(rng, {3, 4}).as_param();
  Tensor w = testutil::rand_tensor(rng, {4, 4}).as_param();
  Tensor y = ops::matmul(&tape, ops::gelu(&tape, x), w);
  ops::sum_all(&tape, y);
  REQUIRE(tape.size() >= 4);
  for (int i = 0; i < int(tape.size()); ++i)
    for (int in : tape.node(i).inputs) CHECK(in < i);
}

TEST_CASE("backward is bitwise deterministic across runs") {
  Rng rng(51);
  Tensor x = testutil::rand_tensor(rng, {4, 6});
  Tensor w = testutil::rand_tensor(rng, {6, 6});

  auto run = [&]() {
    Tape tape;
    Tensor xp = x.as_param();
    Tensor wp = w.as_param();
    Tensor h = ops::gelu(&tape, ops::matmul(&tape, xp, wp));
    Tensor loss = ops::mean_all(&tape, ops::mul(&tape, h, h));
    GradMap grads = tape.backward(loss);
    return std::pair{tape.grad_of(grads, xp), tape.grad_of(grads, wp)};
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(testutil::bitwise_equal(gx1, gx2));
  CHECK(testutil::bitwise_equal(gw1, gw2));
}

TEST_CASE("grad_check on sum of squares is tight") {
  double err = grad_check(
      [](Tape& t, const Tensor& x) { return ops::sum_all(&t, ops::mul(&t, x, x)); },
      Tensor(Shape{2}, {1, 2}), 1e-3);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check on softmax cross-entropy") {
  Rng rng(61);
  Tensor logits = testutil::rand_tensor(rng, {4, 5}, -2.0f, 2.0f);
  Tensor targets(Shape{4, 5}, [&] {
    std::vector<float> t(20, 0.0f);
    for (int r = 0; r < 4; ++r) t[std::size_t(r * 5 + int(rng.index(5)))] = 1.0f;
    return t;
  }());
  double err = grad_check(
      [&](Tape& t, const Tensor& x) { return ops::softmax_xent(&t, x, targets); }, logits,
      1e-3);
  CHECK(err < 1e-3);
}

TEST_CASE("finite differences validate every primitive") {
  Rng rng(71);
  const double eps = 1e-3, tol = 1e-3;

  SECTION("add, equal shapes") {
    Tensor a = testutil::rand_tensor(rng, {3, 4});
    Tensor b = testutil::rand_tensor(rng, {3, 4});
    Tensor w = testutil::rand_tensor(rng, {3, 4});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::add(&t, p[0], p[1]), w);
        },
        {a, b}, eps);
    CHECK(err < tol);
  }
  SECTION("add, last-axis bias") {
    Tensor a = testutil::rand_tensor(rng, {4, 5});
    Tensor bias = testutil::rand_tensor(rng, {5});
    Tensor w = testutil::rand_tensor(rng, {4, 5});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::add(&t, p[0], p[1]), w);
        },
        {a, bias}, eps);
    CHECK(err < tol);
  }
  SECTION("mul and scale") {
    Tensor a = testutil::rand_tensor(rng, {2, 6});
    Tensor b = testutil::rand_tensor(rng, {2, 6});
    Tensor w = testutil::rand_tensor(rng, {2, 6});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::scale(&t, ops::mul(&t, p[0], p[1]), 1.7f), w);
        },
        {a, b}, eps);
    CHECK(err < tol);
  }
  SECTION("matmul, plain and batched") {
    Tensor a = testutil::rand_tensor(rng, {4, 5});
    Tensor b = testutil::rand_tensor(rng, {5, 3});
    Tensor w = testutil::rand_tensor(rng, {4, 3});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::matmul(&t, p[0], p[1]), w);
        },
        {a, b}, eps);
    CHECK(err < tol);

    Tensor ba = testutil::rand_tensor(rng, {2, 3, 4});
    Tensor bb = testutil::rand_tensor(rng, {2, 4, 2});
    Tensor bw = testutil::rand_tensor(rng, {2, 3, 2});
    err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::matmul(&t, p[0], p[1]), bw);
        },
        {ba, bb}, eps);
    CHECK(err < tol);
  }
  SECTION("transpose and reshape") {
    Tensor x = testutil::rand_tensor(rng, {2, 3, 4});
    Tensor w = testutil::rand_tensor(rng, {4, 3, 2});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::transpose(&t, p[0], 0, 2), w);
        },
        {x}, eps);
    CHECK(err < tol);

    Tensor w2 = testutil::rand_tensor(rng, {24});
    err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::reshape(&t, p[0], {24}), w2);
        },
        {x}, eps);
    CHECK(err < tol);
  }
  SECTION("concat and slice") {
    Tensor a = testutil::rand_tensor(rng, {2, 3});
    Tensor b = testutil::rand_tensor(rng, {2, 2});
    Tensor w = testutil::rand_tensor(rng, {2, 5});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          std::vector<Tensor> parts{p[0], p[1]};
          return weighted_sum(t, ops::concat(&t, std::span<const Tensor>(parts), 1), w);
        },
        {a, b}, eps);
    CHECK(err < tol);

    Tensor w3 = testutil::rand_tensor(rng, {2, 2});
    err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::slice(&t, p[0], 1, 1, 2), w3);
        },
        {a}, eps);
    CHECK(err < tol);
  }
  SECTION("broadcast0") {
    Tensor x = testutil::rand_tensor(rng, {3, 2});
    Tensor w = testutil::rand_tensor(rng, {4, 3, 2});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::broadcast0(&t, p[0], 4), w);
        },
        {x}, eps);
    CHECK(err < tol);
  }
  SECTION("softmax-lastaxis") {
    Tensor x = testutil::rand_tensor(rng, {3, 6}, -2.0f, 2.0f);
    Tensor w = testutil::rand_tensor(rng, {3, 6});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::softmax_last(&t, p[0]), w);
        },
        {x}, eps);
    CHECK(err < tol);
  }
  SECTION("layernorm") {
    Tensor x = testutil::rand_tensor(rng, {4, 8});
    Tensor gamma = testutil::rand_tensor(rng, {8}, 0.5f, 1.5f);
    Tensor beta = testutil::rand_tensor(rng, {8});
    Tensor w = testutil::rand_tensor(rng, {4, 8});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::layernorm(&t, p[0], p[1], p[2]), w);
        },
        {x, gamma, beta}, eps);
    CHECK(err < tol);
  }
  SECTION("gelu") {
    Tensor x = testutil::rand_tensor(rng, {5, 5}, -3.0f, 3.0f);
    Tensor w = testutil::rand_tensor(rng, {5, 5});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::gelu(&t, p[0]), w);
        },
        {x}, eps);
    CHECK(err < tol);
  }
  SECTION("conv1d") {
    Tensor x = testutil::rand_tensor(rng, {2, 6, 2});
    Tensor w = testutil::rand_tensor(rng, {3, 2, 2});
    Tensor bias = testutil::rand_tensor(rng, {3});
    Tensor ww = testutil::rand_tensor(rng, {2, 3, 3});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::conv1d(&t, p[0], p[1], p[2], 2), ww);
        },
        {x, w, bias}, eps);
    CHECK(err < tol);
  }
  SECTION("conv2d") {
    Tensor x = testutil::rand_tensor(rng, {1, 2, 4, 4});
    Tensor w = testutil::rand_tensor(rng, {3, 2, 2, 2});
    Tensor bias = testutil::rand_tensor(rng, {3});
    Tensor ww = testutil::rand_tensor(rng, {1, 3, 2, 2});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::conv2d(&t, p[0], p[1], p[2], 2), ww);
        },
        {x, w, bias}, eps);
    CHECK(err < tol);
  }
  SECTION("embedding-lookup") {
    Tensor table = testutil::rand_tensor(rng, {5, 4});
    ITensor ids(Shape{3}, {4, 0, 2});
    Tensor w = testutil::rand_tensor(rng, {3, 4});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::embedding_lookup(&t, p[0], ids), w);
        },
        {table}, eps);
    CHECK(err < tol);
  }
  SECTION("sum and mean") {
    Tensor x = testutil::rand_tensor(rng, {7});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) { return ops::sum_all(&t, p[0]); }, {x},
        eps);
    CHECK(err < tol);
    err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) { return ops::mean_all(&t, p[0]); }, {x},
        eps);
    CHECK(err < tol);
  }
  SECTION("l2norm-lastaxis") {
    Tensor x = testutil::rand_tensor(rng, {3, 5}, 0.2f, 1.0f);
    Tensor w = testutil::rand_tensor(rng, {3, 5});
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return weighted_sum(t, ops::l2norm_last(&t, p[0]), w);
        },
        {x}, eps);
    CHECK(err < tol);
  }
  SECTION("softmax-xent, both operands") {
    Tensor logits = testutil::rand_tensor(rng, {3, 4}, -2.0f, 2.0f);
    Tensor targets = testutil::rand_tensor(rng, {3, 4}, 0.1f, 0.9f);
    double err = grad_check(
        [&](Tape& t, const std::vector<Tensor>& p) {
          return ops::softmax_xent(&t, p[0], p[1]);
        },
        {logits, targets}, eps);
    CHECK(err < tol);
  }
}
