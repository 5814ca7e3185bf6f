#include <catch2/catch_amalgamated.hpp>

#include "muxformer/ops.hpp"
#include "support.hpp"

using namespace muxformer;

TEST_CASE("tensor shape and data must agree") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<float>(5, 0.0f)), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{0}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, -1}, std::vector<float>(2, 0.0f)), DimensionError);
  Tensor t(Shape{2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.at({1, 0}) == 3.0f);
  CHECK(Tensor::scalar(7.0f).item() == 7.0f);
}

TEST_CASE("matmul identity and hand cases") {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor m(Shape{2, 2}, {3, 4, 5, 6});
  Tensor out = ops::matmul(nullptr, eye, m);
  CHECK(testutil::bitwise_equal(out, m));

  Tensor a(Shape{1, 2}, {1, 2});
  Tensor b(Shape{2, 1}, {3, 4});
  CHECK(ops::matmul(nullptr, a, b).item() == 11.0f);
}

TEST_CASE("matmul reports both shapes on mismatch") {
  Tensor a(Shape{2, 3}, std::vector<float>(6, 1.0f));
  Tensor b(Shape{4, 2}, std::vector<float>(8, 1.0f));
  try {
    ops::matmul(nullptr, a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("batched matmul matches per-slice products") {
  Rng rng(7);
  Tensor a = testutil::rand_tensor(rng, {3, 2, 4});
  Tensor b = testutil::rand_tensor(rng, {3, 4, 5});
  Tensor out = ops::matmul(nullptr, a, b);
  REQUIRE(out.shape() == Shape{3, 2, 5});
  for (Index i = 0; i < 3; ++i) {
    Tensor ai = ops::slice(nullptr, a, 0, i, 1);
    Tensor bi = ops::slice(nullptr, b, 0, i, 1);
    Tensor ci = ops::matmul(nullptr, ops::reshape(nullptr, ai, {2, 4}),
                            ops::reshape(nullptr, bi, {4, 5}));
    Tensor oi = ops::reshape(nullptr, ops::slice(nullptr, out, 0, i, 1), {2, 5});
    CHECK(testutil::max_abs_diff(ci, oi) == 0.0);
  }
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x(Shape{4}, {0, 0, 0, 0});
  Tensor y = ops::softmax_last(nullptr, x);
  for (Index j = 0; j < 4; ++j) CHECK(y.values()[std::size_t(j)] == 0.25f);
}

TEST_CASE("softmax is stable under large offsets") {
  Tensor x(Shape{2, 3}, {1000, 1001, 1002, -1000, -1000, -1000});
  Tensor y = ops::softmax_last(nullptr, x);
  CHECK(y.finite());
  CHECK(y.at({1, 0}) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("conv1d halves a 196-token sequence with kernel=stride=2") {
  Rng rng(3);
  Index d = 8;
  Tensor x = testutil::rand_tensor(rng, {2, 196, d});
  Tensor w = testutil::rand_tensor(rng, {d, 2, d});
  Tensor out = ops::conv1d(nullptr, x, w, Tensor::zeros({d}), 2);
  CHECK(out.shape() == Shape{2, 98, d});
}

TEST_CASE("conv1d rejects a length not divisible by the stride") {
  Tensor x = Tensor::zeros({1, 7, 4});
  Tensor w = Tensor::zeros({4, 2, 4});
  CHECK_THROWS_AS(ops::conv1d(nullptr, x, w, Tensor::zeros({4}), 2), DimensionError);
}

TEST_CASE("conv1d matches a hand-rolled sliding window") {
  Rng rng(11);
  Index b = 2, L = 6, cin = 3, cout = 4, k = 2, s = 2;
  Tensor x = testutil::rand_tensor(rng, {b, L, cin});
  Tensor w = testutil::rand_tensor(rng, {cout, k, cin});
  Tensor bias = testutil::rand_tensor(rng, {cout});
  Tensor out = ops::conv1d(nullptr, x, w, bias, s);
  Index lout = (L - k) / s + 1;
  for (Index img = 0; img < b; ++img)
    for (Index l = 0; l < lout; ++l)
      for (Index f = 0; f < cout; ++f) {
        double acc = bias.values()[std::size_t(f)];
        for (Index t = 0; t < k; ++t)
          for (Index c = 0; c < cin; ++c)
            acc += double(x.at({img, l * s + t, c})) * w.at({f, t, c});
        CHECK(out.at({img, l, f}) == Catch::Approx(acc).margin(1e-5));
      }
}

TEST_CASE("conv2d matches a hand-rolled window") {
  Rng rng(13);
  Index b = 2, c = 2, h = 6, wd = 4, f = 3, kh = 2, kw = 2, s = 2;
  Tensor x = testutil::rand_tensor(rng, {b, c, h, wd});
  Tensor w = testutil::rand_tensor(rng, {f, c, kh, kw});
  Tensor bias = testutil::rand_tensor(rng, {f});
  Tensor out = ops::conv2d(nullptr, x, w, bias, s);
  REQUIRE(out.shape() == Shape{b, f, 3, 2});
  for (Index img = 0; img < b; ++img)
    for (Index fi = 0; fi < f; ++fi)
      for (Index oh = 0; oh < 3; ++oh)
        for (Index ow = 0; ow < 2; ++ow) {
          double acc = bias.values()[std::size_t(fi)];
          for (Index ci = 0; ci < c; ++ci)
            for (Index ih = 0; ih < kh; ++ih)
              for (Index iw = 0; iw < kw; ++iw)
                acc += double(x.at({img, ci, oh * s + ih, ow * s + iw})) *
                       w.at({fi, ci, ih, iw});
          CHECK(out.at({img, fi, oh, ow}) == Catch::Approx(acc).margin(1e-5));
        }
}

TEST_CASE("layernorm maps a constant row to zero before affine terms") {
  Tensor x(Shape{1, 4}, {3, 3, 3, 3});
  Tensor y = ops::layernorm(nullptr, x, Tensor::ones({4}), Tensor::zeros({4}));
  for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("concat then complementary slice is the identity") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    int rank = 1 + int(rng.index(3));
    Shape s;
    for (int i = 0; i < rank; ++i) s.push_back(1 + Index(rng.index(4)));
    int axis = int(rng.index(std::size_t(rank)));
    Tensor a = testutil::rand_tensor(rng, s);
    Shape s2 = s;
    s2[std::size_t(axis)] = 1 + Index(rng.index(4));
    Tensor b = testutil::rand_tensor(rng, s2);
    Tensor cat = ops::concat(nullptr, {a, b}, axis);
    CHECK(testutil::bitwise_equal(ops::slice(nullptr, cat, axis, 0, a.dim(axis)), a));
    CHECK(testutil::bitwise_equal(
        ops::slice(nullptr, cat, axis, a.dim(axis), b.dim(axis)), b));
  }
}

TEST_CASE("add supports equal shapes and last-axis bias only") {
  Rng rng(5);
  Tensor a = testutil::rand_tensor(rng, {2, 3});
  Tensor bias = testutil::rand_tensor(rng, {3});
  Tensor out = ops::add(nullptr, a, bias);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      CHECK(out.at({i, j}) == a.at({i, j}) + bias.values()[std::size_t(j)]);
  CHECK_THROWS_AS(ops::add(nullptr, a, testutil::rand_tensor(rng, {2})), DimensionError);
}

TEST_CASE("transpose swaps the requested axes") {
  Rng rng(9);
  Tensor x = testutil::rand_tensor(rng, {2, 3, 4});
  Tensor y = ops::transpose(nullptr, x, 0, 2);
  REQUIRE(y.shape() == Shape{4, 3, 2});
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) CHECK(y.at({k, j, i}) == x.at({i, j, k}));
}

TEST_CASE("broadcast0 replicates along a new leading axis") {
  Tensor x(Shape{2}, {1, 2});
  Tensor y = ops::broadcast0(nullptr, x, 3);
  REQUIRE(y.shape() == Shape{3, 2});
  for (Index i = 0; i < 3; ++i) {
    CHECK(y.at({i, 0}) == 1.0f);
    CHECK(y.at({i, 1}) == 2.0f);
  }
}

TEST_CASE("l2norm-lastaxis produces unit rows") {
  Rng rng(17);
  Tensor x = testutil::rand_tensor(rng, {4, 6});
  Tensor y = ops::l2norm_last(nullptr, x);
  for (Index i = 0; i < 4; ++i) {
    double ss = 0;
    for (Index j = 0; j < 6; ++j) ss += double(y.at({i, j})) * y.at({i, j});
    CHECK(ss == Catch::Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("embedding lookup gathers rows and validates ids") {
  Tensor table(Shape{3, 2}, {0, 1, 10, 11, 20, 21});
  ITensor ids(Shape{2, 2}, {2, 0, 1, 2});
  Tensor out = ops::embedding_lookup(nullptr, table, ids);
  REQUIRE(out.shape() == Shape{2, 2, 2});
  CHECK(out.at({0, 0, 0}) == 20.0f);
  CHECK(out.at({1, 0, 1}) == 11.0f);
  ITensor bad(Shape{1}, {3});
  CHECK_THROWS_AS(ops::embedding_lookup(nullptr, table, bad), ContractError);
}

TEST_CASE("primitive dispatch rejects unknown kinds") {
  Tensor x = Tensor::ones({2});
  std::vector<Tensor> in{x};
  CHECK_THROWS_AS(ops::primitive_forward(nullptr, "frobnicate", in), UnsupportedOpError);
  CHECK_THROWS_AS(ops::primitive_forward(nullptr, "leaf", in), UnsupportedOpError);
}

TEST_CASE("primitive dispatch runs the named kinds") {
  Rng rng(31);
  Tensor x = testutil::rand_tensor(rng, {2, 4});
  std::vector<Tensor> one{x};
  CHECK(ops::primitive_forward(nullptr, "softmax-lastaxis", one).shape() == x.shape());
  ops::Attrs attrs;
  attrs.axis = 1;
  attrs.start = 1;
  attrs.len = 2;
  CHECK(ops::primitive_forward(nullptr, "slice", one, attrs).shape() == Shape{2, 2});
  std::vector<Tensor> two{x, x};
  CHECK(ops::primitive_forward(nullptr, "add", two).shape() == x.shape());
  CHECK(ops::primitive_forward(nullptr, "mean", one).numel() == 1);
}
