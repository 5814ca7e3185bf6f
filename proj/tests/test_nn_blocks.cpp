#include <catch2/catch_amalgamated.hpp>

#include "muxformer/grad_check.hpp"
#include "muxformer/nn.hpp"
#include "support.hpp"

using namespace muxformer;

TEST_CASE("single-token attention weight is exactly one") {
  Rng rng(1);
  Index d = 8, heads = 2;
  EncoderLayerParams p = make_encoder_layer(rng, d, 4);
  Tensor x = testutil::rand_tensor(rng, {1, 1, d});

  Tensor probs;
  Tensor out = multi_head_attention(nullptr, x, p, heads, &probs);
  REQUIRE(probs.shape() == Shape{1, heads, 1, 1});
  for (float v : probs.values()) CHECK(v == 1.0f);

  // With a single token the context is v(norm(x)) itself.
  Tensor h = ops::layernorm(nullptr, x, p.ln1_gamma, p.ln1_beta);
  Tensor qkv = ops::add(nullptr, ops::matmul(nullptr, h, p.qkv_w), p.qkv_b);
  Tensor v = ops::slice(nullptr, qkv, 2, 2 * d, d);
  Tensor manual =
      ops::add(nullptr, x, ops::add(nullptr, ops::matmul(nullptr, v, p.proj_w), p.proj_b));
  CHECK(testutil::max_abs_diff(out, manual) < 1e-6);
}

TEST_CASE("attention probability rows sum to one") {
  Rng rng(2);
  Index d = 16, heads = 4, L = 8;
  EncoderLayerParams p = make_encoder_layer(rng, d, 4);
  Tensor x = testutil::rand_tensor(rng, {2, L, d});
  Tensor probs;
  multi_head_attention(nullptr, x, p, heads, &probs);
  REQUIRE(probs.shape() == Shape{2, heads, L, L});
  auto v = probs.values();
  for (Index row = 0; row < 2 * heads * L; ++row) {
    double s = 0;
    for (Index j = 0; j < L; ++j) s += v[std::size_t(row * L + j)];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("attention is equivariant to token permutations") {
  Rng rng(3);
  Index d = 8, heads = 2, L = 5;
  EncoderLayerParams p = make_encoder_layer(rng, d, 4);
  Tensor x = testutil::rand_tensor(rng, {1, L, d});

  std::vector<Index> perm{3, 0, 4, 2, 1};
  std::vector<float> px(static_cast<std::size_t>(L * d));
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < d; ++j)
      px[std::size_t(i * d + j)] = x.at({0, perm[std::size_t(i)], j});
  Tensor xp(Shape{1, L, d}, std::move(px));

  Tensor out = multi_head_attention(nullptr, x, p, heads);
  Tensor out_p = multi_head_attention(nullptr, xp, p, heads);
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < d; ++j)
      CHECK(out_p.at({0, i, j}) ==
            Catch::Approx(out.at({0, perm[std::size_t(i)], j})).margin(1e-5));
}

TEST_CASE("attention rejects an indivisible head split") {
  Rng rng(4);
  EncoderLayerParams p = make_encoder_layer(rng, 6, 4);
  Tensor x = testutil::rand_tensor(rng, {1, 2, 6});
  CHECK_THROWS_AS(multi_head_attention(nullptr, x, p, 4), ConfigError);
}

TEST_CASE("encoder layer keeps the input shape") {
  Rng rng(5);
  EncoderLayerParams p = make_encoder_layer(rng, 128, 4);
  Tensor x = testutil::rand_tensor(rng, {4, 196, 128});
  CHECK(encoder_layer(nullptr, x, p, 4).shape() == Shape{4, 196, 128});

  for (Index dim : {32, 64, 128}) {
    EncoderLayerParams q = make_encoder_layer(rng, dim, 4);
    for (Index L : {4, 16, 64}) {
      Tensor in = testutil::rand_tensor(rng, {2, L, dim});
      CHECK(encoder_layer(nullptr, in, q, 4).shape() == in.shape());
    }
  }
}

TEST_CASE("zero output projections make the layer an identity") {
  Rng rng(6);
  Index d = 16;
  EncoderLayerParams p = make_encoder_layer(rng, d, 4);
  p.proj_w = param_zeros({d, d});
  p.proj_b = param_zeros({d});
  p.mlp_w2 = param_zeros({4 * d, d});
  p.mlp_b2 = param_zeros({d});
  Tensor x = testutil::rand_tensor(rng, {2, 3, d});
  CHECK(testutil::bitwise_equal(encoder_layer(nullptr, x, p, 4), x));
}

TEST_CASE("a stack of layers is the composition of single layers") {
  Rng rng(7);
  Index d = 16;
  std::vector<EncoderLayerParams> layers{make_encoder_layer(rng, d, 4),
                                         make_encoder_layer(rng, d, 4),
                                         make_encoder_layer(rng, d, 4)};
  Tensor x = testutil::rand_tensor(rng, {2, 4, d});

  Tensor stacked = x;
  for (const auto& p : layers) stacked = encoder_layer(nullptr, stacked, p, 2);

  Tensor composed = encoder_layer(
      nullptr, encoder_layer(nullptr, encoder_layer(nullptr, x, layers[0], 2), layers[1], 2),
      layers[2], 2);
  CHECK(testutil::bitwise_equal(stacked, composed));
}

TEST_CASE("cnn patchify token counts") {
  Rng rng(8);
  {
    PatchifierParams p = make_patchifier(rng, 16, 3, 224, 16);
    Tensor img = testutil::rand_tensor(rng, {1, 3, 224, 224});
    CHECK(cnn_patchify(nullptr, img, p, 16).shape() == Shape{1, 196, 16});
  }
  {
    PatchifierParams p = make_patchifier(rng, 16, 1, 32, 4);
    Tensor img = testutil::rand_tensor(rng, {2, 1, 32, 32});
    CHECK(cnn_patchify(nullptr, img, p, 4).shape() == Shape{2, 64, 16});
  }
  {
    PatchifierParams p = make_patchifier(rng, 8, 1, 30, 4);
    Tensor img = testutil::rand_tensor(rng, {1, 1, 30, 30});
    CHECK_THROWS_AS(cnn_patchify(nullptr, img, p, 4), ConfigError);
  }
}

TEST_CASE("patchify is deterministic across identical images") {
  Rng rng(9);
  PatchifierParams p = make_patchifier(rng, 8, 1, 16, 4);
  Tensor img = testutil::rand_tensor(rng, {1, 1, 16, 16});
  Tensor both = ops::concat(nullptr, {img, img}, 0);
  Tensor tokens = cnn_patchify(nullptr, both, p, 4);
  Tensor first = ops::slice(nullptr, tokens, 0, 0, 1);
  Tensor second = ops::slice(nullptr, tokens, 0, 1, 1);
  CHECK(testutil::bitwise_equal(first, second));
}

TEST_CASE("classifier head behaves as an affine map") {
  Rng rng(10);
  Index d = 6;
  Tensor cls = testutil::rand_tensor(rng, {2, d});

  Tensor zero = classifier_head(nullptr, cls, Tensor::zeros({d, d}), Tensor::zeros({d}));
  for (float v : zero.values()) CHECK(v == 0.0f);

  Tensor ident = classifier_head(nullptr, cls, identity_matrix(d), Tensor::zeros({d}));
  CHECK(testutil::max_abs_diff(ident, cls) == 0.0);

  Tensor w = testutil::rand_tensor(rng, {d, 3});
  Tensor b = testutil::rand_tensor(rng, {3});
  Tensor batch = classifier_head(nullptr, cls, w, b);
  for (Index row = 0; row < 2; ++row) {
    Tensor single = classifier_head(
        nullptr, ops::reshape(nullptr, ops::slice(nullptr, cls, 0, row, 1), {1, d}), w, b);
    for (Index j = 0; j < 3; ++j) CHECK(batch.at({row, j}) == single.at({0, j}));
  }
}

TEST_CASE("full encoder block passes a finite-difference check") {
  Rng rng(11);
  Index d = 16, L = 4, heads = 2;
  EncoderLayerParams p = make_encoder_layer(rng, d, 4);
  Tensor x = testutil::rand_tensor(rng, {1, L, d});
  Tensor w = testutil::rand_tensor(rng, {1, L, d});

  std::vector<Tensor> points{x, p.qkv_w, p.proj_w, p.mlp_w1, p.ln1_gamma};
  double err = grad_check(
      [&](Tape& t, const std::vector<Tensor>& pts) {
        EncoderLayerParams q = p;
        Tensor in = pts[0];
        q.qkv_w = pts[1];
        q.proj_w = pts[2];
        q.mlp_w1 = pts[3];
        q.ln1_gamma = pts[4];
        return ops::sum_all(&t, ops::mul(&t, encoder_layer(&t, in, q, heads), w));
      },
      points, 1e-3);
  CHECK(err < 1e-2);
}
