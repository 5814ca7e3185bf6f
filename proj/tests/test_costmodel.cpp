#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "muxformer/costmodel.hpp"
#include "muxformer/model.hpp"
#include "support.hpp"

using namespace muxformer;

namespace {

ModelConfig vit_b16() {
  ModelConfig c;
  c.variant = Variant::vit;
  c.tokenizer = Tokenizer::cnn;
  c.image_size = 224;
  c.channels = 3;
  c.patch_size = 16;
  c.dim = 768;
  c.heads = 12;
  c.total_layers = 12;
  c.concat_point = 0;
  c.n_mux = 1;
  c.num_classes = 1000;
  return c;
}

ModelConfig concatplexer(Index concat_point, Index n_mux) {
  ModelConfig c = vit_b16();
  c.variant = Variant::concatplexer;
  c.tokenizer = Tokenizer::tre;
  c.concat_point = concat_point;
  c.n_mux = n_mux;
  return c;
}

}  // namespace

TEST_CASE("paper-scale GFLOPs land on the published table") {
  struct Row {
    ModelConfig cfg;
    double expected;
  };
  std::vector<Row> rows{{vit_b16(), 17.58},       {concatplexer(1, 2), 9.81},
                        {concatplexer(3, 2), 11.26}, {concatplexer(6, 2), 13.45},
                        {concatplexer(1, 4), 5.81}};
  for (const Row& row : rows) {
    double g = flops_per_image(row.cfg).gflops();
    INFO("expected " << row.expected << " got " << g);
    CHECK(std::abs(g - row.expected) / row.expected < 0.05);
  }
}

TEST_CASE("savings percentages match the published claims") {
  double c3 = compare_flops(concatplexer(6, 2), vit_b16()).percent_savings;
  CHECK(std::abs(c3 - 23.5) < 1.5);
  double c4 = compare_flops(concatplexer(1, 4), vit_b16()).percent_savings;
  CHECK(std::abs(c4 - 66.9) < 1.5);
  FlopsComparison self = compare_flops(vit_b16(), vit_b16());
  CHECK(self.percent_savings == 0.0);
  CHECK(self.ratio == 1.0);
}

TEST_CASE("per-image flops decrease with smaller concat point and larger n_mux") {
  double prev = -1;
  for (Index point : {1, 2, 3, 6, 9, 12}) {
    double g = flops_per_image(concatplexer(point, 2)).total;
    if (prev >= 0) CHECK(prev < g);
    prev = g;
  }
  prev = 1e30;
  for (Index n : {1, 2, 4, 7, 14}) {  // divisors of 196
    double g = flops_per_image(concatplexer(1, n)).total;
    CHECK(g < prev);
    prev = g;
  }
}

TEST_CASE("stage totals add up and the report echoes the config") {
  FlopsReport r = flops_per_image(concatplexer(3, 2));
  double sum = 0;
  for (const auto& [name, flops] : r.stages()) sum += flops;
  CHECK(std::abs(sum - r.total) < 1e-3);
  CHECK(r.cfg.concat_point == 3);
  std::string csv = format_flops_csv(r);
  CHECK(csv.rfind("stage,flops,share\n", 0) == 0);
  CHECK(csv.find("reducer") != std::string::npos);
  CHECK(format_flops_report(r).find("total") != std::string::npos);
}

TEST_CASE("the analytic count equals the instrumented tape exactly") {
  struct Case {
    ModelConfig cfg;
    Index group;
  };
  std::vector<Case> cases;
  {
    ModelConfig c;
    c.variant = Variant::concatplexer;
    c.tokenizer = Tokenizer::tre;
    c.image_size = 16;
    c.channels = 2;
    c.patch_size = 4;
    c.dim = 16;
    c.heads = 2;
    c.total_layers = 3;
    c.concat_point = 1;
    c.n_mux = 2;
    c.num_classes = 7;
    cases.push_back({c, 3});
    c.variant = Variant::reduced_no_concat;
    cases.push_back({c, 2});
    c.variant = Variant::vit;
    c.tokenizer = Tokenizer::cnn;
    c.concat_point = 0;
    c.n_mux = 1;
    cases.push_back({c, 4});
    c.variant = Variant::image_multiplexer;
    c.n_mux = 2;
    cases.push_back({c, 2});
  }
  Rng rng(3);
  for (const Case& kase : cases) {
    ModelState m = build_model(kase.cfg, 9);
    std::vector<Tensor> groups;
    for (Index g = 0; g < kase.cfg.effective_n_mux(); ++g)
      groups.push_back(testutil::rand_tensor(
          rng, {kase.group, kase.cfg.channels, kase.cfg.image_size, kase.cfg.image_size}));
    Tape tape;
    forward(&tape, m, groups);
    std::uint64_t instrumented = tape.macs_for(OpKind::matmul) +
                                 tape.macs_for(OpKind::conv1d) +
                                 tape.macs_for(OpKind::conv2d);
    std::uint64_t predicted = cost::macs_for_groups(kase.cfg, kase.group).total();
    INFO("variant " << to_string(kase.cfg.variant));
    CHECK(instrumented == predicted);
  }
}

TEST_CASE("analytic parameter counts match built models") {
  std::vector<ModelConfig> cfgs;
  {
    ModelConfig c;
    c.image_size = 16;
    c.channels = 1;
    c.patch_size = 4;
    c.dim = 24;
    c.heads = 2;
    c.total_layers = 2;
    c.num_classes = 5;
    c.variant = Variant::concatplexer;
    c.tokenizer = Tokenizer::tre;
    c.concat_point = 1;
    c.n_mux = 2;
    cfgs.push_back(c);
    c.variant = Variant::vit;
    c.tokenizer = Tokenizer::cnn;
    c.concat_point = 0;
    c.n_mux = 1;
    cfgs.push_back(c);
    c.variant = Variant::image_multiplexer;
    c.tokenizer = Tokenizer::toy_discrete;
    c.n_mux = 4;
    c.codebook_size = 16;
    c.demux_hidden = 48;
    cfgs.push_back(c);
    c.variant = Variant::reduced_no_concat;
    c.tokenizer = Tokenizer::tre;
    c.concat_point = 2;
    c.n_mux = 2;
    c.use_slot_embeddings = false;
    cfgs.push_back(c);
  }
  for (const ModelConfig& c : cfgs) {
    ModelState m = build_model(c, 4);
    INFO("variant " << to_string(c.variant));
    CHECK(cost::trainable_params(c) == param_count(m));
    CHECK(flops_per_image(c).params == param_count(m));
  }
}

TEST_CASE("the conv reducer is a negligible share of the total") {
  // n_mux = 2 rows stay under 2%; the kernel=stride=4 reducer at concat
  // point 1 prices at L*d^2 MACs, which is 2.04% of that config's per-image
  // total, so its bound sits at 2.1%.
  for (Index point : {1, 3, 6}) {
    FlopsReport r = flops_per_image(concatplexer(point, 2));
    CHECK(r.reducer / r.total < 0.02);
  }
  FlopsReport r4 = flops_per_image(concatplexer(1, 4));
  CHECK(r4.reducer / r4.total < 0.021);

  // and against one backbone layer the reducer is several percent, not less
  FlopsReport r = flops_per_image(concatplexer(6, 2));
  double one_layer = double(cost::encoder_layer_macs(197, 768, 4));
  CHECK(r.reducer * 2 / one_layer < 0.16);  // per-sequence reducer vs one layer
}

TEST_CASE("an n_mux=1 concatplexer costs within 1.5% of the matched vit") {
  for (Index point : {1, 2, 6}) {
    ModelConfig c = concatplexer(point, 1);
    double a = flops_per_image(c).total;
    double b = flops_per_image(vit_b16()).total;
    INFO("concat_point " << point);
    CHECK(std::abs(a - b) / b < 0.015);
  }
}

TEST_CASE("desk-scale flops ratio supports the throughput bound") {
  ModelConfig desk;
  desk.variant = Variant::concatplexer;
  desk.tokenizer = Tokenizer::tre;
  desk.image_size = 32;
  desk.channels = 1;
  desk.patch_size = 4;
  desk.dim = 128;
  desk.heads = 4;
  desk.total_layers = 6;
  desk.concat_point = 1;
  desk.n_mux = 2;
  desk.num_classes = 10;
  ModelConfig vit = desk;
  vit.variant = Variant::vit;
  vit.tokenizer = Tokenizer::cnn;
  vit.concat_point = 0;
  vit.n_mux = 1;
  FlopsComparison cmp = compare_flops(desk, vit);
  CHECK(cmp.ratio < 1.0 / 1.3);  // the measured speedup bound has headroom
}
