#pragma once

#include <json.hpp>
#include <string>

#include "muxformer/errors.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer {

using Json = nlohmann::json;

enum class Variant { concatplexer, image_multiplexer, vit, reduced_no_concat };
enum class Tokenizer { cnn, tre, toy_discrete };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::concatplexer: return "concatplexer";
    case Variant::image_multiplexer: return "image-multiplexer";
    case Variant::vit: return "vit";
    case Variant::reduced_no_concat: return "reduced-no-concat";
  }
  return "?";
}

inline const char* to_string(Tokenizer t) {
  switch (t) {
    case Tokenizer::cnn: return "cnn";
    case Tokenizer::tre: return "tre";
    case Tokenizer::toy_discrete: return "toy-discrete";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "concatplexer") return Variant::concatplexer;
  if (s == "image-multiplexer") return Variant::image_multiplexer;
  if (s == "vit") return Variant::vit;
  if (s == "reduced-no-concat") return Variant::reduced_no_concat;
  throw ConfigError("unknown variant: " + s);
}

inline Tokenizer tokenizer_from_string(const std::string& s) {
  if (s == "cnn") return Tokenizer::cnn;
  if (s == "tre") return Tokenizer::tre;
  if (s == "toy-discrete") return Tokenizer::toy_discrete;
  throw ConfigError("unknown tokenizer: " + s);
}

// Complete architecture description; also the sole input of the cost model.
struct ModelConfig {
  Variant variant = Variant::concatplexer;
  Index image_size = 32;
  Index channels = 3;
  Index patch_size = 4;
  Index dim = 128;
  Index heads = 4;
  Index total_layers = 6;
  Index concat_point = 2;
  Index n_mux = 2;
  Index num_classes = 10;
  Index demux_hidden = 0;  // 0 means dim
  Index mlp_ratio = 4;
  Tokenizer tokenizer = Tokenizer::tre;
  bool use_slot_embeddings = true;
  Index codebook_size = 512;

  Index grid() const { return image_size / patch_size; }
  Index token_len() const { return grid() * grid(); }
  // vit processes one image per sequence whatever n_mux says
  Index effective_n_mux() const { return variant == Variant::vit ? 1 : n_mux; }
  Index demux_width() const { return demux_hidden > 0 ? demux_hidden : dim; }
  bool has_reducer() const {
    return variant == Variant::concatplexer || variant == Variant::reduced_no_concat;
  }
  bool has_demux() const { return variant != Variant::vit; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (image_size < 1 || channels < 1) fail("image_size and channels must be positive");
    if (patch_size < 1 || image_size % patch_size != 0)
      fail("patch_size " + std::to_string(patch_size) + " must divide image_size " +
           std::to_string(image_size));
    if (dim < 1 || heads < 1 || dim % heads != 0)
      fail("dim " + std::to_string(dim) + " must be divisible by heads " +
           std::to_string(heads));
    if (total_layers < 1) fail("total_layers must be >= 1");
    if (concat_point < 0 || concat_point > total_layers)
      fail("concat_point " + std::to_string(concat_point) +
           " must lie in [0, total_layers=" + std::to_string(total_layers) + "]");
    if (n_mux < 1) fail("n_mux must be >= 1");
    if (effective_n_mux() > 0 && token_len() % effective_n_mux() != 0)
      fail("token length " + std::to_string(token_len()) + " is not divisible by n_mux " +
           std::to_string(effective_n_mux()));
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (demux_hidden < 0) fail("demux_hidden must be >= 0");
    if (codebook_size < 2) fail("codebook_size must be >= 2");
    switch (variant) {
      case Variant::concatplexer:
      case Variant::reduced_no_concat:
        if (tokenizer == Tokenizer::toy_discrete)
          fail("the concat variants use a cnn or tre tokenizer");
        if (tokenizer == Tokenizer::tre && concat_point == 0)
          fail("tre tokenizer implies concat_point >= 1");
        if (tokenizer == Tokenizer::cnn && concat_point != 0)
          fail("cnn tokenizer implies concat_point == 0");
        break;
      case Variant::image_multiplexer:
        if (tokenizer == Tokenizer::tre)
          fail("image-multiplexer uses a cnn or toy-discrete tokenizer");
        break;
      case Variant::vit:
        if (tokenizer != Tokenizer::cnn) fail("vit uses the cnn tokenizer");
        break;
    }
  }
};

inline Json to_json(const ModelConfig& c) {
  return Json{{"variant", to_string(c.variant)},
              {"image_size", c.image_size},
              {"channels", c.channels},
              {"patch_size", c.patch_size},
              {"dim", c.dim},
              {"heads", c.heads},
              {"total_layers", c.total_layers},
              {"concat_point", c.concat_point},
              {"n_mux", c.n_mux},
              {"num_classes", c.num_classes},
              {"demux_hidden", c.demux_hidden},
              {"mlp_ratio", c.mlp_ratio},
              {"tokenizer", to_string(c.tokenizer)},
              {"use_slot_embeddings", c.use_slot_embeddings},
              {"codebook_size", c.codebook_size}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.image_size = j.at("image_size").get<Index>();
    c.channels = j.at("channels").get<Index>();
    c.patch_size = j.at("patch_size").get<Index>();
    c.dim = j.at("dim").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.total_layers = j.at("total_layers").get<Index>();
    c.concat_point = j.value("concat_point", Index(0));
    c.n_mux = j.value("n_mux", Index(1));
    c.num_classes = j.at("num_classes").get<Index>();
    c.demux_hidden = j.value("demux_hidden", Index(0));
    c.mlp_ratio = j.value("mlp_ratio", Index(4));
    c.tokenizer = tokenizer_from_string(j.value("tokenizer", std::string("cnn")));
    c.use_slot_embeddings = j.value("use_slot_embeddings", true);
    c.codebook_size = j.value("codebook_size", Index(512));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace muxformer
