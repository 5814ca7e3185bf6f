#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "muxformer/costmodel.hpp"
#include "muxformer/data.hpp"
#include "muxformer/losses.hpp"
#include "muxformer/model.hpp"
#include "muxformer/optim.hpp"

namespace muxformer {

struct DataConfig {
  std::string format = "idx-ubyte";  // idx-ubyte | cifar-binary
  std::string train_images, train_labels;
  std::string val_images, val_labels;
  Index limit_train = 0, limit_val = 0;
  Index pad_to = 0;
  bool hflip = false;
  NormStats norm;
};

inline Json to_json(const DataConfig& c) {
  return Json{{"format", c.format},
              {"train_images", c.train_images},
              {"train_labels", c.train_labels},
              {"val_images", c.val_images},
              {"val_labels", c.val_labels},
              {"limit_train", c.limit_train},
              {"limit_val", c.limit_val},
              {"pad_to", c.pad_to},
              {"hflip", c.hflip},
              {"normalize_mean", c.norm.mean},
              {"normalize_std", c.norm.std}};
}

inline DataConfig data_config_from_json(const Json& j) {
  DataConfig c;
  c.format = j.value("format", std::string("idx-ubyte"));
  c.train_images = j.value("train_images", std::string());
  c.train_labels = j.value("train_labels", std::string());
  c.val_images = j.value("val_images", std::string());
  c.val_labels = j.value("val_labels", std::string());
  c.limit_train = j.value("limit_train", Index(0));
  c.limit_val = j.value("limit_val", Index(0));
  c.pad_to = j.value("pad_to", Index(0));
  c.hflip = j.value("hflip", false);
  if (j.contains("normalize_mean")) c.norm.mean = j.at("normalize_mean").get<std::vector<float>>();
  if (j.contains("normalize_std")) c.norm.std = j.at("normalize_std").get<std::vector<float>>();
  return c;
}

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  OptimConfig optimizer;
  Index epochs = 1;
  Index batch_size = 64;
  std::uint64_t seed = 42;
  DataConfig data;
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_dir = "metrics";
  Index eval_cadence = 1;            // epochs between eval + checkpoint
  std::string lr_schedule = "none";  // none | cosine
  Index teacher_dim = 64;
  std::string teacher_path;

  void validate() const {
    model.validate();
    optimizer.validate();
    loss.validate(model.effective_n_mux());
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1 || batch_size % model.effective_n_mux() != 0)
      throw ConfigError("train: batch_size must be a positive multiple of n_mux");
    if (eval_cadence < 1) throw ConfigError("train: eval_cadence must be >= 1");
    if (lr_schedule != "none" && lr_schedule != "cosine")
      throw ConfigError("train: unknown lr_schedule " + lr_schedule);
    if (loss.lambda_retrieval > 0 && model.tokenizer != Tokenizer::toy_discrete)
      throw ConfigError("train: lambda_retrieval needs the toy-discrete tokenizer");
    if (loss.lambda_ce + loss.lambda_smooth + loss.lambda_clip + loss.lambda_retrieval <= 0)
      throw ConfigError("train: at least one loss weight must be positive");
    if (loss.lambda_clip > 0 && teacher_dim < 2 && teacher_path.empty())
      throw ConfigError("train: teacher_dim must be >= 2 for the contrastive loss");
  }
};

inline Json to_json(const TrainConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"loss", to_json(c.loss)},
              {"optimizer", to_json(c.optimizer)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"data", to_json(c.data)},
              {"checkpoint_dir", c.checkpoint_dir},
              {"metrics_dir", c.metrics_dir},
              {"eval_cadence", c.eval_cadence},
              {"lr_schedule", c.lr_schedule},
              {"teacher_dim", c.teacher_dim},
              {"teacher_path", c.teacher_path}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  try {
    c.model = model_config_from_json(j.at("model"));
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    if (j.contains("optimizer")) c.optimizer = optim_config_from_json(j.at("optimizer"));
    c.epochs = j.value("epochs", Index(1));
    c.batch_size = j.value("batch_size", Index(64));
    c.seed = j.value("seed", std::uint64_t(42));
    if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
    c.checkpoint_dir = j.value("checkpoint_dir", std::string("checkpoints"));
    c.metrics_dir = j.value("metrics_dir", std::string("metrics"));
    c.eval_cadence = j.value("eval_cadence", Index(1));
    c.lr_schedule = j.value("lr_schedule", std::string("none"));
    c.teacher_dim = j.value("teacher_dim", Index(64));
    c.teacher_path = j.value("teacher_path", std::string());
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

inline std::string config_hash_hex(const TrainConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                (unsigned long long)hash_str(to_json(c).dump()));
  return std::string(buf);
}

struct StepMetrics {
  Index step = 0;
  float total = 0, ce = 0, smooth = 0, clip = 0, retrieval = 0;
  float lr = 0;
};

struct EpochMetrics {
  Index epoch = 0;
  double train_acc = 0;
  double val_acc = -1;  // -1 when not evaluated this epoch
  double wall_seconds = 0;
};

struct TrainRecord {
  std::vector<StepMetrics> steps;
  std::vector<EpochMetrics> epochs;
  std::string metrics_path, epochs_path, final_checkpoint;
  double final_train_acc = 0;
  double final_val_acc = 0;
};

struct EvalResult {
  double top1 = 0;
  std::vector<double> per_slot;
  double mean_loss = 0;
  Index images = 0;
};

namespace detail {

inline Index argmax_row(std::span<const float> v, Index row, Index k) {
  Index best = 0;
  float best_v = v[std::size_t(row * k)];
  for (Index j = 1; j < k; ++j)
    if (v[std::size_t(row * k + j)] > best_v) {
      best_v = v[std::size_t(row * k + j)];
      best = j;
    }
  return best;
}

inline Dataset load_split(const DataConfig& d, bool train) {
  DataOptions opt;
  opt.limit = train ? d.limit_train : d.limit_val;
  opt.pad_to = d.pad_to;
  opt.norm = d.norm;
  const std::string& images = train ? d.train_images : d.val_images;
  const std::string& labels = train ? d.train_labels : d.val_labels;
  if (d.format == "idx-ubyte") {
    if (labels.empty()) return load_dataset(images, d.format, opt);
    return load_idx_dataset(images, labels, opt);
  }
  if (d.format == "cifar-binary") return load_cifar_dataset({images}, opt);
  throw ConfigError("unknown dataset format: " + d.format);
}

}  // namespace detail

// Top-1 accuracy (overall and per slot) plus mean CE over all complete mux
// batches of the dataset.
inline EvalResult evaluate(const ModelState& m, const Dataset& data, Index batch_size) {
  Index n = m.cfg.effective_n_mux();
  if (data.num_classes > m.cfg.num_classes)
    throw ConfigError("evaluate: dataset has " + std::to_string(data.num_classes) +
                      " classes, model head covers " + std::to_string(m.cfg.num_classes));
  std::vector<MuxBatch> batches = make_mux_batches(data, n, batch_size, 0, false);
  if (batches.empty()) throw ContractError("evaluate: dataset smaller than one batch");

  EvalResult r;
  r.per_slot.assign(std::size_t(n), 0.0);
  std::vector<Index> slot_counts(std::size_t(n), 0);
  double loss_sum = 0;
  Index group = batch_size / n;
  for (const MuxBatch& batch : batches) {
    ForwardResult out = forward(nullptr, m, batch.groups);
    std::vector<int> labels = batch.flat_labels();
    loss_sum += double(cross_entropy(nullptr, out.logits, labels).item());
    auto lv = out.logits.values();
    for (Index row = 0; row < Index(labels.size()); ++row) {
      bool hit = detail::argmax_row(lv, row, m.cfg.num_classes) ==
                 Index(labels[std::size_t(row)]);
      Index slot = row / group;
      if (hit) r.per_slot[std::size_t(slot)] += 1.0;
      slot_counts[std::size_t(slot)] += 1;
      r.images += 1;
      if (hit) r.top1 += 1.0;
    }
  }
  r.top1 /= double(r.images);
  for (std::size_t s = 0; s < r.per_slot.size(); ++s) r.per_slot[s] /= double(slot_counts[s]);
  r.mean_loss = loss_sum / double(batches.size());
  return r;
}

inline EvalResult evaluate_checkpoint(const std::string& checkpoint_path, const Dataset& data,
                                      Index batch_size) {
  ModelState m = load_checkpoint(checkpoint_path);
  return evaluate(m, data, batch_size);
}

// One training step's losses, assembled with zero-weight terms skipped so a
// lambda of zero removes that term's gradient contribution bit-exactly.
struct StepLosses {
  Tensor total;
  Tensor logits;  // the forward's logits, reused for train accuracy
  float ce = 0, smooth = 0, clip = 0, retrieval = 0;
};

inline StepLosses compute_losses(Tape* tape, const ModelState& m, const MuxBatch& batch,
                                 const LossConfig& loss, const TeacherEmbeddings* teacher,
                                 AuxParams* aux) {
  StepLosses out;
  bool want_tokens = loss.lambda_retrieval > 0;
  ForwardResult fwd = forward(tape, m, batch.groups, want_tokens);
  out.logits = fwd.logits;

  auto weigh = [&](const Tensor& term, float lambda) {
    Tensor scaled = ops::scale(tape, term, lambda);
    out.total = out.total.defined() ? ops::add(tape, out.total, scaled) : scaled;
  };
  if (loss.lambda_ce > 0) {
    ops::OpScope scope("loss.ce");
    Tensor ce = cross_entropy(tape, fwd.logits, batch.flat_labels());
    out.ce = ce.item();
    weigh(ce, loss.lambda_ce);
  }
  if (loss.lambda_smooth > 0) {
    ops::OpScope scope("loss.smooth");
    Tensor sm = mix_smooth_loss(tape, m, fwd.pre_concat_tokens, batch.labels, loss.alpha);
    out.smooth = sm.item();
    weigh(sm, loss.lambda_smooth);
  }
  if (loss.lambda_clip > 0) {
    ops::OpScope scope("loss.clip");
    std::vector<std::uint64_t> ids = batch.flat_ids();
    Tensor rows = teacher->lookup(ids);
    Tensor cl = contrastive_teacher_loss(tape, fwd.cls_embeddings, rows, aux->at("clip_proj_w"),
                                         aux->at("clip_proj_b"), loss.temperature);
    out.clip = cl.item();
    weigh(cl, loss.lambda_clip);
  }
  if (loss.lambda_retrieval > 0) {
    ops::OpScope scope("loss.retrieval");
    Tensor total_r;
    for (std::size_t g = 0; g < batch.groups.size(); ++g) {
      ITensor targets = toy_discrete_patchify(batch.groups[g], m.codebook, m.cfg.patch_size);
      Tensor term = token_retrieval_loss(tape, fwd.demuxed_tokens[g], targets, m.retrieval_w,
                                         m.retrieval_b);
      total_r = total_r.defined() ? ops::add(tape, total_r, term) : term;
    }
    if (batch.groups.size() > 1)
      total_r = ops::scale(tape, total_r, 1.0f / float(batch.groups.size()));
    out.retrieval = total_r.item();
    weigh(total_r, loss.lambda_retrieval);
  }
  return out;
}

// Full training loop: AdamW on the lambda-weighted loss, metrics CSVs named
// by config hash + seed, checkpoint at every eval cadence. Fully determined
// by (seed, config, data).
inline TrainRecord train(const TrainConfig& cfg) {
  cfg.validate();
  Dataset train_data = detail::load_split(cfg.data, true);
  Dataset val_data;
  bool have_val = !cfg.data.val_images.empty();
  if (have_val) val_data = detail::load_split(cfg.data, false);

  ModelState model = build_model(cfg.model, cfg.seed);
  AdamW optimizer(cfg.optimizer);

  TeacherEmbeddings teacher;
  AuxParams aux;
  if (cfg.loss.lambda_clip > 0) {
    teacher = cfg.teacher_path.empty()
                  ? TeacherEmbeddings::seeded(cfg.teacher_dim,
                                              mix64(cfg.seed) ^ hash_str("muxformer.teacher"))
                  : load_teacher_embeddings(cfg.teacher_path);
    Rng rng(mix64(cfg.seed) ^ hash_str("muxformer.clip_proj"));
    aux.emplace("clip_proj_w", param_trunc_normal(rng, {cfg.model.dim, teacher.dim}));
    aux.emplace("clip_proj_b", param_zeros({teacher.dim}));
  }

  std::filesystem::create_directories(cfg.metrics_dir);
  std::filesystem::create_directories(cfg.checkpoint_dir);
  std::string tag = config_hash_hex(cfg) + "_" + std::to_string(cfg.seed);
  TrainRecord record;
  record.metrics_path = cfg.metrics_dir + "/metrics_" + tag + ".csv";
  record.epochs_path = cfg.metrics_dir + "/epochs_" + tag + ".csv";

  std::ofstream metrics(record.metrics_path, std::ios::trunc);
  if (!metrics) throw ConfigError("cannot open metrics file " + record.metrics_path);
  metrics << "step,total,ce,smooth,clip,retrieval,lr\n";
  std::ofstream epochs_csv(record.epochs_path, std::ios::trunc);
  epochs_csv << "epoch,train_acc,val_acc\n";

  Index steps_per_epoch = train_data.count() / cfg.batch_size;
  Index total_steps = std::max<Index>(1, steps_per_epoch * cfg.epochs);
  Index group = cfg.batch_size / cfg.model.effective_n_mux();
  Index step = 0;
  char line[256];

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto epoch_start = std::chrono::steady_clock::now();
    std::vector<MuxBatch> batches =
        make_mux_batches(train_data, cfg.model.effective_n_mux(), cfg.batch_size,
                         mix64(cfg.seed) ^ mix64(std::uint64_t(epoch) + 1), true,
                         cfg.data.hflip);
    Index hits = 0, seen = 0;
    for (const MuxBatch& batch : batches) {
      float lr = cfg.optimizer.learning_rate;
      if (cfg.lr_schedule == "cosine")
        lr = cfg.optimizer.learning_rate * 0.5f *
             (1.0f + std::cos(float(M_PI) * float(step) / float(total_steps)));

      Tape tape;
      StepLosses losses = compute_losses(&tape, model, batch, cfg.loss,
                                         cfg.loss.lambda_clip > 0 ? &teacher : nullptr,
                                         cfg.loss.lambda_clip > 0 ? &aux : nullptr);
      float total = losses.total.item();
      if (!std::isfinite(total)) {
        // Re-run with per-op finite checks to name the first bad tensor path.
        ops::set_finite_checks(true);
        try {
          Tape probe;
          compute_losses(&probe, model, batch, cfg.loss,
                         cfg.loss.lambda_clip > 0 ? &teacher : nullptr,
                         cfg.loss.lambda_clip > 0 ? &aux : nullptr);
          ops::set_finite_checks(false);
        } catch (const NonFiniteError& e) {
          ops::set_finite_checks(false);
          throw NonFiniteError("training aborted at step " + std::to_string(step) + ": " +
                               e.what());
        }
        throw NonFiniteError("training aborted at step " + std::to_string(step) +
                             ": loss is non-finite");
      }

      // batch top-1 before the update, for the epoch's train accuracy
      {
        auto lv = losses.logits.values();
        std::vector<int> labels = batch.flat_labels();
        for (Index row = 0; row < Index(labels.size()); ++row)
          hits += detail::argmax_row(lv, row, cfg.model.num_classes) ==
                  Index(labels[std::size_t(row)]);
        seen += Index(labels.size());
      }

      GradMap grads = tape.backward(losses.total);
      optimizer.step(&model, cfg.loss.lambda_clip > 0 ? &aux : nullptr, tape, grads, lr);

      std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                    (long long)step, double(total), double(losses.ce),
                    double(losses.smooth), double(losses.clip), double(losses.retrieval),
                    double(lr));
      metrics << line;
      record.steps.push_back(
          {step, total, losses.ce, losses.smooth, losses.clip, losses.retrieval, lr});
      ++step;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_acc = seen > 0 ? double(hits) / double(seen) : 0.0;
    bool eval_now = have_val && ((epoch + 1) % cfg.eval_cadence == 0 || epoch + 1 == cfg.epochs);
    if (eval_now) {
      em.val_acc = evaluate(model, val_data, cfg.batch_size).top1;
      save_checkpoint(model,
                      cfg.checkpoint_dir + "/ckpt_epoch" + std::to_string(epoch) + ".muxf");
    }
    em.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                    epoch_start)
                          .count();
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g\n", (long long)epoch, em.train_acc,
                  em.val_acc);
    epochs_csv << line;
    record.epochs.push_back(em);
    std::fprintf(stderr, "epoch %lld  train_acc %.4f  val_acc %.4f  (%.1fs)\n",
                 (long long)epoch, em.train_acc, em.val_acc, em.wall_seconds);
  }

  record.final_checkpoint = cfg.checkpoint_dir + "/final.muxf";
  save_checkpoint(model, record.final_checkpoint);
  record.final_train_acc = record.epochs.empty() ? 0.0 : record.epochs.back().train_acc;
  for (auto it = record.epochs.rbegin(); it != record.epochs.rend(); ++it)
    if (it->val_acc >= 0) {
      record.final_val_acc = it->val_acc;
      break;
    }
  metrics.flush();
  epochs_csv.flush();
  (void)group;
  return record;
}

}  // namespace muxformer
