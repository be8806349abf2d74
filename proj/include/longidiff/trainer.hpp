#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "longidiff/checkpoint.hpp"
#include "longidiff/common.hpp"
#include "longidiff/data.hpp"
#include "longidiff/encoder.hpp"
#include "longidiff/metrics.hpp"
#include "longidiff/schedule.hpp"
#include "longidiff/unet.hpp"

namespace longidiff {

enum class LossReduction { kMean, kSum };

struct TrainConfig {
  int64_t steps = 20000;
  int64_t batch_size = 16;
  double learning_rate = 1e-3;   // 1e-4 when fine-tuning
  double weight_decay = 1e-2;
  int64_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  PairStrategy strategy = PairStrategy::kEarliestToLater;
  ConditioningMode mode = ConditioningMode::kTemporal;
  uint64_t seed = 0;
  uint64_t split_seed = 0;       // patient-level split; keep fixed across commands
  int64_t checkpoint_every = 5000;
  int64_t freeze_steps = 0;      // fine-tuning phase 1 length
  bool augment = true;
  LossReduction loss_reduction = LossReduction::kMean;
  double grad_clip = 1.0;
  torch::ScalarType dtype = torch::kFloat64;
  double pixel_spacing_mm = 1.0;
  AugmentRanges augment_ranges{.max_translate_mm = 4.0};  // desk scale: +-4 px at 1 mm/px
  int64_t log_every = 500;

  void validate() const {
    if (steps < 0 || batch_size < 1 || T < 1 || checkpoint_every < 1)
      throw std::invalid_argument("TrainConfig: counts must be positive");
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (freeze_steps < 0 || freeze_steps > steps)
      throw std::invalid_argument("TrainConfig: freeze_steps must be in [0, steps]");
  }
};

// ---------------------------------------------------------------------------
// Config (de)serialization for checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const UNetConfig& c) {
  nlohmann::ordered_json j;
  j["in_channels"] = c.in_channels;
  j["base_channels"] = c.base_channels;
  j["channel_multipliers"] = c.channel_multipliers;
  j["attention_resolutions"] = c.attention_resolutions;
  j["input_size"] = c.input_size;
  j["conditioning_mode"] = to_string(c.conditioning_mode);
  j["z_dim"] = c.z_dim;
  j["cond_embed_dim"] = c.cond_embed_dim;
  j["groups"] = c.groups;
  j["blocks_per_level"] = c.blocks_per_level;
  j["head_channels"] = c.head_channels;
  j["gn_eps"] = c.gn_eps;
  return j;
}

inline UNetConfig unet_config_from_json(const nlohmann::ordered_json& j) {
  UNetConfig c;
  c.in_channels = j.at("in_channels");
  c.base_channels = j.at("base_channels");
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int64_t>>();
  c.attention_resolutions = j.at("attention_resolutions").get<std::vector<int64_t>>();
  c.input_size = j.at("input_size");
  c.conditioning_mode = j.at("conditioning_mode") == "spatial" ? ConditioningMode::kSpatial
                                                               : ConditioningMode::kTemporal;
  c.z_dim = j.at("z_dim");
  c.cond_embed_dim = j.at("cond_embed_dim");
  c.groups = j.at("groups");
  c.blocks_per_level = j.at("blocks_per_level");
  c.head_channels = j.at("head_channels");
  c.gn_eps = j.at("gn_eps");
  return c;
}

inline nlohmann::ordered_json to_json(const EncoderConfig& c) {
  nlohmann::ordered_json j;
  j["in_channels"] = c.in_channels;
  j["base_channels"] = c.base_channels;
  j["stage_multipliers"] = c.stage_multipliers;
  j["input_size"] = c.input_size;
  j["z_dim"] = c.z_dim;
  j["groups"] = c.groups;
  j["gn_eps"] = c.gn_eps;
  return j;
}

inline EncoderConfig encoder_config_from_json(const nlohmann::ordered_json& j) {
  EncoderConfig c;
  c.in_channels = j.at("in_channels");
  c.base_channels = j.at("base_channels");
  c.stage_multipliers = j.at("stage_multipliers").get<std::vector<int64_t>>();
  c.input_size = j.at("input_size");
  c.z_dim = j.at("z_dim");
  c.groups = j.at("groups");
  c.gn_eps = j.at("gn_eps");
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["T"] = c.T;
  j["beta_start"] = c.beta_start;
  j["beta_end"] = c.beta_end;
  j["strategy"] = to_string(c.strategy);
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["split_seed"] = c.split_seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["freeze_steps"] = c.freeze_steps;
  j["augment"] = c.augment;
  j["loss_reduction"] = c.loss_reduction == LossReduction::kMean ? "mean" : "sum";
  j["grad_clip"] = c.grad_clip;
  j["dtype"] = c.dtype == torch::kFloat64 ? "float64" : "float32";
  j["pixel_spacing_mm"] = c.pixel_spacing_mm;
  j["max_translate_mm"] = c.augment_ranges.max_translate_mm;
  return j;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Noise-prediction objective over a batch of pairs. Draws t uniform in [1, T]
// and eps ~ N(0, I) per sample, noises x_b, conditions on z = encode(x_a)
// (and n_b in temporal mode), and scores the prediction against eps.
template <typename PredictFn, typename EncodeFn>
torch::Tensor loss_simple_batch(PredictFn&& predict, EncodeFn&& encode, const torch::Tensor& xa,
                                const torch::Tensor& xb, const std::optional<torch::Tensor>& nb,
                                const NoiseSchedule& s, at::Generator& gen,
                                LossReduction red = LossReduction::kMean) {
  const int64_t bsz = xa.size(0);
  auto t = torch::randint(1, s.timesteps() + 1, {bsz}, gen, torch::TensorOptions().dtype(torch::kLong));
  auto eps = torch::randn(xb.sizes(), gen, xb.options());
  auto xbt = forward_diffuse_batch(xb, t, eps, s);
  auto z = encode(xa);
  auto eps_hat = predict(xbt, t, z, nb);
  auto diff2 = (eps_hat - eps).pow(2).flatten(1);
  auto per_sample = red == LossReduction::kMean ? diff2.mean(1) : diff2.sum(1);
  return per_sample.mean();
}

inline torch::Tensor loss_simple(DenoiserNet& net, SemanticEncoder& enc, const PairSample& pair,
                                 const NoiseSchedule& s, at::Generator& gen,
                                 LossReduction red = LossReduction::kMean) {
  const bool temporal = net->config().conditioning_mode == ConditioningMode::kTemporal;
  const auto dtype = net->parameters()[0].dtype();
  auto xa = pair.x_a.unsqueeze(0).unsqueeze(0).to(dtype);
  auto xb = pair.x_b.unsqueeze(0).unsqueeze(0).to(dtype);
  std::optional<torch::Tensor> nb;
  if (temporal) nb = torch::tensor({pair.n_b}, torch::kFloat64);
  auto predict = [&](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& z,
                     const std::optional<torch::Tensor>& n) { return net->forward(x, t, z, n); };
  auto encode_fn = [&](const torch::Tensor& x) { return enc->forward(x); };
  return loss_simple_batch(predict, encode_fn, xa, xb, nb, s, gen, red);
}

// ---------------------------------------------------------------------------
// Cohort preparation
// ---------------------------------------------------------------------------

inline void preprocess_cohort(CohortManifest& m, double pixel_spacing_mm, int64_t target_size,
                              double target_spacing_mm) {
  load_images(m);
  for (auto& r : m.records)
    for (auto& s : r.scans)
      s.image = preprocess(s.image, pixel_spacing_mm, target_size, target_spacing_mm);
}

inline std::optional<int> task_label(const ScanRecord& r, OutcomeTask task) {
  switch (task) {
    case OutcomeTask::kSynthetic:
      return r.synthetic_label;
    case OutcomeTask::kNihss24:
      if (r.nihss_admission && r.nihss_24h)
        return nihss_improved(*r.nihss_admission, *r.nihss_24h) ? 1 : 0;
      return std::nullopt;
    default:
      if (r.mrs_discharge) return mrs_good(*r.mrs_discharge) ? 1 : 0;
      return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct TrainLogger {
  std::ofstream os;
  explicit TrainLogger(const std::string& path) : os(path) {
    if (!os) throw DataError("cannot open training log: " + path);
  }
  void record(const nlohmann::ordered_json& j) { os << j.dump() << "\n"; }
};

struct PretrainResult {
  DenoiserNet net{nullptr};
  SemanticEncoder encoder{nullptr};
  std::string checkpoint_path;
  std::vector<double> losses;
};

inline Checkpoint make_pretrain_checkpoint(const DenoiserNet& net, const SemanticEncoder& enc,
                                           const TrainConfig& tc) {
  Checkpoint ckpt;
  ckpt.config["kind"] = "pretrain";
  ckpt.config["unet"] = to_json(net->config());
  ckpt.config["encoder"] = to_json(enc->config());
  ckpt.config["train"] = to_json(tc);
  add_module_section(ckpt, "denoiser", *net);
  add_module_section(ckpt, "encoder", *enc);
  return ckpt;
}

inline PretrainResult pretrain(const TrainConfig& tc, UNetConfig ucfg, EncoderConfig ecfg,
                               const CohortManifest& manifest, const std::string& out_dir) {
  tc.validate();
  ucfg.conditioning_mode = tc.mode;
  ucfg.z_dim = ecfg.z_dim;
  ucfg.validate();
  std::filesystem::create_directories(out_dir);
  TrainLogger log((std::filesystem::path(out_dir) / "pretrain_log.jsonl").string());

  std::vector<const ScanRecord*> train_recs;
  int64_t single_scan = 0;
  for (const auto& r : manifest.records) {
    if (is_test_patient(r.patient_id, tc.split_seed)) continue;
    train_recs.push_back(&r);
    single_scan += r.scans.size() == 1;  // these degrade pair sampling to same-scan views
  }
  if (train_recs.empty()) throw DataError("pretrain: no training patients after split");
  {
    nlohmann::ordered_json j;
    j["event"] = "cohort";
    j["n_train_patients"] = train_recs.size();
    j["n_single_scan"] = single_scan;
    log.record(j);
  }

  const auto schedule = build_schedule(tc.T, tc.beta_start, tc.beta_end);
  auto net = build_unet(ucfg, derive_seed(tc.seed, 10));
  auto enc = build_encoder(ecfg, derive_seed(tc.seed, 11));
  net->to(tc.dtype);
  enc->to(tc.dtype);
  net->train();
  enc->train();

  std::vector<torch::Tensor> params = net->parameters();
  for (auto& p : enc->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params,
                          torch::optim::AdamWOptions(tc.learning_rate).weight_decay(tc.weight_decay));

  std::mt19937_64 data_rng(derive_seed(tc.seed, 1));
  auto gen = make_generator(derive_seed(tc.seed, 2));
  const bool temporal = tc.mode == ConditioningMode::kTemporal;

  PretrainResult out;
  out.losses.reserve(static_cast<size_t>(tc.steps));
  double last_grad_norm = 0.0;
  for (int64_t step = 1; step <= tc.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<torch::Tensor> xas, xbs;
    std::vector<double> nbs;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      const auto& rec = *train_recs[uniform_index(data_rng, train_recs.size())];
      auto pair = sample_pair(rec, tc.strategy, data_rng, tc.augment, tc.augment_ranges,
                              tc.pixel_spacing_mm);
      xas.push_back(pair.x_a);
      xbs.push_back(pair.x_b);
      nbs.push_back(pair.n_b);
    }
    auto xa = torch::stack(xas).unsqueeze(1).to(tc.dtype);
    auto xb = torch::stack(xbs).unsqueeze(1).to(tc.dtype);
    std::optional<torch::Tensor> nb;
    if (temporal)
      nb = torch::from_blob(nbs.data(), {tc.batch_size}, torch::kFloat64).clone();

    auto predict = [&](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& z,
                       const std::optional<torch::Tensor>& n) { return net->forward(x, t, z, n); };
    auto encode_fn = [&](const torch::Tensor& x) { return enc->forward(x); };
    auto loss = loss_simple_batch(predict, encode_fn, xa, xb, nb, schedule, gen, tc.loss_reduction);
    const double loss_v = loss.item<double>();

    if (!std::isfinite(loss_v)) {
      nlohmann::ordered_json j;
      j["event"] = "nan_abort";
      j["step"] = step;
      j["lr"] = tc.learning_rate;
      j["grad_norm"] = last_grad_norm;
      log.record(j);
      throw NumericalError("pretrain: non-finite loss at step " + std::to_string(step) +
                           " (lr=" + std::to_string(tc.learning_rate) +
                           ", last grad_norm=" + std::to_string(last_grad_norm) + ")");
    }

    opt.zero_grad();
    loss.backward();
    last_grad_norm = torch::nn::utils::clip_grad_norm_(params, tc.grad_clip);
    opt.step();

    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = loss_v;
    j["lr"] = tc.learning_rate;
    j["grad_norm"] = last_grad_norm;
    j["wall_ms"] = wall_ms;
    log.record(j);
    out.losses.push_back(loss_v);
    if (tc.log_every > 0 && step % tc.log_every == 0)
      std::fprintf(stderr, "[pretrain] step %lld/%lld loss %.4f\n", static_cast<long long>(step),
                   static_cast<long long>(tc.steps), loss_v);

    if (step % tc.checkpoint_every == 0 && step != tc.steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "pretrain_step%08lld.ckpt", static_cast<long long>(step));
      save_checkpoint((std::filesystem::path(out_dir) / name).string(),
                      make_pretrain_checkpoint(net, enc, tc));
    }
  }

  out.checkpoint_path = (std::filesystem::path(out_dir) / "pretrain_final.ckpt").string();
  save_checkpoint(out.checkpoint_path, make_pretrain_checkpoint(net, enc, tc));
  out.net = net;
  out.encoder = enc;
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning (two-phase) and direct training
// ---------------------------------------------------------------------------

struct FinetuneResult {
  SemanticEncoder encoder{nullptr};
  OutcomeHead head{nullptr};
  std::string checkpoint_path;
  std::vector<std::pair<int64_t, double>> val_auc_history;
};

inline Checkpoint make_finetune_checkpoint(const SemanticEncoder& enc, const OutcomeHead& head,
                                           const TrainConfig& tc, OutcomeTask task) {
  Checkpoint ckpt;
  ckpt.config["kind"] = "finetune";
  ckpt.config["task"] = to_string(task);
  ckpt.config["encoder"] = to_json(enc->config());
  ckpt.config["train"] = to_json(tc);
  add_module_section(ckpt, "encoder", *enc);
  add_module_section(ckpt, "head", *head);
  return ckpt;
}

// Phase 1 freezes everything except the outcome head and the encoder's final
// projection; phase 2 trains all encoder weights. Pass no base checkpoint for
// direct (from scratch) training.
inline FinetuneResult finetune(const TrainConfig& tc, EncoderConfig ecfg,
                               const std::optional<Checkpoint>& base, OutcomeTask task,
                               const CohortManifest& manifest, const std::string& out_dir,
                               int val_fold = 0) {
  tc.validate();
  std::filesystem::create_directories(out_dir);
  TrainLogger log((std::filesystem::path(out_dir) / "finetune_log.jsonl").string());

  struct Labeled {
    const ScanRecord* rec;
    int label;
  };
  std::vector<Labeled> train, val;
  for (const auto& r : manifest.records) {
    if (is_test_patient(r.patient_id, tc.split_seed)) continue;
    const auto y = task_label(r, task);
    if (!y.has_value()) continue;
    if (cv_fold(r.patient_id, tc.split_seed) == val_fold)
      val.push_back({&r, *y});
    else
      train.push_back({&r, *y});
  }
  if (train.empty()) throw DataError("finetune: no labeled training rows for task");

  SemanticEncoder enc{nullptr};
  if (base.has_value()) {
    ecfg = encoder_config_from_json(base->config.at("encoder"));
    enc = build_encoder(ecfg, derive_seed(tc.seed, 11));
    load_module_section(*base, "encoder", *enc);
  } else {
    enc = build_encoder(ecfg, derive_seed(tc.seed, 11));
  }
  auto head = build_head(ecfg.z_dim, task, derive_seed(tc.seed, 12));
  enc->to(tc.dtype);
  head->to(tc.dtype);
  enc->train();
  head->train();

  std::mt19937_64 data_rng(derive_seed(tc.seed, 1));

  auto head_params = head->parameters();
  auto fc_params = enc->final_projection()->parameters();
  std::vector<torch::Tensor> phase1_params = head_params;
  for (auto& p : fc_params) phase1_params.push_back(p);
  std::vector<torch::Tensor> all_params = head_params;
  for (auto& p : enc->parameters()) all_params.push_back(p);

  auto make_opt = [&](std::vector<torch::Tensor>& ps) {
    return std::make_unique<torch::optim::AdamW>(
        ps, torch::optim::AdamWOptions(tc.learning_rate).weight_decay(tc.weight_decay));
  };
  auto set_frozen = [&](bool frozen) {
    for (auto& p : enc->parameters()) p.set_requires_grad(!frozen);
    for (auto& p : fc_params) p.set_requires_grad(true);
  };
  bool phase1 = tc.freeze_steps > 0;
  set_frozen(phase1);
  auto opt = phase1 ? make_opt(phase1_params) : make_opt(all_params);

  auto eval_auc = [&](const std::vector<Labeled>& rows) -> std::optional<double> {
    torch::NoGradGuard ng;
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& row : rows) {
      auto z = enc->forward(
          row.rec->scans.front().image.unsqueeze(0).unsqueeze(0).to(tc.dtype));
      scores.push_back(torch::sigmoid(head(z)).item<double>());
      labels.push_back(row.label);
    }
    bool has0 = false, has1 = false;
    for (const int l : labels) (l != 0 ? has1 : has0) = true;
    if (!has0 || !has1) return std::nullopt;
    return auc(scores, labels);
  };

  const int64_t epoch_len =
      std::max<int64_t>(1, static_cast<int64_t>(train.size()) / tc.batch_size);
  FinetuneResult out;
  for (int64_t step = 1; step <= tc.steps; ++step) {
    if (phase1 && step > tc.freeze_steps) {
      phase1 = false;
      set_frozen(false);
      opt = make_opt(all_params);
    }
    std::vector<torch::Tensor> xs;
    std::vector<double> ys;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      const auto& row = train[uniform_index(data_rng, train.size())];
      auto img = row.rec->scans.front().image;  // earliest scan
      if (tc.augment)
        img = augment(img, draw_augment_params(data_rng, tc.augment_ranges), tc.pixel_spacing_mm);
      xs.push_back(img);
      ys.push_back(static_cast<double>(row.label));
    }
    auto x = torch::stack(xs).unsqueeze(1).to(tc.dtype);
    auto y = torch::from_blob(ys.data(), {tc.batch_size}, torch::kFloat64).clone().to(tc.dtype);
    auto logits = head(enc->forward(x));
    auto loss = torch::binary_cross_entropy_with_logits(logits, y);
    const double loss_v = loss.item<double>();
    if (!std::isfinite(loss_v)) {
      nlohmann::ordered_json j;
      j["event"] = "nan_abort";
      j["step"] = step;
      j["lr"] = tc.learning_rate;
      log.record(j);
      throw NumericalError("finetune: non-finite loss at step " + std::to_string(step));
    }

    opt->zero_grad();
    loss.backward();
    const double grad_norm = torch::nn::utils::clip_grad_norm_(
        phase1 ? phase1_params : all_params, tc.grad_clip);
    opt->step();

    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = loss_v;
    j["lr"] = tc.learning_rate;
    j["grad_norm"] = grad_norm;
    j["phase"] = phase1 ? 1 : 2;
    if (step % epoch_len == 0 || step == tc.steps) {
      if (const auto va = eval_auc(val); va.has_value()) {
        j["val_auc"] = *va;
        out.val_auc_history.emplace_back(step, *va);
      }
    }
    log.record(j);
    if (tc.log_every > 0 && step % tc.log_every == 0)
      std::fprintf(stderr, "[finetune] step %lld/%lld loss %.4f\n", static_cast<long long>(step),
                   static_cast<long long>(tc.steps), loss_v);
  }

  out.checkpoint_path = (std::filesystem::path(out_dir) / "finetune_final.ckpt").string();
  save_checkpoint(out.checkpoint_path, make_finetune_checkpoint(enc, head, tc, task));
  out.encoder = enc;
  out.head = head;
  return out;
}

// ---------------------------------------------------------------------------
// Held-out evaluation helpers
// ---------------------------------------------------------------------------

// Scores on the earliest scan of each record that has a label for the task.
inline std::pair<std::vector<double>, std::vector<int>> score_records(
    SemanticEncoder& enc, OutcomeHead& head, const std::vector<const ScanRecord*>& records,
    OutcomeTask task) {
  torch::NoGradGuard ng;
  const auto dtype = enc->parameters()[0].dtype();
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto* r : records) {
    const auto y = task_label(*r, task);
    if (!y.has_value()) continue;
    auto z = enc->forward(r->scans.front().image.unsqueeze(0).unsqueeze(0).to(dtype));
    scores.push_back(torch::sigmoid(head(z)).item<double>());
    labels.push_back(*y);
  }
  return {scores, labels};
}

struct ReconQuality {
  double fid = 0.0;
  double mse = 0.0;
  int64_t n = 0;
};

// Encode each record's earliest scan, reconstruct its latest scan at that
// scan's acquisition time, and compare against the real images.
inline ReconQuality evaluate_reconstruction(DenoiserNet& net, SemanticEncoder& enc,
                                            const std::vector<const ScanRecord*>& records,
                                            const NoiseSchedule& schedule, int64_t recon_steps,
                                            uint64_t seed) {
  torch::NoGradGuard ng;
  const bool temporal = net->config().conditioning_mode == ConditioningMode::kTemporal;
  auto gen = make_generator(derive_seed(seed, 3));
  std::vector<torch::Tensor> real, fake;
  for (const auto* r : records) {
    const auto& src = r->scans.front();
    const auto& tgt = r->scans.back();
    auto z = encode(enc, src.image);
    auto start = torch::randn(tgt.image.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64));
    std::optional<double> n;
    if (temporal) n = tgt.time_minutes;
    fake.push_back(reconstruct(start, z, n, net, schedule, recon_steps, gen));
    real.push_back(tgt.image.to(torch::kFloat64));
  }
  ReconQuality q;
  q.n = static_cast<int64_t>(real.size());
  if (q.n == 0) return q;
  auto real_t = torch::stack(real).unsqueeze(1);
  auto fake_t = torch::stack(fake).unsqueeze(1);
  q.mse = mse(fake_t, real_t);
  FidEmbedder emb;
  q.fid = fid(emb(real_t), emb(fake_t));
  return q;
}

}  // namespace longidiff
