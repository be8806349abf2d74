// Command-line entry points for the longitudinal diffusion autoencoder:
// synth, pretrain, finetune, eval, reconstruct.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "longidiff/longidiff.hpp"

namespace fs = std::filesystem;
using namespace longidiff;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_effective_config(const CLI::App* cmd) {
  std::cout << "# effective config (" << cmd->get_name() << ")\n";
  for (const auto* opt : cmd->get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--config") continue;
    std::string value = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    if (value.empty()) value = "\"\"";
    std::cout << opt->get_name() << " = " << value << "\n";
  }
  std::cout.flush();
}

PairStrategy parse_strategy(const std::string& s) {
  if (s == "same_time") return PairStrategy::kSameTime;
  if (s == "earliest_to_later") return PairStrategy::kEarliestToLater;
  if (s == "any_forward") return PairStrategy::kAnyForward;
  if (s == "any_pair") return PairStrategy::kAnyPair;
  throw UsageError("unknown strategy: " + s);
}

torch::ScalarType parse_dtype(const std::string& s) {
  if (s == "float64") return torch::kFloat64;
  if (s == "float32") return torch::kFloat32;
  throw UsageError("unknown dtype: " + s);
}

OutcomeTask parse_task(const std::string& s) {
  if (s == "synthetic") return OutcomeTask::kSynthetic;
  if (s == "nihss24") return OutcomeTask::kNihss24;
  if (s == "mrs") return OutcomeTask::kMrsDischarge;
  throw UsageError("unknown task: " + s);
}

std::vector<double> parse_times(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  if (out.empty()) throw UsageError("--times: no values given");
  return out;
}

CohortManifest load_cohort(const std::string& manifest_path, double spacing, int64_t size) {
  auto m = read_manifest(manifest_path);
  preprocess_cohort(m, spacing, size, spacing);
  return m;
}

// Shared trainer knobs. Defaults are desk scale.
struct TrainFlags {
  std::string manifest;
  std::string out = "out";
  int64_t steps = 20000;
  int64_t batch = 16;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int64_t T = 1000;
  uint64_t seed = 0;
  uint64_t split_seed = 0;
  int64_t checkpoint_every = 5000;
  std::string dtype = "float64";
  std::string loss_reduction = "mean";
  bool no_augment = false;
  double pixel_spacing = 1.0;
  int64_t image_size = 32;

  void add_common(CLI::App* cmd) {
    cmd->add_option("--manifest", manifest, "Cohort manifest CSV")->required();
    cmd->add_option("--out", out, "Output directory")->capture_default_str();
    cmd->add_option("--steps", steps, "Optimization steps")->capture_default_str();
    cmd->add_option("--batch", batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--lr", lr, "Learning rate")->capture_default_str();
    cmd->add_option("--weight-decay", weight_decay, "Decoupled weight decay")->capture_default_str();
    cmd->add_option("--T", T, "Diffusion timesteps")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--seed", seed, "Run seed")->capture_default_str();
    cmd->add_option("--split-seed", split_seed, "Patient split seed")->capture_default_str();
    cmd->add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval")->capture_default_str();
    cmd->add_option("--dtype", dtype, "float64|float32")->capture_default_str();
    cmd->add_option("--loss-reduction", loss_reduction, "mean|sum")->capture_default_str();
    cmd->add_flag("--no-augment", no_augment, "Disable training-time augmentation");
    cmd->add_option("--pixel-spacing", pixel_spacing, "Pixel spacing, mm")->capture_default_str();
    cmd->add_option("--image-size", image_size, "Model input size")->capture_default_str();
  }

  TrainConfig to_config() const {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = batch;
    tc.learning_rate = lr;
    tc.weight_decay = weight_decay;
    tc.T = T;
    tc.seed = seed;
    tc.split_seed = split_seed;
    tc.checkpoint_every = checkpoint_every;
    tc.augment = !no_augment;
    tc.loss_reduction = loss_reduction == "sum" ? LossReduction::kSum : LossReduction::kMean;
    tc.dtype = parse_dtype(dtype);
    tc.pixel_spacing_mm = pixel_spacing;
    return tc;
  }
};

int run(int argc, char** argv) {
  apply_thread_cap();

  CLI::App app{"Longitudinal diffusion autoencoder for lesion outcome prediction"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Key-value config file; flags override")->configurable(false);
  app.allow_config_extras(false);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Generate a synthetic longitudinal lesion cohort");
  int64_t synth_patients = 200;
  uint64_t synth_seed = 0;
  std::string synth_out = "cohort";
  int64_t synth_size = 32;
  synth->add_option("--patients", synth_patients, "Number of patients")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
  synth->add_option("--image-size", synth_size, "Image side length")->capture_default_str();

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "Self-supervised diffusion pretraining");
  TrainFlags pre_flags;
  pre_flags.add_common(pre);
  std::string pre_mode = "spatiotemporal";
  std::string pre_strategy;
  pre->add_option("--mode", pre_mode, "spatial|spatiotemporal")->capture_default_str();
  pre->add_option("--strategy", pre_strategy,
                  "same_time|earliest_to_later|any_forward|any_pair (spatial forces same_time)");

  // ---- finetune ----
  auto* ft = app.add_subcommand("finetune", "Fine-tune the encoder for outcome prediction");
  TrainFlags ft_flags;
  ft_flags.steps = 10000;
  ft_flags.lr = 1e-4;
  ft_flags.add_common(ft);
  std::string ft_checkpoint, ft_task = "synthetic";
  bool ft_scratch = false;
  int64_t ft_freeze = -1;
  int ft_fold = 0;
  ft->add_option("--checkpoint", ft_checkpoint, "Pretraining checkpoint to start from");
  ft->add_flag("--from-scratch", ft_scratch, "Direct training without pretraining");
  ft->add_option("--task", ft_task, "synthetic|nihss24|mrs")->capture_default_str();
  ft->add_option("--freeze-steps", ft_freeze, "Phase-1 length; -1 means 10% of steps")
      ->capture_default_str();
  ft->add_option("--fold", ft_fold, "Validation fold, 0..4")->capture_default_str();

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "Evaluate on the held-out test split");
  std::string ev_manifest, ev_checkpoint, ev_diffusion, ev_out = "report.json";
  std::vector<std::string> ev_compare;
  uint64_t ev_seed = 0, ev_split_seed = 0;
  int64_t ev_recon_steps = -1, ev_perms = 1000, ev_image_size = 32;
  double ev_spacing = 1.0;
  ev->add_option("--manifest", ev_manifest, "Cohort manifest CSV")->required();
  ev->add_option("--checkpoint", ev_checkpoint, "Fine-tuned classifier checkpoint");
  ev->add_option("--diffusion", ev_diffusion, "Pretraining checkpoint for FID/MSE")->required();
  ev->add_option("--compare", ev_compare, "Two fine-tuned checkpoints to compare")->expected(2);
  ev->add_option("--out", ev_out, "Report path")->capture_default_str();
  ev->add_option("--seed", ev_seed, "Evaluation seed")->capture_default_str();
  ev->add_option("--split-seed", ev_split_seed, "Patient split seed")->capture_default_str();
  ev->add_option("--recon-steps", ev_recon_steps, "Reverse steps for reconstruction metrics; -1 = full T")
      ->capture_default_str();
  ev->add_option("--permutations", ev_perms, "Permutations for the AUC test")->capture_default_str();
  ev->add_option("--image-size", ev_image_size, "Model input size")->capture_default_str();
  ev->add_option("--pixel-spacing", ev_spacing, "Pixel spacing, mm")->capture_default_str();

  // ---- reconstruct ----
  auto* rc = app.add_subcommand("reconstruct", "Write original/reconstruction image grids");
  std::string rc_manifest, rc_checkpoint, rc_out = "recon", rc_times, rc_ids, rc_split = "test";
  uint64_t rc_seed = 0, rc_split_seed = 0;
  int64_t rc_limit = 8, rc_steps = -1, rc_image_size = 32;
  double rc_spacing = 1.0;
  bool rc_allow_backward = false, rc_deterministic = false;
  rc->add_option("--manifest", rc_manifest, "Cohort manifest CSV")->required();
  rc->add_option("--checkpoint", rc_checkpoint, "Pretraining checkpoint")->required();
  rc->add_option("--times", rc_times, "Comma-separated target times in minutes; 'source' reuses the input's time")
      ->required();
  rc->add_option("--out", rc_out, "Output directory")->capture_default_str();
  rc->add_option("--ids", rc_ids, "Comma-separated patient ids (default: from --split)");
  rc->add_option("--split", rc_split, "test|train pool when --ids is absent")->capture_default_str();
  rc->add_option("--limit", rc_limit, "Max inputs when --ids is absent")->capture_default_str();
  rc->add_option("--seed", rc_seed, "Sampling seed")->capture_default_str();
  rc->add_option("--split-seed", rc_split_seed, "Patient split seed")->capture_default_str();
  rc->add_option("--recon-steps", rc_steps, "Reverse steps; -1 = full T")->capture_default_str();
  rc->add_option("--image-size", rc_image_size, "Model input size")->capture_default_str();
  rc->add_option("--pixel-spacing", rc_spacing, "Pixel spacing, mm")->capture_default_str();
  rc->add_flag("--allow-backward", rc_allow_backward,
               "Permit target times earlier than the source scan in spatiotemporal mode");
  rc->add_flag("--deterministic", rc_deterministic, "Zero-noise rescaled reverse steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return 2;
  }

  // ------------------------------------------------------------------ synth
  if (synth->parsed()) {
    print_effective_config(synth);
    PhantomSpec spec;
    spec.image_size = synth_size;
    const auto m = generate_cohort(synth_patients, synth_seed, spec, synth_out);
    std::cout << "wrote " << m.records.size() << " patients to " << synth_out << "/manifest.csv\n";
    return 0;
  }

  // --------------------------------------------------------------- pretrain
  if (pre->parsed()) {
    print_effective_config(pre);
    auto tc = pre_flags.to_config();
    if (pre_mode == "spatial") {
      tc.mode = ConditioningMode::kSpatial;
      if (!pre_strategy.empty() && pre_strategy != "same_time")
        throw UsageError("spatial mode forces --strategy same_time");
      tc.strategy = PairStrategy::kSameTime;
    } else if (pre_mode == "spatiotemporal") {
      tc.mode = ConditioningMode::kTemporal;
      tc.strategy = pre_strategy.empty() ? PairStrategy::kEarliestToLater
                                         : parse_strategy(pre_strategy);
    } else {
      throw UsageError("unknown mode: " + pre_mode);
    }
    auto m = load_cohort(pre_flags.manifest, pre_flags.pixel_spacing, pre_flags.image_size);
    UNetConfig ucfg;
    ucfg.input_size = pre_flags.image_size;
    EncoderConfig ecfg;
    ecfg.input_size = pre_flags.image_size;
    const auto result = pretrain(tc, ucfg, ecfg, m, pre_flags.out);
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    return 0;
  }

  // --------------------------------------------------------------- finetune
  if (ft->parsed()) {
    print_effective_config(ft);
    if (ft_scratch != ft_checkpoint.empty())
      throw UsageError("finetune needs exactly one of --checkpoint or --from-scratch");
    auto tc = ft_flags.to_config();
    tc.freeze_steps = ft_scratch ? 0 : (ft_freeze >= 0 ? ft_freeze : ft_flags.steps / 10);
    const auto task = parse_task(ft_task);
    auto m = load_cohort(ft_flags.manifest, ft_flags.pixel_spacing, ft_flags.image_size);
    std::optional<Checkpoint> base;
    if (!ft_scratch) base = load_checkpoint(ft_checkpoint);
    EncoderConfig ecfg;
    ecfg.input_size = ft_flags.image_size;
    const auto result = finetune(tc, ecfg, base, task, m, ft_flags.out, ft_fold);
    for (const auto& [step, va] : result.val_auc_history)
      std::cout << "val_auc step=" << step << " auc=" << va << "\n";
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    return 0;
  }

  // ------------------------------------------------------------------- eval
  if (ev->parsed()) {
    print_effective_config(ev);
    if (ev_checkpoint.empty() && ev_compare.empty())
      throw UsageError("eval needs --checkpoint or --compare A B");
    auto m = load_cohort(ev_manifest, ev_spacing, ev_image_size);
    std::vector<const ScanRecord*> test_recs;
    for (const auto& r : m.records)
      if (is_test_patient(r.patient_id, ev_split_seed)) test_recs.push_back(&r);
    if (test_recs.empty()) throw DataError("eval: empty test split");
    std::printf("split_hash: %016llx (n_test=%zu)\n",
                static_cast<unsigned long long>(split_hash(m, ev_split_seed)), test_recs.size());

    auto load_classifier = [&](const std::string& path, SemanticEncoder& enc, OutcomeHead& head,
                               OutcomeTask& task) {
      const auto ckpt = load_checkpoint(path);
      if (!has_section(ckpt, "head")) throw DataError("not a fine-tuned checkpoint: " + path);
      const auto ecfg = encoder_config_from_json(ckpt.config.at("encoder"));
      task = parse_task(ckpt.config.at("task").get<std::string>());
      enc = build_encoder(ecfg, 0);
      head = build_head(ecfg.z_dim, task, 0);
      load_module_section(ckpt, "encoder", *enc);
      load_module_section(ckpt, "head", *head);
    };

    const std::string primary = ev_compare.empty() ? ev_checkpoint : ev_compare[0];
    SemanticEncoder enc{nullptr};
    OutcomeHead head{nullptr};
    OutcomeTask task{};
    load_classifier(primary, enc, head, task);
    const auto [scores, labels] = score_records(enc, head, test_recs, task);
    if (scores.empty()) throw DataError("eval: no labeled test rows for task");

    MetricReport report;
    report.n = static_cast<int64_t>(scores.size());
    report.seed = ev_seed;
    try {
      report.auc = auc(scores, labels);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("eval: ") + e.what());
    }
    std::tie(report.acc, report.f1) = acc_f1(scores, labels);

    const auto dckpt = load_checkpoint(ev_diffusion);
    const auto ucfg = unet_config_from_json(dckpt.config.at("unet"));
    const auto decfg = encoder_config_from_json(dckpt.config.at("encoder"));
    auto dnet = build_unet(ucfg, 0);
    auto denc = build_encoder(decfg, 0);
    const auto tj = dckpt.config.at("train");
    if (tj.value("dtype", "float64") == "float32") {
      dnet->to(torch::kFloat32);
      denc->to(torch::kFloat32);
    }
    load_module_section(dckpt, "denoiser", *dnet);
    load_module_section(dckpt, "encoder", *denc);
    const auto schedule = build_schedule(tj.at("T").get<int64_t>(), tj.at("beta_start").get<double>(),
                                         tj.at("beta_end").get<double>());
    const int64_t recon_steps = ev_recon_steps < 0 ? schedule.timesteps() : ev_recon_steps;
    const auto rq = evaluate_reconstruction(dnet, denc, test_recs, schedule, recon_steps, ev_seed);
    report.fid = rq.fid;
    report.mse = rq.mse;

    if (!ev_compare.empty()) {
      SemanticEncoder enc_b{nullptr};
      OutcomeHead head_b{nullptr};
      OutcomeTask task_b{};
      load_classifier(ev_compare[1], enc_b, head_b, task_b);
      const auto [scores_b, labels_b] = score_records(enc_b, head_b, test_recs, task_b);
      if (labels_b != labels) throw DataError("eval: compared models score different test rows");
      report.p_values["auc_a_vs_b"] =
          permutation_test_auc(scores, scores_b, labels, ev_perms, derive_seed(ev_seed, 7));
      report.p_values["auc_b"] = auc(scores_b, labels);
    }

    save_report(report, ev_out);
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
  }

  // ------------------------------------------------------------ reconstruct
  if (rc->parsed()) {
    print_effective_config(rc);
    const auto ckpt = load_checkpoint(rc_checkpoint);
    if (!has_section(ckpt, "denoiser")) throw DataError("not a pretraining checkpoint: " + rc_checkpoint);
    const auto ucfg = unet_config_from_json(ckpt.config.at("unet"));
    const auto ecfg = encoder_config_from_json(ckpt.config.at("encoder"));
    auto net = build_unet(ucfg, 0);
    auto enc = build_encoder(ecfg, 0);
    const auto tj = ckpt.config.at("train");
    if (tj.value("dtype", "float64") == "float32") {
      net->to(torch::kFloat32);
      enc->to(torch::kFloat32);
    }
    load_module_section(ckpt, "denoiser", *net);
    load_module_section(ckpt, "encoder", *enc);
    const auto schedule = build_schedule(tj.at("T").get<int64_t>(), tj.at("beta_start").get<double>(),
                                         tj.at("beta_end").get<double>());
    const bool temporal = ucfg.conditioning_mode == ConditioningMode::kTemporal;

    auto m = load_cohort(rc_manifest, rc_spacing, rc_image_size);
    std::vector<const ScanRecord*> inputs;
    if (!rc_ids.empty()) {
      std::stringstream ss(rc_ids);
      std::string id;
      while (std::getline(ss, id, ',')) {
        const ScanRecord* found = nullptr;
        for (const auto& r : m.records)
          if (r.patient_id == id) found = &r;
        if (found == nullptr) throw DataError("reconstruct: unknown patient id " + id);
        inputs.push_back(found);
      }
    } else {
      for (const auto& r : m.records) {
        if (static_cast<int64_t>(inputs.size()) >= rc_limit) break;
        const bool in_test = is_test_patient(r.patient_id, rc_split_seed);
        if ((rc_split == "test") == in_test) inputs.push_back(&r);
      }
    }
    if (inputs.empty()) throw DataError("reconstruct: no input patients selected");

    fs::create_directories(rc_out);
    std::vector<std::string> time_tokens;
    {
      std::stringstream ss(rc_times);
      std::string tok;
      while (std::getline(ss, tok, ',')) if (!tok.empty()) time_tokens.push_back(tok);
    }
    if (time_tokens.empty()) throw UsageError("--times: no values given");

    int64_t written = 0;
    for (const auto* rec : inputs) {
      const auto& src = rec->scans.front();
      const auto z = encode(enc, src.image);
      for (const auto& tok : time_tokens) {
        const double target_time = tok == "source" ? src.time_minutes : std::stod(tok);
        if (temporal && target_time < src.time_minutes && !rc_allow_backward)
          throw UsageError("reconstruct: target time " + tok +
                           " precedes the source scan; pass --allow-backward to permit");
        auto gen = make_generator(derive_seed(rc_seed, fnv1a64(rec->patient_id + "#" + tok)));
        auto start =
            torch::randn(src.image.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64));
        std::optional<double> n;
        if (temporal) n = target_time;
        const int64_t steps = rc_steps < 0 ? schedule.timesteps() : rc_steps;
        auto recon = reconstruct(start, z, n, net, schedule, steps, gen, rc_deterministic);

        // side-by-side grid, each half normalized to its own robust range
        const int64_t h = src.image.size(0), w = src.image.size(1);
        auto to_display = [](const torch::Tensor& img) {
          const double lo = percentile(img, 0.01);
          const double hi = percentile(img, 0.99);
          const double span = hi > lo ? hi - lo : 1.0;
          return ((img - lo) / span).clamp(0.0, 1.0);
        };
        auto grid = torch::zeros({h, 2 * w + 1}, torch::kFloat64);
        grid.narrow(1, 0, w) = to_display(src.image);
        grid.narrow(1, w, 1) = 1.0;
        grid.narrow(1, w + 1, w) = to_display(recon.to(torch::kFloat64));
        char name[128];
        std::snprintf(name, sizeof(name), "recon_%s_t%s.pgm", rec->patient_id.c_str(), tok.c_str());
        write_pgm((fs::path(rc_out) / name).string(), grid);
        ++written;
      }
    }
    std::cout << "wrote " << written << " grids to " << rc_out << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
