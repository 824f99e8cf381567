#pragma once

// Config-driven pipeline: pretrain -> stats -> unlearn -> eval, plus the gamma sweep.
//
// Every random stream is derived from the master seed, so a config file plus a
// clean output directory fully determines every file written.
//
// Output directory layout:
//   run<r>.vdu                 final checkpoint of pre-training run r
//   run0_epoch<e>.vdu          late checkpoints of run 0 for single-run statistics
//   pretrain.csv               run,seed,epochs,final_loss,fid_heldout
//   stats.vdus                 posterior statistics
//   unlearned.vdu, unlearn_record.csv
//   eval.csv, sweep.csv        report rows (see report.hpp)
//   finetune.csv               fine-tuning reference row of a sweep
//   samples_*.csv, *.svg       generated points with labels

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdu/checkpoints.hpp"
#include "vdu/data.hpp"
#include "vdu/denoiser.hpp"
#include "vdu/eval.hpp"
#include "vdu/report.hpp"
#include "vdu/schedule.hpp"
#include "vdu/training.hpp"
#include "vdu/unlearn.hpp"

namespace vdu {

struct DatasetConfig {
  std::string kind = "ring";  // ring | idx
  int modes = 8;
  double radius = 4.0;
  double std = 0.3;
  long n_train = 8000;
  long n_heldout = 8000;
  std::string train_images, train_labels, heldout_images, heldout_labels;
  bool normalize = true;
};

struct PretrainConfig {
  int runs = 4;
  int warmstart_epochs = 0;  // shared starting point for all runs; 0 starts each run from the initialization
  double warmstart_lr = 1e-3;
  std::optional<double> warmstart_lr_final;
  int epochs = 200;
  double lr = 1e-3;
  std::optional<double> lr_final;
  int batch_size = 128;
  std::optional<double> grad_clip;
  long eval_samples = 2000;
};

struct StatsConfig {
  StatsMode mode = StatsMode::multi_run;
  int checkpoints = 0;  // multi-run: number of runs used, 0 for all
  int k = 4;            // single-run: late checkpoints of run 0
  int spacing = 1;
  std::optional<double> sigma_floor;
};

struct EvalConfig {
  long n_samples = 2000;
  std::set<int> forget_labels = {3};
  std::string classifier = "nearest_mode";  // nearest_mode | trained
  ClassifierTrainConfig classifier_train;
  std::vector<double> gammas = {0.0, 0.1, 0.3, 0.6, 0.8, 1.0};
  int finetune_epochs = 1;  // 0 drops the fine-tuning reference row
  double finetune_eta = 1e-3;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  DatasetConfig dataset;
  ScheduleParams schedule{ScheduleKind::linear, 100, 1e-3, 0.2};
  DenoiserArch arch;
  PretrainConfig pretrain;
  StatsConfig stats;
  VduConfig unlearn;
  EvalConfig eval;
};

/// Sub-seeds of the master seed.
struct Seeds {
  std::uint64_t master = 0;
  std::uint64_t train_data() const { return derive_seed(master, 1); }
  std::uint64_t heldout_data() const { return derive_seed(master, 2); }
  std::uint64_t init() const { return derive_seed(master, 3); }
  std::uint64_t warmstart() const { return derive_seed(master, 4); }
  std::uint64_t unlearn() const { return derive_seed(master, 5); }
  std::uint64_t eval() const { return derive_seed(master, 6); }
  std::uint64_t finetune() const { return derive_seed(master, 7); }
  std::uint64_t classifier() const { return derive_seed(master, 8); }
  std::uint64_t pretrain_eval() const { return derive_seed(master, 9); }
  std::uint64_t run(int r) const { return derive_seed(master, 100 + static_cast<std::uint64_t>(r)); }
};

namespace detail {

using nlohmann::json;

inline void only_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + section + "." + key + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + e.what());
  }
}

inline void read_nullable(const json& j, const char* key, std::optional<double>& out, const std::string& section) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  double v = 0;
  read_opt(j, key, v, section);
  out = v;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.kind == "ring") {
    if (d.modes < 2 || !(d.radius > 0) || !(d.std > 0)) throw ConfigError("ring dataset needs >= 2 modes, radius > 0, std > 0");
    if (d.n_train < 1 || d.n_heldout < 1) throw ConfigError("dataset sizes must be positive");
  } else if (d.kind == "idx") {
    for (const auto* p : {&d.train_images, &d.train_labels, &d.heldout_images, &d.heldout_labels})
      if (p->empty()) throw ConfigError("idx dataset needs train/heldout image and label paths");
  } else {
    throw ConfigError("dataset.kind must be 'ring' or 'idx'");
  }
  (void)make_schedule(c.schedule);
  if (c.arch.hidden_dims.empty()) throw ConfigError("arch.hidden_dims must not be empty");
  (void)c.arch.layout();
  const auto& p = c.pretrain;
  if (p.runs < 1) throw ConfigError("pretrain.runs must be >= 1");
  if (p.epochs < 1 || p.warmstart_epochs < 0) throw ConfigError("pretrain epochs out of range");
  if (!(p.lr > 0) || !(p.warmstart_lr > 0)) throw ConfigError("pretrain learning rates must be positive");
  if (p.batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (p.eval_samples < 2) throw ConfigError("pretrain.eval_samples must be >= 2");
  const auto& s = c.stats;
  if (s.checkpoints < 0 || s.checkpoints > p.runs) throw ConfigError("stats.checkpoints must be in 0..pretrain.runs");
  if (s.k < 2 || s.spacing < 1) throw ConfigError("stats.k must be >= 2 and stats.spacing >= 1");
  if (s.k * s.spacing > p.epochs) throw ConfigError("stats.k * stats.spacing exceeds pretrain.epochs");
  c.unlearn.validate(c.schedule.T);
  const auto& e = c.eval;
  if (e.n_samples < 2) throw ConfigError("eval.n_samples must be >= 2");
  if (e.forget_labels.empty()) throw ConfigError("eval.forget_labels must not be empty");
  if (e.classifier != "nearest_mode" && e.classifier != "trained")
    throw ConfigError("eval.classifier must be 'nearest_mode' or 'trained'");
  if (e.classifier == "nearest_mode" && d.kind != "ring") throw ConfigError("nearest_mode classifier needs a ring dataset");
  for (double g : e.gammas)
    if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("eval.gammas must lie in [0, 1]");
  if (e.finetune_epochs < 0 || !(e.finetune_eta > 0)) throw ConfigError("bad fine-tuning settings");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  detail::only_keys(j, "config", {"seed", "out_dir", "dataset", "schedule", "arch", "pretrain", "stats", "unlearn", "eval"});
  read_opt(j, "seed", c.seed, "config");
  read_opt(j, "out_dir", c.out_dir, "config");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::only_keys(d, "dataset", {"kind", "modes", "radius", "std", "n_train", "n_heldout", "train_images",
                                     "train_labels", "heldout_images", "heldout_labels", "normalize"});
    auto& o = c.dataset;
    read_opt(d, "kind", o.kind, "dataset");
    read_opt(d, "modes", o.modes, "dataset");
    read_opt(d, "radius", o.radius, "dataset");
    read_opt(d, "std", o.std, "dataset");
    read_opt(d, "n_train", o.n_train, "dataset");
    read_opt(d, "n_heldout", o.n_heldout, "dataset");
    read_opt(d, "train_images", o.train_images, "dataset");
    read_opt(d, "train_labels", o.train_labels, "dataset");
    read_opt(d, "heldout_images", o.heldout_images, "dataset");
    read_opt(d, "heldout_labels", o.heldout_labels, "dataset");
    read_opt(d, "normalize", o.normalize, "dataset");
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::only_keys(s, "schedule", {"kind", "T", "beta_start", "beta_end"});
    std::string kind = to_string(c.schedule.kind);
    read_opt(s, "kind", kind, "schedule");
    c.schedule.kind = schedule_kind_from_string(kind);
    read_opt(s, "T", c.schedule.T, "schedule");
    read_opt(s, "beta_start", c.schedule.beta_start, "schedule");
    read_opt(s, "beta_end", c.schedule.beta_end, "schedule");
  }
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    detail::only_keys(a, "arch", {"hidden_dims", "embed_dim", "max_period", "activation"});
    read_opt(a, "hidden_dims", c.arch.hidden_dims, "arch");
    read_opt(a, "embed_dim", c.arch.embed_dim, "arch");
    read_opt(a, "max_period", c.arch.max_period, "arch");
    std::string act = to_string(c.arch.activation);
    read_opt(a, "activation", act, "arch");
    c.arch.activation = activation_from_string(act);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    detail::only_keys(p, "pretrain", {"runs", "warmstart_epochs", "warmstart_lr", "warmstart_lr_final", "epochs", "lr",
                                      "lr_final", "batch_size", "grad_clip", "eval_samples"});
    auto& o = c.pretrain;
    read_opt(p, "runs", o.runs, "pretrain");
    read_opt(p, "warmstart_epochs", o.warmstart_epochs, "pretrain");
    read_opt(p, "warmstart_lr", o.warmstart_lr, "pretrain");
    detail::read_nullable(p, "warmstart_lr_final", o.warmstart_lr_final, "pretrain");
    read_opt(p, "epochs", o.epochs, "pretrain");
    read_opt(p, "lr", o.lr, "pretrain");
    detail::read_nullable(p, "lr_final", o.lr_final, "pretrain");
    read_opt(p, "batch_size", o.batch_size, "pretrain");
    detail::read_nullable(p, "grad_clip", o.grad_clip, "pretrain");
    read_opt(p, "eval_samples", o.eval_samples, "pretrain");
  }
  if (j.contains("stats")) {
    const auto& s = j.at("stats");
    detail::only_keys(s, "stats", {"mode", "checkpoints", "k", "spacing", "sigma_floor"});
    std::string mode = to_string(c.stats.mode);
    read_opt(s, "mode", mode, "stats");
    c.stats.mode = stats_mode_from_string(mode);
    read_opt(s, "checkpoints", c.stats.checkpoints, "stats");
    read_opt(s, "k", c.stats.k, "stats");
    read_opt(s, "spacing", c.stats.spacing, "stats");
    detail::read_nullable(s, "sigma_floor", c.stats.sigma_floor, "stats");
  }
  c.unlearn.t_subsample = default_t_subsample(c.schedule.T);
  if (j.contains("unlearn")) {
    const auto& u = j.at("unlearn");
    detail::only_keys(u, "unlearn", {"gamma", "eta", "epochs", "batch_size", "t_subsample", "grad_clip", "nan_guard"});
    auto& o = c.unlearn;
    read_opt(u, "gamma", o.gamma, "unlearn");
    read_opt(u, "eta", o.eta, "unlearn");
    read_opt(u, "epochs", o.epochs, "unlearn");
    read_opt(u, "batch_size", o.batch_size, "unlearn");
    if (u.contains("t_subsample")) {
      const auto& ts = u.at("t_subsample");
      if (ts.is_string() && ts.get<std::string>() == "all")
        o.t_subsample.reset();
      else if (ts.is_number_integer())
        o.t_subsample = ts.get<int>();
      else
        throw ConfigError("unlearn.t_subsample must be an integer or \"all\"");
    }
    detail::read_nullable(u, "grad_clip", o.grad_clip, "unlearn");
    read_opt(u, "nan_guard", o.nan_guard, "unlearn");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::only_keys(e, "eval", {"n_samples", "forget_labels", "classifier", "classifier_hidden_dims",
                                  "classifier_epochs", "classifier_lr", "gammas", "finetune_epochs", "finetune_eta"});
    auto& o = c.eval;
    read_opt(e, "n_samples", o.n_samples, "eval");
    std::vector<int> forget(o.forget_labels.begin(), o.forget_labels.end());
    read_opt(e, "forget_labels", forget, "eval");
    o.forget_labels = std::set<int>(forget.begin(), forget.end());
    read_opt(e, "classifier", o.classifier, "eval");
    read_opt(e, "classifier_hidden_dims", o.classifier_train.hidden_dims, "eval");
    read_opt(e, "classifier_epochs", o.classifier_train.epochs, "eval");
    read_opt(e, "classifier_lr", o.classifier_train.lr, "eval");
    read_opt(e, "gammas", o.gammas, "eval");
    read_opt(e, "finetune_epochs", o.finetune_epochs, "eval");
    read_opt(e, "finetune_eta", o.finetune_eta, "eval");
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Everything derived from the config before any command runs: data, classifier, schedule.
struct ExperimentContext {
  ExperimentConfig config;
  Seeds seeds;
  LabeledDataset train;
  LabeledDataset heldout;
  Normalization norm;
  NoiseSchedule schedule;
  DenoiserArch arch;
  ClassifierModel classifier;
  Eigen::MatrixXd forget;             // normalized
  Eigen::MatrixXd retain;             // normalized
  Eigen::MatrixXd retain_reference;   // held-out, data space, forget labels removed
  std::string tag;

  std::string path(const std::string& name) const { return (std::filesystem::path(config.out_dir) / name).string(); }
  std::string run_path(int r) const { return path("run" + std::to_string(r) + ".vdu"); }
  std::string late_path(int epoch) const { return path("run0_epoch" + std::to_string(epoch) + ".vdu"); }
  std::vector<int> late_epochs() const {
    std::vector<int> out;
    for (int i = config.stats.k - 1; i >= 0; --i) out.push_back(config.pretrain.epochs - i * config.stats.spacing);
    return out;
  }
};

inline ExperimentContext make_context(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentContext ctx{cfg, Seeds{cfg.seed}, {}, {}, {}, make_schedule(cfg.schedule), cfg.arch, {}, {}, {}, {}, {}};
  const auto& d = cfg.dataset;
  if (d.kind == "ring") {
    const auto spec = MixtureSpec::ring(d.modes, d.radius, d.std);
    ctx.train = sample_mixture(spec, d.n_train, ctx.seeds.train_data());
    ctx.heldout = sample_mixture(spec, d.n_heldout, ctx.seeds.heldout_data());
    ctx.classifier = NearestModeClassifier::from_spec(spec);
    ctx.tag = "ring" + std::to_string(d.modes);
  } else {
    ctx.train = load_idx(d.train_images, d.train_labels);
    ctx.heldout = load_idx(d.heldout_images, d.heldout_labels);
    ctx.tag = "idx";
  }
  ctx.arch.input_dim = static_cast<int>(ctx.train.dim());
  ctx.norm = d.normalize ? Normalization::fit(ctx.train.x) : Normalization::identity(ctx.train.dim());
  if (cfg.eval.classifier == "trained") {
    auto ccfg = cfg.eval.classifier_train;
    ccfg.seed = ctx.seeds.classifier();
    ctx.classifier = train_classifier(ctx.train, ccfg);
  }
  auto [forget, retain] = split_forget(ctx.train, cfg.eval.forget_labels);
  ctx.forget = ctx.norm.normalize(forget.x);
  ctx.retain = ctx.norm.normalize(retain.x);
  ctx.retain_reference = ctx.heldout.points_without(cfg.eval.forget_labels);
  if (ctx.retain_reference.rows() < 2) throw ConfigError("held-out set has too few retained points");
  return ctx;
}

inline void ensure_out_dir(const ExperimentContext& ctx) {
  std::error_code ec;
  std::filesystem::create_directories(ctx.config.out_dir, ec);
  if (ec) throw FormatError(FormatError::Kind::io, "cannot create output directory " + ctx.config.out_dir + ": " + ec.message());
}

inline Checkpoint stored(const Checkpoint& c) { return {c.arch, c.schedule, c.meta, to_storage_precision(c.params)}; }

/// Samples drawn from a normalized-space model and mapped back to data space.
inline Eigen::MatrixXd generate(const ExperimentContext& ctx, const ParamVector& params, Eigen::Index n, std::uint64_t seed) {
  return ctx.norm.denormalize(sample(ctx.schedule, ctx.arch, params, n, seed));
}

struct PretrainRow {
  int run = 0;
  std::uint64_t seed = 0;
  int epochs = 0;
  double final_loss = 0.0;
  double fid_heldout = 0.0;
};

/// Optional shared warm start, then `runs` independent trainings with distinct seeds.
/// Run 0 also keeps its late checkpoints for single-run statistics.
inline std::vector<std::string> cmd_pretrain(const ExperimentContext& ctx, std::vector<PretrainRow>* rows_out = nullptr) {
  ensure_out_dir(ctx);
  const auto& p = ctx.config.pretrain;
  const Eigen::MatrixXd data = ctx.norm.normalize(ctx.train.x);
  ParamVector start = init_params(ctx.arch, ctx.seeds.init());
  if (p.warmstart_epochs > 0) {
    TrainConfig wc{p.warmstart_epochs, p.batch_size, p.warmstart_lr, p.warmstart_lr_final, ctx.seeds.warmstart(), p.grad_clip, ctx.tag};
    DdpmTrainer warm(ctx.schedule, ctx.arch, start, data, wc);
    warm.run();
    start = warm.params();
  }
  std::vector<std::string> paths;
  std::vector<PretrainRow> rows;
  for (int r = 0; r < p.runs; ++r) {
    TrainConfig tc{p.epochs, p.batch_size, p.lr, p.lr_final, ctx.seeds.run(r), p.grad_clip, ctx.tag};
    DdpmTrainer trainer(ctx.schedule, ctx.arch, start, data, tc);
    Checkpoint final_ck;
    if (r == 0) {
      auto late = collect_single_run_checkpoints(trainer, ctx.config.stats.k, ctx.config.stats.spacing);
      for (const auto& c : late) {
        const auto path = ctx.late_path(c.meta.epoch);
        save_checkpoint(path, stored(c));
        paths.push_back(path);
      }
      final_ck = late.back();
    } else {
      trainer.run();
      final_ck = Checkpoint{ctx.arch, ctx.config.schedule, CheckpointMeta{tc.seed, p.epochs, ctx.tag}, trainer.params()};
    }
    final_ck = stored(final_ck);
    save_checkpoint(ctx.run_path(r), final_ck);
    paths.push_back(ctx.run_path(r));
    const Eigen::MatrixXd gen = generate(ctx, final_ck.params, p.eval_samples, ctx.seeds.pretrain_eval());
    rows.push_back({r, tc.seed, p.epochs, trainer.epoch_losses().back(), frechet_in_eval_space(ctx.classifier, gen, ctx.heldout.x)});
  }
  auto f = detail::open_out(ctx.path("pretrain.csv"));
  f << "run,seed,epochs,final_loss,fid_heldout\n";
  for (const auto& row : rows)
    f << row.run << "," << row.seed << "," << row.epochs << "," << format_real(row.final_loss) << ","
      << format_real(row.fid_heldout) << "\n";
  detail::close_out(f, ctx.path("pretrain.csv"));
  if (rows_out) *rows_out = rows;
  return paths;
}

inline std::vector<PretrainRow> read_pretrain_csv(const std::string& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty() || lines.front() != "run,seed,epochs,final_loss,fid_heldout")
    throw FormatError(FormatError::Kind::parse, path + ": missing or unexpected header");
  std::vector<PretrainRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto where = path + ":" + std::to_string(i + 1);
    const auto c = detail::split_csv_line(lines[i]);
    if (c.size() != 5) throw FormatError(FormatError::Kind::parse, where + ": expected 5 columns");
    rows.push_back({static_cast<int>(detail::parse_integer(c[0], where)), detail::parse_unsigned(c[1], where),
                    static_cast<int>(detail::parse_integer(c[2], where)), detail::parse_real(c[3], where),
                    detail::parse_real(c[4], where)});
  }
  return rows;
}

/// Checkpoints selected by the stats section: the first n run files, or run 0's late checkpoints.
inline std::vector<Checkpoint> stats_checkpoints(const ExperimentContext& ctx) {
  std::vector<Checkpoint> cks;
  const auto& s = ctx.config.stats;
  if (s.mode == StatsMode::multi_run) {
    const int n = s.checkpoints == 0 ? ctx.config.pretrain.runs : s.checkpoints;
    for (int r = 0; r < n; ++r) cks.push_back(load_checkpoint(ctx.run_path(r), &ctx.arch));
  } else {
    for (int e : ctx.late_epochs()) cks.push_back(load_checkpoint(ctx.late_path(e), &ctx.arch));
  }
  return cks;
}

inline std::string cmd_stats(const ExperimentContext& ctx) {
  ensure_out_dir(ctx);
  const auto st = estimate_posterior_stats(stats_checkpoints(ctx), ctx.config.stats.sigma_floor, ctx.config.stats.mode);
  save_stats(ctx.path("stats.vdus"), st);
  return ctx.path("stats.vdus");
}

inline Checkpoint load_theta_star(const ExperimentContext& ctx) { return load_checkpoint(ctx.run_path(0), &ctx.arch); }

inline ParamPosteriorStats load_experiment_stats(const ExperimentContext& ctx) {
  auto st = load_stats(ctx.path("stats.vdus"));
  if (!(st.arch == ctx.arch)) throw FormatError(FormatError::Kind::arch_mismatch, "stats architecture differs from the config");
  return st;
}

inline VduConfig unlearn_config(const ExperimentContext& ctx, double gamma) {
  VduConfig vc = ctx.config.unlearn;
  vc.gamma = gamma;
  vc.seed = ctx.seeds.unlearn();
  return vc;
}

/// Runs unlearning at config.unlearn.gamma; writes unlearned.vdu and unlearn_record.csv.
inline UnlearnRunRecord cmd_unlearn(const ExperimentContext& ctx) {
  ensure_out_dir(ctx);
  const auto theta_star = load_theta_star(ctx);
  const auto st = load_experiment_stats(ctx);
  const double gamma = ctx.config.unlearn.gamma;
  auto rec = unlearn(ctx.schedule, ctx.arch, theta_star.params, ctx.forget, st, unlearn_config(ctx, gamma));
  Checkpoint out{ctx.arch, ctx.config.schedule, CheckpointMeta{ctx.seeds.unlearn(), ctx.config.unlearn.epochs, ctx.tag + "-unlearned"},
                 rec.theta_u};
  save_checkpoint(ctx.path("unlearned.vdu"), stored(out));
  write_unlearn_record_csv(ctx.path("unlearn_record.csv"), {{gamma, rec}});
  return rec;
}

inline std::string gamma_tag(double gamma) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", gamma);
  return buf;
}

/// Evaluation of one candidate model against theta_star, reusing theta_star's samples.
struct Evaluator {
  const ExperimentContext& ctx;
  ParamVector theta_star;
  Eigen::MatrixXd samples_pre;
  std::vector<int> labels_pre;

  Evaluator(const ExperimentContext& c, ParamVector star) : ctx(c), theta_star(std::move(star)) {
    if (classifier_input_dim(ctx.classifier) != ctx.arch.input_dim) throw ConfigError("classifier and model dimensions differ");
    samples_pre = generate(ctx, theta_star, ctx.config.eval.n_samples, ctx.seeds.eval());
    labels_pre = classify_batch(ctx.classifier, samples_pre);
  }

  EvalReport operator()(const ParamVector& theta, const std::string& variant, double gamma, std::uint64_t unlearn_seed,
                        Eigen::MatrixXd* samples_out = nullptr) const {
    Eigen::MatrixXd post = generate(ctx, theta, ctx.config.eval.n_samples, ctx.seeds.eval());
    EvalReport r = evaluate_samples(samples_pre, post, ctx.classifier, ctx.retain_reference, ctx.config.eval.forget_labels);
    r.variant = variant;
    r.gamma = gamma;
    r.unlearn_seed = unlearn_seed;
    r.eval_seed = ctx.seeds.eval();
    if (samples_out) *samples_out = std::move(post);
    return r;
  }
};

inline ParamVector finetune_reference(const ExperimentContext& ctx, const ParamVector& theta_star) {
  return finetune_with_retain(ctx.schedule, ctx.arch, theta_star, ctx.retain, ctx.config.eval.finetune_epochs,
                              ctx.config.eval.finetune_eta, ctx.config.unlearn.batch_size, ctx.seeds.finetune());
}

namespace detail {

inline void emit_samples(const ExperimentContext& ctx, const std::string& name, const Eigen::MatrixXd& x) {
  write_samples_csv(ctx.path(name), x, classify_batch(ctx.classifier, x));
}

inline void emit_scatter(const ExperimentContext& ctx, const std::string& name, const std::vector<ScatterPanel>& panels) {
  if (ctx.arch.input_dim != 2) return;
  write_text(ctx.path(name), scatter_svg(panels, *ctx.config.eval.forget_labels.begin()));
}

}  // namespace detail

/// Scores unlearned.vdu (and the fine-tuning reference when enabled); writes eval.csv, sample CSVs and eval.svg.
inline std::vector<EvalReport> cmd_eval(const ExperimentContext& ctx) {
  ensure_out_dir(ctx);
  const auto theta_star = load_theta_star(ctx);
  const auto theta_u = load_checkpoint(ctx.path("unlearned.vdu"), &ctx.arch);
  Evaluator ev(ctx, theta_star.params);
  Eigen::MatrixXd post;
  std::vector<EvalReport> rows{ev(theta_u.params, "vdu", ctx.config.unlearn.gamma, ctx.seeds.unlearn(), &post)};
  detail::emit_samples(ctx, "samples_pretrained.csv", ev.samples_pre);
  detail::emit_samples(ctx, "samples_unlearned.csv", post);
  std::vector<ScatterPanel> panels{{"pre-trained", ev.samples_pre, ev.labels_pre},
                                   {"unlearned", post, classify_batch(ctx.classifier, post)}};
  if (ctx.config.eval.finetune_epochs > 0) {
    Eigen::MatrixXd ft;
    rows.push_back(ev(finetune_reference(ctx, theta_star.params), "finetune", 0.0, ctx.seeds.finetune(), &ft));
    detail::emit_samples(ctx, "samples_finetune.csv", ft);
  }
  write_reports_csv(ctx.path("eval.csv"), rows);
  detail::emit_scatter(ctx, "eval.svg", panels);
  return rows;
}

struct SweepResult {
  std::vector<EvalReport> rows;  // one per gamma, in order
  std::optional<EvalReport> finetune;
  std::vector<std::pair<double, UnlearnRunRecord>> records;
};

/// One unlearn + evaluate per gamma with the same theta_star, stats and seeds.
inline SweepResult gamma_sweep(const ExperimentContext& ctx, const ParamVector& theta_star, const ParamPosteriorStats& st,
                               const std::vector<double>& gammas, bool write_outputs) {
  Evaluator ev(ctx, theta_star);
  SweepResult out;
  std::vector<ScatterPanel> panels{{"pre-trained", ev.samples_pre, ev.labels_pre}};
  if (write_outputs) detail::emit_samples(ctx, "samples_pretrained.csv", ev.samples_pre);
  for (double g : gammas) {
    const auto vc = unlearn_config(ctx, g);
    auto rec = unlearn(ctx.schedule, ctx.arch, theta_star, ctx.forget, st, vc);
    Eigen::MatrixXd post;
    out.rows.push_back(ev(rec.theta_u, "vdu", g, vc.seed, &post));
    if (write_outputs) {
      detail::emit_samples(ctx, "samples_gamma" + gamma_tag(g) + ".csv", post);
      panels.push_back({"gamma " + gamma_tag(g), post, classify_batch(ctx.classifier, post)});
    }
    rec.theta_u = ParamVector{};
    out.records.emplace_back(g, std::move(rec));
  }
  if (ctx.config.eval.finetune_epochs > 0) {
    Eigen::MatrixXd ft;
    out.finetune = ev(finetune_reference(ctx, theta_star), "finetune", 0.0, ctx.seeds.finetune(), &ft);
    if (write_outputs) {
      detail::emit_samples(ctx, "samples_finetune.csv", ft);
      panels.push_back({"fine-tune on retain", ft, classify_batch(ctx.classifier, ft)});
    }
  }
  if (write_outputs) detail::emit_scatter(ctx, "sweep.svg", panels);
  return out;
}

/// Gamma sweep over eval.gammas; writes sweep.csv, finetune.csv, sweep_record.csv, sample CSVs and sweep.svg.
inline SweepResult cmd_sweep(const ExperimentContext& ctx) {
  ensure_out_dir(ctx);
  const auto theta_star = load_theta_star(ctx);
  const auto st = load_experiment_stats(ctx);
  auto res = gamma_sweep(ctx, theta_star.params, st, ctx.config.eval.gammas, true);
  write_reports_csv(ctx.path("sweep.csv"), res.rows);
  if (res.finetune) write_reports_csv(ctx.path("finetune.csv"), {*res.finetune});
  write_unlearn_record_csv(ctx.path("sweep_record.csv"), res.records);
  return res;
}

}  // namespace vdu
