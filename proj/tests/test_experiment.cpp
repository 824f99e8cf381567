#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "temp_dir.hpp"
#include "vdu/experiment.hpp"

using namespace vdu;

namespace {

nlohmann::json small_json(const std::filesystem::path& out, int runs) {
  return {
      {"seed", 5},
      {"out_dir", out.string()},
      {"dataset", {{"kind", "ring"}, {"n_train", 800}, {"n_heldout", 400}}},
      {"schedule", {{"kind", "linear"}, {"T", 20}, {"beta_start", 1e-3}, {"beta_end", 0.2}}},
      {"arch", {{"hidden_dims", {16}}, {"embed_dim", 4}}},
      {"pretrain", {{"runs", runs}, {"epochs", 3}, {"lr", 3e-3}, {"batch_size", 64}, {"eval_samples", 100}}},
      {"stats", {{"mode", "multi_run"}, {"k", 2}, {"spacing", 1}}},
      {"unlearn", {{"gamma", 0.3}, {"eta", 1e-3}, {"epochs", 2}, {"batch_size", 32}}},
      {"eval", {{"n_samples", 200}, {"forget_labels", {3}}, {"gammas", {0.0, 0.5, 1.0}}, {"finetune_epochs", 1}}},
  };
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(VDU_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Experiment, ConfigDefaultsAndOverrides) {
  const auto c = config_from_json(small_json("o", 4));
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.schedule.T, 20);
  EXPECT_EQ(c.arch.hidden_dims, std::vector<int>{16});
  EXPECT_EQ(c.dataset.modes, 8);
  EXPECT_EQ(c.eval.forget_labels, std::set<int>{3});
  EXPECT_EQ(c.unlearn.t_subsample, std::nullopt);
  EXPECT_EQ(c.unlearn.grad_clip, std::optional<double>(10.0));

  auto j = small_json("o", 4);
  j["unlearn"]["t_subsample"] = 8;
  j["unlearn"]["grad_clip"] = nullptr;
  const auto c2 = config_from_json(j);
  EXPECT_EQ(c2.unlearn.t_subsample, std::optional<int>(8));
  EXPECT_EQ(c2.unlearn.grad_clip, std::nullopt);
}

TEST(Experiment, ConfigErrors) {
  auto expect_bad = [](nlohmann::json j) { EXPECT_THROW(config_from_json(j), ConfigError) << j.dump(); };
  auto j = small_json("o", 4);
  j["unlearn"]["gama"] = 0.1;
  expect_bad(j);
  j = small_json("o", 4);
  j["colour"] = 1;
  expect_bad(j);
  j = small_json("o", 4);
  j["unlearn"]["gamma"] = 1.5;
  expect_bad(j);
  j = small_json("o", 4);
  j["eval"]["gammas"] = {0.0, 2.0};
  expect_bad(j);
  j = small_json("o", 4);
  j["schedule"]["T"] = "many";
  expect_bad(j);
  j = small_json("o", 4);
  j["unlearn"]["t_subsample"] = "some";
  expect_bad(j);
  j = small_json("o", 4);
  j["dataset"]["kind"] = "idx";
  expect_bad(j);
  j = small_json("o", 4);
  j["stats"]["k"] = 5;
  expect_bad(j);
  j = small_json("o", 4);
  j["stats"]["checkpoints"] = 6;
  expect_bad(j);
  j = small_json("o", 4);
  j["schedule"]["kind"] = "quadratic";
  expect_bad(j);
}

TEST(Experiment, SingleRunWritesOneFinalCheckpoint) {
  const auto dir = oracle::temp_dir();
  const auto ctx = make_context(config_from_json(small_json(dir, 1)));
  cmd_pretrain(ctx);
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"run0.vdu", "run0_epoch2.vdu", "run0_epoch3.vdu", "pretrain.csv"}));
  EXPECT_EQ(read_pretrain_csv((dir / "pretrain.csv").string()).size(), 1u);
  EXPECT_THROW(cmd_stats(ctx), ConfigError);

  auto single = ctx;
  single.config.stats.mode = StatsMode::single_run;
  cmd_stats(single);
  const auto st = load_stats((dir / "stats.vdus").string());
  EXPECT_EQ(st.mode, StatsMode::single_run);
  EXPECT_EQ(st.n_checkpoints, 2);
}

TEST(Experiment, FourRunsHaveDistinctSeedsAndAreReproducible) {
  const auto dir = oracle::temp_dir();
  const auto a = make_context(config_from_json(small_json(dir / "a", 4)));
  const auto b = make_context(config_from_json(small_json(dir / "b", 4)));
  cmd_pretrain(a);
  cmd_pretrain(b);
  std::set<std::uint64_t> seeds;
  for (int r = 0; r < 4; ++r) {
    seeds.insert(load_checkpoint(a.run_path(r)).meta.seed);
    EXPECT_EQ(slurp(a.run_path(r)), slurp(b.run_path(r))) << r;
  }
  EXPECT_EQ(seeds.size(), 4u);
  EXPECT_EQ(slurp(dir / "a" / "pretrain.csv"), slurp(dir / "b" / "pretrain.csv"));

  cmd_stats(a);
  const auto st = load_stats(a.path("stats.vdus"));
  EXPECT_EQ(st.n_checkpoints, 4);
  EXPECT_EQ(st.mode, StatsMode::multi_run);
}

TEST(Experiment, PipelineOutputsRoundTripAndRepeat) {
  const auto dir = oracle::temp_dir();
  const auto ctx = make_context(config_from_json(small_json(dir, 3)));
  cmd_pretrain(ctx);
  cmd_stats(ctx);
  const auto rec = cmd_unlearn(ctx);
  EXPECT_EQ(rec.loss_total.size(), 2u);
  const auto trace = read_unlearn_record_csv(ctx.path("unlearn_record.csv"));
  ASSERT_EQ(trace.size(), 2u);
  EXPECT_EQ(trace[1].loss_a, rec.loss_a[1]);
  EXPECT_EQ(trace[1].param_distance, rec.param_distance[1]);
  EXPECT_EQ(trace[0].gamma, 0.3);

  const auto rows = cmd_eval(ctx);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].variant, "vdu");
  EXPECT_EQ(rows[1].variant, "finetune");
  EXPECT_EQ(read_reports_csv(ctx.path("eval.csv")), rows);
  EXPECT_TRUE(std::filesystem::exists(ctx.path("eval.svg")));

  const auto sweep = cmd_sweep(ctx);
  ASSERT_EQ(sweep.rows.size(), 3u);
  EXPECT_EQ(sweep.rows[0].gamma, 0.0);
  EXPECT_EQ(sweep.rows[2].gamma, 1.0);
  EXPECT_EQ(read_reports_csv(ctx.path("sweep.csv")), sweep.rows);
  ASSERT_TRUE(sweep.finetune.has_value());
  EXPECT_EQ(read_reports_csv(ctx.path("finetune.csv")).front(), *sweep.finetune);
  EXPECT_EQ(read_unlearn_record_csv(ctx.path("sweep_record.csv")).size(), 6u);

  const auto first = slurp(ctx.path("sweep.csv"));
  const auto first_samples = slurp(ctx.path("samples_gamma0.5.csv"));
  cmd_sweep(ctx);
  EXPECT_EQ(slurp(ctx.path("sweep.csv")), first);
  EXPECT_EQ(slurp(ctx.path("samples_gamma0.5.csv")), first_samples);
}

TEST(Experiment, SingleGammaSweepEqualsDirectEvaluation) {
  const auto dir = oracle::temp_dir();
  auto cfg = config_from_json(small_json(dir, 2));
  cfg.eval.finetune_epochs = 0;
  const auto ctx = make_context(cfg);
  cmd_pretrain(ctx);
  cmd_stats(ctx);
  const auto theta_star = load_theta_star(ctx);
  const auto st = load_experiment_stats(ctx);
  const auto swept = gamma_sweep(ctx, theta_star.params, st, {0.5}, false);
  ASSERT_EQ(swept.rows.size(), 1u);
  EXPECT_FALSE(swept.finetune.has_value());

  const auto rec = unlearn(ctx.schedule, ctx.arch, theta_star.params, ctx.forget, st, unlearn_config(ctx, 0.5));
  auto direct = evaluate_unlearning(ctx.schedule, ctx.arch, theta_star.params, rec.theta_u, ctx.classifier,
                                    ctx.retain_reference, cfg.eval.forget_labels, cfg.eval.n_samples, ctx.seeds.eval(),
                                    ctx.norm);
  direct.gamma = 0.5;
  direct.unlearn_seed = ctx.seeds.unlearn();
  EXPECT_EQ(swept.rows[0], direct);
}

TEST(Experiment, SeedsAreDistinct) {
  const Seeds s{11};
  std::set<std::uint64_t> all{s.train_data(), s.heldout_data(), s.init(),     s.warmstart(), s.unlearn(),
                              s.eval(),       s.finetune(),     s.classifier(), s.pretrain_eval()};
  for (int r = 0; r < 8; ++r) all.insert(s.run(r));
  EXPECT_EQ(all.size(), 17u);
  EXPECT_NE(Seeds{12}.eval(), s.eval());
}

TEST(Experiment, CliExitCodes) {
  const auto dir = oracle::temp_dir();
  const auto good = dir / "good.json";
  std::ofstream(good) << small_json(dir / "out", 2).dump();
  const auto bad = dir / "bad.json";
  auto j = small_json(dir / "out", 2);
  j["unlearn"]["nonsense"] = 1;
  std::ofstream(bad) << j.dump();
  std::ofstream(dir / "broken.json") << "{ \"seed\": ";

  EXPECT_EQ(run_cli("stats --config " + bad.string()), 2);
  EXPECT_EQ(run_cli("stats --config " + (dir / "broken.json").string()), 2);
  EXPECT_EQ(run_cli("stats --config " + (dir / "missing.json").string()), 4);
  EXPECT_EQ(run_cli("frobnicate --config " + good.string()), 2);
  EXPECT_EQ(run_cli("stats"), 2);
  EXPECT_EQ(run_cli("stats --config " + good.string()), 4);
  EXPECT_EQ(run_cli("pretrain --config " + good.string() + " --seed 9"), 0);
  EXPECT_EQ(load_checkpoint((dir / "out" / "run1.vdu").string()).meta.seed, Seeds{9}.run(1));
  EXPECT_EQ(run_cli("stats --config " + good.string() + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "stats.vdus"));
}
