// vdu_cli <pretrain|stats|unlearn|eval|sweep> --config FILE [--out DIR] [--seed N]
//
// Exit codes: 0 success, 2 config error, 3 numerical abort, 4 I/O or format error.

#include <cstdio>
#include <iostream>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "vdu/experiment.hpp"

namespace {

void print_reports(const std::vector<vdu::EvalReport>& rows) {
  for (const auto& r : rows)
    std::printf("%-9s gamma=%-5g PUL=%7.2f%%  u-FID=%.4g (pre-trained %.4g)  forget %ld -> %ld of %ld\n",
                r.variant.c_str(), r.gamma, r.pul_percent, r.u_fid, r.u_fid_pretrained, r.count_forget_pretrained,
                r.count_forget_unlearned, r.n_samples);
}

int run(const std::string& command, vdu::ExperimentConfig cfg) {
  const auto ctx = vdu::make_context(cfg);
  if (command == "pretrain") {
    std::vector<vdu::PretrainRow> rows;
    const auto paths = vdu::cmd_pretrain(ctx, &rows);
    for (const auto& row : rows)
      std::printf("run %d seed %llu: final loss %.5f, FID vs held-out %.4g\n", row.run,
                  static_cast<unsigned long long>(row.seed), row.final_loss, row.fid_heldout);
    std::printf("wrote %zu checkpoints to %s\n", paths.size(), cfg.out_dir.c_str());
  } else if (command == "stats") {
    std::printf("wrote %s\n", vdu::cmd_stats(ctx).c_str());
  } else if (command == "unlearn") {
    const auto rec = vdu::cmd_unlearn(ctx);
    for (std::size_t e = 0; e < rec.loss_total.size(); ++e)
      std::printf("epoch %zu: A=%.6g B=%.6g total=%.6g |theta-theta*|=%.4g\n", e + 1, rec.loss_a[e], rec.loss_b[e],
                  rec.loss_total[e], rec.param_distance[e]);
  } else if (command == "eval") {
    print_reports(vdu::cmd_eval(ctx));
  } else {
    auto res = vdu::cmd_sweep(ctx);
    if (res.finetune) res.rows.push_back(*res.finetune);
    print_reports(res.rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational diffusion unlearning on low-dimensional data"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  const std::pair<const char*, const char*> commands[] = {
      {"pretrain", "train the diffusion model runs and late checkpoints"},
      {"stats", "estimate per-parameter posterior statistics"},
      {"unlearn", "run unlearning at the configured gamma"},
      {"eval", "score the unlearned model and the fine-tuning reference"},
      {"sweep", "unlearn and score every gamma in eval.gammas"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON experiment config")->required();
    sub->add_option("--out", out_dir, "output directory (overrides out_dir)");
    sub->add_option("--seed", seed, "master seed (overrides seed)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto cfg = vdu::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed) cfg.seed = *seed;
    return run(command, cfg);
  } catch (const vdu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vdu::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const vdu::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
