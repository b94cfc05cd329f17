// taskdn: command-line driver for the denoising experiment pipeline.
//
//   taskdn dataset|train|crossval|evaluate|report --config <path>
//          [--dose <p>] [--lambda <v>] [--out <dir>]
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include "taskdn/harness.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

std::vector<double> doses_for(const taskdn::StudyConfig &cfg, const std::optional<double> &dose) {
  return dose ? std::vector<double>{*dose} : cfg.dose_levels;
}

int run(const std::string &command, const std::string &config_path, std::optional<double> dose,
        std::optional<double> lambda, const std::string &out) {
  taskdn::StudyConfig cfg = taskdn::load_config(config_path);
  if (!out.empty())
    cfg.out_dir = out;

  if (command == "dataset") {
    const auto m = taskdn::cmd_dataset(cfg);
    fmt::print("{} samples written to {}\n", m.samples.size(), cfg.out_dir.string());
  } else if (command == "train") {
    if (!lambda)
      throw taskdn::ConfigError("train needs --lambda");
    for (double p : doses_for(cfg, dose)) {
      taskdn::cmd_train(cfg, p, *lambda);
      fmt::print("dose {:g} lambda {:g}: {} fold checkpoints written\n", p, *lambda, cfg.folds);
    }
  } else if (command == "crossval") {
    for (double p : doses_for(cfg, dose)) {
      const auto r = taskdn::cmd_crossval(cfg, p);
      fmt::print("dose {:g}: selected lambda {:g}\n", p, r.selected_lambda);
    }
  } else if (command == "evaluate") {
    for (double p : doses_for(cfg, dose)) {
      const auto r = taskdn::cmd_evaluate(cfg, p, lambda);
      for (const auto &row : r.rows)
        fmt::print("{:g} {:<14} {:<9} AUC {:.3f} [{:.3f}, {:.3f}]  RMSE {:.3f}  SSIM {:.3f}\n",
                   row.dose, row.method, taskdn::to_string(row.wall), row.roc.auc, row.roc.ci_low,
                   row.roc.ci_high, row.rmse, row.ssim);
    }
  } else if (command == "report") {
    taskdn::cmd_report(cfg);
    fmt::print("report written to {}\n", (cfg.out_dir / "report").string());
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"Task-specific denoising experiment pipeline"};
  app.require_subcommand(1, 1);
  std::string config_path, out;
  std::optional<double> dose, lambda;
  for (const char *name : {"dataset", "train", "crossval", "evaluate", "report"}) {
    auto *sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--dose", dose, "dose level (default: every configured level)");
    sub->add_option("--lambda", lambda, "channel-loss weight");
    sub->add_option("--out", out, "output directory (overrides out_dir)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    return run(command, config_path, dose, lambda, out);
  } catch (const taskdn::ConfigError &e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfig;
  } catch (const taskdn::NumericError &e) {
    fmt::print(stderr, "numeric failure: {}\n", e.what());
    return kNumeric;
  } catch (const taskdn::Error &e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error &e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  }
}
