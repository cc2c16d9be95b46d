#include <channelkit/pipeline.hpp>

#include <channelkit/common.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

struct CommonArgs {
  std::string config_path;
  std::string workdir;
  std::uint64_t seed = 0;
  bool has_workdir = false;
  bool has_seed = false;
  double alpha = 0.0;
  bool has_alpha = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_alpha) {
  cmd->add_option("--config", args.config_path, "pipeline config JSON")->required();
  cmd->add_option("--workdir", args.workdir, "override the configured workdir")
      ->each([&](const std::string&) { args.has_workdir = true; });
  cmd->add_option("--seed", args.seed, "override the configured seed")
      ->each([&](const std::string&) { args.has_seed = true; });
  if (with_alpha)
    cmd->add_option("--alpha", args.alpha, "retention share; overrides the configured list")
        ->each([&](const std::string&) { args.has_alpha = true; });
}

ck::PipelineConfig effective_config(const CommonArgs& args) {
  ck::PipelineConfig cfg = ck::load_pipeline_config(args.config_path);
  if (args.has_workdir) cfg.workdir = args.workdir;
  if (args.has_seed) {
    cfg.seed = args.seed;
    cfg.train.seed = args.seed;
    cfg.finetune.seed = args.seed + 1;
  }
  if (args.has_alpha) cfg.alphas = {args.alpha};
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"channelkit: correlation-driven structured channel pruning"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* c_train = app.add_subcommand("train", "train the base model");
  CLI::App* c_score = app.add_subcommand("score", "compute channel importance");
  CLI::App* c_select = app.add_subcommand("select", "build pruning plans");
  CLI::App* c_prune = app.add_subcommand("prune", "apply plans and finetune");
  CLI::App* c_report = app.add_subcommand("report", "emit analysis artifacts");
  CLI::App* c_pipeline = app.add_subcommand("pipeline", "run every stage in order");
  add_common(c_train, args, false);
  add_common(c_score, args, false);
  add_common(c_select, args, true);
  add_common(c_prune, args, true);
  add_common(c_report, args, false);
  add_common(c_pipeline, args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const ck::PipelineConfig cfg = effective_config(args);
    if (c_train->parsed()) {
      ck::cmd_train(cfg);
    } else if (c_score->parsed()) {
      ck::cmd_score(cfg);
    } else if (c_select->parsed()) {
      for (double a : cfg.alphas) ck::cmd_select(cfg, a);
    } else if (c_prune->parsed()) {
      for (double a : cfg.alphas) ck::cmd_prune(cfg, a);
    } else if (c_report->parsed()) {
      ck::cmd_report(cfg);
    } else if (c_pipeline->parsed()) {
      ck::cmd_pipeline(cfg);
    }
  } catch (const ck::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ck::IoError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const ck::DomainError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
