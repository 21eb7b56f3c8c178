#include <iostream>

#include "CLI11.hpp"
#include "app/commands.hpp"
#include "wtrace/error.hpp"

using namespace wtrace::app;

int main(int argc, char** argv) {
  CLI::App cli{"Record per-step weight updates during training and explain predictions by replaying them."};
  cli.require_subcommand(1);

  TrainArgs train;
  auto* c_train = cli.add_subcommand("train", "train a model from a config file, writing checkpoint, ledger and report");
  c_train->add_option("config", train.config, "run config (TOML-style)")->required();
  c_train->add_flag("--force", train.force, "overwrite an existing run directory");

  ExplainArgs explain;
  bool no_init = false;
  const auto explain_options = [&](CLI::App* c) {
    c->add_option("run", explain.run, "run directory")->required();
    c->add_option("--input", explain.input, "test:N, train:N or a file")->required();
    c->add_option("--layer", explain.layer, "tracked layer id")->required();
    c->add_option("-k", explain.k, "number of influential examples")->capture_default_str();
    c->add_flag("--include-init", explain.include_init, "count the initial weights in the gamma total (default)");
    c->add_flag("--no-include-init", no_init, "leave the initial weights out of the gamma total");
    c->add_option("--min-step", explain.min_step, "ignore records before this step");
    c->add_option("--out", explain.out_dir, "output directory (default <run>/explain)");
  };
  auto* c_explain = cli.add_subcommand("explain", "most influential training examples for one input");
  explain_options(c_explain);
  auto* c_gallery = cli.add_subcommand("gallery", "explain, requiring an image gallery");
  explain_options(c_gallery);

  RidgeArgs ridge;
  auto* c_ridge = cli.add_subcommand("ridge", "per-class cosine-contribution densities for one input");
  c_ridge->add_option("run", ridge.run, "run directory")->required();
  c_ridge->add_option("--input", ridge.input, "test:N, train:N or a file")->required();
  c_ridge->add_option("--layer", ridge.layer, "tracked layer id")->required();
  c_ridge->add_option("--bandwidth", ridge.bandwidth, "KDE bandwidth")->capture_default_str();
  c_ridge->add_option("--out", ridge.out_dir, "output directory (default <run>/explain)");

  VerifyArgs verify;
  auto* c_verify = cli.add_subcommand("verify", "check ledger integrity, reconstruction and gamma completeness");
  c_verify->add_option("run", verify.run, "run directory")->required();
  c_verify->add_option("--probes", verify.probes, "random inputs for the completeness check")->capture_default_str();

  StatsArgs stats;
  auto* c_stats = cli.add_subcommand("stats", "model size, update count, runtime and storage overhead");
  c_stats->add_option("run", stats.run, "run directory")->required();
  c_stats->add_flag("--control", stats.control, "retrain without a ledger to measure the runtime overhead");
  c_stats->add_option("--probes", stats.probes, "inputs to time explanations on")->capture_default_str();

  CLI11_PARSE(cli, argc, argv);
  if (no_init) explain.include_init = false;

  try {
    if (c_train->parsed()) return cmd_train(train, std::cout);
    if (c_explain->parsed()) return cmd_explain(explain, std::cout);
    if (c_gallery->parsed()) {
      explain.require_gallery = true;
      return cmd_explain(explain, std::cout);
    }
    if (c_ridge->parsed()) return cmd_ridge(ridge, std::cout);
    if (c_verify->parsed()) return cmd_verify(verify, std::cout);
    if (c_stats->parsed()) return cmd_stats(stats, std::cout);
  } catch (const wtrace::Error& e) {
    std::cout.flush();
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cout.flush();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
