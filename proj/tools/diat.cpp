// Command-line driver: dataset generation, pretraining, adversarial training,
// enhancement, transfer and evaluation.

#include <CLI11.hpp>

#include <iostream>

#include "diat/cli.hpp"

namespace cli = diat::cli;

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale facial attribute transfer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "Config file (key = value per line)");
  app.add_option("-s,--set", sets, "Override a config key, e.g. --set lambda=0.2 (repeatable)");
  app.add_flag_callback(
      "--list-keys",
      [] {
        for (const auto& [k, doc] : cli::RunConfig::documented_keys()) std::cout << k << "\t" << doc << "\n";
        std::exit(0);
      },
      "List config keys with their defaults and exit");
  bool quiet = false, debug = false;
  app.add_flag("-q,--quiet", quiet, "Only print results");
  app.add_flag("-v,--verbose", debug, "Debug logging");

  auto* gen = app.add_subcommand("gen-data", "Render the training and evaluation datasets");
  auto* pre = app.add_subcommand("pretrain", "Pretrain T and D, train phi, the evaluation networks and f");
  std::vector<std::string> phases;
  pre->add_option("--phase", phases, "Subset of t, d, phi, eval, regularizer (default: all)")->delimiter(',');
  auto* train = app.add_subcommand("train", "Adversarial training of the transform network (resumable)");
  std::int64_t stop_after = -1;
  bool fresh = false;
  train->add_option("--stop-after", stop_after, "Stop after this many iterations in this invocation");
  train->add_flag("--fresh", fresh, "Discard an existing run instead of resuming");
  auto* enh = app.add_subcommand("enhance-train", "Train the local or global enhancer");
  auto* xfer = app.add_subcommand("transfer", "Apply the trained pipeline to images");
  std::vector<std::filesystem::path> inputs;
  std::filesystem::path out_dir = "out";
  xfer->add_option("inputs", inputs, "Input images (PPM/PGM)")->required()->check(CLI::ExistingFile);
  xfer->add_option("-o,--out", out_dir, "Output directory");
  auto* eval = app.add_subcommand("eval", "Score the trained pipeline on held-out inputs");
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numerical gradients");
  int instances = 5;
  std::uint64_t gc_seed = 1;
  gc->add_option("--instances", instances, "Random instances per case");
  gc->add_option("--seed", gc_seed, "Seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? cli::kOk : cli::kConfigError;
  }

  cli::apply_thread_env();
  if (gc->parsed()) return cli::cmd_gradcheck(instances, gc_seed, std::cout, std::cerr);

  cli::RunConfig cfg;
  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) overrides.push_back(cli::split_assignment(s));
    if (quiet) overrides.emplace_back("verbosity", "quiet");
    if (debug) overrides.emplace_back("verbosity", "debug");
    cfg = config_path.empty() ? cli::RunConfig::parse("", overrides) : cli::RunConfig::load(config_path, overrides);
  } catch (...) {
    return cli::report_exception(std::cerr);
  }

  if (gen->parsed()) return cli::cmd_gen_data(cfg, std::cout, std::cerr);
  if (pre->parsed()) return cli::cmd_pretrain(cfg, phases, std::cout, std::cerr);
  if (train->parsed()) return cli::cmd_train(cfg, stop_after, fresh, std::cout, std::cerr);
  if (enh->parsed()) return cli::cmd_enhance_train(cfg, std::cout, std::cerr);
  if (xfer->parsed()) return cli::cmd_transfer(cfg, inputs, out_dir, std::cout, std::cerr);
  if (eval->parsed()) return cli::cmd_eval(cfg, std::cout, std::cerr);
  return cli::kConfigError;
}
