// SPDX-License-Identifier: Apache-2.0
//
// locomt: cost analysis, mask rendering, allocation strategies, gradient
// checks, toy training and dataset generation.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <thread>

#include "locomt/locomt.hpp"

namespace {

std::size_t thread_cap() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("LOCOMT_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      std::cerr << "ignoring invalid LOCOMT_THREADS='" << env << "'\n";
    }
  }
  return n;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace locomt;
  CLI::App app{"Per-head multimodal attention views: costs, masks, training"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "run config (key = value)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "directory for output files");
  };

  auto* cost = app.add_subcommand("cost", "attention cost of every fusion pattern");
  add_common(cost, true);
  auto* mask = app.add_subcommand("mask", "render per-head attention masks");
  add_common(mask, true);

  auto* strategy = app.add_subcommand("strategy", "per-layer view frequencies of a strategy");
  add_common(strategy, false);
  std::string kind = "spread";
  std::size_t heads = 12, fusion_layers = 4;
  strategy->add_option("--kind", kind, "spread|bottleneck|alternating|random");
  strategy->add_option("--heads", heads, "attention heads per layer");
  strategy->add_option("--fusion-layers", fusion_layers, "number of fusion layers");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck, true);
  bool corrupt = false, matrix = false;
  gradcheck->add_flag("--corrupt", corrupt, "perturb one analytic gradient (negative control)");
  gradcheck->add_flag("--matrix", matrix, "check every pattern and allocation strategy");

  auto* train = app.add_subcommand("train", "train the toy classifier");
  add_common(train, true);
  auto* gen = app.add_subcommand("gen-data", "write the synthetic parity dataset");
  add_common(gen, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? harness::kOk : harness::kUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = parse_run_config(io::read_file(config_path));
    if (seed) {
      cfg.seed = *seed;
      cfg.validate();
    }
    harness::OutDir out;
    if (!out_dir.empty()) out = out_dir;
    else if (!cfg.out_dir.empty()) out = cfg.out_dir;

    harness::CommandResult r;
    if (*cost) r = harness::cmd_cost(cfg, out);
    else if (*mask) r = harness::cmd_mask(cfg, out);
    else if (*strategy) {
      const bool from_config = !config_path.empty() && strategy->count("--heads") == 0;
      r = harness::cmd_strategy(parse_strategy(kind), from_config ? cfg.heads : heads,
                                from_config ? cfg.fusion_layers : fusion_layers, cfg.seed, out);
    } else if (*gradcheck) r = harness::cmd_gradcheck(cfg, corrupt, matrix, out);
    else if (*train) r = harness::cmd_train(cfg, thread_cap(), out.value_or("."));
    else if (*gen) r = harness::cmd_gen_data(cfg, out.value_or("."));
    std::cout << r.output;
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return harness::kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::kUsage;
  }
}
