// Command-line entry points: train / eval / gradcheck.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cosinegate/checkpoint.hpp"
#include "cosinegate/gradcheck_suite.hpp"
#include "cosinegate/harness.hpp"

namespace {

int cmd_train(const std::string& preset_name, const std::string& dataset,
              const std::string& data_dir, int epochs, uint64_t seed,
              const std::string& out_dir, int subset_train, int subset_test,
              bool trace_gates, double tau_target, int batch_size) {
  cosinegate::TrainConfig cfg = cosinegate::preset(preset_name);
  cfg.dataset = dataset;
  if (epochs > 0) cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.subset_train = subset_train;
  cfg.subset_test = subset_test;
  if (tau_target > 0) cfg.tau_target = static_cast<float>(tau_target);
  if (batch_size > 0) cfg.batch_size = batch_size;

  cosinegate::RunResult result =
      cosinegate::run_config(cfg, data_dir, out_dir, trace_gates);
  const auto& last = result.metrics.back();
  std::cout << "final: test_acc " << last.test_acc << "% train g_bar " << last.g_bar
            << " skip% " << last.skip_pct << "\n";
  std::cout << "metrics: " << result.metrics_csv << "\n";
  std::cout << "checkpoints: " << result.best_checkpoint << " (best), "
            << result.final_checkpoint << " (final)\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset,
             const std::string& data_dir, int subset_test) {
  cosinegate::TrainConfig cfg = cosinegate::preset("balanced");
  cfg.dataset = dataset;
  cfg.subset_test = subset_test;
  cosinegate::GatedNetwork net = cosinegate::build_network_for(cfg);
  auto state = cosinegate::collect_state(net);
  cosinegate::load_checkpoint_into(checkpoint, state);

  cosinegate::Dataset test =
      cosinegate::load_dataset_split(dataset, data_dir, /*train=*/false);
  test = cosinegate::dataset_subset(test, subset_test, "test");
  cosinegate::EvalResult res = cosinegate::evaluate(net, test, cfg);
  std::cout << "accuracy " << res.accuracy << "%\n";
  std::cout << "g_bar_hard " << res.g_bar_hard << "\n";
  std::cout << "skip% " << res.skip_pct << "\n";
  for (size_t i = 0; i < res.per_block_skip.size(); ++i) {
    std::cout << "block " << i << " skip% " << res.per_block_skip[i] << "\n";
  }
  return 0;
}

int cmd_gradcheck() {
  auto entries = cosinegate::run_gradcheck_suite();
  bool all = true;
  for (const auto& e : entries) {
    std::printf("%-32s max_rel_err %.3e  %s\n", e.name.c_str(), e.max_rel_err,
                e.pass ? "PASS" : "FAIL");
    all = all && e.pass;
  }
  std::printf("%zu checks, %s\n", entries.size(), all ? "all passed" : "FAILURES");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CosineGate: CIR-driven dynamic routing for residual networks"};
  app.require_subcommand(1);

  std::string preset_name = "balanced", dataset = "mnist", data_dir, out_dir = "run";
  int epochs = 0, subset_train = 0, subset_test = 0, batch_size = 0;
  uint64_t seed = 1;
  bool trace_gates = false;
  double tau_target = 0;

  CLI::App* train = app.add_subcommand("train", "train a configuration");
  train->add_option("--preset", preset_name,
                    "aggressive | balanced | conservative");
  train->add_option("--dataset", dataset, "mnist | cifar10");
  train->add_option("--data-dir", data_dir, "dataset directory")->required();
  train->add_option("--epochs", epochs, "override preset epoch count");
  train->add_option("--seed", seed, "run seed");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--subset-train", subset_train, "cap train split (0 = full)");
  train->add_option("--subset-test", subset_test, "cap test split (0 = full)");
  train->add_option("--tau-target", tau_target, "override FLOPs target ratio");
  train->add_option("--batch-size", batch_size, "override batch size");
  train->add_flag("--trace-gates", trace_gates, "dump per-sample gate trace CSV");

  std::string checkpoint;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  eval->add_option("--dataset", dataset, "mnist | cifar10");
  eval->add_option("--data-dir", data_dir, "dataset directory")->required();
  eval->add_option("--subset-test", subset_test, "cap test split (0 = full)");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "run the finite-difference gradient suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(preset_name, dataset, data_dir, epochs, seed, out_dir,
                       subset_train, subset_test, trace_gates, tau_target, batch_size);
    }
    if (eval->parsed()) {
      return cmd_eval(checkpoint, dataset, data_dir, subset_test);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
