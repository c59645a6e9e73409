#pragma once

// Training and evaluation orchestration: the published presets, the per-epoch
// loop, deterministic evaluation, metric CSV export, and gate traces.

#include <cstdint>
#include <string>
#include <vector>

#include "cosinegate/data.hpp"
#include "cosinegate/losses.hpp"
#include "cosinegate/model.hpp"
#include "cosinegate/optim.hpp"

namespace cosinegate {

struct TrainConfig {
  std::string name = "balanced";
  float lambda_flops = 3.0f;
  float lambda_cons = 0.01f;
  float tau_target = 0.70f;
  float gamma0 = -2.5f;
  int epochs = 160;
  int t_warmup = 40;
  int batch_size = 128;
  float lr0 = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float temperature = 1.0f;
  float delta = 0.45f;
  uint64_t seed = 1;
  std::string dataset = "cifar10";
  int subset_train = 0;  // 0 = full split
  int subset_test = 0;
};

// Published presets: aggressive, balanced, conservative. Unknown names raise
// an error listing the valid ones.
TrainConfig preset(const std::string& name);

struct EpochMetrics {
  int epoch = 0;
  double train_acc = 0, test_acc = 0;
  double ce = 0, cons = 0, flops = 0, total = 0;
  double g_bar = 0, skip_pct = 0;
  double lr = 0, prog = 0;
};

// One record per (batch, block); per-sample arrays inside.
struct GateTraceRecord {
  int epoch = 0, batch = 0, block = 0;
  std::vector<float> cir;
  std::vector<float> gate;  // relaxed z in train mode, hard gate in eval
  std::string mode;         // "train" | "eval"
};

struct EvalResult {
  double accuracy = 0;  // percent
  double g_bar_hard = 0;
  double skip_pct = 0;
  std::vector<double> per_block_skip;  // percent of samples gated closed
};

GatedNetwork build_network_for(const TrainConfig& cfg);

Dataset load_dataset_split(const std::string& dataset, const std::string& data_dir,
                           bool train);

EpochMetrics train_epoch(GatedNetwork& net, const Dataset& train_ds,
                         const TrainConfig& cfg, SgdState& opt, int epoch,
                         std::vector<GateTraceRecord>* trace = nullptr);

EvalResult evaluate(GatedNetwork& net, const Dataset& test_ds, const TrainConfig& cfg,
                    int epoch = 0, std::vector<GateTraceRecord>* trace = nullptr);

struct RunResult {
  std::vector<EpochMetrics> metrics;
  std::string metrics_csv;
  std::string best_checkpoint;
  std::string final_checkpoint;
};

// Full run: per-epoch train + eval, CSV appended each epoch, best-accuracy
// and final checkpoints written under out_dir.
RunResult run_config(const TrainConfig& cfg, const std::string& data_dir,
                     const std::string& out_dir, bool trace_gates = false);

void export_metrics_csv(const std::vector<EpochMetrics>& metrics,
                        const std::string& path);

void dump_gate_trace(const std::vector<GateTraceRecord>& records,
                     const std::string& path);

}  // namespace cosinegate
