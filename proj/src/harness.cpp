#include "cosinegate/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "cosinegate/checkpoint.hpp"

namespace cosinegate {

namespace {

// Stream-derivation tags so shuffle, augmentation and Gumbel noise never
// collide even for equal seeds.
constexpr uint64_t kShuffleTag = 0x51u;
constexpr uint64_t kAugmentTag = 0xA6u;
constexpr uint64_t kGumbelTag = 0x6Bu;

int argmax_row(const float* row, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

void dump_decisions(const std::vector<GateDecision>& decisions, int epoch, int batch) {
  std::cerr << "gate decisions for epoch " << epoch << " batch " << batch << ":\n";
  for (size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    std::cerr << "  block " << i << "\n";
    for (int64_t b = 0; b < d.cir.size(); ++b) {
      std::cerr << "    sample " << b << " cir=" << d.cir.data()[b]
                << " ctrl=" << d.controller_out.data()[b]
                << " logit=" << d.logit.data()[b]
                << " z=" << (d.z.defined() ? d.z.data()[b] : std::nanf(""))
                << " hard=" << d.hard.data()[b] << "\n";
    }
  }
}

void append_trace(std::vector<GateTraceRecord>* trace,
                  const std::vector<GateDecision>& decisions, int epoch, int batch,
                  bool train) {
  if (!trace) return;
  for (size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    GateTraceRecord rec;
    rec.epoch = epoch;
    rec.batch = batch;
    rec.block = static_cast<int>(i);
    rec.mode = train ? "train" : "eval";
    rec.cir.assign(d.cir.data(), d.cir.data() + d.cir.size());
    const Tensor& gate = train ? d.z : d.hard;
    rec.gate.assign(gate.data(), gate.data() + gate.size());
    trace->push_back(std::move(rec));
  }
}

AugmentConfig augment_for(const std::string& dataset) {
  return dataset == "mnist" ? mnist_augment_config() : cifar10_augment_config();
}

}  // namespace

TrainConfig preset(const std::string& name) {
  TrainConfig cfg;
  cfg.name = name;
  if (name == "aggressive") {
    cfg.lambda_flops = 5.0f;
    cfg.lambda_cons = 0.01f;
    cfg.tau_target = 0.60f;
    cfg.gamma0 = -3.0f;
  } else if (name == "balanced") {
    cfg.lambda_flops = 3.0f;
    cfg.lambda_cons = 0.01f;
    cfg.tau_target = 0.70f;
    cfg.gamma0 = -2.5f;
  } else if (name == "conservative") {
    cfg.lambda_flops = 2.5f;
    cfg.lambda_cons = 0.05f;
    cfg.tau_target = 0.72f;
    cfg.gamma0 = -2.0f;
  } else {
    throw std::invalid_argument("unknown preset '" + name +
                                "'; valid presets: aggressive, balanced, conservative");
  }
  return cfg;
}

GatedNetwork build_network_for(const TrainConfig& cfg) {
  GateConfig gate;
  gate.temperature = cfg.temperature;
  gate.inference_threshold = cfg.delta;
  gate.epsilon_norm = 1e-8f;
  gate.gamma_learnable = true;
  gate.rng_seed = cfg.seed;
  gate.validate();
  if (cfg.dataset == "mnist") {
    return build_mnist_network<float>(cfg.seed, gate, cfg.gamma0);
  }
  if (cfg.dataset == "cifar10") {
    return build_cifar_network<float>(cfg.seed, gate, cfg.gamma0);
  }
  throw std::invalid_argument("unknown dataset '" + cfg.dataset +
                              "'; valid datasets: mnist, cifar10");
}

Dataset load_dataset_split(const std::string& dataset, const std::string& data_dir,
                           bool train) {
  namespace fs = std::filesystem;
  if (dataset == "mnist") {
    std::string img = train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
    std::string lab = train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
    Dataset ds = load_mnist_idx((fs::path(data_dir) / img).string(),
                                (fs::path(data_dir) / lab).string());
    ds.split = train ? "train" : "test";
    return ds;
  }
  if (dataset == "cifar10") {
    std::vector<std::string> paths;
    if (train) {
      for (int i = 1; i <= 5; ++i) {
        paths.push_back((fs::path(data_dir) / ("data_batch_" + std::to_string(i) + ".bin"))
                            .string());
      }
    } else {
      paths.push_back((fs::path(data_dir) / "test_batch.bin").string());
    }
    Dataset ds = load_cifar10_bin(paths);
    ds.split = train ? "train" : "test";
    return ds;
  }
  throw std::invalid_argument("unknown dataset '" + dataset +
                              "'; valid datasets: mnist, cifar10");
}

EpochMetrics train_epoch(GatedNetwork& net, const Dataset& train_ds,
                         const TrainConfig& cfg, SgdState& opt, int epoch,
                         std::vector<GateTraceRecord>* trace) {
  opt.set_epoch(epoch);
  const double prog = prog_schedule(epoch, cfg.t_warmup);
  const AugmentConfig aug = augment_for(cfg.dataset);

  RngStream shuffle_rng(RngStream::mix(RngStream::mix(cfg.seed, kShuffleTag), epoch));
  RngStream aug_rng(RngStream::mix(RngStream::mix(cfg.seed, kAugmentTag), epoch));
  BatchIterator it(train_ds, cfg.batch_size, /*shuffle=*/true, shuffle_rng);

  auto params = collect_parameters(net);
  const uint64_t steps_per_epoch = static_cast<uint64_t>(it.num_batches());

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = opt.lr();
  m.prog = prog;
  int64_t seen = 0, correct = 0;
  double sum_ce = 0, sum_cons = 0, sum_flops = 0, sum_total = 0, sum_gbar = 0;
  int batch_idx = 0;
  while (auto batch = it.next()) {
    const int b_sz = batch->first.shape()[0];
    Tensor x = augment_and_normalize(batch->first, aug, /*train=*/true, aug_rng);
    const std::vector<int>& labels = batch->second;
    const uint64_t step =
        static_cast<uint64_t>(epoch) * steps_per_epoch + static_cast<uint64_t>(batch_idx);

    TapeScope<float> scope;
    ForwardOutput fwd = network_forward(net, x, RunMode::kTrain,
                                        RngStream::mix(cfg.seed, kGumbelTag), step);
    Tensor ce = cross_entropy(fwd.logits, labels);
    Tensor g_bar = mean_gate(fwd.decisions);
    Tensor cons = consistency_loss(fwd.full_outputs, fwd.gated_outputs,
                                   net.gate_cfg.epsilon_norm);
    Tensor flops = flops_loss(g_bar, cfg.tau_target, static_cast<float>(prog));
    Tensor total = total_loss(ce, cons, flops, cfg.lambda_cons, cfg.lambda_flops);

    if (!std::isfinite(total.item())) {
      dump_decisions(fwd.decisions, epoch, batch_idx);
      throw std::runtime_error("NaN/Inf in total loss at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(batch_idx));
    }

    scope.tape().backward(total);
    sgd_step(params, opt);
    zero_grad(params);

    for (int b = 0; b < b_sz; ++b) {
      if (argmax_row(fwd.logits.data() + static_cast<int64_t>(b) * net.num_classes,
                     net.num_classes) == labels[b]) {
        ++correct;
      }
    }
    seen += b_sz;
    sum_ce += static_cast<double>(ce.item()) * b_sz;
    sum_cons += static_cast<double>(cons.item()) * b_sz;
    sum_flops += static_cast<double>(flops.item()) * b_sz;
    sum_total += static_cast<double>(total.item()) * b_sz;
    sum_gbar += static_cast<double>(g_bar.item()) * b_sz;
    append_trace(trace, fwd.decisions, epoch, batch_idx, /*train=*/true);
    ++batch_idx;
  }

  m.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
  m.ce = sum_ce / static_cast<double>(seen);
  m.cons = sum_cons / static_cast<double>(seen);
  m.flops = sum_flops / static_cast<double>(seen);
  m.total = sum_total / static_cast<double>(seen);
  m.g_bar = sum_gbar / static_cast<double>(seen);
  m.skip_pct = (1.0 - m.g_bar) * 100.0;
  return m;
}

EvalResult evaluate(GatedNetwork& net, const Dataset& test_ds, const TrainConfig& cfg,
                    int epoch, std::vector<GateTraceRecord>* trace) {
  const AugmentConfig aug = augment_for(cfg.dataset);
  RngStream unused(0);  // eval consumes no randomness
  BatchIterator it(test_ds, cfg.batch_size, /*shuffle=*/false, unused);

  EvalResult res;
  res.per_block_skip.assign(net.blocks.size(), 0.0);
  int64_t seen = 0, correct = 0;
  std::vector<int64_t> open_per_block(net.blocks.size(), 0);
  int batch_idx = 0;
  while (auto batch = it.next()) {
    const int b_sz = batch->first.shape()[0];
    Tensor x = augment_and_normalize(batch->first, aug, /*train=*/false, unused);
    ForwardOutput fwd = network_forward(net, x, RunMode::kEval);
    for (int b = 0; b < b_sz; ++b) {
      if (argmax_row(fwd.logits.data() + static_cast<int64_t>(b) * net.num_classes,
                     net.num_classes) == batch->second[b]) {
        ++correct;
      }
    }
    for (size_t i = 0; i < fwd.decisions.size(); ++i) {
      const Tensor& hard = fwd.decisions[i].hard;
      for (int64_t b = 0; b < hard.size(); ++b) {
        open_per_block[i] += hard.data()[b] > 0.5f ? 1 : 0;
      }
    }
    append_trace(trace, fwd.decisions, epoch, batch_idx, /*train=*/false);
    seen += b_sz;
    ++batch_idx;
  }

  int64_t open_total = 0;
  for (size_t i = 0; i < open_per_block.size(); ++i) {
    open_total += open_per_block[i];
    res.per_block_skip[i] =
        100.0 * (1.0 - static_cast<double>(open_per_block[i]) / static_cast<double>(seen));
  }
  res.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
  res.g_bar_hard = static_cast<double>(open_total) /
                   static_cast<double>(seen * static_cast<int64_t>(net.blocks.size()));
  res.skip_pct = (1.0 - res.g_bar_hard) * 100.0;
  return res;
}

namespace {

void write_metrics_row(std::ofstream& f, const EpochMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", m.epoch,
                m.train_acc, m.test_acc, m.ce, m.cons, m.flops, m.total, m.g_bar,
                m.skip_pct, m.lr, m.prog);
  f << buf;
}

constexpr const char* kMetricsHeader =
    "epoch,train_acc,test_acc,ce,cons,flops,total,g_bar,skip_pct,lr,prog\n";

}  // namespace

void export_metrics_csv(const std::vector<EpochMetrics>& metrics,
                        const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write metrics CSV " + path);
  f << kMetricsHeader;
  for (const auto& m : metrics) write_metrics_row(f, m);
  if (!f) throw std::runtime_error("write failed for metrics CSV " + path);
}

void dump_gate_trace(const std::vector<GateTraceRecord>& records,
                     const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write gate trace " + path);
  f << "epoch,batch,block,sample,cir,gate_value,mode\n";
  char buf[256];
  for (const auto& rec : records) {
    for (size_t s = 0; s < rec.cir.size(); ++s) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%d,%zu,%.6f,%.6f,%s\n", rec.epoch,
                    rec.batch, rec.block, s, static_cast<double>(rec.cir[s]),
                    static_cast<double>(rec.gate[s]), rec.mode.c_str());
      f << buf;
    }
  }
  if (!f) throw std::runtime_error("write failed for gate trace " + path);
}

RunResult run_config(const TrainConfig& cfg, const std::string& data_dir,
                     const std::string& out_dir, bool trace_gates) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  Dataset train_full = load_dataset_split(cfg.dataset, data_dir, /*train=*/true);
  Dataset test_full = load_dataset_split(cfg.dataset, data_dir, /*train=*/false);
  Dataset train_ds = dataset_subset(train_full, cfg.subset_train, "train");
  Dataset test_ds = dataset_subset(test_full, cfg.subset_test, "test");

  GatedNetwork net = build_network_for(cfg);
  SgdState opt(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs);

  RunResult result;
  result.metrics_csv = (fs::path(out_dir) / "metrics.csv").string();
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();

  std::ofstream csv(result.metrics_csv, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write metrics CSV " + result.metrics_csv);
  csv << kMetricsHeader;
  csv.flush();

  std::vector<GateTraceRecord> trace;
  std::vector<GateTraceRecord>* trace_ptr = trace_gates ? &trace : nullptr;

  double best_acc = -1.0;
  auto state = collect_state(net);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m = train_epoch(net, train_ds, cfg, opt, epoch, trace_ptr);
    EvalResult ev = evaluate(net, test_ds, cfg, epoch, trace_ptr);
    m.test_acc = ev.accuracy;
    result.metrics.push_back(m);
    write_metrics_row(csv, m);
    csv.flush();
    if (ev.accuracy > best_acc) {
      best_acc = ev.accuracy;
      save_checkpoint(result.best_checkpoint, state);
    }
    std::cout << "epoch " << epoch << " train_acc " << m.train_acc << " test_acc "
              << m.test_acc << " g_bar " << m.g_bar << " skip% " << m.skip_pct << " lr "
              << m.lr << "\n";
  }
  save_checkpoint(result.final_checkpoint, state);
  if (trace_gates) {
    dump_gate_trace(trace, (fs::path(out_dir) / "gate_trace.csv").string());
  }
  return result;
}

}  // namespace cosinegate
