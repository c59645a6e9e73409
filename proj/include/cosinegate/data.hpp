#pragma once

// Dataset ingestion (MNIST IDX, CIFAR-10 binary), augmentation/normalization,
// and batch iteration. Float-precision only; datasets never sit on the tape.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cosinegate/rng.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

struct Dataset {
  Tensor images;            // [N,C,H,W] in [0,1]
  std::vector<int> labels;  // length N
  std::string split;
  int num_classes = 10;

  int size() const { return images.defined() ? images.shape()[0] : 0; }
};

struct AugmentConfig {
  int crop_pad = 0;
  float hflip_prob = 0.0f;
  std::vector<float> mean;    // per channel
  std::vector<float> stddev;  // per channel, > 0
};

AugmentConfig cifar10_augment_config();
AugmentConfig mnist_augment_config();

// IDX parsing (big-endian, magic 0x803 images / 0x801 labels).
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, label byte + channel-planar RGB.
Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths);

// First `count` samples (count <= 0 or >= N returns a full copy).
Dataset dataset_subset(const Dataset& ds, int count, const std::string& split_tag);

// Copies the given rows into a fresh [B,C,H,W] tensor plus labels.
std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& ds,
                                                 const std::vector<int>& indices);

// One sample's crop/flip draw. Offsets index into the zero-padded image, so
// dy = dx = crop_pad is the identity crop.
struct SampleTransform {
  int dy = 0;
  int dx = 0;
  bool flip = false;
};

// Train mode: zero-pad by crop_pad, random crop back, horizontal flip with
// hflip_prob, then per-channel (x - mean)/std. Eval mode: normalization only.
Tensor augment_and_normalize(const Tensor& batch, const AugmentConfig& cfg, bool train,
                             RngStream& rng);

// Deterministic core used by the rng-driven overload: applies the given
// per-sample transforms, then normalizes.
Tensor augment_and_normalize(const Tensor& batch, const AugmentConfig& cfg,
                             const std::vector<SampleTransform>& transforms);

Tensor denormalize(const Tensor& batch, const AugmentConfig& cfg);

// Yields index slices covering a permutation of [0,N); the last partial batch
// is kept. A fresh iterator per epoch with a derived seed gives reproducible
// shuffles.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, bool shuffle, RngStream& rng);

  std::optional<std::pair<Tensor, std::vector<int>>> next();
  std::optional<std::vector<int>> next_indices();
  int num_batches() const;

 private:
  const Dataset& ds_;
  int batch_size_;
  std::vector<int> order_;
  size_t pos_ = 0;
};

}  // namespace cosinegate
