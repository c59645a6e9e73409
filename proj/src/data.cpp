#include "cosinegate/data.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace cosinegate {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0 && !f.read(reinterpret_cast<char*>(buf.data()), len)) {
    throw std::runtime_error("short read on " + path);
  }
  return buf;
}

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

}  // namespace

AugmentConfig cifar10_augment_config() {
  AugmentConfig cfg;
  cfg.crop_pad = 4;
  cfg.hflip_prob = 0.5f;
  cfg.mean = {0.4914f, 0.4822f, 0.4465f};
  cfg.stddev = {0.2023f, 0.1994f, 0.2010f};
  return cfg;
}

AugmentConfig mnist_augment_config() {
  AugmentConfig cfg;
  cfg.crop_pad = 0;
  cfg.hflip_prob = 0.0f;
  cfg.mean = {0.1307f};
  cfg.stddev = {0.3081f};
  return cfg;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::vector<uint8_t> img = read_file(images_path);
  if (img.size() < 16) throw std::runtime_error("truncated IDX image file " + images_path);
  if (be32(img.data()) != 0x00000803u) {
    throw std::runtime_error("bad IDX image magic in " + images_path);
  }
  uint32_t n = be32(img.data() + 4);
  uint32_t rows = be32(img.data() + 8);
  uint32_t cols = be32(img.data() + 12);
  size_t need = 16 + static_cast<size_t>(n) * rows * cols;
  if (img.size() < need) throw std::runtime_error("truncated IDX image file " + images_path);

  std::vector<uint8_t> lab = read_file(labels_path);
  if (lab.size() < 8) throw std::runtime_error("truncated IDX label file " + labels_path);
  if (be32(lab.data()) != 0x00000801u) {
    throw std::runtime_error("bad IDX label magic in " + labels_path);
  }
  uint32_t ln = be32(lab.data() + 4);
  if (ln != n) {
    throw std::runtime_error("IDX image/label count mismatch: " + std::to_string(n) +
                             " images vs " + std::to_string(ln) + " labels");
  }
  if (lab.size() < 8 + static_cast<size_t>(ln)) {
    throw std::runtime_error("truncated IDX label file " + labels_path);
  }

  Dataset ds;
  ds.images = Tensor::zeros({static_cast<int>(n), 1, static_cast<int>(rows),
                             static_cast<int>(cols)});
  float* dst = ds.images.data();
  const uint8_t* src = img.data() + 16;
  size_t total = static_cast<size_t>(n) * rows * cols;
  for (size_t i = 0; i < total; ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
  ds.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    uint8_t v = lab[8 + i];
    if (v > 9) throw std::runtime_error("IDX label out of range: " + std::to_string(v));
    ds.labels[i] = v;
  }
  ds.split = images_path;
  return ds;
}

Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths) {
  constexpr size_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
  size_t total_records = 0;
  std::vector<std::vector<uint8_t>> files;
  for (const auto& path : batch_paths) {
    files.push_back(read_file(path));
    if (files.back().empty() || files.back().size() % kRecord != 0) {
      throw std::runtime_error("CIFAR-10 record-size misalignment in " + path + " (" +
                               std::to_string(files.back().size()) + " bytes)");
    }
    total_records += files.back().size() / kRecord;
  }
  Dataset ds;
  ds.images = Tensor::zeros({static_cast<int>(total_records), 3, 32, 32});
  ds.labels.resize(total_records);
  size_t rec = 0;
  for (size_t fi = 0; fi < files.size(); ++fi) {
    const auto& buf = files[fi];
    for (size_t off = 0; off < buf.size(); off += kRecord, ++rec) {
      uint8_t label = buf[off];
      if (label > 9) {
        throw std::runtime_error("CIFAR-10 label out of range in " + batch_paths[fi]);
      }
      ds.labels[rec] = label;
      float* dst = ds.images.data() + rec * 3 * 32 * 32;
      const uint8_t* src = buf.data() + off + 1;
      for (size_t i = 0; i < 3 * 32 * 32; ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
    }
  }
  ds.split = batch_paths.empty() ? "" : batch_paths.front();
  return ds;
}

Dataset dataset_subset(const Dataset& ds, int count, const std::string& split_tag) {
  int n = ds.size();
  if (count <= 0 || count >= n) count = n;
  const Shape& s = ds.images.shape();
  int64_t sample = static_cast<int64_t>(s[1]) * s[2] * s[3];
  Dataset out;
  out.images = Tensor::zeros({count, s[1], s[2], s[3]});
  std::copy(ds.images.data(), ds.images.data() + count * sample, out.images.data());
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + count);
  out.split = split_tag;
  out.num_classes = ds.num_classes;
  return out;
}

std::pair<Tensor, std::vector<int>> gather_batch(const Dataset& ds,
                                                 const std::vector<int>& indices) {
  const Shape& s = ds.images.shape();
  int64_t sample = static_cast<int64_t>(s[1]) * s[2] * s[3];
  Tensor batch = Tensor::zeros({static_cast<int>(indices.size()), s[1], s[2], s[3]});
  std::vector<int> labels(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    int idx = indices[i];
    if (idx < 0 || idx >= ds.size()) {
      throw std::out_of_range("gather_batch: index " + std::to_string(idx));
    }
    std::copy(ds.images.data() + idx * sample, ds.images.data() + (idx + 1) * sample,
              batch.data() + static_cast<int64_t>(i) * sample);
    labels[i] = ds.labels[idx];
  }
  return {std::move(batch), std::move(labels)};
}

Tensor augment_and_normalize(const Tensor& batch, const AugmentConfig& cfg,
                             const std::vector<SampleTransform>& transforms) {
  const Shape& s = batch.shape();
  const int b_sz = s[0], c = s[1], h = s[2], w = s[3];
  if (static_cast<int>(transforms.size()) != b_sz) {
    throw std::invalid_argument("augment: need one transform per sample");
  }
  if (static_cast<int>(cfg.mean.size()) != c || static_cast<int>(cfg.stddev.size()) != c) {
    throw std::invalid_argument("augment config channel count does not match batch");
  }
  for (float sd : cfg.stddev) {
    if (!(sd > 0.0f)) throw std::invalid_argument("augment config stddev must be > 0");
  }
  Tensor out = Tensor::zeros(s);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int b = 0; b < b_sz; ++b) {
    const SampleTransform& tr = transforms[b];
    for (int ci = 0; ci < c; ++ci) {
      const float* src = batch.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      float* dst = out.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      float mu = cfg.mean[ci], inv_sd = 1.0f / cfg.stddev[ci];
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          int sx = tr.flip ? w - 1 - x : x;
          // Offsets index into the zero-padded image; the fill value is 0 in
          // [0,1] space, normalized like any pixel.
          int iy = y + tr.dy - cfg.crop_pad;
          int ix = sx + tr.dx - cfg.crop_pad;
          float v = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                        ? src[static_cast<int64_t>(iy) * w + ix]
                        : 0.0f;
          dst[static_cast<int64_t>(y) * w + x] = (v - mu) * inv_sd;
        }
      }
    }
  }
  return out;
}

Tensor augment_and_normalize(const Tensor& batch, const AugmentConfig& cfg, bool train,
                             RngStream& rng) {
  const int b_sz = batch.shape()[0];
  // dy = dx = crop_pad lands on the identity crop, which is what eval wants.
  std::vector<SampleTransform> transforms(
      b_sz, SampleTransform{cfg.crop_pad, cfg.crop_pad, false});
  if (train) {
    for (int b = 0; b < b_sz; ++b) {
      if (cfg.crop_pad > 0) {
        transforms[b].dy = rng.uniform_int(2 * cfg.crop_pad + 1);
        transforms[b].dx = rng.uniform_int(2 * cfg.crop_pad + 1);
      }
      if (cfg.hflip_prob > 0.0f) transforms[b].flip = rng.uniform() < cfg.hflip_prob;
    }
  }
  return augment_and_normalize(batch, cfg, transforms);
}

Tensor denormalize(const Tensor& batch, const AugmentConfig& cfg) {
  const Shape& s = batch.shape();
  const int b_sz = s[0], c = s[1];
  const int64_t plane = static_cast<int64_t>(s[2]) * s[3];
  Tensor out = Tensor::zeros(s);
  for (int b = 0; b < b_sz; ++b) {
    for (int ci = 0; ci < c; ++ci) {
      const float* src = batch.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      float* dst = out.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * cfg.stddev[ci] + cfg.mean[ci];
    }
  }
  return out;
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, bool shuffle,
                             RngStream& rng)
    : ds_(ds), batch_size_(batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  order_.resize(ds.size());
  for (int i = 0; i < ds.size(); ++i) order_[i] = i;
  if (shuffle) {
    for (int i = ds.size() - 1; i > 0; --i) {
      int j = rng.uniform_int(i + 1);
      std::swap(order_[i], order_[j]);
    }
  }
}

std::optional<std::vector<int>> BatchIterator::next_indices() {
  if (pos_ >= order_.size()) return std::nullopt;
  size_t end = std::min(pos_ + static_cast<size_t>(batch_size_), order_.size());
  std::vector<int> idx(order_.begin() + pos_, order_.begin() + end);
  pos_ = end;
  return idx;
}

std::optional<std::pair<Tensor, std::vector<int>>> BatchIterator::next() {
  auto idx = next_indices();
  if (!idx) return std::nullopt;
  return gather_batch(ds_, *idx);
}

int BatchIterator::num_batches() const {
  return static_cast<int>((order_.size() + batch_size_ - 1) / batch_size_);
}

}  // namespace cosinegate
