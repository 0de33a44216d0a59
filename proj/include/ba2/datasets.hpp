// Dataset ingestion: IDX image/label pairs, CIFAR-style binary records, and
// seed-deterministic synthetic generators, plus split handling and the
// horizontal-mirror augmentation used during training.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ba2/rng.hpp"
#include "ba2/tensor.hpp"

namespace ba2 {

struct Dataset {
  std::string name;
  Tensor4<float> images;  // (N, H, W, C), already normalized
  std::vector<int> labels;
  int classes = 0;

  int count() const { return images.n; }
};

// One domain's data as the trainers consume it.
struct DomainData {
  std::string name;
  int classes = 0;
  Dataset train, val, test;
};

// IDX pair (big-endian dims; image magic 0x00000803, label magic
// 0x00000801). Pixels are bytes, normalized as (v/255 - mean) / sd.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, int classes,
                 float mean = 0.5f, float sd = 0.5f);

// Parse from in-memory buffers (the file loaders call these; tests exercise
// them directly with synthesized bytes).
Dataset parse_idx(const std::vector<std::uint8_t>& images,
                  const std::vector<std::uint8_t>& labels, int classes, float mean = 0.5f,
                  float sd = 0.5f);

// CIFAR binary: each record is 1 label byte + 3x1024 channel-planar pixels
// of a 32x32 RGB image; file size must be an exact multiple of 3073.
Dataset load_cifar(const std::vector<std::string>& paths, int classes, float mean = 0.5f,
                   float sd = 0.5f);
Dataset parse_cifar(const std::vector<std::uint8_t>& bytes, int classes, float mean = 0.5f,
                    float sd = 0.5f);

// Seed-deterministic synthetic domains, one-channel images with values
// roughly in [-1, 1], four classes each, balanced labels. Families:
//   gratings  — horizontal/vertical stripes at low/high frequency
//   checkers  — checkerboards with class-specific cell size
//   rings     — concentric rings at class-specific radial frequency
// Every class is invariant under horizontal mirroring, so the training-time
// augmentation never crosses class boundaries.
Dataset synth_dataset(const std::string& family, std::uint64_t seed, int count, int h, int w);

// First `train`, next `val`, next `test` samples (must not overlap the end).
DomainData split_domain(const Dataset& ds, int train, int val, int test);

// Horizontal mirror of every image (flips the W axis).
Tensor4<float> mirror_h(const Tensor4<float>& images);

}  // namespace ba2
