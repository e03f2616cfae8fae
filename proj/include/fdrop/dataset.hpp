#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fdrop/rng.hpp"
#include "fdrop/types.hpp"

namespace fdrop {

/// Per-channel statistics computed once over a training split and reused for
/// every normalization (stored in manifests so checkpoints stay usable).
struct Normalization {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> stddev{1.f, 1.f, 1.f};
};

/// Images are held raw in [0,1]; normalization happens at batch assembly so
/// augmentation's zero padding stays meaningful.
struct Dataset {
  Tensor images;  // (N, 3, H, W)
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;   // "train" or "test"
  std::string source;  // e.g. "cifar10", "synthetic"

  int count() const { return images.ndim() == 4 ? images.dim(0) : 0; }
  int image_size() const { return images.ndim() == 4 ? images.dim(2) : 0; }
};

struct DataBundle {
  Dataset train;
  Dataset test;
  std::string source;
  std::uint64_t seed = 0;  // synthetic only
};

/// CIFAR binary ingestion (variant 10 or 100). Expects the canonical files
/// under `dir`: data_batch_1..5.bin + test_batch.bin, or train.bin +
/// test.bin. Returns exactly 50,000 train and 10,000 test records; size
/// mismatches raise errors naming the byte offset.
DataBundle load_cifar(const std::string& dir, int variant);

/// One CIFAR binary file with a caller-chosen record count (the public
/// loader fixes the canonical 10000-per-file counts). Useful for fixtures
/// and partial ingestion tooling.
Dataset load_cifar_file_records(const std::string& path, int variant,
                                int expected_records);

/// Single balanced split of class-conditional geometric patterns (bars,
/// discs, ...) at random positions and colors on noisy backgrounds:
/// deterministic under seed, CNN-learnable but not pixel-linear-separable.
Dataset make_synthetic(int classes, int n_per_class, int size, std::uint64_t seed);

/// Train + test synthetic splits drawn from disjoint derived streams.
DataBundle make_synthetic_bundle(int classes, int n_train_per_class,
                                 int n_test_per_class, int size, std::uint64_t seed);

/// Dataset-wide per-channel mean/std; rejects pixels outside [0,1].
Normalization compute_normalization(const Dataset& train);

struct AugmentPolicy {
  double flip_prob = 0.5;
  int crop_pad = 4;  // zero-pad then crop back to the original size
};

/// Per-image horizontal flip and random crop, each image on its own derived
/// stream. Cropping never changes the output size.
Tensor augment(const Tensor& batch, const AugmentPolicy& policy, const Rng& rng);

/// Copies the indexed images into a fresh (B,3,H,W) batch (raw values).
Tensor gather_batch(const Dataset& ds, std::span<const int> indices);

Tensor normalize_batch(const Tensor& raw, const Normalization& norm);

/// Fisher-Yates permutation of 0..n-1 from the given stream.
std::vector<int> shuffled_indices(int n, Rng& rng);

void write_dataset_manifest(const std::string& path, const DataBundle& bundle,
                            const Normalization& norm);

/// Parses CLI dataset specs: "cifar10:<dir>", "cifar100:<dir>", or
/// "synthetic:classes=3,n=300,n_test=100,size=16,seed=7".
DataBundle load_dataset_spec(const std::string& spec);

}  // namespace fdrop
