// Dataset ingestion (CIFAR binary batches, Fashion-MNIST IDX), per-channel
// standardization, mean-subtracted one-hot targets, and deterministic
// augmentation. Images are stored one example per row in channel-plane
// layout: index = ch*h*w + y*w + x, values scaled to [0,1] at load time.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nnk/common.hpp"

namespace nnk {

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

struct Dataset {
  Matrix images;  // count x (h*w*c)
  Eigen::VectorXi labels;
  Split split = Split::Train;
  int num_classes = 0;
  int h = 0, w = 0, c = 0;

  Eigen::Index count() const { return images.rows(); }
  Eigen::Index dim() const { return images.cols(); }
};

struct DatasetTriple {
  Dataset train, valid, test;
};

struct StandardizationStats {
  Vector mean;  // per channel
  Vector stddev;
};

// Loads one of {cifar10, cifar100, fashion_mnist} from `root` in the
// canonical binary layout. Split sizes are 45k/5k/10k for CIFAR and
// 50k/10k/10k for Fashion-MNIST; the validation split is carved off the
// tail of the training files.
DatasetTriple load_dataset(const std::string& name, const std::string& root);

// Standardizes per channel using statistics of `train` only; the same
// transform is applied to every dataset in `others`.
StandardizationStats standardize(Dataset& train, std::vector<Dataset*> others);

// Row for class k is -(1/K)*ones + e_k, so each row sums to zero.
Matrix encode_targets(const Eigen::VectorXi& labels, int num_classes);

// Independently per example: with probability p, flip horizontally with
// probability 1/2 and shift by a uniform offset in [-4,4]^2 with zero
// padding. Deterministic in (seed, example index).
Dataset augment_batch(const Dataset& ds, std::uint64_t seed, double p);

// Shifts every image by (dx, dy); pixels moved in from outside are zero
// (`circular=false`) or wrapped (`circular=true`).
Matrix shift_images(const Matrix& images, int h, int w, int c, int dx, int dy, bool circular);

// Mean-pools spatial dimensions by an integer factor (e.g. 32x32 -> 8x8
// with factor 4) so CNN kernels stay at desk scale.
Dataset downsample_mean(const Dataset& ds, int factor);

// Deterministic class-stratified subset of the first `n` examples by a
// seeded permutation.
Dataset take_subset(const Dataset& ds, Eigen::Index n, std::uint64_t seed);

// Synthetic image classification data: per-class smooth random templates
// plus smooth per-example fields and pixel noise. Used when the real
// datasets are not on disk; the statistics are image-like (strong local
// correlations) and the classes are learnable.
Dataset make_synthetic(std::uint64_t seed, Eigen::Index n, int num_classes, int h, int w, int c,
                       Split split = Split::Train);
DatasetTriple make_synthetic_triple(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_valid,
                                    Eigen::Index n_test, int num_classes, int h, int w, int c);

// `load_dataset` if the files are present under `root`, otherwise a
// synthetic stand-in with the same shape and split sizes scaled to
// `fallback_*`.
DatasetTriple load_or_synthesize(const std::string& name, const std::string& root,
                                 std::uint64_t seed, Eigen::Index fallback_train,
                                 Eigen::Index fallback_valid, Eigen::Index fallback_test);

}  // namespace nnk
