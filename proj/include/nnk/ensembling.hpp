// Ensembling of kernel predictors over augmented training batches (naive
// and inverse-variance weighted) and of finite networks over seeds. DA
// ensembling is the block-diagonal kernel approximation: per-batch solves
// cost O(E m^3) instead of (Em)^3.
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nnk/arch.hpp"
#include "nnk/datasets.hpp"
#include "nnk/finite_nets.hpp"
#include "nnk/inference.hpp"

namespace nnk {

enum class EnsembleWeighting { Naive, InverseVariance };

struct EnsembleSpec {
  int size = 1;                  // E
  double aug_fraction = 0.5;     // p
  std::uint64_t base_seed = 0;
  EnsembleWeighting weighting = EnsembleWeighting::Naive;
  bool clean_first = true;       // first batch is the un-augmented training set
};

Posterior ensemble_mean(const std::vector<Posterior>& members);

// Weights w_i = sigma_i^-2 / sum_j sigma_j^-2 per test point; requires
// strictly positive member variances.
Posterior ivw_mean(const std::vector<Posterior>& members);

struct DaEnsembleResult {
  Posterior combined;
  std::vector<double> prefix_accuracy;  // accuracy after each prefix E' <= E
  std::vector<double> prefix_mse;
  std::vector<Posterior> members;
};

struct DaInferenceConfig {
  ArchitectureSpec arch;
  double eps = 0.0;  // per-batch regularizer; DA ensembles default to 0
  KernelKind kind = KernelKind::NNGP;
  Precision precision = Precision::Double;
};

// Builds batches D_1 = clean train (when flagged), D_i = augment(train,
// seed_i, p), runs full kernel inference per batch and combines.
DaEnsembleResult da_ensemble(const Dataset& train, const Dataset& test, const EnsembleSpec& spec,
                             const DaInferenceConfig& cfg);

struct NetworkEnsembleResult {
  Matrix mean_logits;
  std::vector<double> accuracy_vs_size;  // after each prefix of seeds
  std::vector<double> member_accuracy;
};

// Trains one finite network per seed and averages test logits.
NetworkEnsembleResult network_ensemble(const std::vector<std::uint64_t>& seeds,
                                       const ArchitectureSpec& arch, ParamMode mode,
                                       ImageShape shape, const LabeledData& train,
                                       const LabeledData& test, const TrainConfig& cfg);

}  // namespace nnk
