// Config-driven experiment runner. Configs are flat typed key = value
// documents with INI-style sections; unknown keys are errors, and a config
// round-trips losslessly through serialize/parse. Each grid point of the
// sweep axes produces one result row carrying full provenance (config
// hash, seed, kernel precision, spectral audit summary).
//
// Validation-only tuning: the kernel regularizer is tuned on the
// validation split (eps = tune); rows produced by an explicit eps sweep
// carry validation metrics only, so the harness cannot select on test.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nnk/arch.hpp"
#include "nnk/common.hpp"
#include "nnk/datasets.hpp"
#include "nnk/ensembling.hpp"
#include "nnk/finite_nets.hpp"

namespace nnk {

enum class Method { NNGP, NTK, Flow, Finite, LinFinite };

const char* method_name(Method m);
Method method_from_name(const std::string& s);

struct ExperimentConfig {
  int schema = 1;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/out";
  std::string dataset = "synthetic";
  std::string data_root;
  Eigen::Index train_size = 1000;
  Eigen::Index valid_size = 500;
  Eigen::Index test_size = 500;
  int downsample = 1;
  int workers = 1;
  bool cache_kernels = false;

  ArchitectureSpec arch = fcn_base();
  Method method = Method::NNGP;
  std::string preprocess = "standardize";  // standardize | zca
  double zca_eps = 1.0;
  Precision precision = Precision::Double;
  std::string eps = "0";  // numeric or "tune"
  double flow_time = 1.0; // method = flow
  double flow_eta = 0.0;  // 0: m / tr(K)

  // finite-network settings
  ParamMode param = ParamMode::NTK;
  TrainConfig train;

  // ensembling
  int ensemble_size = 1;
  double aug_fraction = 0.5;
  EnsembleWeighting weighting = EnsembleWeighting::Naive;
  bool clean_first = true;

  // sweep axes (empty = use the base value)
  std::vector<int> sweep_width;
  std::vector<double> sweep_zca_eps;
  std::vector<double> sweep_eps;
  std::vector<double> sweep_c;
  std::vector<double> sweep_l2;
  std::vector<int> sweep_ensemble;

  std::string serialize() const;
  std::uint64_t hash() const { return fnv1a64(serialize()); }
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

struct ResultRow {
  std::map<std::string, std::string> cols;
};

struct ResultTable {
  std::vector<std::string> header;
  std::vector<ResultRow> rows;
};

// Canonical result schema shared by all methods.
const std::vector<std::string>& result_columns();

ResultTable run_experiment(const ExperimentConfig& cfg);

void write_csv(const ResultTable& table, const std::string& path);  // atomic
ResultTable read_csv(const std::string& path);

// Merges result tables (schemas must agree; duplicates dropped with a
// warning count) and derives the NNGP-vs-NTK paired view when possible.
struct ReportOutput {
  ResultTable merged;
  ResultTable nngp_vs_ntk;  // paired rows for scatter-style figures
  int duplicates_dropped = 0;
};
ReportOutput report(const std::vector<ResultTable>& tables);

// Accuracy under crop (zero padding) or translate (circular) shifts of the
// test inputs, random axis direction per image per seed, averaged over
// seeds.
enum class ShiftTransform { Crop, Translate };

struct RobustnessPoint {
  int magnitude = 0;
  double mean_accuracy = 0.0;
  double min_accuracy = 0.0;
  double max_accuracy = 0.0;
};

using BatchPredictor = std::function<Matrix(const Matrix& images)>;

std::vector<RobustnessPoint> robustness_sweep(const BatchPredictor& predict, const Dataset& test,
                                              ShiftTransform transform,
                                              const std::vector<int>& magnitudes, int n_seeds,
                                              std::uint64_t seed);

}  // namespace nnk
