// Finite-width ReLU networks under the standard (STD) and NTK
// parameterizations, with hand-rolled reverse-mode gradients.
//
// Raw parameters are stored per layer; the forward pass always multiplies
// the raw weights by the layer's effective scale (sigma_w/sqrt(fan_in) and
// sigma_b under NTK, exactly 1 under STD) before the matrix product. The
// parameterization map W_std = scale * W_ntk therefore reproduces forward
// outputs bit for bit: it performs the identical elementwise product the
// NTK forward performs.
//
// Training is plain constant-learning-rate mini-batch SGD on the MSE loss
//   L = 1/(2 |B| K) sum |f(x) - y|^2
// plus the configured L2 penalty. The critical learning rate is estimated
// from the empirical NTK of a small sample: eta_c = 2 / lambda_max(Theta /
// (n K)), the stability threshold of the linearized dynamics under this
// loss normalization.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nnk/arch.hpp"
#include "nnk/common.hpp"
#include "nnk/kernels.hpp"

namespace nnk {

enum class ParamMode { STD, NTK };
enum class L2Mode { Standard, Layerwise, ToInit };

inline const char* param_mode_name(ParamMode m) { return m == ParamMode::STD ? "std" : "ntk"; }

template <typename T>
struct Net {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  ArchitectureSpec arch;
  ParamMode mode = ParamMode::NTK;
  ImageShape shape;  // input image shape; FCN treats the input as flat
  int num_classes = 10;
  std::uint64_t seed = 0;
  std::vector<Mat> weights;  // raw parameters, fan_in x fan_out
  std::vector<Vec> biases;

  int layers() const { return static_cast<int>(weights.size()); }
  Eigen::Index fan_in(int layer) const { return weights[static_cast<std::size_t>(layer)].rows(); }
  // effective scales applied in the forward pass
  T weight_scale(int layer) const {
    if (mode == ParamMode::STD) return T(1);
    return static_cast<T>(std::sqrt(arch.weight_var / static_cast<double>(fan_in(layer))));
  }
  T bias_scale() const {
    return mode == ParamMode::STD ? T(1) : static_cast<T>(std::sqrt(arch.bias_var));
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
  }
};

template <typename T>
Net<T> init_network(const ArchitectureSpec& arch, ParamMode mode, std::uint64_t seed,
                    ImageShape shape, int num_classes);

// Logits for a batch of inputs (rows).
template <typename T>
typename Net<T>::Mat forward(const Net<T>& net, const typename Net<T>::Mat& x);

// Function-preserving parameterization swap.
template <typename T>
Net<T> map_params(const Net<T>& net, ParamMode target);

// f(theta) - f(theta_0).
template <typename T>
typename Net<T>::Mat centered_forward(const Net<T>& net, const Net<T>& init,
                                      const typename Net<T>::Mat& x);

// Empirical NTK Theta(x,x') = sum_j d_j f(x) d_j f(x') over raw parameters,
// summed over matched output classes and divided by K.
template <typename T>
Matrix empirical_ntk(const Net<T>& net, const typename Net<T>::Mat& x);
template <typename T>
Matrix empirical_ntk(const Net<T>& net, const typename Net<T>::Mat& x1,
                     const typename Net<T>::Mat& x2);

// 2 / lambda_max of the given curvature matrix.
double critical_lr_from_curvature(const Matrix& curvature);

// eta_critical from the empirical NTK of `sample` (the loss-normalized
// curvature Theta/(nK)).
template <typename T>
double estimate_critical_lr(const Net<T>& net, const typename Net<T>::Mat& sample);

// L2 penalty value. Standard: (l/2) sum |W|^2 on raw weights. Layerwise
// (STD nets only): (l/2) sum (fan_in/sigma_w^2) |W|^2, the exact image of
// the standard penalty on the NTK side under the parameterization map.
// ToInit: (l/2) sum |W - W_init|^2.
template <typename T>
double l2_penalty(const Net<T>& net, double lambda, L2Mode mode, const Net<T>* init = nullptr);

struct TrainConfig {
  double lr_factor = 1.0;  // c in eta = c * eta_critical
  double l2 = 0.0;
  L2Mode l2_mode = L2Mode::Standard;
  int batch = 100;
  long steps = 1000;
  bool centering = false;
  bool early_stop = false;  // +U: select the best-validation checkpoint
  std::uint64_t seed = 0;
  int lr_sample = 16;
  double lr_override = 0.0;  // > 0 skips the critical-LR estimate
  double divergence_loss = 1e6;
};

struct TraceRow {
  long step = 0;
  double train_loss = 0.0, train_acc = 0.0, valid_acc = -1.0, test_acc = -1.0;
};

struct LabeledData {
  Matrix x;
  Matrix y;  // encoded targets (empty for eval-only sets)
  Eigen::VectorXi labels;
};

template <typename T>
struct TrainResult {
  Net<T> net;
  std::vector<TraceRow> trace;
  bool diverged = false;
  double eta = 0.0;
  double eta_critical = 0.0;
  long selected_step = 0;  // best-valid checkpoint under early_stop, else last
  double selected_valid_acc = -1.0;
  double selected_test_acc = -1.0;
};

template <typename T>
TrainResult<T> sgd_train(const Net<T>& net0, const LabeledData& train,
                         const std::optional<LabeledData>& valid,
                         const std::optional<LabeledData>& test, const TrainConfig& cfg);

// Trains f_lin(theta) = f(theta_0) + J(theta_0)(theta - theta_0) by SGD.
// Requires lr_factor <= 1: linearized dynamics diverge above the critical
// learning rate. Predictions for extra sets are recorded at each log-spaced
// checkpoint so kernel-flow comparisons can be made at matching times.
template <typename T>
struct LinearizedResult {
  std::vector<TraceRow> trace;
  bool diverged = false;
  double eta = 0.0;
  std::vector<long> checkpoint_steps;
  std::vector<Matrix> checkpoint_test_logits;
  Matrix final_test_logits;
};

template <typename T>
LinearizedResult<T> linearize_and_train(const Net<T>& net0, const LabeledData& train,
                                        const typename Net<T>::Mat& x_test,
                                        const TrainConfig& cfg);

extern template struct Net<float>;
extern template struct Net<double>;

}  // namespace nnk
