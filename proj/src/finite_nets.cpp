#include "nnk/finite_nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nnk/inference.hpp"
#include "nnk/linalg.hpp"

namespace nnk {

namespace {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// offset-major im2col: column o*C + ch holds tap (oy,ox)=offsets[o] of
// channel ch; out-of-bounds taps stay zero (SAME padding).
template <typename T>
void im2col(const MatT<T>& a, Eigen::Index m, int h, int w, MatT<T>& patches) {
  const int p = h * w;
  const Eigen::Index c = a.cols();
  patches.setZero(m * p, 9 * c);
  for (int oy = -1; oy <= 1; ++oy) {
    const int y0 = std::max(0, -oy), y1 = std::min(h, h - oy);
    for (int ox = -1; ox <= 1; ++ox) {
      const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
      const int nx = x1 - x0;
      if (nx <= 0) continue;
      const int o = (oy + 1) * 3 + (ox + 1);
      for (Eigen::Index i = 0; i < m; ++i)
        for (int y = y0; y < y1; ++y)
          patches.block(i * p + y * w + x0, o * c, nx, c) =
              a.block(i * p + (y + oy) * w + x0 + ox, 0, nx, c);
    }
  }
}

template <typename T>
void col2im_add(const MatT<T>& dpatches, Eigen::Index m, int h, int w, MatT<T>& da) {
  const int p = h * w;
  const Eigen::Index c = da.cols();
  for (int oy = -1; oy <= 1; ++oy) {
    const int y0 = std::max(0, -oy), y1 = std::min(h, h - oy);
    for (int ox = -1; ox <= 1; ++ox) {
      const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
      const int nx = x1 - x0;
      if (nx <= 0) continue;
      const int o = (oy + 1) * 3 + (ox + 1);
      for (Eigen::Index i = 0; i < m; ++i)
        for (int y = y0; y < y1; ++y)
          da.block(i * p + (y + oy) * w + x0 + ox, 0, nx, c) +=
              dpatches.block(i * p + y * w + x0, o * c, nx, c);
    }
  }
}

// (m*P x C) pixel-major activations from channel-plane rows.
template <typename T>
MatT<T> to_pixel_major(const MatT<T>& x, const ImageShape& s) {
  const int p = s.pixels();
  MatT<T> a(x.rows() * p, s.c);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int ch = 0; ch < s.c; ++ch)
      a.col(ch).segment(i * p, p) = x.row(i).segment(ch * p, p).transpose();
  return a;
}

template <typename T>
struct ForwardTrace {
  std::vector<MatT<T>> acts;  // input to each weight layer, layer layout
  MatT<T> readout_in;         // input to the readout layer (m x fan)
  MatT<T> logits;             // m x K
};

template <typename T>
bool is_cnn(const Net<T>& net) {
  return net.arch.family != Family::FCN;
}

// Forward pass storing the per-layer inputs needed for gradients. The
// effective weight s*W is always materialized so STD and NTK nets with
// mapped parameters execute the identical product.
template <typename T>
ForwardTrace<T> forward_trace(const Net<T>& net, const MatT<T>& x) {
  ForwardTrace<T> tr;
  const int L = net.layers();
  const T bs = net.bias_scale();
  if (!is_cnn(net)) {
    MatT<T> a = x;
    for (int l = 0; l + 1 < L; ++l) {
      tr.acts.push_back(a);
      MatT<T> weff = net.weights[l] * net.weight_scale(l);
      MatT<T> z = a * weff;
      z.rowwise() += (net.biases[l] * bs).transpose();
      a = z.cwiseMax(T(0));
    }
    tr.readout_in = a;
  } else {
    const int p = net.shape.pixels();
    const Eigen::Index m = x.rows();
    MatT<T> a = to_pixel_major(x, net.shape);
    MatT<T> patches;
    for (int l = 0; l + 1 < L; ++l) {
      tr.acts.push_back(a);
      im2col(a, m, net.shape.h, net.shape.w, patches);
      MatT<T> weff = net.weights[l] * net.weight_scale(l);
      MatT<T> z = patches * weff;
      z.rowwise() += (net.biases[l] * bs).transpose();
      a = z.cwiseMax(T(0));
    }
    const Eigen::Index c = a.cols();
    if (net.arch.family == Family::CNN_GAP) {
      tr.readout_in.resize(m, c);
      for (Eigen::Index i = 0; i < m; ++i)
        tr.readout_in.row(i) = a.middleRows(i * p, p).colwise().mean();
    } else {  // VEC: flatten pixel-major
      tr.readout_in.resize(m, p * c);
      for (Eigen::Index i = 0; i < m; ++i)
        for (int q = 0; q < p; ++q)
          tr.readout_in.row(i).segment(q * c, c) = a.row(i * p + q);
    }
    tr.acts.push_back(std::move(a));  // keep last conv activations for backward
  }
  const int l = L - 1;
  MatT<T> weff = net.weights[l] * net.weight_scale(l);
  tr.logits = tr.readout_in * weff;
  tr.logits.rowwise() += (net.biases[l] * bs).transpose();
  return tr;
}

template <typename T>
struct Gradients {
  std::vector<MatT<T>> weights;
  std::vector<VecT<T>> biases;
  void init_like(const Net<T>& net) {
    weights.resize(net.weights.size());
    biases.resize(net.biases.size());
    for (std::size_t i = 0; i < net.weights.size(); ++i)
      weights[i].setZero(net.weights[i].rows(), net.weights[i].cols());
    for (std::size_t i = 0; i < net.biases.size(); ++i) biases[i].setZero(net.biases[i].size());
  }
};

// Reverse pass for raw-parameter gradients given dL/dlogits.
template <typename T>
void backward(const Net<T>& net, const ForwardTrace<T>& tr, const MatT<T>& dlogits,
              Gradients<T>& g) {
  const int L = net.layers();
  const T bs = net.bias_scale();
  const int ro = L - 1;
  g.weights[ro].noalias() = net.weight_scale(ro) * (tr.readout_in.transpose() * dlogits);
  g.biases[ro] = bs * dlogits.colwise().sum().transpose();
  MatT<T> dread = dlogits * (net.weights[ro] * net.weight_scale(ro)).transpose();

  if (!is_cnn(net)) {
    MatT<T> da = std::move(dread);
    for (int l = L - 2; l >= 0; --l) {
      const MatT<T>& a_next = (l + 2 < L) ? tr.acts[static_cast<std::size_t>(l + 1)]
                                          : tr.readout_in;
      MatT<T> dz = da.cwiseProduct((a_next.array() > T(0)).template cast<T>().matrix());
      g.weights[l].noalias() =
          net.weight_scale(l) * (tr.acts[static_cast<std::size_t>(l)].transpose() * dz);
      g.biases[l] = bs * dz.colwise().sum().transpose();
      if (l > 0) da = dz * (net.weights[l] * net.weight_scale(l)).transpose();
    }
    return;
  }

  const int p = net.shape.pixels();
  const Eigen::Index m = tr.logits.rows();
  const MatT<T>& a_last = tr.acts.back();  // (m*P x C), post-relu of last conv
  MatT<T> da(m * p, a_last.cols());
  if (net.arch.family == Family::CNN_GAP) {
    const T inv = T(1) / static_cast<T>(p);
    for (Eigen::Index i = 0; i < m; ++i)
      da.middleRows(i * p, p) = inv * dread.row(i).replicate(p, 1);
  } else {
    for (Eigen::Index i = 0; i < m; ++i)
      for (int q = 0; q < p; ++q)
        da.row(i * p + q) = dread.row(i).segment(q * a_last.cols(), a_last.cols());
  }

  MatT<T> patches, dpatches;
  for (int l = L - 2; l >= 0; --l) {
    const MatT<T>& a_in = tr.acts[static_cast<std::size_t>(l)];
    const MatT<T>& a_out = tr.acts[static_cast<std::size_t>(l + 1)];
    MatT<T> dz = da.cwiseProduct((a_out.array() > T(0)).template cast<T>().matrix());
    im2col(a_in, m, net.shape.h, net.shape.w, patches);
    g.weights[l].noalias() = net.weight_scale(l) * (patches.transpose() * dz);
    g.biases[l] = bs * dz.colwise().sum().transpose();
    if (l > 0) {
      dpatches.noalias() = dz * (net.weights[l] * net.weight_scale(l)).transpose();
      da.setZero(m * p, a_in.cols());
      col2im_add(dpatches, m, net.shape.h, net.shape.w, da);
    }
  }
}

template <typename T>
std::vector<std::pair<Eigen::Index, Eigen::Index>> layer_dims(const ArchitectureSpec& arch,
                                                              ImageShape shape, int num_classes) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
  if (arch.family == Family::FCN) {
    Eigen::Index in = shape.dim();
    for (int l = 0; l < arch.depth; ++l) {
      dims.push_back({in, arch.units});
      in = arch.units;
    }
    dims.push_back({in, num_classes});
  } else {
    Eigen::Index in_c = shape.c;
    for (int l = 0; l < arch.depth; ++l) {
      dims.push_back({9 * in_c, arch.units});
      in_c = arch.units;
    }
    const Eigen::Index ro_in =
        arch.family == Family::CNN_GAP ? in_c : in_c * shape.pixels();
    dims.push_back({ro_in, num_classes});
  }
  return dims;
}

}  // namespace

template <typename T>
Net<T> init_network(const ArchitectureSpec& arch, ParamMode mode, std::uint64_t seed,
                    ImageShape shape, int num_classes) {
  arch.validate();
  if (arch.family != Family::FCN && arch.depth < 1)
    throw ConfigError("init_network: conv nets need depth >= 1");
  Net<T> net;
  net.arch = arch;
  net.mode = mode;
  net.shape = shape;
  net.num_classes = num_classes;
  net.seed = seed;
  const auto dims = layer_dims<T>(arch, shape, num_classes);
  net.weights.resize(dims.size());
  net.biases.resize(dims.size());
  for (std::size_t l = 0; l < dims.size(); ++l) {
    auto& w = net.weights[l];
    auto& b = net.biases[l];
    w.resize(dims[l].first, dims[l].second);
    b.resize(dims[l].second);
    fill_normal(w.data(), static_cast<std::size_t>(w.size()), rng_mix(seed, 2 * l));
    fill_normal(b.data(), static_cast<std::size_t>(b.size()), rng_mix(seed, 2 * l + 1));
    if (mode == ParamMode::STD) {
      // same raw draws as NTK mode, scaled into the weights at init
      w *= static_cast<T>(std::sqrt(arch.weight_var / static_cast<double>(dims[l].first)));
      b *= static_cast<T>(std::sqrt(arch.bias_var));
    }
  }
  return net;
}

template <typename T>
typename Net<T>::Mat forward(const Net<T>& net, const typename Net<T>::Mat& x) {
  return forward_trace(net, x).logits;
}

template <typename T>
Net<T> map_params(const Net<T>& net, ParamMode target) {
  if (net.mode == target) return net;
  Net<T> out = net;
  out.mode = target;
  if (target == ParamMode::STD) {
    // the exact elementwise product the NTK forward applies
    for (int l = 0; l < net.layers(); ++l) {
      out.weights[l] = net.weights[l] * net.weight_scale(l);
      out.biases[l] = net.biases[l] * net.bias_scale();
    }
  } else {
    for (int l = 0; l < out.layers(); ++l) {
      out.weights[l] = net.weights[l] / out.weight_scale(l);
      const T bs = out.bias_scale();
      if (bs > T(0))
        out.biases[l] = net.biases[l] / bs;
      else
        out.biases[l].setZero();
    }
  }
  return out;
}

template <typename T>
typename Net<T>::Mat centered_forward(const Net<T>& net, const Net<T>& init,
                                      const typename Net<T>::Mat& x) {
  return forward(net, x) - forward(init, x);
}

// ---------------------------------------------------------------------------
// Empirical NTK

namespace {

// FCN route: layer-factorized Gram accumulation; never materializes
// per-parameter Jacobians, so it scales to wide nets.
template <typename T>
Matrix empirical_ntk_fcn(const Net<T>& net, const MatT<T>& x1, const MatT<T>& x2,
                         bool symmetric) {
  const int L = net.layers();
  const int K = net.num_classes;
  const T bs = net.bias_scale();
  ForwardTrace<T> t1 = forward_trace(net, x1);
  ForwardTrace<T> t2 = symmetric ? ForwardTrace<T>() : forward_trace(net, x2);
  const ForwardTrace<T>& tb = symmetric ? t1 : t2;
  const Eigen::Index m1 = x1.rows(), m2 = symmetric ? x1.rows() : x2.rows();

  Matrix theta = Matrix::Zero(m1, m2);
  // Readout layer: each class gradient is (readout_in ⊗ e_c), so the
  // matched-class average is just the activation Gram plus the bias term.
  theta += (net.weight_scale(L - 1) * net.weight_scale(L - 1) *
            (t1.readout_in * tb.readout_in.transpose()))
               .template cast<double>();
  theta.array() += static_cast<double>(bs * bs);

  // Hidden layers: per-class deltas D_c = df_c/dz_l stacked over classes.
  auto relu_mask = [](const MatT<T>& a) {
    return (a.array() > T(0)).template cast<T>().matrix();
  };
  std::vector<MatT<T>> d1(static_cast<std::size_t>(K)), d2(static_cast<std::size_t>(K));
  for (int c = 0; c < K; ++c) {
    const MatT<T> wro = net.weights[L - 1] * net.weight_scale(L - 1);
    d1[static_cast<std::size_t>(c)] =
        relu_mask(t1.readout_in).array().rowwise() * wro.col(c).transpose().array();
    if (!symmetric)
      d2[static_cast<std::size_t>(c)] =
          relu_mask(tb.readout_in).array().rowwise() * wro.col(c).transpose().array();
  }
  for (int l = L - 2; l >= 0; --l) {
    // contribution of weight layer l (deltas currently at z_{l+1})
    Matrix ga = (t1.acts[static_cast<std::size_t>(l)] *
                 tb.acts[static_cast<std::size_t>(l)].transpose())
                    .template cast<double>();
    Matrix pd = Matrix::Zero(m1, m2);
    for (int c = 0; c < K; ++c) {
      const auto& a = d1[static_cast<std::size_t>(c)];
      const auto& b = symmetric ? d1[static_cast<std::size_t>(c)] : d2[static_cast<std::size_t>(c)];
      pd += (a * b.transpose()).template cast<double>();
    }
    pd /= static_cast<double>(K);
    const double s2 = static_cast<double>(net.weight_scale(l)) * net.weight_scale(l);
    theta += s2 * ga.cwiseProduct(pd) + static_cast<double>(bs * bs) * pd;
    if (l > 0) {
      const MatT<T> weff = net.weights[l] * net.weight_scale(l);
      for (int c = 0; c < K; ++c) {
        d1[static_cast<std::size_t>(c)] =
            (d1[static_cast<std::size_t>(c)] * weff.transpose())
                .cwiseProduct(relu_mask(t1.acts[static_cast<std::size_t>(l)]));
        if (!symmetric)
          d2[static_cast<std::size_t>(c)] =
              (d2[static_cast<std::size_t>(c)] * weff.transpose())
                  .cwiseProduct(relu_mask(tb.acts[static_cast<std::size_t>(l)]));
      }
    }
  }
  return theta;
}

// CNN route: explicit per-(example, class) raw-parameter gradients. Fine at
// desk scale and independent of the factorized path.
template <typename T>
Matrix empirical_ntk_explicit(const Net<T>& net, const MatT<T>& x1, const MatT<T>& x2,
                              bool symmetric) {
  const int K = net.num_classes;
  auto grads_for = [&](const MatT<T>& x) {
    const Eigen::Index m = x.rows();
    const std::size_t np = net.parameter_count();
    std::vector<Matrix> per_class(static_cast<std::size_t>(K),
                                  Matrix(m, static_cast<Eigen::Index>(np)));
    Gradients<T> g;
    g.init_like(net);
    for (Eigen::Index i = 0; i < m; ++i) {
      const MatT<T> xi = x.row(i);
      ForwardTrace<T> tr = forward_trace(net, xi);
      for (int c = 0; c < K; ++c) {
        MatT<T> dl = MatT<T>::Zero(1, K);
        dl(0, c) = T(1);
        backward(net, tr, dl, g);
        Eigen::Index at = 0;
        auto& row = per_class[static_cast<std::size_t>(c)];
        for (const auto& w : g.weights) {
          row.row(i).segment(at, w.size()) =
              Eigen::Map<const VecT<T>>(w.data(), w.size()).template cast<double>().transpose();
          at += w.size();
        }
        for (const auto& b : g.biases) {
          row.row(i).segment(at, b.size()) = b.template cast<double>().transpose();
          at += b.size();
        }
      }
    }
    return per_class;
  };
  auto g1 = grads_for(x1);
  auto g2 = symmetric ? std::vector<Matrix>() : grads_for(x2);
  const auto& gb = symmetric ? g1 : g2;
  Matrix theta = Matrix::Zero(x1.rows(), symmetric ? x1.rows() : x2.rows());
  for (int c = 0; c < K; ++c)
    theta += g1[static_cast<std::size_t>(c)] * gb[static_cast<std::size_t>(c)].transpose();
  return theta / static_cast<double>(K);
}

}  // namespace

template <typename T>
Matrix empirical_ntk(const Net<T>& net, const typename Net<T>::Mat& x1,
                     const typename Net<T>::Mat& x2) {
  const bool symmetric = (&x1 == &x2) || (x1.data() == x2.data() && x1.rows() == x2.rows());
  Matrix theta = is_cnn(net) ? empirical_ntk_explicit(net, x1, x2, symmetric)
                             : empirical_ntk_fcn(net, x1, x2, symmetric);
  if (symmetric) theta = 0.5 * (theta + theta.transpose());  // exact symmetry
  return theta;
}

template <typename T>
Matrix empirical_ntk(const Net<T>& net, const typename Net<T>::Mat& x) {
  return empirical_ntk(net, x, x);
}

double critical_lr_from_curvature(const Matrix& curvature) {
  const Vector evals = sym_eigvals(0.5 * (curvature + curvature.transpose()));
  const double lam_max = evals.maxCoeff();
  if (lam_max <= 0.0)
    throw ConditioningError("critical_lr_from_curvature: lambda_max <= 0", lam_max, 0.0);
  return 2.0 / lam_max;
}

template <typename T>
double estimate_critical_lr(const Net<T>& net, const typename Net<T>::Mat& sample) {
  const Matrix theta = empirical_ntk(net, sample);
  const double n = static_cast<double>(sample.rows());
  const double k = static_cast<double>(net.num_classes);
  return critical_lr_from_curvature(theta / (n * k));
}

template <typename T>
double l2_penalty(const Net<T>& net, double lambda, L2Mode mode, const Net<T>* init) {
  if (mode == L2Mode::Layerwise && net.mode != ParamMode::STD)
    throw ConfigError("l2_penalty: layerwise mode is defined for STD-parameterized nets only");
  if (mode == L2Mode::ToInit && init == nullptr)
    throw ConfigError("l2_penalty: to-init mode needs the initial parameters");
  double acc = 0.0;
  for (int l = 0; l < net.layers(); ++l) {
    const auto& w = net.weights[l];
    switch (mode) {
      case L2Mode::Standard:
        acc += static_cast<double>(w.squaredNorm());
        break;
      case L2Mode::Layerwise:
        // fan_in / sigma_w^2: the exact image of standard L2 on the mapped
        // NTK-parameterized weights
        acc += static_cast<double>(w.squaredNorm()) * static_cast<double>(w.rows()) /
               net.arch.weight_var;
        break;
      case L2Mode::ToInit:
        acc += static_cast<double>((w - init->weights[static_cast<std::size_t>(l)]).squaredNorm());
        break;
    }
  }
  return 0.5 * lambda * acc;
}

// ---------------------------------------------------------------------------
// Training

namespace {

template <typename T>
void add_l2_gradient(const Net<T>& net, double lambda, L2Mode mode, const Net<T>* init,
                     Gradients<T>& g) {
  if (lambda == 0.0) return;
  for (int l = 0; l < net.layers(); ++l) {
    switch (mode) {
      case L2Mode::Standard:
        g.weights[l] += static_cast<T>(lambda) * net.weights[l];
        break;
      case L2Mode::Layerwise:
        g.weights[l] += static_cast<T>(lambda * static_cast<double>(net.weights[l].rows()) /
                                       net.arch.weight_var) *
                        net.weights[l];
        break;
      case L2Mode::ToInit:
        g.weights[l] += static_cast<T>(lambda) *
                        (net.weights[l] - init->weights[static_cast<std::size_t>(l)]);
        break;
    }
  }
}

std::vector<long> checkpoint_schedule(long steps) {
  std::vector<long> cp{0};
  for (long s = 1; s < steps; s *= 2) cp.push_back(s);
  cp.push_back(steps);
  return cp;
}

template <typename T>
MatT<T> gather_rows(const MatT<T>& x, const std::vector<Eigen::Index>& idx, std::size_t begin,
                    std::size_t end) {
  MatT<T> out(static_cast<Eigen::Index>(end - begin), x.cols());
  for (std::size_t i = begin; i < end; ++i)
    out.row(static_cast<Eigen::Index>(i - begin)) = x.row(idx[i]);
  return out;
}

Matrix gather_rows_d(const Matrix& x, const std::vector<Eigen::Index>& idx, std::size_t begin,
                     std::size_t end) {
  Matrix out(static_cast<Eigen::Index>(end - begin), x.cols());
  for (std::size_t i = begin; i < end; ++i)
    out.row(static_cast<Eigen::Index>(i - begin)) = x.row(idx[i]);
  return out;
}

// seed-derived permutation for epoch `e`
std::vector<Eigen::Index> epoch_permutation(Eigen::Index n, std::uint64_t seed, long e) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const std::uint64_t key = rng_mix(seed, 0xBA7C4ull, static_cast<std::uint64_t>(e));
  for (std::size_t i = idx.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<std::size_t>(uniform_below(key, i, i + 1))]);
  return idx;
}

}  // namespace

template <typename T>
TrainResult<T> sgd_train(const Net<T>& net0, const LabeledData& train,
                         const std::optional<LabeledData>& valid,
                         const std::optional<LabeledData>& test, const TrainConfig& cfg) {
  if (cfg.lr_factor <= 0.0) throw ConfigError("sgd_train: lr factor must be > 0");
  if (cfg.l2 < 0.0) throw ConfigError("sgd_train: l2 must be >= 0");
  if (train.y.rows() != train.x.rows())
    throw DimensionError("sgd_train: target rows != input rows");

  TrainResult<T> res;
  res.net = net0;
  Net<T>& net = res.net;
  const Net<T> init = net0;
  const Eigen::Index n = train.x.rows();
  const int num_classes = net.num_classes;

  MatT<T> x_train = train.x.cast<T>();
  MatT<T> y_train = train.y.cast<T>();
  MatT<T> x_valid, x_test;
  if (valid) x_valid = valid->x.cast<T>();
  if (test) x_test = test->x.cast<T>();

  {
    const Eigen::Index ns = std::min<Eigen::Index>(cfg.lr_sample, n);
    const auto perm = epoch_permutation(n, rng_mix(cfg.seed, 0x16EAull), -1);
    std::vector<Eigen::Index> pick(perm.begin(), perm.begin() + ns);
    MatT<T> sample = gather_rows(x_train, pick, 0, static_cast<std::size_t>(ns));
    res.eta_critical = estimate_critical_lr(net, sample);
  }
  res.eta = cfg.lr_override > 0.0 ? cfg.lr_override : cfg.lr_factor * res.eta_critical;
  const T eta = static_cast<T>(res.eta);

  // centering subtracts the (fixed) initial predictions everywhere
  MatT<T> f0_train, f0_valid, f0_test;
  if (cfg.centering) {
    f0_train = forward(init, x_train);
    if (valid) f0_valid = forward(init, x_valid);
    if (test) f0_test = forward(init, x_test);
  }

  auto eval_checkpoint = [&](long step) {
    TraceRow row;
    row.step = step;
    MatT<T> f = forward(net, x_train);
    if (cfg.centering) f -= f0_train;
    row.train_loss = (f - y_train).squaredNorm() / (2.0 * n * num_classes);
    row.train_acc = evaluate(f.template cast<double>(), train.labels).accuracy;
    if (valid) {
      MatT<T> fv = forward(net, x_valid);
      if (cfg.centering) fv -= f0_valid;
      row.valid_acc = evaluate(fv.template cast<double>(), valid->labels).accuracy;
    }
    if (test) {
      MatT<T> ft = forward(net, x_test);
      if (cfg.centering) ft -= f0_test;
      row.test_acc = evaluate(ft.template cast<double>(), test->labels).accuracy;
    }
    res.trace.push_back(row);
  };

  const auto checkpoints = checkpoint_schedule(cfg.steps);
  std::size_t next_cp = 0;
  Gradients<T> g;
  g.init_like(net);
  long epoch = 0;
  std::size_t cursor = 0;
  std::vector<Eigen::Index> perm = epoch_permutation(n, cfg.seed, epoch);

  for (long step = 0; step <= cfg.steps; ++step) {
    if (next_cp < checkpoints.size() && step == checkpoints[next_cp]) {
      eval_checkpoint(step);
      ++next_cp;
    }
    if (step == cfg.steps || res.diverged) break;

    if (cursor >= perm.size()) {
      perm = epoch_permutation(n, cfg.seed, ++epoch);
      cursor = 0;
    }
    const std::size_t take =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), perm.size() - cursor);
    MatT<T> xb = gather_rows(x_train, perm, cursor, cursor + take);
    MatT<T> yb = gather_rows(y_train, perm, cursor, cursor + take);
    MatT<T> f0b;
    if (cfg.centering) {
      f0b.resize(static_cast<Eigen::Index>(take), num_classes);
      for (std::size_t i = 0; i < take; ++i)
        f0b.row(static_cast<Eigen::Index>(i)) = f0_train.row(perm[cursor + i]);
    }
    cursor += take;

    ForwardTrace<T> tr = forward_trace(net, xb);
    MatT<T> f = cfg.centering ? MatT<T>(tr.logits - f0b) : tr.logits;
    const double batch_loss =
        (f - yb).squaredNorm() / (2.0 * static_cast<double>(take) * num_classes);
    if (!std::isfinite(batch_loss) || batch_loss > cfg.divergence_loss) {
      res.diverged = true;
      continue;  // final checkpoint still recorded above on next pass
    }
    MatT<T> dlogits = (f - yb) / static_cast<T>(static_cast<double>(take) * num_classes);
    backward(net, tr, dlogits, g);
    add_l2_gradient(net, cfg.l2, cfg.l2_mode, &init, g);
    for (int l = 0; l < net.layers(); ++l) {
      net.weights[l] -= eta * g.weights[l];
      net.biases[l] -= eta * g.biases[l];
    }
  }

  // +U selects the best-validation checkpoint; otherwise the last one
  std::size_t sel = res.trace.size() - 1;
  if (cfg.early_stop && valid) {
    for (std::size_t i = 0; i < res.trace.size(); ++i)
      if (res.trace[i].valid_acc > res.trace[sel].valid_acc) sel = i;
  }
  res.selected_step = res.trace[sel].step;
  res.selected_valid_acc = res.trace[sel].valid_acc;
  res.selected_test_acc = res.trace[sel].test_acc;
  return res;
}

// ---------------------------------------------------------------------------
// Linearized training: f_lin(theta) = f(theta_0) + J(theta_0) (theta - theta_0)

namespace {

// Tangent forward through the frozen trace: returns J(theta_0) applied to
// the parameter direction `d` on the examples of `tr`.
template <typename T>
MatT<T> jvp(const Net<T>& net, const ForwardTrace<T>& tr, const MatT<T>& x,
            const Gradients<T>& d) {
  const int L = net.layers();
  const T bs = net.bias_scale();
  auto mask = [](const MatT<T>& a) { return (a.array() > T(0)).template cast<T>().matrix(); };

  MatT<T> ta;  // tangent of the running activation
  if (!is_cnn(net)) {
    for (int l = 0; l + 1 < L; ++l) {
      const MatT<T>& a = tr.acts[static_cast<std::size_t>(l)];
      const MatT<T>& a_next = (l + 2 < L) ? tr.acts[static_cast<std::size_t>(l + 1)]
                                          : tr.readout_in;
      MatT<T> tz = a * (d.weights[l] * net.weight_scale(l));
      if (ta.size() > 0) tz.noalias() += ta * (net.weights[l] * net.weight_scale(l));
      tz.rowwise() += (d.biases[l] * bs).transpose();
      ta = tz.cwiseProduct(mask(a_next));
    }
    MatT<T> tlog = tr.readout_in * (d.weights[L - 1] * net.weight_scale(L - 1));
    if (ta.size() > 0) tlog.noalias() += ta * (net.weights[L - 1] * net.weight_scale(L - 1));
    tlog.rowwise() += (d.biases[L - 1] * bs).transpose();
    return tlog;
  }

  const int p = net.shape.pixels();
  const Eigen::Index m = x.rows();
  MatT<T> patches, tpatches;
  for (int l = 0; l + 1 < L; ++l) {
    const MatT<T>& a = tr.acts[static_cast<std::size_t>(l)];
    const MatT<T>& a_next = tr.acts[static_cast<std::size_t>(l + 1)];
    im2col(a, m, net.shape.h, net.shape.w, patches);
    MatT<T> tz = patches * (d.weights[l] * net.weight_scale(l));
    if (ta.size() > 0) {
      im2col(ta, m, net.shape.h, net.shape.w, tpatches);
      tz.noalias() += tpatches * (net.weights[l] * net.weight_scale(l));
    }
    tz.rowwise() += (d.biases[l] * bs).transpose();
    ta = tz.cwiseProduct(mask(a_next));
  }
  const Eigen::Index c = ta.cols();
  MatT<T> tread;
  if (net.arch.family == Family::CNN_GAP) {
    tread.resize(m, c);
    for (Eigen::Index i = 0; i < m; ++i)
      tread.row(i) = ta.middleRows(i * p, p).colwise().mean();
  } else {
    tread.resize(m, p * c);
    for (Eigen::Index i = 0; i < m; ++i)
      for (int q = 0; q < p; ++q) tread.row(i).segment(q * c, c) = ta.row(i * p + q);
  }
  MatT<T> tlog = tread * (net.weights[L - 1] * net.weight_scale(L - 1));
  tlog.noalias() += tr.readout_in * (d.weights[L - 1] * net.weight_scale(L - 1));
  tlog.rowwise() += (d.biases[L - 1] * bs).transpose();
  return tlog;
}

// Gathers the rows of a cached trace belonging to a batch of examples.
template <typename T>
ForwardTrace<T> gather_trace(const Net<T>& net, const ForwardTrace<T>& tr,
                             const std::vector<Eigen::Index>& idx, std::size_t begin,
                             std::size_t end) {
  ForwardTrace<T> out;
  const Eigen::Index nb = static_cast<Eigen::Index>(end - begin);
  if (!is_cnn(net)) {
    out.acts.reserve(tr.acts.size());
    for (const auto& a : tr.acts) out.acts.push_back(gather_rows(a, idx, begin, end));
  } else {
    const int p = net.shape.pixels();
    for (const auto& a : tr.acts) {
      MatT<T> g(nb * p, a.cols());
      for (std::size_t i = begin; i < end; ++i)
        g.middleRows(static_cast<Eigen::Index>(i - begin) * p, p) =
            a.middleRows(idx[i] * p, p);
      out.acts.push_back(std::move(g));
    }
  }
  out.readout_in = gather_rows(tr.readout_in, idx, begin, end);
  out.logits = gather_rows(tr.logits, idx, begin, end);
  return out;
}

}  // namespace

template <typename T>
LinearizedResult<T> linearize_and_train(const Net<T>& net0, const LabeledData& train,
                                        const typename Net<T>::Mat& x_test,
                                        const TrainConfig& cfg) {
  if (cfg.lr_factor > 1.0)
    throw ConfigError("linearize_and_train: lr factor must be <= 1 (linearized dynamics "
                      "diverge above the critical learning rate)");
  const Eigen::Index n = train.x.rows();
  const int num_classes = net0.num_classes;

  MatT<T> x_train = train.x.cast<T>();
  MatT<T> y_train = train.y.cast<T>();

  LinearizedResult<T> res;
  {
    const Eigen::Index ns = std::min<Eigen::Index>(cfg.lr_sample, n);
    const auto perm = epoch_permutation(n, rng_mix(cfg.seed, 0x16EAull), -1);
    std::vector<Eigen::Index> pick(perm.begin(), perm.begin() + ns);
    MatT<T> sample = gather_rows(x_train, pick, 0, static_cast<std::size_t>(ns));
    res.eta = cfg.lr_override > 0.0 ? cfg.lr_override
                                    : cfg.lr_factor * estimate_critical_lr(net0, sample);
  }
  const T eta = static_cast<T>(res.eta);

  // frozen traces at theta_0
  ForwardTrace<T> tr_train = forward_trace(net0, x_train);
  ForwardTrace<T> tr_test = forward_trace(net0, x_test);

  Gradients<T> delta, g;
  delta.init_like(net0);
  g.init_like(net0);

  auto lin_logits = [&](const ForwardTrace<T>& tr, const MatT<T>& x) {
    MatT<T> t = jvp(net0, tr, x, delta);
    return MatT<T>(tr.logits + t);
  };

  const auto checkpoints = checkpoint_schedule(cfg.steps);
  std::size_t next_cp = 0;
  long epoch = 0;
  std::size_t cursor = 0;
  std::vector<Eigen::Index> perm = epoch_permutation(n, cfg.seed, epoch);

  for (long step = 0; step <= cfg.steps; ++step) {
    if (next_cp < checkpoints.size() && step == checkpoints[next_cp]) {
      TraceRow row;
      row.step = step;
      MatT<T> f = lin_logits(tr_train, x_train);
      row.train_loss = (f - y_train).squaredNorm() / (2.0 * n * num_classes);
      row.train_acc = evaluate(f.template cast<double>(), train.labels).accuracy;
      res.trace.push_back(row);
      res.checkpoint_steps.push_back(step);
      res.checkpoint_test_logits.push_back(
          lin_logits(tr_test, x_test).template cast<double>());
      ++next_cp;
    }
    if (step == cfg.steps || res.diverged) break;

    if (cursor >= perm.size()) {
      perm = epoch_permutation(n, cfg.seed, ++epoch);
      cursor = 0;
    }
    const std::size_t take =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), perm.size() - cursor);
    ForwardTrace<T> trb = gather_trace(net0, tr_train, perm, cursor, cursor + take);
    MatT<T> xb = gather_rows(x_train, perm, cursor, cursor + take);
    MatT<T> yb = gather_rows(y_train, perm, cursor, cursor + take);
    cursor += take;

    MatT<T> f = trb.logits + jvp(net0, trb, xb, delta);
    const double batch_loss =
        (f - yb).squaredNorm() / (2.0 * static_cast<double>(take) * num_classes);
    if (!std::isfinite(batch_loss) || batch_loss > cfg.divergence_loss) {
      res.diverged = true;
      continue;
    }
    MatT<T> dlogits = (f - yb) / static_cast<T>(static_cast<double>(take) * num_classes);
    backward(net0, trb, dlogits, g);
    if (cfg.l2 > 0.0) {
      // penalty acts on theta = theta_0 + delta
      Net<T> shifted = net0;
      for (int l = 0; l < net0.layers(); ++l) shifted.weights[l] += delta.weights[l];
      add_l2_gradient(shifted, cfg.l2, cfg.l2_mode, &net0, g);
    }
    for (std::size_t l = 0; l < delta.weights.size(); ++l) {
      delta.weights[l] -= eta * g.weights[l];
      delta.biases[l] -= eta * g.biases[l];
    }
  }

  res.final_test_logits = lin_logits(tr_test, x_test).template cast<double>();
  return res;
}

// ---------------------------------------------------------------------------

template struct Net<float>;
template struct Net<double>;

template Net<float> init_network<float>(const ArchitectureSpec&, ParamMode, std::uint64_t,
                                        ImageShape, int);
template Net<double> init_network<double>(const ArchitectureSpec&, ParamMode, std::uint64_t,
                                          ImageShape, int);
template Net<float>::Mat forward<float>(const Net<float>&, const Net<float>::Mat&);
template Net<double>::Mat forward<double>(const Net<double>&, const Net<double>::Mat&);
template Net<float> map_params<float>(const Net<float>&, ParamMode);
template Net<double> map_params<double>(const Net<double>&, ParamMode);
template Net<float>::Mat centered_forward<float>(const Net<float>&, const Net<float>&,
                                                 const Net<float>::Mat&);
template Net<double>::Mat centered_forward<double>(const Net<double>&, const Net<double>&,
                                                   const Net<double>::Mat&);
template Matrix empirical_ntk<float>(const Net<float>&, const Net<float>::Mat&);
template Matrix empirical_ntk<double>(const Net<double>&, const Net<double>::Mat&);
template Matrix empirical_ntk<float>(const Net<float>&, const Net<float>::Mat&,
                                     const Net<float>::Mat&);
template Matrix empirical_ntk<double>(const Net<double>&, const Net<double>::Mat&,
                                      const Net<double>::Mat&);
template double estimate_critical_lr<float>(const Net<float>&, const Net<float>::Mat&);
template double estimate_critical_lr<double>(const Net<double>&, const Net<double>::Mat&);
template double l2_penalty<float>(const Net<float>&, double, L2Mode, const Net<float>*);
template double l2_penalty<double>(const Net<double>&, double, L2Mode, const Net<double>*);
template TrainResult<float> sgd_train<float>(const Net<float>&, const LabeledData&,
                                             const std::optional<LabeledData>&,
                                             const std::optional<LabeledData>&,
                                             const TrainConfig&);
template TrainResult<double> sgd_train<double>(const Net<double>&, const LabeledData&,
                                               const std::optional<LabeledData>&,
                                               const std::optional<LabeledData>&,
                                               const TrainConfig&);
template LinearizedResult<float> linearize_and_train<float>(const Net<float>&, const LabeledData&,
                                                            const Net<float>::Mat&,
                                                            const TrainConfig&);
template LinearizedResult<double> linearize_and_train<double>(const Net<double>&,
                                                              const LabeledData&,
                                                              const Net<double>::Mat&,
                                                              const TrainConfig&);

}  // namespace nnk
