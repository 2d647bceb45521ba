#include "nnk/ensembling.hpp"

#include <algorithm>
#include <set>

#include "nnk/kernels.hpp"

namespace nnk {

Posterior ensemble_mean(const std::vector<Posterior>& members) {
  if (members.empty()) throw ConfigError("ensemble_mean: no members");
  Posterior out;
  out.kind = members.front().kind;
  out.eps = members.front().eps;
  out.mean = members.front().mean;
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i].mean.rows() != out.mean.rows() || members[i].mean.cols() != out.mean.cols())
      throw DimensionError("ensemble_mean: member shapes differ");
    out.mean += members[i].mean;
  }
  out.mean /= static_cast<double>(members.size());
  return out;
}

Posterior ivw_mean(const std::vector<Posterior>& members) {
  if (members.empty()) throw ConfigError("ivw_mean: no members");
  const Eigen::Index n = members.front().mean.rows();
  for (const auto& m : members) {
    if (!m.variance) throw ConfigError("ivw_mean: member lacks a predictive variance");
    if (m.variance->size() != n) throw DimensionError("ivw_mean: variance size mismatch");
    if ((m.variance->array() <= 0.0).any())
      throw ConfigError("ivw_mean: member variance must be strictly positive");
  }
  Vector denom = Vector::Zero(n);
  for (const auto& m : members) denom += m.variance->cwiseInverse();
  Posterior out;
  out.kind = members.front().kind;
  out.eps = members.front().eps;
  out.mean = Matrix::Zero(n, members.front().mean.cols());
  for (const auto& m : members) {
    const Vector w = m.variance->cwiseInverse().cwiseQuotient(denom);
    out.mean += w.asDiagonal() * m.mean;
  }
  return out;
}

DaEnsembleResult da_ensemble(const Dataset& train, const Dataset& test, const EnsembleSpec& spec,
                             const DaInferenceConfig& cfg) {
  if (spec.size < 1) throw ConfigError("da_ensemble: ensemble size must be >= 1");
  if (spec.aug_fraction < 0.0 || spec.aug_fraction > 1.0)
    throw ConfigError("da_ensemble: augmentation fraction must be in [0,1]");

  const ImageShape shape{train.h, train.w, train.c};
  const Matrix y_train = encode_targets(train.labels, train.num_classes);
  const bool want_var = spec.weighting == EnsembleWeighting::InverseVariance;

  DaEnsembleResult res;
  for (int e = 0; e < spec.size; ++e) {
    Dataset batch;
    if (e == 0 && spec.clean_first)
      batch = train;
    else
      batch = augment_batch(train, rng_mix(spec.base_seed, static_cast<std::uint64_t>(e)),
                            spec.aug_fraction);
    KernelPair k_train = compute_kernel(batch.images, batch.images, shape, cfg.arch,
                                        cfg.precision);
    KernelPair k_cross = compute_kernel(test.images, batch.images, shape, cfg.arch,
                                        cfg.precision);
    Vector diag;
    if (want_var) {
      auto d = compute_kernel_diag(test.images, shape, cfg.arch);
      diag = cfg.kind == KernelKind::NNGP ? d.first : d.second;
    }
    const Matrix& kt = cfg.kind == KernelKind::NNGP ? k_train.nngp : k_train.ntk;
    const Matrix& kc = cfg.kind == KernelKind::NNGP ? k_cross.nngp : k_cross.ntk;
    res.members.push_back(gp_regress(kt, kc, diag, y_train, cfg.eps, want_var, cfg.kind));
  }

  std::vector<Posterior> prefix;
  for (int e = 0; e < spec.size; ++e) {
    prefix.push_back(res.members[static_cast<std::size_t>(e)]);
    const Posterior combined = spec.weighting == EnsembleWeighting::InverseVariance
                                   ? ivw_mean(prefix)
                                   : ensemble_mean(prefix);
    const EvalResult r = evaluate(combined.mean, test.labels);
    res.prefix_accuracy.push_back(r.accuracy);
    res.prefix_mse.push_back(r.mse);
    if (e + 1 == spec.size) res.combined = combined;
  }
  return res;
}

NetworkEnsembleResult network_ensemble(const std::vector<std::uint64_t>& seeds,
                                       const ArchitectureSpec& arch, ParamMode mode,
                                       ImageShape shape, const LabeledData& train,
                                       const LabeledData& test, const TrainConfig& cfg) {
  if (seeds.empty()) throw ConfigError("network_ensemble: need at least one seed");
  NetworkEnsembleResult res;
  Matrix sum;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    Net<double> net = init_network<double>(arch, mode, seeds[i], shape, static_cast<int>(train.y.cols()));
    TrainConfig c = cfg;
    c.seed = seeds[i];
    TrainResult<double> tr = sgd_train(net, train, std::nullopt, std::nullopt, c);
    Matrix logits = forward(tr.net, test.x);
    if (cfg.centering) logits -= forward(net, test.x);
    res.member_accuracy.push_back(evaluate(logits, test.labels).accuracy);
    if (i == 0)
      sum = logits;
    else
      sum += logits;
    Matrix mean = sum / static_cast<double>(i + 1);
    res.accuracy_vs_size.push_back(evaluate(mean, test.labels).accuracy);
    if (i + 1 == seeds.size()) res.mean_logits = std::move(mean);
  }
  return res;
}

}  // namespace nnk
