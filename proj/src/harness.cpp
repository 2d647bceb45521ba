#include "nnk/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "nnk/inference.hpp"
#include "nnk/kernel_cache.hpp"
#include "nnk/kernels.hpp"
#include "nnk/spectral.hpp"
#include "nnk/zca.hpp"

namespace nnk {

const char* method_name(Method m) {
  switch (m) {
    case Method::NNGP: return "nngp";
    case Method::NTK: return "ntk";
    case Method::Flow: return "flow";
    case Method::Finite: return "finite";
    case Method::LinFinite: return "lin-finite";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  if (s == "nngp") return Method::NNGP;
  if (s == "ntk") return Method::NTK;
  if (s == "flow") return Method::Flow;
  if (s == "finite") return Method::Finite;
  if (s == "lin-finite") return Method::LinFinite;
  throw ConfigError("unknown method: " + s);
}

// ---------------------------------------------------------------------------
// Config text format

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyValues {
  std::map<std::string, std::string> kv;
  mutable std::set<std::string> consumed;

  bool has(const std::string& k) const { return kv.count(k) > 0; }
  std::string get(const std::string& k, const std::string& dflt) const {
    consumed.insert(k);
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  }
  double get_f(const std::string& k, double dflt) const {
    const std::string s = get(k, fmt(dflt));
    try {
      return std::stod(s);
    } catch (...) {
      throw ConfigError("config key '" + k + "' is not a number: " + s);
    }
  }
  long get_i(const std::string& k, long dflt) const {
    return static_cast<long>(get_f(k, static_cast<double>(dflt)));
  }
  bool get_b(const std::string& k, bool dflt) const {
    const std::string s = get(k, dflt ? "true" : "false");
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + k + "' is not a boolean: " + s);
  }
  template <typename T>
  std::vector<T> get_list(const std::string& k) const {
    consumed.insert(k);
    auto it = kv.find(k);
    std::vector<T> out;
    if (it == kv.end()) return out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      out.push_back(static_cast<T>(std::stod(tok)));
    }
    return out;
  }
  void finish() const {
    for (const auto& [k, v] : kv)
      if (!consumed.count(k)) throw ConfigError("unknown config key: " + k);
  }
};

KeyValues tokenize_config(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
    std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    if (out.kv.count(key)) throw ConfigError("duplicate config key: " + key);
    out.kv[key] = val;
  }
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_same_v<T, int>)
      s += std::to_string(v[i]);
    else
      s += fmt(v[i]);
  }
  return s;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  const KeyValues kv = tokenize_config(text);
  ExperimentConfig c;
  c.schema = static_cast<int>(kv.get_i("schema", 1));
  if (c.schema != 1) throw ConfigError("unsupported config schema version");
  c.seed = static_cast<std::uint64_t>(kv.get_i("seed", 0));
  c.output_dir = kv.get("output_dir", c.output_dir);
  c.dataset = kv.get("dataset", c.dataset);
  c.data_root = kv.get("data_root", "");
  c.train_size = kv.get_i("train_size", c.train_size);
  c.valid_size = kv.get_i("valid_size", c.valid_size);
  c.test_size = kv.get_i("test_size", c.test_size);
  c.downsample = static_cast<int>(kv.get_i("downsample", 1));
  c.workers = static_cast<int>(kv.get_i("workers", 1));
  c.cache_kernels = kv.get_b("cache_kernels", false);

  c.arch.family = family_from_name(kv.get("arch.family", "fcn"));
  c.arch.depth = static_cast<int>(kv.get_i("arch.depth", c.arch.family == Family::FCN ? 3 : 8));
  c.arch.units =
      static_cast<int>(kv.get_i("arch.width", c.arch.family == Family::FCN ? 2048 : 512));
  c.arch.weight_var = kv.get_f("arch.weight_var", 2.0);
  c.arch.bias_var = kv.get_f("arch.bias_var", 0.01);

  c.method = method_from_name(kv.get("method", "nngp"));
  c.preprocess = kv.get("preprocess", "standardize");
  if (c.preprocess != "standardize" && c.preprocess != "zca")
    throw ConfigError("preprocess must be standardize or zca");
  c.zca_eps = kv.get_f("zca_eps", 1.0);
  const std::string prec = kv.get("precision", "double");
  if (prec != "double" && prec != "single") throw ConfigError("precision must be single|double");
  c.precision = prec == "single" ? Precision::Single : Precision::Double;
  c.eps = kv.get("eps", "0");
  if (c.eps != "tune") (void)std::stod(c.eps);  // validate numeric
  c.flow_time = kv.get_f("flow_time", 1.0);
  c.flow_eta = kv.get_f("flow_eta", 0.0);

  const std::string pm = kv.get("train.param", "ntk");
  if (pm != "ntk" && pm != "std") throw ConfigError("train.param must be ntk|std");
  c.param = pm == "ntk" ? ParamMode::NTK : ParamMode::STD;
  c.train.lr_factor = kv.get_f("train.c", 1.0);
  c.train.l2 = kv.get_f("train.l2", 0.0);
  const std::string l2m = kv.get("train.l2_mode", "standard");
  if (l2m == "standard")
    c.train.l2_mode = L2Mode::Standard;
  else if (l2m == "layerwise")
    c.train.l2_mode = L2Mode::Layerwise;
  else if (l2m == "to-init")
    c.train.l2_mode = L2Mode::ToInit;
  else
    throw ConfigError("train.l2_mode must be standard|layerwise|to-init");
  c.train.batch = static_cast<int>(
      kv.get_i("train.batch", c.arch.family == Family::FCN ? 100 : 40));
  c.train.steps = kv.get_i("train.steps", 1000);
  c.train.centering = kv.get_b("train.center", false);
  c.train.early_stop = kv.get_b("train.early_stop", false);
  c.train.seed = c.seed;

  c.ensemble_size = static_cast<int>(kv.get_i("ensemble.size", 1));
  c.aug_fraction = kv.get_f("ensemble.fraction", 0.5);
  const std::string wt = kv.get("ensemble.weighting", "naive");
  if (wt == "naive")
    c.weighting = EnsembleWeighting::Naive;
  else if (wt == "ivw")
    c.weighting = EnsembleWeighting::InverseVariance;
  else
    throw ConfigError("ensemble.weighting must be naive|ivw");
  c.clean_first = kv.get_b("ensemble.clean_first", true);

  c.sweep_width = kv.get_list<int>("sweep.width");
  c.sweep_zca_eps = kv.get_list<double>("sweep.zca_eps");
  c.sweep_eps = kv.get_list<double>("sweep.eps");
  c.sweep_c = kv.get_list<double>("sweep.c");
  c.sweep_l2 = kv.get_list<double>("sweep.l2");
  c.sweep_ensemble = kv.get_list<int>("sweep.ensemble");

  kv.finish();

  if (c.train_size < 1 || c.valid_size < 0 || c.test_size < 1)
    throw ConfigError("split sizes must be positive");
  // reject invalid combinations before any compute
  if (c.train.l2_mode == L2Mode::Layerwise && c.param == ParamMode::NTK)
    throw ConfigError("layerwise L2 is defined for the standard parameterization only");
  if (c.method == Method::LinFinite && c.train.lr_factor > 1.0)
    throw ConfigError("linearized training requires c <= 1");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream o;
  o << "schema = " << schema << "\n";
  o << "seed = " << seed << "\n";
  o << "output_dir = " << output_dir << "\n";
  o << "dataset = " << dataset << "\n";
  if (!data_root.empty()) o << "data_root = " << data_root << "\n";
  o << "train_size = " << train_size << "\n";
  o << "valid_size = " << valid_size << "\n";
  o << "test_size = " << test_size << "\n";
  o << "downsample = " << downsample << "\n";
  o << "workers = " << workers << "\n";
  o << "cache_kernels = " << (cache_kernels ? "true" : "false") << "\n";
  o << "method = " << method_name(method) << "\n";
  o << "preprocess = " << preprocess << "\n";
  o << "zca_eps = " << fmt(zca_eps) << "\n";
  o << "precision = " << precision_name(precision) << "\n";
  o << "eps = " << eps << "\n";
  o << "flow_time = " << fmt(flow_time) << "\n";
  o << "flow_eta = " << fmt(flow_eta) << "\n";
  o << "\n[arch]\n";
  o << "family = " << family_name(arch.family) << "\n";
  o << "depth = " << arch.depth << "\n";
  o << "width = " << arch.units << "\n";
  o << "weight_var = " << fmt(arch.weight_var) << "\n";
  o << "bias_var = " << fmt(arch.bias_var) << "\n";
  o << "\n[train]\n";
  o << "param = " << param_mode_name(param) << "\n";
  o << "c = " << fmt(train.lr_factor) << "\n";
  o << "l2 = " << fmt(train.l2) << "\n";
  o << "l2_mode = "
    << (train.l2_mode == L2Mode::Standard
            ? "standard"
            : train.l2_mode == L2Mode::Layerwise ? "layerwise" : "to-init")
    << "\n";
  o << "batch = " << train.batch << "\n";
  o << "steps = " << train.steps << "\n";
  o << "center = " << (train.centering ? "true" : "false") << "\n";
  o << "early_stop = " << (train.early_stop ? "true" : "false") << "\n";
  o << "\n[ensemble]\n";
  o << "size = " << ensemble_size << "\n";
  o << "fraction = " << fmt(aug_fraction) << "\n";
  o << "weighting = " << (weighting == EnsembleWeighting::Naive ? "naive" : "ivw") << "\n";
  o << "clean_first = " << (clean_first ? "true" : "false") << "\n";
  std::ostringstream sw;
  if (!sweep_width.empty()) sw << "width = " << join_list(sweep_width) << "\n";
  if (!sweep_zca_eps.empty()) sw << "zca_eps = " << join_list(sweep_zca_eps) << "\n";
  if (!sweep_eps.empty()) sw << "eps = " << join_list(sweep_eps) << "\n";
  if (!sweep_c.empty()) sw << "c = " << join_list(sweep_c) << "\n";
  if (!sweep_l2.empty()) sw << "l2 = " << join_list(sweep_l2) << "\n";
  if (!sweep_ensemble.empty()) sw << "ensemble = " << join_list(sweep_ensemble) << "\n";
  if (!sw.str().empty()) o << "\n[sweep]\n" << sw.str();
  return o.str();
}

// ---------------------------------------------------------------------------
// Experiment execution

namespace {

struct PreparedData {
  Dataset train, valid, test;
  Matrix y_train;
  ImageShape shape;
};

PreparedData prepare_data(const ExperimentConfig& cfg, double zca_eps) {
  DatasetTriple t = load_or_synthesize(cfg.dataset, cfg.data_root, cfg.seed,
                                       std::max<Eigen::Index>(cfg.train_size, 1),
                                       std::max<Eigen::Index>(cfg.valid_size, 1),
                                       std::max<Eigen::Index>(cfg.test_size, 1));
  PreparedData d;
  d.train = take_subset(t.train, std::min(cfg.train_size, t.train.count()), rng_mix(cfg.seed, 1));
  d.valid = take_subset(t.valid, std::min(cfg.valid_size, t.valid.count()), rng_mix(cfg.seed, 2));
  d.test = take_subset(t.test, std::min(cfg.test_size, t.test.count()), rng_mix(cfg.seed, 3));
  if (cfg.downsample > 1) {
    d.train = downsample_mean(d.train, cfg.downsample);
    d.valid = downsample_mean(d.valid, cfg.downsample);
    d.test = downsample_mean(d.test, cfg.downsample);
  }
  standardize(d.train, {&d.valid, &d.test});
  if (cfg.preprocess == "zca") {
    Whitener w = fit_zca(d.train.images, zca_eps);
    d.train.images = apply_whitener(w, d.train.images);
    d.valid.images = apply_whitener(w, d.valid.images);
    d.test.images = apply_whitener(w, d.test.images);
    standardize(d.train, {&d.valid, &d.test});  // re-standardize after whitening
  }
  d.y_train = encode_targets(d.train.labels, d.train.num_classes);
  d.shape = ImageShape{d.train.h, d.train.w, d.train.c};
  return d;
}

struct GridPoint {
  int width;
  double zca_eps, eps, c, l2;
  int ensemble;
  bool eps_swept;
};

std::vector<GridPoint> make_grid(const ExperimentConfig& cfg) {
  auto widths = cfg.sweep_width.empty() ? std::vector<int>{cfg.arch.units} : cfg.sweep_width;
  auto zcas = cfg.sweep_zca_eps.empty() ? std::vector<double>{cfg.zca_eps} : cfg.sweep_zca_eps;
  const bool eps_swept = !cfg.sweep_eps.empty();
  auto epss = eps_swept ? cfg.sweep_eps
                        : std::vector<double>{cfg.eps == "tune" ? -1.0 : std::stod(cfg.eps)};
  auto cs = cfg.sweep_c.empty() ? std::vector<double>{cfg.train.lr_factor} : cfg.sweep_c;
  auto l2s = cfg.sweep_l2.empty() ? std::vector<double>{cfg.train.l2} : cfg.sweep_l2;
  auto es = cfg.sweep_ensemble.empty() ? std::vector<int>{cfg.ensemble_size}
                                       : cfg.sweep_ensemble;
  std::vector<GridPoint> grid;
  for (int w : widths)
    for (double z : zcas)
      for (double e : epss)
        for (double c : cs)
          for (double l : l2s)
            for (int E : es) grid.push_back({w, z, e, c, l, E, eps_swept});
  return grid;
}

std::string fmt_or_empty(double v) { return std::isnan(v) ? "" : fmt(v); }

ResultRow base_row(const ExperimentConfig& cfg, const GridPoint& p) {
  ResultRow r;
  r.cols["dataset"] = cfg.dataset;
  r.cols["train_size"] = std::to_string(cfg.train_size);
  r.cols["family"] = family_name(cfg.arch.family);
  r.cols["depth"] = std::to_string(cfg.arch.depth);
  r.cols["width"] = std::to_string(p.width);
  r.cols["param"] = param_mode_name(cfg.param);
  r.cols["method"] = method_name(cfg.method);
  r.cols["preprocess"] = cfg.preprocess;
  r.cols["zca_eps"] = cfg.preprocess == "zca" ? fmt(p.zca_eps) : "";
  r.cols["precision"] = precision_name(cfg.precision);
  r.cols["flow_time"] = cfg.method == Method::Flow ? fmt(cfg.flow_time) : "";
  r.cols["c"] = fmt(p.c);
  r.cols["l2"] = fmt(p.l2);
  r.cols["l2_mode"] = cfg.train.l2_mode == L2Mode::Standard
                          ? "standard"
                          : cfg.train.l2_mode == L2Mode::Layerwise ? "layerwise" : "to-init";
  r.cols["ensemble_size"] = std::to_string(p.ensemble);
  r.cols["aug_fraction"] = fmt(cfg.aug_fraction);
  r.cols["weighting"] = cfg.weighting == EnsembleWeighting::Naive ? "naive" : "ivw";
  r.cols["seed"] = std::to_string(cfg.seed);
  r.cols["config_hash"] = std::to_string(cfg.hash());
  return r;
}

void fill_audit(ResultRow& r, const Matrix& k_train, Precision prec) {
  try {
    const SpectrumReport rep = analyze_spectrum(k_train, default_sigma_n(prec));
    r.cols["lambda_min"] = fmt(rep.eigenvalues[rep.eigenvalues.size() - 1]);
    r.cols["tail_alpha"] = fmt(rep.fit.alpha);
    r.cols["tail_c"] = fmt(rep.fit.c);
    r.cols["m_star"] = std::isinf(rep.critical_size) ? "inf" : fmt(rep.critical_size);
    r.cols["condition_number"] =
        std::isinf(rep.condition_number) ? "inf" : fmt(rep.condition_number);
  } catch (const std::exception&) {
    r.cols["lambda_min"] = "";  // audit is best-effort (e.g. degenerate tails)
  }
}

ResultRow run_point(const ExperimentConfig& cfg, const GridPoint& p, const PreparedData& d) {
  ResultRow row = base_row(cfg, p);
  ArchitectureSpec arch = cfg.arch;
  arch.units = p.width;

  if (cfg.method == Method::Finite || cfg.method == Method::LinFinite) {
    LabeledData train{d.train.images, d.y_train, d.train.labels};
    LabeledData valid{d.valid.images, Matrix(), d.valid.labels};
    LabeledData test{d.test.images, Matrix(), d.test.labels};
    TrainConfig tc = cfg.train;
    tc.lr_factor = p.c;
    tc.l2 = p.l2;
    if (cfg.method == Method::Finite && p.ensemble > 1) {
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < p.ensemble; ++i) seeds.push_back(rng_mix(cfg.seed, 7000 + i));
      auto r = network_ensemble(seeds, arch, cfg.param, d.shape, train, test, tc);
      row.cols["test_accuracy"] = fmt(r.accuracy_vs_size.back());
      row.cols["test_mse"] = fmt(evaluate(r.mean_logits, d.test.labels).mse);
      return row;
    }
    Net<double> net =
        init_network<double>(arch, cfg.param, rng_mix(cfg.seed, 77), d.shape, d.train.num_classes);
    if (cfg.method == Method::Finite) {
      auto r = sgd_train(net, train, valid, test, tc);
      row.cols["valid_accuracy"] = fmt_or_empty(r.selected_valid_acc);
      row.cols["test_accuracy"] = fmt_or_empty(r.selected_test_acc);
      row.cols["eta"] = fmt(r.eta);
      row.cols["diverged"] = r.diverged ? "true" : "false";
    } else {
      Matrix x_eval(d.valid.count() + d.test.count(), d.test.images.cols());
      x_eval << d.valid.images, d.test.images;
      auto r = linearize_and_train(net, train, x_eval, tc);
      const Matrix valid_logits = r.final_test_logits.topRows(d.valid.count());
      const Matrix test_logits = r.final_test_logits.bottomRows(d.test.count());
      row.cols["valid_accuracy"] = fmt(evaluate(valid_logits, d.valid.labels).accuracy);
      row.cols["test_accuracy"] = fmt(evaluate(test_logits, d.test.labels).accuracy);
      row.cols["test_mse"] = fmt(evaluate(test_logits, d.test.labels).mse);
      row.cols["eta"] = fmt(r.eta);
      row.cols["diverged"] = r.diverged ? "true" : "false";
    }
    return row;
  }

  // kernel methods
  const KernelKind kind = cfg.method == Method::NTK ? KernelKind::NTK : KernelKind::NNGP;
  if (p.ensemble > 1) {
    EnsembleSpec spec{p.ensemble, cfg.aug_fraction, rng_mix(cfg.seed, 5), cfg.weighting,
                      cfg.clean_first};
    DaInferenceConfig dic{arch, p.eps < 0 ? 0.0 : p.eps, kind, cfg.precision};
    auto r = da_ensemble(d.train, d.test, spec, dic);
    row.cols["eps"] = fmt(dic.eps);
    row.cols["test_accuracy"] = fmt(r.prefix_accuracy.back());
    row.cols["test_mse"] = fmt(r.prefix_mse.back());
    return row;
  }

  KernelPair k_train = compute_kernel(d.train.images, d.train.images, d.shape, arch,
                                      cfg.precision);
  KernelPair k_valid = compute_kernel(d.valid.images, d.train.images, d.shape, arch,
                                      cfg.precision);
  const Matrix& kt = kind == KernelKind::NNGP ? k_train.nngp : k_train.ntk;
  const Matrix& kv = kind == KernelKind::NNGP ? k_valid.nngp : k_valid.ntk;
  const Matrix& kt_flow = k_train.ntk;
  fill_audit(row, kt, cfg.precision);

  if (cfg.method == Method::Flow) {
    const double eta = cfg.flow_eta > 0.0
                           ? cfg.flow_eta
                           : static_cast<double>(kt_flow.rows()) / kt_flow.trace();
    Posterior pv = gradient_flow_predict(kt_flow, k_valid.ntk, d.y_train, cfg.flow_time, eta);
    row.cols["valid_accuracy"] = fmt(evaluate(pv.mean, d.valid.labels).accuracy);
    KernelPair k_test = compute_kernel(d.test.images, d.train.images, d.shape, arch,
                                       cfg.precision);
    Posterior pt = gradient_flow_predict(kt_flow, k_test.ntk, d.y_train, cfg.flow_time, eta);
    const EvalResult er = evaluate(pt.mean, d.test.labels);
    row.cols["test_accuracy"] = fmt(er.accuracy);
    row.cols["test_mse"] = fmt(er.mse);
    return row;
  }

  double eps = p.eps;
  if (p.eps < 0) {  // tune on the validation split
    auto [best, table] = tune_regularizer(kt, kv, d.y_train, d.valid.labels, default_eps_grid());
    eps = best;
    row.cols["selected_eps"] = fmt(best);
    row.cols["valid_accuracy"] =
        fmt(table.accuracy[static_cast<std::size_t>(
            std::find(table.eps.begin(), table.eps.end(), best) - table.eps.begin())]);
  } else {
    Posterior pv = gp_regress(kt, kv, Vector(), d.y_train, eps, false, kind);
    row.cols["valid_accuracy"] = fmt(evaluate(pv.mean, d.valid.labels).accuracy);
    row.cols["valid_mse"] = fmt(evaluate(pv.mean, d.valid.labels).mse);
  }
  row.cols["eps"] = fmt(eps);

  if (p.eps_swept) return row;  // eps sweeps report validation metrics only

  KernelPair k_test = compute_kernel(d.test.images, d.train.images, d.shape, arch, cfg.precision);
  const Matrix& kc = kind == KernelKind::NNGP ? k_test.nngp : k_test.ntk;
  Posterior pt = gp_regress(kt, kc, Vector(), d.y_train, eps, false, kind);
  const EvalResult er = evaluate(pt.mean, d.test.labels);
  row.cols["test_accuracy"] = fmt(er.accuracy);
  row.cols["test_mse"] = fmt(er.mse);
  return row;
}

}  // namespace

const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols{
      "dataset",      "train_size",  "family",        "depth",         "width",
      "param",        "method",      "preprocess",    "zca_eps",       "precision",
      "eps",          "selected_eps", "flow_time",    "c",             "l2",
      "l2_mode",      "ensemble_size", "aug_fraction", "weighting",    "seed",
      "config_hash",  "eta",         "diverged",      "valid_accuracy", "valid_mse",
      "test_accuracy", "test_mse",   "lambda_min",    "tail_alpha",    "tail_c",
      "m_star",       "condition_number"};
  return cols;
}

ResultTable run_experiment(const ExperimentConfig& cfg) {
  const auto grid = make_grid(cfg);
  ResultTable table;
  table.header = result_columns();
  table.rows.resize(grid.size());

  // distinct preprocessing settings are prepared once
  std::map<double, PreparedData> data_by_zca;
  for (const auto& g : grid)
    if (!data_by_zca.count(g.zca_eps)) data_by_zca.emplace(g.zca_eps, prepare_data(cfg, g.zca_eps));

  std::exception_ptr error;
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        table.rows[i] = run_point(cfg, grid[i], data_by_zca.at(grid[i].zca_eps));
      } catch (...) {
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  const int workers = std::max(1, cfg.workers);
  if (workers == 1 || grid.size() <= 1) {
    work(0, grid.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (grid.size() + workers - 1) / static_cast<std::size_t>(workers);
    for (int t = 0; t < workers; ++t) {
      const std::size_t lo = static_cast<std::size_t>(t) * chunk;
      if (lo >= grid.size()) break;
      pool.emplace_back(work, lo, std::min(grid.size(), lo + chunk));
    }
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return table;
}

void write_csv(const ResultTable& table, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IngestError("cannot write csv: " + path);
    for (std::size_t i = 0; i < table.header.size(); ++i)
      out << (i ? "," : "") << table.header[i];
    out << "\n";
    for (const auto& row : table.rows) {
      for (std::size_t i = 0; i < table.header.size(); ++i) {
        const auto it = row.cols.find(table.header[i]);
        out << (i ? "," : "") << (it == row.cols.end() ? "" : it->second);
      }
      out << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

ResultTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open csv: " + path);
  ResultTable table;
  std::string line;
  if (!std::getline(in, line)) throw IngestError("empty csv: " + path);
  std::stringstream hs(line);
  std::string tok;
  while (std::getline(hs, tok, ',')) table.header.push_back(tok);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ResultRow row;
    std::stringstream ls(line);
    std::size_t i = 0;
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      if (i < table.header.size() && !cell.empty()) row.cols[table.header[i]] = cell;
      ++i;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

ReportOutput report(const std::vector<ResultTable>& tables) {
  ReportOutput out;
  out.merged.header = tables.empty() ? result_columns() : tables.front().header;
  std::set<std::string> seen;
  for (const auto& t : tables) {
    if (t.header != out.merged.header) {
      std::string msg = "report: column schema mismatch:";
      for (const auto& h : t.header) msg += " " + h;
      throw ConfigError(msg);
    }
    for (const auto& row : t.rows) {
      std::string key;
      for (const auto& h : out.merged.header) {
        const auto it = row.cols.find(h);
        key += (it == row.cols.end() ? "" : it->second) + "\x1f";
      }
      if (!seen.insert(key).second) {
        ++out.duplicates_dropped;
        continue;
      }
      out.merged.rows.push_back(row);
    }
  }

  // NNGP-vs-NTK pairing on shared experimental conditions
  out.nngp_vs_ntk.header = {"dataset", "train_size", "family",       "preprocess",
                            "zca_eps", "nngp_test_accuracy", "ntk_test_accuracy"};
  std::map<std::string, std::pair<std::string, std::string>> pairs;
  for (const auto& row : out.merged.rows) {
    auto get = [&](const std::string& k) {
      const auto it = row.cols.find(k);
      return it == row.cols.end() ? std::string() : it->second;
    };
    const std::string method = get("method");
    if (method != "nngp" && method != "ntk") continue;
    const std::string acc = get("test_accuracy");
    if (acc.empty()) continue;
    const std::string key = get("dataset") + "|" + get("train_size") + "|" + get("family") + "|" +
                            get("preprocess") + "|" + get("zca_eps");
    if (method == "nngp")
      pairs[key].first = acc;
    else
      pairs[key].second = acc;
  }
  for (const auto& [key, p] : pairs) {
    if (p.first.empty() || p.second.empty()) continue;
    ResultRow row;
    std::stringstream ks(key);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ks, part, '|') && i < 5) row.cols[out.nngp_vs_ntk.header[i++]] = part;
    row.cols["nngp_test_accuracy"] = p.first;
    row.cols["ntk_test_accuracy"] = p.second;
    out.nngp_vs_ntk.rows.push_back(std::move(row));
  }
  return out;
}

std::vector<RobustnessPoint> robustness_sweep(const BatchPredictor& predict, const Dataset& test,
                                              ShiftTransform transform,
                                              const std::vector<int>& magnitudes, int n_seeds,
                                              std::uint64_t seed) {
  const int max_mag = *std::max_element(magnitudes.begin(), magnitudes.end());
  if (max_mag > std::min(test.h, test.w) / 2)
    throw ConfigError("robustness_sweep: magnitude exceeds half the image size");
  const bool circular = transform == ShiftTransform::Translate;
  std::vector<RobustnessPoint> out;
  for (int mag : magnitudes) {
    RobustnessPoint pt;
    pt.magnitude = mag;
    double acc_sum = 0.0, acc_min = 1.0, acc_max = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
      Matrix shifted = test.images;
      if (mag > 0) {
        const std::uint64_t key = rng_mix(seed, static_cast<std::uint64_t>(s), mag);
        for (Eigen::Index i = 0; i < test.count(); ++i) {
          // one of the four axis directions per image
          static const int dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
          const auto d = dirs[uniform_below(key, static_cast<std::uint64_t>(i), 4)];
          const Matrix one = shift_images(test.images.row(i), test.h, test.w, test.c,
                                          mag * d[0], mag * d[1], circular);
          shifted.row(i) = one.row(0);
        }
      }
      const double acc = evaluate(predict(shifted), test.labels).accuracy;
      acc_sum += acc;
      acc_min = std::min(acc_min, acc);
      acc_max = std::max(acc_max, acc);
    }
    pt.mean_accuracy = acc_sum / n_seeds;
    pt.min_accuracy = acc_min;
    pt.max_accuracy = acc_max;
    out.push_back(pt);
  }
  return out;
}

}  // namespace nnk
