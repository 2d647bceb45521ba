// Experiment CLI. Subcommands:
//   kernel   compute and cache NNGP/NTK kernel tiles for a config
//   infer    exact kernel inference for a config (one grid point or sweep)
//   train    finite-width network training
//   ensemble data-augmentation kernel ensembling with a per-prefix curve
//   audit    spectrum report for a cached kernel file
//   sweep    full sweep over the config's grid axes
//   report   merge result CSVs and emit paired plot data
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "nnk/harness.hpp"
#include "nnk/inference.hpp"
#include "nnk/kernel_cache.hpp"
#include "nnk/kernels.hpp"
#include "nnk/spectral.hpp"

namespace {

std::string cache_dir_from_env() {
  const char* env = std::getenv("NNK_CACHE_DIR");
  return env ? env : "nnk_cache";
}

int run_sweep_config(const nnk::ExperimentConfig& cfg, const std::string& out_name) {
  nnk::ResultTable table = nnk::run_experiment(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  const std::string out = cfg.output_dir + "/" + out_name;
  nnk::write_csv(table, out);
  std::cout << "wrote " << table.rows.size() << " rows to " << out << "\n";
  return 0;
}

int run_sweep(const std::string& config_path, const std::string& out_name) {
  return run_sweep_config(nnk::load_config(config_path), out_name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"infinite-width kernel and finite-network experiment runner"};
  app.require_subcommand(1);

  std::string config_path, out_path, kernel_file;
  std::string kernel_kind = "nngp";
  std::string cli_eps_str;
  double flow_time = -1.0;
  double zca_eps = -1.0;
  double sigma_n = 0.0;
  int ensemble_size = 0;
  double aug_fraction = -1.0;
  std::string weighting, clean_first;
  int workers = 0;
  Eigen::Index tile = 512;

  auto add_config_opt = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config file")->required();
  };

  CLI::App* kernel = app.add_subcommand("kernel", "compute and cache kernel tiles");
  add_config_opt(kernel);
  kernel->add_option("--tile", tile, "tile size");
  kernel->add_option("--workers", workers, "worker count");

  CLI::App* infer = app.add_subcommand("infer", "exact kernel inference");
  add_config_opt(infer);
  infer->add_option("--kernel", kernel_kind, "nngp|ntk");
  infer->add_option("--eps", cli_eps_str, "regularizer (number, 'tune' or 'sweep')");
  infer->add_option("--flow-time", flow_time, "gradient-flow time (switches method to flow)");
  infer->add_option("--zca-eps", zca_eps, "ZCA regularization strength");

  CLI::App* train = app.add_subcommand("train", "finite network training");
  add_config_opt(train);

  CLI::App* ens = app.add_subcommand("ensemble", "DA kernel ensembling");
  add_config_opt(ens);
  ens->add_option("--ensemble-size", ensemble_size, "number of augmented batches");
  ens->add_option("--aug-fraction", aug_fraction, "augmentation probability p");
  ens->add_option("--weighting", weighting, "naive|ivw");
  ens->add_option("--clean-first", clean_first, "true|false");

  CLI::App* audit = app.add_subcommand("audit", "spectrum report for a cached kernel");
  audit->add_option("file", kernel_file, "kernel cache file (.nkwb)")->required();
  audit->add_option("-o,--out", out_path, "output CSV path");
  audit->add_option("--sigma-n", sigma_n, "noise scale (default: dtype epsilon)");

  CLI::App* sweep = app.add_subcommand("sweep", "run the config's full sweep grid");
  add_config_opt(sweep);

  CLI::App* rep = app.add_subcommand("report", "merge result CSVs");
  std::vector<std::string> csvs;
  rep->add_option("files", csvs, "result CSVs to merge")->required();
  rep->add_option("-o,--out", out_path, "merged output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (kernel->parsed()) {
      nnk::ExperimentConfig cfg = nnk::load_config(config_path);
      if (workers > 0) cfg.workers = workers;
      // materialize the training kernel through the tiled, resumable path
      nnk::DatasetTriple t = nnk::load_or_synthesize(cfg.dataset, cfg.data_root, cfg.seed,
                                                     cfg.train_size, cfg.valid_size, cfg.test_size);
      nnk::Dataset tr = nnk::take_subset(t.train, std::min(cfg.train_size, t.train.count()),
                                         nnk::rng_mix(cfg.seed, 1));
      if (cfg.downsample > 1) tr = nnk::downsample_mean(tr, cfg.downsample);
      nnk::standardize(tr, {});
      const nnk::ImageShape shape{tr.h, tr.w, tr.c};
      const auto tiles = nnk::make_tiles(tr.count(), tr.count(), tile, true);
      auto fn = [&](const nnk::TileExtent& e) {
        const nnk::Matrix a = tr.images.middleRows(e.row_begin, e.row_end - e.row_begin);
        if (e.row_begin == e.col_begin && e.row_end == e.col_end)
          return nnk::compute_kernel(a, a, shape, cfg.arch, cfg.precision);
        const nnk::Matrix b = tr.images.middleRows(e.col_begin, e.col_end - e.col_begin);
        return nnk::compute_kernel(a, b, shape, cfg.arch, cfg.precision);
      };
      const std::string dir = cache_dir_from_env() + "/" + std::to_string(cfg.hash());
      auto res = nnk::assemble_tiled(tr.count(), tr.count(), tiles, true, fn, cfg.arch,
                                     cfg.precision, dir, std::max(1, cfg.workers));
      nnk::save_kernel_pair(dir, "train", res.pair);
      std::cout << "kernel " << tr.count() << "x" << tr.count() << ": computed " << res.computed
                << " tiles, reused " << res.reused << ", cache " << dir << "\n";
      return 0;
    }
    if (infer->parsed()) {
      nnk::ExperimentConfig cfg = nnk::load_config(config_path);
      cfg.method = kernel_kind == "ntk" ? nnk::Method::NTK : nnk::Method::NNGP;
      if (!cli_eps_str.empty()) {
        if (cli_eps_str == "sweep") {
          cfg.sweep_eps = nnk::default_eps_grid();
        } else {
          cfg.eps = cli_eps_str;
        }
      }
      if (flow_time >= 0.0) {
        cfg.method = nnk::Method::Flow;
        cfg.flow_time = flow_time;
      }
      if (zca_eps >= 0.0) {
        cfg.preprocess = "zca";
        cfg.zca_eps = zca_eps;
      }
      return run_sweep_config(cfg, "infer.csv");
    }
    if (train->parsed()) {
      nnk::ExperimentConfig cfg = nnk::load_config(config_path);
      if (cfg.method != nnk::Method::LinFinite) cfg.method = nnk::Method::Finite;
      return run_sweep_config(cfg, "train.csv");
    }
    if (ens->parsed()) {
      nnk::ExperimentConfig cfg = nnk::load_config(config_path);
      if (ensemble_size > 0) cfg.ensemble_size = ensemble_size;
      if (aug_fraction >= 0.0) cfg.aug_fraction = aug_fraction;
      if (weighting == "ivw") cfg.weighting = nnk::EnsembleWeighting::InverseVariance;
      if (weighting == "naive") cfg.weighting = nnk::EnsembleWeighting::Naive;
      if (clean_first == "true") cfg.clean_first = true;
      if (clean_first == "false") cfg.clean_first = false;
      // per-prefix curve
      nnk::ResultTable table;
      table.header = {"E", "accuracy", "mse"};
      nnk::DatasetTriple t = nnk::load_or_synthesize(cfg.dataset, cfg.data_root, cfg.seed,
                                                     cfg.train_size, cfg.valid_size, cfg.test_size);
      nnk::Dataset tr = nnk::take_subset(t.train, std::min(cfg.train_size, t.train.count()),
                                         nnk::rng_mix(cfg.seed, 1));
      nnk::Dataset te = nnk::take_subset(t.test, std::min(cfg.test_size, t.test.count()),
                                         nnk::rng_mix(cfg.seed, 3));
      if (cfg.downsample > 1) {
        tr = nnk::downsample_mean(tr, cfg.downsample);
        te = nnk::downsample_mean(te, cfg.downsample);
      }
      nnk::standardize(tr, {&te});
      nnk::EnsembleSpec spec{cfg.ensemble_size, cfg.aug_fraction, nnk::rng_mix(cfg.seed, 5),
                             cfg.weighting, cfg.clean_first};
      nnk::DaInferenceConfig dic{cfg.arch, cfg.eps == "tune" ? 0.0 : std::stod(cfg.eps),
                                 cfg.method == nnk::Method::NTK ? nnk::KernelKind::NTK
                                                                : nnk::KernelKind::NNGP,
                                 cfg.precision};
      auto r = nnk::da_ensemble(tr, te, spec, dic);
      for (std::size_t e = 0; e < r.prefix_accuracy.size(); ++e) {
        nnk::ResultRow row;
        row.cols["E"] = std::to_string(e + 1);
        row.cols["accuracy"] = std::to_string(r.prefix_accuracy[e]);
        row.cols["mse"] = std::to_string(r.prefix_mse[e]);
        table.rows.push_back(row);
      }
      std::filesystem::create_directories(cfg.output_dir);
      nnk::write_csv(table, cfg.output_dir + "/ensemble.csv");
      std::cout << "final accuracy " << r.prefix_accuracy.back() << " (E=" << cfg.ensemble_size
                << ")\n";
      return 0;
    }
    if (audit->parsed()) {
      nnk::KernelFileHeader h;
      const nnk::Matrix k = nnk::read_kernel_file(kernel_file, &h);
      const double sn = sigma_n > 0.0
                            ? sigma_n
                            : nnk::default_sigma_n(h.dtype == 4 ? nnk::Precision::Single
                                                                : nnk::Precision::Double);
      const nnk::SpectrumReport rep = nnk::analyze_spectrum(k, sn);
      const nnk::PsdAudit pa = nnk::psd_audit(k, sn);
      std::cout << "m " << k.rows() << "  lambda_min " << pa.min_eigenvalue << "  noise_floor "
                << rep.noise_floor << "  weyl [" << pa.weyl_lo << ", " << pa.weyl_hi << "]\n"
                << "tail fit: C " << rep.fit.c << "  alpha " << rep.fit.alpha << "  window ["
                << rep.fit.lo << ", " << rep.fit.hi << ")\n"
                << "critical size m* " << rep.critical_size << "  cond " << rep.condition_number
                << "  psd_at_risk " << (pa.psd_at_risk ? "yes" : "no") << "  recommended_eps "
                << pa.recommended_eps << "\n";
      if (!out_path.empty()) {
        nnk::ResultTable table;
        table.header = {"index", "eigenvalue"};
        for (Eigen::Index i = 0; i < rep.eigenvalues.size(); ++i) {
          nnk::ResultRow row;
          row.cols["index"] = std::to_string(i + 1);
          row.cols["eigenvalue"] = std::to_string(rep.eigenvalues[i]);
          table.rows.push_back(row);
        }
        nnk::write_csv(table, out_path);
      }
      return 0;
    }
    if (sweep->parsed()) return run_sweep(config_path, "results.csv");
    if (rep->parsed()) {
      std::vector<nnk::ResultTable> tables;
      for (const auto& f : csvs) tables.push_back(nnk::read_csv(f));
      auto out = nnk::report(tables);
      nnk::write_csv(out.merged, out_path);
      const std::string paired = out_path + ".nngp_vs_ntk.csv";
      nnk::write_csv(out.nngp_vs_ntk, paired);
      if (out.duplicates_dropped)
        std::cout << "warning: dropped " << out.duplicates_dropped << " duplicate rows\n";
      std::cout << "merged " << out.merged.rows.size() << " rows to " << out_path << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
