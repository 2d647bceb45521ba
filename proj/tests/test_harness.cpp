#include <doctest.h>

#include <filesystem>

#include "nnk/harness.hpp"
#include "nnk/inference.hpp"
#include "nnk/kernels.hpp"
#include "test_helpers.hpp"

using namespace nnk;

namespace {

const char* kBaseConfig = R"(
schema = 1
seed = 3
dataset = synthetic
train_size = 48
valid_size = 24
test_size = 24
downsample = 4
method = nngp
eps = 0

[arch]
family = fcn
depth = 2
width = 64
)";

}  // namespace

TEST_CASE("config parse, round trip, unknown keys") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  CHECK(cfg.train_size == 48);
  CHECK(cfg.arch.depth == 2);
  CHECK(cfg.method == Method::NNGP);

  // serialize -> parse -> serialize is a fixed point
  const std::string s1 = cfg.serialize();
  ExperimentConfig cfg2 = parse_config(s1);
  CHECK(cfg2.serialize() == s1);
  CHECK(cfg2.hash() == cfg.hash());

  CHECK_THROWS_AS(parse_config("schema = 1\nbogus_key = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("schema = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("schema = 1\npreprocess = pca\n"), ConfigError);
  // invalid combination rejected before compute
  CHECK_THROWS_AS(parse_config("schema = 1\n[train]\nparam = ntk\nl2_mode = layerwise\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config("schema = 1\nmethod = lin-finite\n[train]\nc = 2\n"), ConfigError);
}

TEST_CASE("run_experiment: single grid point, determinism, audit columns") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  ResultTable t1 = run_experiment(cfg);
  REQUIRE(t1.rows.size() == 1);
  const auto& row = t1.rows[0].cols;
  CHECK(row.at("method") == "nngp");
  CHECK(row.at("test_accuracy") != "");
  CHECK(row.at("lambda_min") != "");
  CHECK(row.at("precision") == "double");

  ResultTable t2 = run_experiment(cfg);
  CHECK(t1.rows[0].cols == t2.rows[0].cols);  // rerun-identical
}

TEST_CASE("run_experiment: eps sweep reports validation only; tune selects on valid") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  cfg.sweep_eps = {0.0, 1e-3, 1.0};
  ResultTable t = run_experiment(cfg);
  REQUIRE(t.rows.size() == 3);
  for (const auto& r : t.rows) {
    CHECK(r.cols.at("valid_accuracy") != "");
    CHECK(r.cols.count("test_accuracy") == 0);  // structurally unselectable
  }

  ExperimentConfig tuned = parse_config(kBaseConfig);
  tuned.eps = "tune";
  ResultTable tt = run_experiment(tuned);
  REQUIRE(tt.rows.size() == 1);
  CHECK(tt.rows[0].cols.at("selected_eps") != "");
  CHECK(tt.rows[0].cols.at("test_accuracy") != "");
}

TEST_CASE("run_experiment: finite and flow methods produce rows") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  cfg.method = Method::Finite;
  cfg.train.steps = 30;
  cfg.train.batch = 16;
  cfg.train.lr_factor = 0.5;
  cfg.arch.units = 24;
  ResultTable t = run_experiment(cfg);
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0].cols.at("test_accuracy") != "");
  CHECK(t.rows[0].cols.at("diverged") == "false");

  ExperimentConfig fcfg = parse_config(kBaseConfig);
  fcfg.method = Method::Flow;
  fcfg.flow_time = 100.0;
  ResultTable ft = run_experiment(fcfg);
  REQUIRE(ft.rows.size() == 1);
  CHECK(ft.rows[0].cols.at("test_accuracy") != "");
}

TEST_CASE("csv round trip and report merge/dedup/pairing") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  cfg.eps = "tune";
  ResultTable nngp = run_experiment(cfg);
  cfg.method = Method::NTK;
  ResultTable ntk = run_experiment(cfg);

  const std::string dir =
      (std::filesystem::temp_directory_path() / "nnk_harness_csv").string();
  std::filesystem::create_directories(dir);
  write_csv(nngp, dir + "/a.csv");
  ResultTable back = read_csv(dir + "/a.csv");
  CHECK(back.rows.size() == nngp.rows.size());
  CHECK(back.header == nngp.header);
  CHECK(back.rows[0].cols.at("test_accuracy") == nngp.rows[0].cols.at("test_accuracy"));

  ReportOutput rep = report({nngp, ntk, nngp});
  CHECK(rep.duplicates_dropped == 1);
  CHECK(rep.merged.rows.size() == 2);
  REQUIRE(rep.nngp_vs_ntk.rows.size() == 1);
  CHECK(rep.nngp_vs_ntk.rows[0].cols.at("nngp_test_accuracy") ==
        nngp.rows[0].cols.at("test_accuracy"));

  ResultTable other;
  other.header = {"different", "schema"};
  CHECK_THROWS_AS(report({nngp, other}), ConfigError);

  ReportOutput empty = report({});
  CHECK(empty.merged.rows.empty());
  CHECK(!empty.merged.header.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("robustness_sweep: magnitude zero is the clean accuracy; errors") {
  Dataset te = nnk_test::standardized_synthetic(111, 30, 8, 8, 2);
  Dataset tr = nnk_test::standardized_synthetic(112, 60, 8, 8, 2);
  KernelPair kt = fcn_kernel(tr.images, tr.images, fcn_base());
  Matrix y = encode_targets(tr.labels, tr.num_classes);

  BatchPredictor predict = [&](const Matrix& images) {
    KernelPair kc = fcn_kernel(images, tr.images, fcn_base());
    return gp_regress(kt.nngp, kc.nngp, Vector(), y, 1e-4).mean;
  };
  const double clean = evaluate(predict(te.images), te.labels).accuracy;
  auto sweep = robustness_sweep(predict, te, ShiftTransform::Crop, {0, 2}, 3, 5);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].mean_accuracy == doctest::Approx(clean));
  CHECK_THROWS_AS(robustness_sweep(predict, te, ShiftTransform::Crop, {7}, 2, 5), ConfigError);
}

TEST_CASE("sweep axes expand as a cross product") {
  ExperimentConfig cfg = parse_config(kBaseConfig);
  cfg.sweep_width = {16, 32};
  cfg.sweep_zca_eps = {1.0};
  ResultTable t = run_experiment(cfg);
  CHECK(t.rows.size() == 2);
  CHECK(t.rows[0].cols.at("width") == "16");
  CHECK(t.rows[1].cols.at("width") == "32");
}
