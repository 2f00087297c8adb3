#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pldcp/error.hpp"
#include "pldcp/experiments.hpp"
#include "pldcp/io.hpp"

using namespace pldcp;

namespace {

Dataset small_set() {
  SynthConfig cfg;
  cfg.n_subjects = 4;
  cfg.samples_per_class = 8;
  cfg.feature_dim = 12;
  cfg.latent_dim = 6;
  return synth_gen(cfg, 77);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 16;
  c.shallow_hidden = 10;
  c.hidden = 6;
  c.seed = 5;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  return std::filesystem::temp_directory_path() / "pldcp_experiments_test" / name;
}

}  // namespace

TEST_CASE("confusion examples") {
  const std::vector<int> truth = {0, 1, 2, 2, 1};
  const auto perfect = confusion(truth, truth, 3);
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p)
      if (t != p) CHECK(perfect.at(t, p) == 0);
  CHECK(perfect.trace() == 5);

  const std::vector<int> ones(5, 1);
  const auto col = confusion(ones, truth, 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(col.at(t, 0) == 0);
    CHECK(col.at(t, 2) == 0);
  }
  CHECK(col.at(2, 1) == 2);

  const auto pct = col.row_normalized();
  for (const auto& row : pct) {
    double s = 0.0;
    for (double v : row) s += v;
    CHECK(std::abs(s - 100.0) < 1e-9);
  }
  CHECK_THROWS_AS(confusion(std::vector<int>{3}, std::vector<int>{0}, 3), Error);
  CHECK_THROWS_AS(confusion(std::vector<int>{0, 1}, std::vector<int>{0}, 3), Error);
}

TEST_CASE("summary uses the population standard deviation over valid folds") {
  std::vector<FoldReport> folds(4);
  folds[0].accuracy = 80.0;
  folds[1].accuracy = 90.0;
  folds[2].accuracy = 100.0;
  folds[3].valid = false;
  folds[3].accuracy = 5.0;
  const Summary s = summarize(folds);
  CHECK(s.mean == doctest::Approx(90.0).epsilon(1e-15));
  CHECK(std::abs(s.std - std::sqrt(200.0 / 3.0)) < 1e-9);
  CHECK(s.n_valid == 3);
  CHECK(s.n_invalid == 1);
}

TEST_CASE("mean and std are printed two-decimal with a padded std") {
  CHECK(format_mean_std(82.88, 5.23) == "82.88±05.23");
  CHECK(format_mean_std(65.151, 10.339) == "65.15±10.34");
  CHECK(format_mean_std(100.0, 0.0) == "100.00±00.00");
}

TEST_CASE("LOSO runs one isolated fold per subject and is reproducible") {
  const Dataset d = small_set();
  LosoOptions opt;
  const LosoReport a = run_loso(d, quick_config(), opt);
  REQUIRE(a.folds.size() == 4);
  double total = 0.0;
  for (const auto& f : a.folds) {
    CHECK(f.valid);
    CHECK(f.leaked_ids == 0);
    CHECK(f.consumed_ids == f.n_source_samples);
    CHECK(f.confusion.total() == static_cast<long long>(f.n_target_samples));
    CHECK(std::abs(f.accuracy - 100.0 * static_cast<double>(f.confusion.trace()) /
                                    static_cast<double>(f.confusion.total())) < 1e-12);
    for (int t = 0; t < 3; ++t) {
      long long row = 0;
      for (int p = 0; p < 3; ++p) row += f.confusion.at(t, p);
      CHECK(row == 8);
    }
    total += f.accuracy;
  }
  CHECK(std::abs(a.summary.mean - total / 4.0) < 1e-9);

  opt.workers = 3;
  const LosoReport b = run_loso(d, quick_config(), opt);
  CHECK(summary_json(a).dump() == summary_json(b).dump());

  write_loso_outputs(scratch("a"), a);
  write_loso_outputs(scratch("b"), b);
  for (const char* f : {"summary.json", "folds.csv", "confusion_1.csv", "confusion_4.csv", "losses_2.csv"}) {
    CHECK(io::read_file(scratch("a") / f) == io::read_file(scratch("b") / f));
  }
  std::filesystem::remove_all(scratch(""));
}

TEST_CASE("a fold that cannot train is marked invalid without stopping the sweep") {
  Dataset d = small_set();
  // Subjects 1-3 keep only class 0, so the fold targeting subject 4 has a
  // one-class source set.
  std::vector<Sample> kept;
  for (const auto& s : d.samples)
    if (s.subject == 4 || s.label == 0) kept.push_back(s);
  for (std::size_t i = 0; i < kept.size(); ++i) kept[i].id = i;
  d.samples = kept;
  const LosoReport r = run_loso(d, quick_config(), {});
  REQUIRE(r.folds.size() == 4);
  CHECK_FALSE(r.folds[3].valid);
  CHECK(r.folds[3].error.find("2 classes") != std::string::npos);
  CHECK(r.folds[0].valid);
  CHECK(r.summary.n_invalid == 1);
}

TEST_CASE("noise sweep: eta 0 equals plain LOSO, grid shape is ratios x strategies") {
  const Dataset d = small_set();
  const std::vector<double> ratios = {0.0, 0.3};
  const std::vector<std::string> strategies = {"pairwise", "pointwise"};
  const SweepReport s = run_noise_sweep(d, quick_config(), ratios, strategies, {});
  REQUIRE(s.rows.size() == 4);
  const LosoReport plain = run_loso(d, quick_config(), {});
  CHECK(summary_json(s.rows[0].report).dump() == summary_json(plain).dump());
  CHECK(s.rows[1].flags.no_pairwise);
  CHECK(s.rows[2].noise_eta == 0.3);
  // Target labels are untouched: every fold still sees 8 samples per class.
  for (const auto& f : s.rows[2].report.folds)
    for (int t = 0; t < 3; ++t) {
      long long row = 0;
      for (int p = 0; p < 3; ++p) row += f.confusion.at(t, p);
      CHECK(row == 8);
    }
  const std::vector<double> bad = {1.0};
  CHECK_THROWS_AS(run_noise_sweep(d, quick_config(), bad, strategies, {}), Error);
  const std::vector<std::string> bad_strategy = {"listwise"};
  CHECK_THROWS_AS(run_noise_sweep(d, quick_config(), ratios, bad_strategy, {}), Error);
}

TEST_CASE("ablation sweep has one row per flag set plus the full model") {
  const Dataset d = small_set();
  CHECK(run_ablation(d, quick_config(), {}, {}).rows.size() == 1);
  const std::vector<AblationFlags> flags = {parse_ablation_set("no_soft_reg"), parse_ablation_set("no_pairwise")};
  const SweepReport s = run_ablation(d, quick_config(), flags, {});
  REQUIRE(s.rows.size() == 3);
  CHECK(s.rows[0].label == "full");
  CHECK(s.rows[2].label == "no_pairwise");
  write_sweep_outputs(scratch("sweep"), s);
  CHECK(std::filesystem::exists(scratch("sweep") / "row_2" / "folds.csv"));
  CHECK(std::filesystem::exists(scratch("sweep") / "sweep.csv"));
  std::filesystem::remove_all(scratch(""));
}
