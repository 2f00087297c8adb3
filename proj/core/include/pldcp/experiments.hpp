#pragma once

// LOSO evaluation, noise and ablation sweeps, and report files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pldcp/dataset.hpp"
#include "pldcp/trainer.hpp"

namespace pldcp {

struct ConfusionMatrix {
  int n_classes = 0;
  std::vector<long long> counts;  // row-major, rows = true, cols = predicted

  long long at(int truth, int predicted) const {
    return counts[static_cast<std::size_t>(truth * n_classes + predicted)];
  }
  long long total() const;
  long long trace() const;
  /// Percent of each true class, rows summing to 100 (empty rows stay 0).
  std::vector<std::vector<double>> row_normalized() const;
};

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth, int n_classes);

struct FoldReport {
  int fold = 0;
  int target_subject = 0;
  bool valid = true;
  std::string error;  // why the fold is invalid
  double accuracy = 0.0;  // percent
  ConfusionMatrix confusion;
  std::size_t n_target_samples = 0;
  std::size_t n_source_samples = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::size_t consumed_ids = 0;  // distinct ids read during training
  std::size_t leaked_ids = 0;    // of those, how many belong to the target
  std::vector<EpochLosses> trace;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population convention
  std::size_t n_valid = 0;
  std::size_t n_invalid = 0;
};

Summary summarize(std::span<const FoldReport> folds);

/// "82.88±05.23": two decimals, standard deviation zero-padded to width 5.
std::string format_mean_std(double mean, double std);

struct LosoOptions {
  Protocol protocol = Protocol::kSingleSession;
  std::size_t workers = 1;
  double noise_eta = 0.0;  // fraction of source labels corrupted per fold
};

struct LosoReport {
  Protocol protocol = Protocol::kSingleSession;
  TrainConfig config;
  std::string fingerprint;
  std::string dataset_checksum;
  double noise_eta = 0.0;
  std::vector<FoldReport> folds;
  Summary summary;
};

/// Called once per finished fold (from the worker that ran it).
using FoldHook = std::function<void(const FoldSpec&, const TrainResult&)>;

/// Seed of fold i; shared by every sweep row so comparisons are paired.
std::uint64_t fold_seed(std::uint64_t base, std::size_t fold);
std::uint64_t noise_seed(std::uint64_t base, std::size_t fold);

/// Trains on each fold's source side only, then predicts the whole target
/// side with the frozen model. A fold whose training throws is marked
/// invalid. Any target id found in a fold's training provenance is a hard
/// failure (Error kData).
LosoReport run_loso(const Dataset& dataset, const TrainConfig& cfg, const LosoOptions& options,
                    const FoldHook& hook = {});

struct SweepRow {
  std::string label;
  double noise_eta = 0.0;
  std::string strategy;  // "pairwise" or "pointwise"
  AblationFlags flags;
  LosoReport report;
};

struct SweepReport {
  std::string axis;  // "noise" or "ablation"
  std::vector<SweepRow> rows;
};

/// One LOSO run per (ratio, strategy) cell, ratios outer. Strategy
/// "pointwise" sets no_pairwise on top of `cfg`.
SweepReport run_noise_sweep(const Dataset& dataset, const TrainConfig& cfg, std::span<const double> ratios,
                            std::span<const std::string> strategies, const LosoOptions& options);

/// Full model first, then one row per flag set.
SweepReport run_ablation(const Dataset& dataset, const TrainConfig& cfg, std::span<const AblationFlags> flags,
                         const LosoOptions& options);

/// The stored checksum, or a content hash for in-memory datasets.
std::string dataset_checksum(const Dataset& dataset);

/// summary.json, folds.csv, confusion_{subject}.csv, losses_{subject}.csv
void write_loso_outputs(const std::filesystem::path& dir, const LosoReport& report);
/// summary.json and sweep.csv at the top, one LOSO output directory per row.
void write_sweep_outputs(const std::filesystem::path& dir, const SweepReport& sweep);

nlohmann::json summary_json(const LosoReport& report);

}  // namespace pldcp
