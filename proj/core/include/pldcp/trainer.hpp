#pragma once

// Training loop, ablation wiring, provenance tracking and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pldcp/dataset.hpp"
#include "pldcp/network.hpp"
#include "pldcp/objectives.hpp"
#include "pldcp/prototypes.hpp"

namespace pldcp {

enum class OptimizerKind { kAdam, kSgd };
enum class GrlSchedule { kConstant, kDann };

std::string to_string(OptimizerKind kind);
std::string to_string(GrlSchedule schedule);
OptimizerKind parse_optimizer(std::string_view text);
GrlSchedule parse_grl_schedule(std::string_view text);

struct AblationFlags {
  bool no_domain_prototype = false;
  bool no_dom_disc = false;
  bool no_cls_disc = false;
  bool no_pairwise = false;
  bool no_bilinear_S = false;
  bool no_soft_reg = false;

  bool any() const noexcept;
  /// "+"-joined names of the set flags, "full" when none are.
  std::string label() const;
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Flag names as accepted on the command line and in configs.
const std::vector<std::string>& ablation_names();
/// Sets one flag by name; unknown names throw Error(kConfig).
void set_ablation(AblationFlags& flags, std::string_view name);
/// Parses "no_pairwise+no_soft_reg" style sets; "full" or "" is no flags.
AblationFlags parse_ablation_set(std::string_view text);

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 96;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  ObjectiveWeights weights;
  GrlSchedule grl_schedule = GrlSchedule::kConstant;
  double grl_lambda = 1.0;
  std::uint64_t seed = 1;
  AblationFlags ablation;
  std::size_t shallow_hidden = 128;
  std::size_t hidden = 64;
  double leaky_slope = 0.01;
  DomainKey domain_key = DomainKey::kSubject;
};

void validate(const TrainConfig& cfg);
nlohmann::json config_to_json(const TrainConfig& cfg);
/// Applies the keys present in `j` on top of `base`; unknown keys are errors.
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});
/// Hash of the canonical config JSON.
std::string config_fingerprint(const TrainConfig& cfg);

struct Wiring {
  ObjectiveOptions objective;
  bool bilinear = true;
  bool pooled = false;
};

/// Effective objective weights and model switches for the ablation flags.
Wiring ablation_apply(const TrainConfig& cfg);

/// GRL coefficient at training progress p in [0, 1].
double grl_lambda_at(const TrainConfig& cfg, double progress);

/// Counts how often each sample id was read by a weight update or a
/// prototype computation.
class Provenance {
 public:
  void record(std::size_t id) { ++counts_[id]; }
  std::uint64_t count(std::size_t id) const;
  std::size_t distinct() const noexcept { return counts_.size(); }
  std::uint64_t total() const noexcept { return total_; }
  /// Ids from `ids` that were consumed at least once.
  std::vector<std::size_t> intersect(std::span<const std::size_t> ids) const;
  void note_total(std::uint64_t n) { total_ += n; }

 private:
  std::unordered_map<std::size_t, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

struct EpochLosses {
  int epoch = 0;
  LossBreakdown mean;  // averaged over the epoch's batches
  std::size_t batches = 0;
  std::size_t skipped = 0;
};

struct TrainResult {
  ModelParams params;
  PrototypeStore store;  // recomputed from the final weights
  std::vector<EpochLosses> trace;
  Provenance provenance;
};

using EpochCallback = std::function<void(const EpochLosses&)>;

/// The weights train() starts from for this config and source set.
ModelParams initial_params(const TrainConfig& cfg, const SourceDomainSet& source);

TrainResult train(const TrainConfig& cfg, const SourceDomainSet& source, const EpochCallback& on_epoch = {});

struct Checkpoint {
  ModelParams params;
  PrototypeStore store;
  std::string fingerprint;
  nlohmann::json config;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const PrototypeStore& store,
                     const TrainConfig& cfg);
/// Throws Error(kCheckpoint) on corrupt files, shape problems, or when
/// `expected_fingerprint` is given and differs.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_fingerprint = std::nullopt);

/// losses.csv: epoch,cls_disc,dom_disc,pairwise,reg,total
void write_loss_trace(const std::filesystem::path& path, std::span<const EpochLosses> trace);

/// config.json, losses.csv, checkpoint.json, prototypes.csv
void write_run_dir(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainResult& result);

}  // namespace pldcp
