#include "pldcp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"

namespace pldcp {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd"; }
std::string to_string(GrlSchedule schedule) { return schedule == GrlSchedule::kConstant ? "constant" : "dann"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "adam") return OptimizerKind::kAdam;
  if (text == "sgd") return OptimizerKind::kSgd;
  throw Error(ErrorKind::kConfig, "unknown optimizer '" + std::string(text) + "' (expected adam or sgd)");
}

GrlSchedule parse_grl_schedule(std::string_view text) {
  if (text == "constant") return GrlSchedule::kConstant;
  if (text == "dann") return GrlSchedule::kDann;
  throw Error(ErrorKind::kConfig, "unknown grl schedule '" + std::string(text) + "' (expected constant or dann)");
}

// ---------------------------------------------------------------------------
// Ablation flags

namespace {

struct FlagSlot {
  const char* name;
  bool AblationFlags::*member;
};

constexpr FlagSlot kFlags[] = {
    {"no_domain_prototype", &AblationFlags::no_domain_prototype},
    {"no_dom_disc", &AblationFlags::no_dom_disc},
    {"no_cls_disc", &AblationFlags::no_cls_disc},
    {"no_pairwise", &AblationFlags::no_pairwise},
    {"no_bilinear_S", &AblationFlags::no_bilinear_S},
    {"no_soft_reg", &AblationFlags::no_soft_reg},
};

}  // namespace

bool AblationFlags::any() const noexcept {
  for (const auto& f : kFlags)
    if (this->*f.member) return true;
  return false;
}

std::string AblationFlags::label() const {
  std::string out;
  for (const auto& f : kFlags) {
    if (!(this->*f.member)) continue;
    if (!out.empty()) out += '+';
    out += f.name;
  }
  return out.empty() ? "full" : out;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& f : kFlags) v.emplace_back(f.name);
    return v;
  }();
  return names;
}

void set_ablation(AblationFlags& flags, std::string_view name) {
  for (const auto& f : kFlags) {
    if (name == f.name) {
      flags.*f.member = true;
      return;
    }
  }
  throw Error(ErrorKind::kConfig, "unknown ablation flag '" + std::string(name) + "'");
}

AblationFlags parse_ablation_set(std::string_view text) {
  AblationFlags flags;
  if (text.empty() || text == "full") return flags;
  for (auto part : io::split(text, '+')) set_ablation(flags, part);
  return flags;
}

// ---------------------------------------------------------------------------
// Config

void validate(const TrainConfig& cfg) {
  auto bad = [](const std::string& msg) { throw Error(ErrorKind::kConfig, msg); };
  if (cfg.epochs < 1) bad("epochs must be at least 1, got " + std::to_string(cfg.epochs));
  if (cfg.batch_size < 2) bad("batch_size must be at least 2, got " + std::to_string(cfg.batch_size));
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate)) bad("learning_rate must be positive");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0) || !(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    bad("adam betas must lie in [0, 1)");
  if (!(cfg.adam_eps > 0.0)) bad("adam_eps must be positive");
  const auto& w = cfg.weights;
  for (double v : {w.cls, w.dom, w.pair, w.beta})
    if (!(v >= 0.0) || !std::isfinite(v)) bad("loss weights must be finite and non-negative");
  if (!(cfg.grl_lambda >= 0.0) || !std::isfinite(cfg.grl_lambda)) bad("grl_lambda must be non-negative");
  if (cfg.shallow_hidden == 0 || cfg.hidden == 0) bad("hidden sizes must be positive");
  if (!(cfg.leaky_slope >= 0.0 && cfg.leaky_slope < 1.0)) bad("leaky_slope must lie in [0, 1)");
  if (cfg.ablation.no_domain_prototype && cfg.ablation.no_bilinear_S) {
    bad("no_domain_prototype and no_bilinear_S contradict: pooled class prototypes leave no domain "
        "selection for S to act on");
  }
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json ablation = nlohmann::json::array();
  for (const auto& f : kFlags)
    if (cfg.ablation.*f.member) ablation.push_back(f.name);
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"optimizer", to_string(cfg.optimizer)},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_eps", cfg.adam_eps},
          {"weights", {{"cls", cfg.weights.cls}, {"dom", cfg.weights.dom}, {"pair", cfg.weights.pair},
                       {"beta", cfg.weights.beta}}},
          {"grl_schedule", to_string(cfg.grl_schedule)},
          {"grl_lambda", cfg.grl_lambda},
          {"seed", cfg.seed},
          {"ablation", ablation},
          {"shallow_hidden", cfg.shallow_hidden},
          {"hidden", cfg.hidden},
          {"leaky_slope", cfg.leaky_slope},
          {"domain_key", to_string(cfg.domain_key)}};
}

TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "training config must be a JSON object");
  TrainConfig c = std::move(base);
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "optimizer") c.optimizer = parse_optimizer(value.get<std::string>());
      else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "grl_schedule") c.grl_schedule = parse_grl_schedule(value.get<std::string>());
      else if (key == "grl_lambda") c.grl_lambda = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "shallow_hidden") c.shallow_hidden = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::size_t>();
      else if (key == "leaky_slope") c.leaky_slope = value.get<double>();
      else if (key == "domain_key") c.domain_key = parse_domain_key(value.get<std::string>());
      else if (key == "ablation") {
        c.ablation = {};
        for (const auto& name : value) set_ablation(c.ablation, name.get<std::string>());
      } else if (key == "weights") {
        for (const auto& [wk, wv] : value.items()) {
          if (wk == "cls") c.weights.cls = wv.get<double>();
          else if (wk == "dom") c.weights.dom = wv.get<double>();
          else if (wk == "pair") c.weights.pair = wv.get<double>();
          else if (wk == "beta") c.weights.beta = wv.get<double>();
          else throw Error(ErrorKind::kConfig, "unknown weight '" + wk + "'");
        }
      } else {
        throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

std::string config_fingerprint(const TrainConfig& cfg) {
  return io::hex64(io::fnv1a64(config_to_json(cfg).dump()));
}

Wiring ablation_apply(const TrainConfig& cfg) {
  validate(cfg);
  Wiring w;
  w.objective.weights = cfg.weights;
  w.objective.grl_lambda = cfg.grl_lambda;
  const AblationFlags& a = cfg.ablation;
  if (a.no_dom_disc) w.objective.weights.dom = 0.0;
  if (a.no_cls_disc) w.objective.weights.cls = 0.0;
  if (a.no_soft_reg) w.objective.weights.beta = 0.0;
  w.objective.pairwise = !a.no_pairwise;
  w.bilinear = !a.no_bilinear_S;
  w.pooled = a.no_domain_prototype;
  return w;
}

double grl_lambda_at(const TrainConfig& cfg, double progress) {
  if (cfg.grl_schedule == GrlSchedule::kConstant) return cfg.grl_lambda;
  const double p = std::clamp(progress, 0.0, 1.0);
  return cfg.grl_lambda * (2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0);
}

// ---------------------------------------------------------------------------
// Provenance

std::uint64_t Provenance::count(std::size_t id) const {
  auto it = counts_.find(id);
  return it == counts_.end() ? 0 : it->second;
}

std::vector<std::size_t> Provenance::intersect(std::span<const std::size_t> ids) const {
  std::vector<std::size_t> hit;
  for (std::size_t id : ids)
    if (counts_.count(id)) hit.push_back(id);
  return hit;
}

// ---------------------------------------------------------------------------
// Training

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, ModelParams& params) : cfg_(cfg) {
    for (auto& [name, m] : params.tensors()) {
      m1_.emplace_back(m->rows(), m->cols());
      m2_.emplace_back(m->rows(), m->cols());
    }
  }

  void step(ModelParams& params, const Graph& graph, const std::vector<Var>& vars) {
    ++t_;
    const double lr = cfg_.learning_rate;
    const double b1 = cfg_.adam_beta1;
    const double b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto tensors = params.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto w = tensors[i].second->data();
      auto g = graph.grad(vars[i]).data();
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
        continue;
      }
      auto m = m1_[i].data();
      auto v = m2_[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Matrix> m1_, m2_;
  long t_ = 0;
};

void add_into(LossBreakdown& acc, const LossBreakdown& b) {
  acc.cls_disc += b.cls_disc;
  acc.dom_disc += b.dom_disc;
  acc.pairwise += b.pairwise;
  acc.reg += b.reg;
  acc.total += b.total;
}

}  // namespace

ModelParams initial_params(const TrainConfig& cfg, const SourceDomainSet& source) {
  NetworkDims dims;
  dims.input_dim = source.feature_dim;
  dims.shallow_hidden = cfg.shallow_hidden;
  dims.hidden = cfg.hidden;
  dims.n_classes = source.n_classes;
  dims.n_domains = static_cast<int>(source.n_domains());
  dims.leaky_slope = cfg.leaky_slope;
  ModelParams params = ModelParams::init(dims, io::mix_seed(cfg.seed, 1));
  params.bilinear = !cfg.ablation.no_bilinear_S;
  return params;
}

TrainResult train(const TrainConfig& cfg, const SourceDomainSet& source, const EpochCallback& on_epoch) {
  const Wiring wiring = ablation_apply(cfg);
  if (source.n_domains() < 2) {
    throw Error(ErrorKind::kData, "training needs at least 2 source domains, got " +
                                      std::to_string(source.n_domains()));
  }
  std::set<int> classes;
  for (const auto& s : source.samples) classes.insert(s.label);
  if (classes.size() < 2) throw Error(ErrorKind::kData, "training needs at least 2 classes in the source set");

  TrainResult result;
  result.params = initial_params(cfg, source);
  ModelParams& params = result.params;
  Optimizer optimizer(cfg, params);
  std::mt19937_64 rng(io::mix_seed(cfg.seed, 2));

  const std::size_t n = source.samples.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(per_epoch) * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto refresh = [&] {
    PrototypeStore store = build_store(params, source, wiring.pooled);
    for (const auto& s : source.samples) result.provenance.record(s.id);
    result.provenance.note_total(n);
    return store;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const PrototypeStore store = refresh();
    std::shuffle(order.begin(), order.end(), rng);
    EpochLosses losses;
    losses.epoch = epoch + 1;
    for (std::size_t start = 0, step = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      if (count < 2) {
        ++losses.skipped;
        continue;
      }
      Batch batch;
      batch.x = Matrix(count, source.feature_dim);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = order[start + i];
        const Sample& s = source.samples[idx];
        std::copy(s.features.begin(), s.features.end(), batch.x.row(i).begin());
        batch.labels.push_back(s.label);
        batch.domains.push_back(source.domain_ids[idx]);
        batch.ids.push_back(s.id);
      }

      Graph graph;
      const BoundParams bound = bind(graph, params, true);
      ObjectiveOptions options = wiring.objective;
      const double progress =
          (static_cast<double>(epoch) * static_cast<double>(per_epoch) + static_cast<double>(step)) / total_steps;
      options.grl_lambda = grl_lambda_at(cfg, progress);
      const Objective obj = total_objective(bound, batch, store, options);
      graph.backward(obj.total);
      optimizer.step(params, graph, bound.all());
      for (std::size_t id : batch.ids) result.provenance.record(id);
      result.provenance.note_total(count);

      add_into(losses.mean, obj.breakdown);
      losses.mean.weights = obj.breakdown.weights;
      ++losses.batches;
    }
    if (losses.batches > 0) {
      const double k = static_cast<double>(losses.batches);
      losses.mean.cls_disc /= k;
      losses.mean.dom_disc /= k;
      losses.mean.pairwise /= k;
      losses.mean.reg /= k;
      losses.mean.total /= k;
    }
    if (!params.all_finite()) {
      throw Error(ErrorKind::kNumeric, "weights became non-finite in epoch " + std::to_string(epoch + 1) +
                                           ": " + losses.mean.to_string());
    }
    if (on_epoch) on_epoch(losses);
    result.trace.push_back(losses);
  }
  result.store = refresh();
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const PrototypeStore& store,
                     const TrainConfig& cfg) {
  nlohmann::json j = {{"format", "pldcp-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"fingerprint", config_fingerprint(cfg)},
                      {"config", config_to_json(cfg)},
                      {"model", params_to_json(params)},
                      {"prototypes", store_to_json(store)}};
  io::write_file(path, j.dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected) {
  const std::string text = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, "corrupt checkpoint " + path.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "pldcp-checkpoint") {
      throw Error(ErrorKind::kCheckpoint, path.string() + " is not a checkpoint");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw Error(ErrorKind::kCheckpoint, "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                              std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    c.fingerprint = j.at("fingerprint").get<std::string>();
    if (expected && *expected != c.fingerprint) {
      throw Error(ErrorKind::kCheckpoint, "config fingerprint mismatch: checkpoint " + c.fingerprint +
                                              ", expected " + *expected);
    }
    c.config = j.at("config");
    c.params = params_from_json(j.at("model"));
    c.store = store_from_json(j.at("prototypes"));
    if (c.store.domain_protos.cols() != c.params.dims.hidden ||
        c.store.n_domains() != static_cast<std::size_t>(c.params.dims.n_domains) ||
        c.store.n_classes != c.params.dims.n_classes) {
      throw Error(ErrorKind::kCheckpoint, "prototype store does not match the model dimensions");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, "malformed checkpoint " + path.string() + ": " + e.what());
  }
}

void write_loss_trace(const std::filesystem::path& path, std::span<const EpochLosses> trace) {
  std::ostringstream out;
  out << "epoch,cls_disc,dom_disc,pairwise,reg,total\n";
  for (const auto& e : trace) {
    out << e.epoch << ',' << io::format_double(e.mean.cls_disc) << ',' << io::format_double(e.mean.dom_disc)
        << ',' << io::format_double(e.mean.pairwise) << ',' << io::format_double(e.mean.reg) << ','
        << io::format_double(e.mean.total) << '\n';
  }
  io::write_file(path, out.str());
}

void write_run_dir(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainResult& result) {
  io::write_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  write_loss_trace(dir / "losses.csv", result.trace);
  save_checkpoint(dir / "checkpoint.json", result.params, result.store, cfg);
  write_prototypes(dir / "prototypes.csv", result.store);
}

}  // namespace pldcp
