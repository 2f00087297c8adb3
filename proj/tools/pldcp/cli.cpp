#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "pldcp/dataset.hpp"
#include "pldcp/error.hpp"
#include "pldcp/experiments.hpp"
#include "pldcp/io.hpp"
#include "pldcp/signal.hpp"
#include "pldcp/trainer.hpp"

#ifndef PLDCP_VERSION
#define PLDCP_VERSION "unknown"
#endif

namespace fs = std::filesystem;

namespace pldcp::cli {

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},
          {"argv", argv},
          {"config", config},
          {"dataset_checksum", dataset_checksum},
          {"version", version},
          {"started_at", started_at},
          {"finished_at", finished_at},
          {"seed", seed}};
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Training flags layered over the defaults and an optional --config file.
class ConfigFlags {
 public:
  void attach(CLI::App& app) {
    app.add_option("--config", config_path_, "JSON training config; flags given here override it")
        ->check(CLI::ExistingFile);
    const TrainConfig d;
    add<int>(app, "--epochs", "training epochs", d.epochs, [](TrainConfig& c, const int& v) {
      if (v < 1) throw Error(ErrorKind::kConfig, "--epochs must be >= 1");
      c.epochs = v;
    });
    add<std::size_t>(app, "--batch-size", "mini-batch size N_b", d.batch_size,
                     [](TrainConfig& c, const std::size_t& v) {
                       if (v < 2) throw Error(ErrorKind::kConfig, "--batch-size must be >= 2");
                       c.batch_size = v;
                     });
    add<double>(app, "--lr", "learning rate", d.learning_rate,
                [](TrainConfig& c, const double& v) { c.learning_rate = v; });
    add<std::string>(app, "--optimizer", "adam or sgd", to_string(d.optimizer),
                     [](TrainConfig& c, const std::string& v) { c.optimizer = parse_optimizer(v); });
    add<std::uint64_t>(app, "--seed", "base seed", d.seed, [](TrainConfig& c, const std::uint64_t& v) { c.seed = v; });
    add<double>(app, "--lambda-cls", "class discriminator weight", d.weights.cls,
                [](TrainConfig& c, const double& v) { c.weights.cls = v; });
    add<double>(app, "--lambda-dom", "domain discriminator weight", d.weights.dom,
                [](TrainConfig& c, const double& v) { c.weights.dom = v; });
    add<double>(app, "--lambda-pair", "pairwise (or pointwise) loss weight", d.weights.pair,
                [](TrainConfig& c, const double& v) { c.weights.pair = v; });
    add<double>(app, "--beta", "soft regulariser weight", d.weights.beta,
                [](TrainConfig& c, const double& v) { c.weights.beta = v; });
    add<std::string>(app, "--grl-schedule", "constant or dann", to_string(d.grl_schedule),
                     [](TrainConfig& c, const std::string& v) { c.grl_schedule = parse_grl_schedule(v); });
    add<double>(app, "--grl-lambda", "gradient reversal coefficient", d.grl_lambda,
                [](TrainConfig& c, const double& v) {
                  if (v < 0.0) throw Error(ErrorKind::kConfig, "--grl-lambda must be >= 0");
                  c.grl_lambda = v;
                });
    add<std::size_t>(app, "--shallow-hidden", "width of the shared shallow layers", d.shallow_hidden,
                     [](TrainConfig& c, const std::size_t& v) { c.shallow_hidden = v; });
    add<std::size_t>(app, "--hidden", "width of x_c and x_d", d.hidden,
                     [](TrainConfig& c, const std::size_t& v) { c.hidden = v; });
    add<std::string>(app, "--ablation", "'+'-joined ablation flags, or 'full'", d.ablation.label(),
                     [](TrainConfig& c, const std::string& v) { c.ablation = parse_ablation_set(v); });
    add<std::string>(app, "--domain-key", "subject or subject-session", to_string(d.domain_key),
                     [](TrainConfig& c, const std::string& v) { c.domain_key = parse_domain_key(v); });
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path_.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(io::read_file(config_path_));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kConfig, config_path_ + ": " + e.what());
      }
      cfg = config_from_json(j, cfg);
    }
    for (const auto& apply : overrides_) apply(cfg);
    validate(cfg);
    return cfg;
  }

 private:
  template <class T>
  void add(CLI::App& app, const std::string& name, const std::string& help, T initial,
           std::function<void(TrainConfig&, const T&)> setter) {
    auto value = std::make_shared<T>(std::move(initial));
    CLI::Option* opt = app.add_option(name, *value, help);
    overrides_.push_back([value, opt, setter](TrainConfig& c) {
      if (opt->count() > 0) setter(c, *value);
    });
  }

  std::string config_path_;
  std::vector<std::function<void(TrainConfig&)>> overrides_;
};

struct Context {
  std::vector<std::string> argv;
  std::ostream& out;
  std::ostream& err;
};

struct OutDir {
  std::string flag;
  bool force = false;

  void attach(CLI::App& app) {
    app.add_option("--out", flag,
                   std::string("output directory (default $") + kOutputRootEnv + "/<command>, else runs/<command>)");
    app.add_flag("--force", force, "write into a non-empty output directory");
  }

  fs::path prepare(const std::string& command) const {
    fs::path dir;
    if (!flag.empty()) {
      dir = flag;
    } else {
      const char* root = std::getenv(kOutputRootEnv);
      dir = fs::path(root != nullptr && *root != '\0' ? root : "runs") / command;
    }
    if (fs::exists(dir)) {
      if (!fs::is_directory(dir)) throw Error(ErrorKind::kIo, dir.string() + " exists and is not a directory");
      if (!fs::is_empty(dir) && !force) {
        throw Error(ErrorKind::kIo, "output directory " + dir.string() + " is not empty; pass --force to overwrite");
      }
    }
    fs::create_directories(dir);
    return dir;
  }
};

void finish(const fs::path& dir, RunManifest manifest) {
  manifest.finished_at = utc_now();
  io::write_file(dir / "run.json", manifest.to_json().dump(2) + "\n");
}

RunManifest start_manifest(const Context& ctx, const std::string& command) {
  RunManifest m;
  m.command = command;
  m.argv = ctx.argv;
  m.version = PLDCP_VERSION;
  m.started_at = utc_now();
  return m;
}

// ---------------------------------------------------------------------------
// Subcommands

struct ExtractCmd {
  std::vector<std::string> inputs;
  double window = 1.0;
  bool no_smooth = false;
  std::string scope = "per-trial";
  std::size_t channels = 62;
  double lds_q = 0.01;
  double lds_r = 1.0;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("inputs", inputs, "recording CSVs (each with a .json sidecar) or directories of them")
        ->required()
        ->check(CLI::ExistingPath);
    app.add_option("--window", window, "segment length in seconds");
    app.add_flag("--no-smooth", no_smooth, "skip LDS smoothing");
    app.add_option("--scope", scope, "smoothing scope: per-trial or per-session")
        ->check(CLI::IsMember({"per-trial", "per-session"}));
    app.add_option("--channels", channels, "expected channel count (0 accepts any)");
    app.add_option("--lds-q", lds_q, "LDS process noise variance");
    app.add_option("--lds-r", lds_r, "LDS observation noise variance");
    out.attach(app);
  }

  int run(const Context& ctx) const {
    std::vector<fs::path> files;
    for (const auto& in : inputs) {
      if (fs::is_directory(in)) {
        for (const auto& e : fs::directory_iterator(in))
          if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
      } else {
        files.push_back(in);
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorKind::kIo, "no recording CSVs found");

    FeatureConfig fc;
    fc.window_seconds = window;
    fc.smooth = !no_smooth;
    fc.scope = scope == "per-session" ? SmoothingScope::kPerSession : SmoothingScope::kPerTrial;
    fc.expected_channels = channels;
    fc.lds_q = lds_q;
    fc.lds_r = lds_r;

    std::vector<Recording> recs;
    recs.reserve(files.size());
    for (const auto& f : files) recs.push_back(read_recording(f));
    const fs::path dir = out.prepare("extract");
    ExtractedFeatures ex = extract_features(recs, fc);

    Dataset d;
    d.samples = std::move(ex.samples);
    int max_label = 0;
    for (const auto& s : d.samples) max_label = std::max(max_label, s.label);
    d.manifest.n_classes = max_label + 1;
    d.manifest.feature_dim = d.samples.empty() ? 0 : d.samples.front().features.size();
    d.manifest.bands = fc.bands;
    for (std::size_t c = 0; c < recs.front().channels.size(); ++c) d.manifest.channels.push_back("ch_" + std::to_string(c));
    save_dataset(dir / "data.csv", d);

    RunManifest m = start_manifest(ctx, "extract");
    m.config = {{"window_seconds", window},
                {"smooth", !no_smooth},
                {"scope", scope},
                {"expected_channels", channels},
                {"lds_q", lds_q},
                {"lds_r", lds_r},
                {"n_recordings", files.size()}};
    m.dataset_checksum = d.checksum;
    finish(dir, m);
    ctx.out << "extracted " << d.samples.size() << " samples from " << files.size() << " recordings into "
            << (dir / "data.csv").string() << "\n";
    if (ex.floored_values > 0) {
      ctx.err << "warning: " << ex.floored_values << " band variances hit the floor\n";
    }
    return 0;
  }
};

struct SynthCmd {
  SynthConfig sc;
  std::uint64_t seed = 1;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--subjects", sc.n_subjects, "number of subjects");
    app.add_option("--classes", sc.n_classes, "number of classes");
    app.add_option("--samples-per-class", sc.samples_per_class, "samples per class per subject and session");
    app.add_option("--sessions", sc.n_sessions, "sessions per subject");
    app.add_option("--latent-dim", sc.latent_dim, "latent dimension");
    app.add_option("--feature-dim", sc.feature_dim, "feature dimension F");
    app.add_option("--separation", sc.separation, "distance between class centres (s)");
    app.add_option("--domain-shift", sc.domain_shift, "norm of each subject offset (m)");
    app.add_option("--session-shift", sc.session_shift, "norm of each session offset");
    app.add_option("--noise", sc.noise, "latent noise std (sigma)");
    app.add_option("--seed", seed, "generator seed");
    out.attach(app);
  }

  int run(const Context& ctx) const {
    Dataset d = synth_gen(sc, seed);
    const fs::path dir = out.prepare("synth");
    save_dataset(dir / "data.csv", d);
    RunManifest m = start_manifest(ctx, "synth");
    m.config = {{"n_subjects", sc.n_subjects},     {"n_classes", sc.n_classes},
                {"samples_per_class", sc.samples_per_class}, {"n_sessions", sc.n_sessions},
                {"latent_dim", sc.latent_dim},     {"feature_dim", sc.feature_dim},
                {"separation", sc.separation},     {"domain_shift", sc.domain_shift},
                {"session_shift", sc.session_shift}, {"noise", sc.noise}};
    m.seed = seed;
    m.dataset_checksum = d.checksum;
    finish(dir, m);
    ctx.out << "wrote " << d.samples.size() << " samples to " << (dir / "data.csv").string() << "\n";
    return 0;
  }
};

struct TrainCmd {
  std::string dataset;
  std::vector<int> exclude;
  std::size_t log_every = 0;
  ConfigFlags flags;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--dataset", dataset, "dataset CSV")->required()->check(CLI::ExistingFile);
    app.add_option("--exclude-subject", exclude, "subjects to hold out of training (repeatable)");
    app.add_option("--log-every", log_every, "print the loss breakdown every N epochs (0: never)");
    flags.attach(app);
    out.attach(app);
  }

  int run(const Context& ctx) const {
    const TrainConfig cfg = flags.resolve();
    const Dataset d = load_dataset(dataset);
    std::vector<Sample> source;
    for (const auto& s : d.samples)
      if (std::find(exclude.begin(), exclude.end(), s.subject) == exclude.end()) source.push_back(s);
    const SourceDomainSet set =
        make_source_set(std::move(source), d.manifest.n_classes, d.manifest.feature_dim, cfg.domain_key);
    const fs::path dir = out.prepare("train");
    const TrainResult r = train(cfg, set, [&](const EpochLosses& e) {
      if (log_every > 0 && e.epoch % static_cast<int>(log_every) == 0) {
        ctx.out << "epoch " << e.epoch << " " << e.mean.to_string() << "\n";
      }
    });
    write_run_dir(dir, cfg, r);

    const auto pred = predict(r.params, r.store, set.samples);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == set.samples[i].label;

    RunManifest m = start_manifest(ctx, "train");
    m.config = {{"train", config_to_json(cfg)}, {"exclude_subjects", exclude}};
    m.seed = cfg.seed;
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    ctx.out << "trained on " << set.samples.size() << " samples from " << set.n_domains()
            << " domains; training accuracy "
            << io::format_fixed(100.0 * static_cast<double>(ok) / static_cast<double>(pred.size()), 2) << "%\n";
    return 0;
  }
};

// Samples of the requested subjects, or all of them.
std::vector<Sample> select_subjects(const Dataset& d, const std::vector<int>& subjects) {
  std::vector<Sample> picked;
  for (const auto& s : d.samples)
    if (subjects.empty() || std::find(subjects.begin(), subjects.end(), s.subject) != subjects.end())
      picked.push_back(s);
  if (picked.empty()) throw Error(ErrorKind::kData, "no samples match the requested subjects");
  return picked;
}

struct PredictCmd {
  std::string checkpoint;
  std::string dataset;
  std::vector<int> subjects;
  std::string expect;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required()->check(CLI::ExistingFile);
    app.add_option("--dataset", dataset, "dataset CSV")->required()->check(CLI::ExistingFile);
    app.add_option("--subject", subjects, "restrict to these subjects (repeatable)");
    app.add_option("--expect-fingerprint", expect, "refuse a checkpoint with a different config fingerprint");
    out.attach(app);
  }

  int run(const Context& ctx) const {
    const Checkpoint ck =
        load_checkpoint(checkpoint, expect.empty() ? std::nullopt : std::optional<std::string>(expect));
    const Dataset d = load_dataset(dataset);
    if (d.manifest.feature_dim != ck.params.dims.input_dim) {
      throw Error(ErrorKind::kData, "dataset has " + std::to_string(d.manifest.feature_dim) +
                                        " features, checkpoint expects " + std::to_string(ck.params.dims.input_dim));
    }
    const std::vector<Sample> samples = select_subjects(d, subjects);
    const fs::path dir = out.prepare("predict");
    const std::vector<int> pred = predict(ck.params, ck.store, samples);

    std::ostringstream csv;
    csv << "sample_id,subject,session,trial,label,predicted\n";
    std::vector<int> truth;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      csv << s.id << ',' << s.subject << ',' << s.session << ',' << s.trial << ',' << s.label << ',' << pred[i]
          << '\n';
      truth.push_back(s.label);
    }
    io::write_file(dir / "predictions.csv", csv.str());
    const ConfusionMatrix cm = confusion(pred, truth, std::max(d.manifest.n_classes, ck.store.n_classes));
    const double acc = 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(cm.total());

    RunManifest m = start_manifest(ctx, "predict");
    m.config = {{"train", ck.config}, {"fingerprint", ck.fingerprint}, {"subjects", subjects}};
    m.seed = ck.config.value("seed", std::uint64_t{0});
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    ctx.out << "predicted " << samples.size() << " samples; accuracy " << io::format_fixed(acc, 2) << "%\n";
    return 0;
  }
};

// Shared by loso, noise-sweep and ablate.
struct LosoFlags {
  std::string dataset;
  std::string protocol = "single-session";
  std::size_t workers = 1;
  ConfigFlags flags;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--dataset", dataset, "dataset CSV")->required()->check(CLI::ExistingFile);
    app.add_option("--protocol", protocol, "single-session or cross-session")
        ->check(CLI::IsMember({"single-session", "cross-session"}));
    app.add_option("--workers", workers, "folds trained in parallel")->check(CLI::PositiveNumber);
    flags.attach(app);
    out.attach(app);
  }

  LosoOptions options() const {
    LosoOptions o;
    o.protocol = parse_protocol(protocol);
    o.workers = workers;
    return o;
  }
};

void print_report(std::ostream& out, const std::string& label, const LosoReport& r) {
  out << label << ": " << r.folds.size() << " folds, " << r.summary.n_valid << " valid, accuracy "
      << format_mean_std(r.summary.mean, r.summary.std) << "\n";
  for (const auto& f : r.folds) {
    if (!f.valid) out << "  subject " << f.target_subject << " invalid: " << f.error << "\n";
  }
}

struct LosoCmd {
  LosoFlags common;
  double noise = 0.0;

  void attach(CLI::App& app) {
    common.attach(app);
    app.add_option("--noise", noise, "fraction of source labels replaced per fold")
        ->check(CLI::Range(0.0, 0.999999));
  }

  int run(const Context& ctx) const {
    const TrainConfig cfg = common.flags.resolve();
    const Dataset d = load_dataset(common.dataset);
    LosoOptions opt = common.options();
    opt.noise_eta = noise;
    const fs::path dir = common.out.prepare("loso");
    const LosoReport r = run_loso(d, cfg, opt);
    write_loso_outputs(dir, r);
    RunManifest m = start_manifest(ctx, "loso");
    m.config = {{"train", config_to_json(cfg)},
                {"protocol", common.protocol},
                {"workers", common.workers},
                {"noise_eta", noise}};
    m.seed = cfg.seed;
    m.dataset_checksum = r.dataset_checksum;
    finish(dir, m);
    print_report(ctx.out, "loso " + common.protocol, r);
    return 0;
  }
};

void print_sweep(std::ostream& out, const SweepReport& s) {
  for (const auto& row : s.rows) print_report(out, row.label, row.report);
}

struct NoiseSweepCmd {
  LosoFlags common;
  std::vector<double> ratios = {0.0, 0.05, 0.1, 0.2, 0.3};
  std::vector<std::string> strategies = {"pairwise", "pointwise"};

  void attach(CLI::App& app) {
    common.attach(app);
    app.add_option("--ratios", ratios, "comma-separated noise ratios in [0, 1)")->delimiter(',');
    app.add_option("--strategies", strategies, "comma-separated subset of pairwise,pointwise")
        ->delimiter(',');
  }

  int run(const Context& ctx) const {
    const TrainConfig cfg = common.flags.resolve();
    const Dataset d = load_dataset(common.dataset);
    const fs::path dir = common.out.prepare("noise-sweep");
    const SweepReport s = run_noise_sweep(d, cfg, ratios, strategies, common.options());
    write_sweep_outputs(dir, s);
    RunManifest m = start_manifest(ctx, "noise-sweep");
    m.config = {{"train", config_to_json(cfg)},
                {"protocol", common.protocol},
                {"workers", common.workers},
                {"ratios", ratios},
                {"strategies", strategies}};
    m.seed = cfg.seed;
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    print_sweep(ctx.out, s);
    return 0;
  }
};

struct AblateCmd {
  LosoFlags common;
  std::vector<std::string> sets;

  void attach(CLI::App& app) {
    common.attach(app);
    app.add_option("--flags", sets, "comma-separated ablation sets, each '+'-joined (default: every single flag)")
        ->delimiter(',');
  }

  int run(const Context& ctx) const {
    const TrainConfig cfg = common.flags.resolve();
    std::vector<AblationFlags> flags;
    if (sets.empty()) {
      for (const auto& name : ablation_names()) flags.push_back(parse_ablation_set(name));
    } else {
      for (const auto& s : sets) flags.push_back(parse_ablation_set(s));
    }
    const Dataset d = load_dataset(common.dataset);
    const fs::path dir = common.out.prepare("ablate");
    const SweepReport s = run_ablation(d, cfg, flags, common.options());
    write_sweep_outputs(dir, s);
    std::vector<std::string> labels;
    for (const auto& f : flags) labels.push_back(f.label());
    RunManifest m = start_manifest(ctx, "ablate");
    m.config = {{"train", config_to_json(cfg)},
                {"protocol", common.protocol},
                {"workers", common.workers},
                {"ablations", labels}};
    m.seed = cfg.seed;
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    print_sweep(ctx.out, s);
    return 0;
  }
};

struct GradcheckCmd {
  std::size_t batch = 4;
  std::uint64_t seed = 1;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t feature_dim = 32;
  std::size_t shallow_hidden = 16;
  std::size_t hidden = 8;
  std::string ablation = "full";
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--batch", batch, "samples in the checked batch")->check(CLI::Range(2, 1 << 20));
    app.add_option("--seed", seed, "seed for data, weights and batch choice");
    app.add_option("--eps", eps, "central-difference step");
    app.add_option("--tolerance", tolerance, "pass threshold on the max relative error");
    app.add_option("--feature-dim", feature_dim, "synthetic feature dimension");
    app.add_option("--shallow-hidden", shallow_hidden, "shallow layer width");
    app.add_option("--hidden", hidden, "x_c / x_d width");
    app.add_option("--ablation", ablation, "ablation set deciding which terms are checked");
    out.attach(app);
  }

  int run(const Context& ctx) const {
    SynthConfig sc;
    sc.n_subjects = 3;
    sc.samples_per_class = 10;
    sc.feature_dim = feature_dim;
    sc.latent_dim = std::min<std::size_t>(8, feature_dim);
    const Dataset d = synth_gen(sc, seed);
    const SourceDomainSet src = make_source_set(d.samples, sc.n_classes, feature_dim, DomainKey::kSubject);
    if (batch > src.samples.size()) throw Error(ErrorKind::kConfig, "--batch exceeds the synthetic set");

    TrainConfig tc;
    tc.ablation = parse_ablation_set(ablation);
    const Wiring w = ablation_apply(tc);
    NetworkDims dims;
    dims.input_dim = feature_dim;
    dims.shallow_hidden = shallow_hidden;
    dims.hidden = hidden;
    dims.n_classes = sc.n_classes;
    dims.n_domains = static_cast<int>(src.n_domains());
    ModelParams p = ModelParams::init(dims, io::mix_seed(seed, 1));
    p.bilinear = w.bilinear;
    const PrototypeStore store = build_store(p, src, w.pooled);

    std::vector<std::size_t> order(src.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(io::mix_seed(seed, 3));
    std::shuffle(order.begin(), order.end(), rng);
    Batch b;
    b.x = Matrix(batch, feature_dim);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t k = order[i];
      std::copy(src.samples[k].features.begin(), src.samples[k].features.end(), b.x.row(i).begin());
      b.labels.push_back(src.samples[k].label);
      b.domains.push_back(src.domain_ids[k]);
      b.ids.push_back(src.samples[k].id);
    }

    std::vector<Matrix> params;
    for (const auto& [name, m] : p.tensors()) params.push_back(*m);
    const ScalarFn fn = [&](Graph&, std::span<const Var> vars) {
      return total_objective(bind_vars(vars, dims.leaky_slope, p.bilinear), b, store, w.objective).total;
    };
    const double error = grad_check(fn, params, eps);
    const bool passed = error < tolerance;

    const fs::path dir = out.prepare("gradcheck");
    const nlohmann::json result = {{"max_relative_error", error}, {"eps", eps},     {"tolerance", tolerance},
                                   {"passed", passed},            {"batch", batch}, {"ablation", ablation}};
    io::write_file(dir / "gradcheck.json", result.dump(2) + "\n");
    RunManifest m = start_manifest(ctx, "gradcheck");
    m.config = {{"batch", batch},
                {"eps", eps},
                {"tolerance", tolerance},
                {"feature_dim", feature_dim},
                {"shallow_hidden", shallow_hidden},
                {"hidden", hidden},
                {"ablation", ablation}};
    m.seed = seed;
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    ctx.out << "max relative error " << io::format_double(error) << (passed ? " < " : " >= ")
            << io::format_double(tolerance) << "\n";
    return passed ? 0 : 1;
  }
};

struct ExportCmd {
  std::string checkpoint;
  std::string dataset;
  std::optional<int> target;
  OutDir out;

  void attach(CLI::App& app) {
    app.add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required()->check(CLI::ExistingFile);
    app.add_option("--dataset", dataset, "dataset CSV")->required()->check(CLI::ExistingFile);
    app.add_option("--target-subject", target, "subject exported with split=target and domain_id -1");
    out.attach(app);
  }

  int run(const Context& ctx) const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const TrainConfig cfg = config_from_json(ck.config);
    const Dataset d = load_dataset(dataset);
    std::vector<Sample> source, held;
    for (const auto& s : d.samples) (target && s.subject == *target ? held : source).push_back(s);
    const SourceDomainSet set =
        make_source_set(std::move(source), d.manifest.n_classes, d.manifest.feature_dim, cfg.domain_key);

    const Embeddings src_emb = embed(ck.params, set.samples);
    const Embeddings tgt_emb = embed(ck.params, held);
    std::vector<EmbeddingRow> rows;
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
      rows.push_back({set.samples[i].id, set.domain_ids[i], "source", src_emb.x_d.row(i), src_emb.x_c.row(i)});
    }
    for (std::size_t i = 0; i < held.size(); ++i) {
      rows.push_back({held[i].id, -1, "target", tgt_emb.x_d.row(i), tgt_emb.x_c.row(i)});
    }
    const fs::path dir = out.prepare("export-embeddings");
    write_embeddings(dir / "embeddings.csv", rows);
    write_prototypes(dir / "prototypes.csv", ck.store);
    RunManifest m = start_manifest(ctx, "export-embeddings");
    m.config = {{"train", ck.config}, {"fingerprint", ck.fingerprint}};
    if (target) m.config["target_subject"] = *target;
    m.seed = cfg.seed;
    m.dataset_checksum = dataset_checksum(d);
    finish(dir, m);
    ctx.out << "exported " << rows.size() << " embeddings to " << (dir / "embeddings.csv").string() << "\n";
    return 0;
  }
};

std::string error_line(std::string_view kind, std::string_view message) {
  return nlohmann::json{{"status", "error"}, {"kind", kind}, {"message", message}}.dump() + "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototype-based domain generalisation for EEG emotion recognition", "pldcp"};
  app.require_subcommand(1, 1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", PLDCP_VERSION);

  ExtractCmd extract;
  SynthCmd synth;
  TrainCmd train_cmd;
  PredictCmd predict_cmd;
  LosoCmd loso;
  NoiseSweepCmd noise;
  AblateCmd ablate;
  GradcheckCmd gradcheck;
  ExportCmd export_cmd;

  struct Entry {
    CLI::App* app;
    std::function<int(const Context&)> run;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    cmd.attach(*sub);
    entries.push_back({sub, [&cmd](const Context& c) { return cmd.run(c); }});
  };
  add("extract", "raw recordings to a DE feature dataset", extract);
  add("synth", "generate a synthetic multi-subject dataset", synth);
  add("train", "train one model and write a checkpoint", train_cmd);
  add("predict", "classify samples with a checkpoint", predict_cmd);
  add("loso", "leave-one-subject-out evaluation", loso);
  add("noise-sweep", "LOSO over label-noise ratios and learning strategies", noise);
  add("ablate", "LOSO for the full model and each ablation", ablate);
  add("gradcheck", "compare autodiff against central differences on a small batch", gradcheck);
  add("export-embeddings", "write x_d / x_c embeddings and prototypes", export_cmd);

  auto usage_failure = [&](const std::string& message) {
    const CLI::App* target = &app;
    for (const CLI::App* sub : app.get_subcommands()) target = sub;
    err << target->help();
    err << error_line("usage", message);
    return 2;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return usage_failure(e.what());
  }

  Context ctx{std::vector<std::string>(argv, argv + argc), out, err};
  try {
    for (const auto& e : entries)
      if (e.app->parsed()) return e.run(ctx);
    return usage_failure("no subcommand");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) return usage_failure(e.what());
    err << error_line(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    err << error_line("internal", e.what());
    return 1;
  }
}

}  // namespace pldcp::cli
