#include "pldcp/experiments.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"
#include "pldcp/prototypes.hpp"

namespace pldcp {

long long ConfusionMatrix::total() const {
  long long t = 0;
  for (long long c : counts) t += c;
  return t;
}

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int k = 0; k < n_classes; ++k) t += at(k, k);
  return t;
}

std::vector<std::vector<double>> ConfusionMatrix::row_normalized() const {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n_classes),
                                       std::vector<double>(static_cast<std::size_t>(n_classes), 0.0));
  for (int t = 0; t < n_classes; ++t) {
    long long row = 0;
    for (int p = 0; p < n_classes; ++p) row += at(t, p);
    if (row == 0) continue;
    for (int p = 0; p < n_classes; ++p)
      out[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] =
          100.0 * static_cast<double>(at(t, p)) / static_cast<double>(row);
  }
  return out;
}

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth, int n_classes) {
  if (predicted.size() != truth.size()) {
    throw Error(ErrorKind::kShape, "confusion: " + std::to_string(predicted.size()) + " predictions for " +
                                       std::to_string(truth.size()) + " labels");
  }
  ConfusionMatrix m{n_classes, std::vector<long long>(static_cast<std::size_t>(n_classes * n_classes), 0)};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {predicted[i], truth[i]}) {
      if (v < 0 || v >= n_classes) {
        throw Error(ErrorKind::kData, "confusion: label " + std::to_string(v) + " outside [0, " +
                                          std::to_string(n_classes) + ")");
      }
    }
    ++m.counts[static_cast<std::size_t>(truth[i] * n_classes + predicted[i])];
  }
  return m;
}

Summary summarize(std::span<const FoldReport> folds) {
  Summary s;
  double total = 0.0;
  for (const auto& f : folds) {
    if (!f.valid) {
      ++s.n_invalid;
      continue;
    }
    ++s.n_valid;
    total += f.accuracy;
  }
  if (s.n_valid == 0) return s;
  s.mean = total / static_cast<double>(s.n_valid);
  double sq = 0.0;
  for (const auto& f : folds)
    if (f.valid) sq += (f.accuracy - s.mean) * (f.accuracy - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(s.n_valid));
  return s;
}

std::string format_mean_std(double mean, double std) {
  std::string sd = io::format_fixed(std, 2);
  while (sd.size() < 5) sd.insert(sd.begin(), '0');
  return io::format_fixed(mean, 2) + "±" + sd;
}

std::uint64_t fold_seed(std::uint64_t base, std::size_t fold) { return io::mix_seed(base, fold); }

std::uint64_t noise_seed(std::uint64_t base, std::size_t fold) {
  return io::mix_seed(io::mix_seed(base, 0x6e6f697365ULL), fold);
}

std::string dataset_checksum(const Dataset& dataset) {
  if (!dataset.checksum.empty()) return dataset.checksum;
  std::uint64_t h = io::fnv1a64(manifest_to_json(dataset.manifest));
  for (const auto& s : dataset.samples) {
    std::string line = std::to_string(s.subject) + ',' + std::to_string(s.session) + ',' +
                       std::to_string(s.trial) + ',' + std::to_string(s.label);
    for (double v : s.features) line += ',' + io::format_double(v);
    h = io::fnv1a64(line, h);
  }
  return io::hex64(h);
}

namespace {

FoldReport run_fold(const Dataset& dataset, const FoldSpec& spec, std::size_t index, const TrainConfig& base,
                    const LosoOptions& options, const FoldHook& hook) {
  FoldReport r;
  r.fold = static_cast<int>(index);
  r.target_subject = spec.target_subject;
  r.n_target_samples = spec.target_ids.size();
  r.n_source_samples = spec.source_ids.size();
  TrainConfig cfg = base;
  cfg.seed = fold_seed(base.seed, index);
  r.seed = cfg.seed;
  r.fingerprint = config_fingerprint(cfg);
  r.confusion = confusion({}, {}, dataset.manifest.n_classes);

  TrainResult trained;
  try {
    std::vector<Sample> source;
    source.reserve(spec.source_ids.size());
    for (std::size_t id : spec.source_ids) source.push_back(dataset.samples[id]);
    if (options.noise_eta > 0.0) {
      source = inject_label_noise(source, dataset.manifest.n_classes, options.noise_eta,
                                  noise_seed(base.seed, index));
    }
    const SourceDomainSet set = make_source_set(std::move(source), dataset.manifest.n_classes,
                                                dataset.manifest.feature_dim, cfg.domain_key);
    trained = train(cfg, set);
  } catch (const Error& e) {
    r.valid = false;
    r.error = e.what();
    return r;
  }

  r.consumed_ids = trained.provenance.distinct();
  r.leaked_ids = trained.provenance.intersect(spec.target_ids).size();
  r.trace = trained.trace;

  std::vector<Sample> target;
  std::vector<int> truth;
  target.reserve(spec.target_ids.size());
  for (std::size_t id : spec.target_ids) {
    target.push_back(dataset.samples[id]);
    truth.push_back(dataset.samples[id].label);
  }
  const std::vector<int> predicted = predict(trained.params, trained.store, target);
  r.confusion = confusion(predicted, truth, dataset.manifest.n_classes);
  r.accuracy = truth.empty() ? 0.0
                             : 100.0 * static_cast<double>(r.confusion.trace()) /
                                   static_cast<double>(r.confusion.total());
  if (hook) hook(spec, trained);
  return r;
}

}  // namespace

LosoReport run_loso(const Dataset& dataset, const TrainConfig& cfg, const LosoOptions& options,
                    const FoldHook& hook) {
  validate(cfg);
  if (!(options.noise_eta >= 0.0 && options.noise_eta < 1.0)) {
    throw Error(ErrorKind::kConfig, "noise ratio must lie in [0, 1)");
  }
  const std::vector<FoldSpec> folds = loso_splits(dataset, options.protocol);

  LosoReport report;
  report.protocol = options.protocol;
  report.config = cfg;
  report.fingerprint = config_fingerprint(cfg);
  report.dataset_checksum = dataset_checksum(dataset);
  report.noise_eta = options.noise_eta;
  report.folds.resize(folds.size());

  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < folds.size(); i = next++) {
      try {
        report.folds[i] = run_fold(dataset, folds[i], i, cfg, options, hook);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(options.workers, folds.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& f : report.folds) {
    if (f.leaked_ids > 0) {
      throw Error(ErrorKind::kData, "fold for subject " + std::to_string(f.target_subject) + " consumed " +
                                        std::to_string(f.leaked_ids) + " target sample ids during training");
    }
  }
  report.summary = summarize(report.folds);
  return report;
}

SweepReport run_noise_sweep(const Dataset& dataset, const TrainConfig& cfg, std::span<const double> ratios,
                            std::span<const std::string> strategies, const LosoOptions& options) {
  for (double eta : ratios)
    if (!(eta >= 0.0 && eta < 1.0)) throw Error(ErrorKind::kConfig, "noise ratio " + io::format_double(eta) + " outside [0, 1)");
  for (const auto& s : strategies)
    if (s != "pairwise" && s != "pointwise")
      throw Error(ErrorKind::kConfig, "unknown strategy '" + s + "' (expected pairwise or pointwise)");

  SweepReport sweep;
  sweep.axis = "noise";
  for (double eta : ratios) {
    for (const auto& strategy : strategies) {
      TrainConfig row_cfg = cfg;
      row_cfg.ablation.no_pairwise = strategy == "pointwise";
      LosoOptions row_opts = options;
      row_opts.noise_eta = eta;
      SweepRow row;
      row.label = strategy + "@" + io::format_double(eta);
      row.noise_eta = eta;
      row.strategy = strategy;
      row.flags = row_cfg.ablation;
      row.report = run_loso(dataset, row_cfg, row_opts);
      sweep.rows.push_back(std::move(row));
    }
  }
  return sweep;
}

SweepReport run_ablation(const Dataset& dataset, const TrainConfig& cfg, std::span<const AblationFlags> flags,
                         const LosoOptions& options) {
  std::vector<AblationFlags> rows{cfg.ablation};
  rows.insert(rows.end(), flags.begin(), flags.end());
  for (const auto& f : rows) {
    TrainConfig probe = cfg;
    probe.ablation = f;
    validate(probe);
  }
  SweepReport sweep;
  sweep.axis = "ablation";
  for (const auto& f : rows) {
    TrainConfig row_cfg = cfg;
    row_cfg.ablation = f;
    SweepRow row;
    row.label = f.label();
    row.noise_eta = options.noise_eta;
    row.strategy = f.no_pairwise ? "pointwise" : "pairwise";
    row.flags = f;
    row.report = run_loso(dataset, row_cfg, options);
    sweep.rows.push_back(std::move(row));
  }
  return sweep;
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json summary_json(const LosoReport& report) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    folds.push_back({{"fold", f.fold},
                     {"target_subject", f.target_subject},
                     {"valid", f.valid},
                     {"accuracy", f.accuracy},
                     {"n_target_samples", f.n_target_samples},
                     {"error", f.error}});
  }
  return {{"protocol", to_string(report.protocol)},
          {"mean_accuracy", report.summary.mean},
          {"std_accuracy", report.summary.std},
          {"std_convention", "population"},
          {"formatted", format_mean_std(report.summary.mean, report.summary.std)},
          {"n_folds", report.folds.size()},
          {"n_valid", report.summary.n_valid},
          {"n_invalid", report.summary.n_invalid},
          {"noise_eta", report.noise_eta},
          {"config", config_to_json(report.config)},
          {"fingerprint", report.fingerprint},
          {"dataset_checksum", report.dataset_checksum},
          {"folds", folds}};
}

void write_loso_outputs(const std::filesystem::path& dir, const LosoReport& report) {
  io::write_file(dir / "summary.json", summary_json(report).dump(2) + "\n");

  std::ostringstream folds;
  folds << "fold,target_subject,valid,accuracy,n_target_samples,n_source_samples,seed,fingerprint,error\n";
  for (const auto& f : report.folds) {
    std::string err = f.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    folds << f.fold << ',' << f.target_subject << ',' << (f.valid ? 1 : 0) << ',' << io::format_double(f.accuracy)
          << ',' << f.n_target_samples << ',' << f.n_source_samples << ',' << f.seed << ',' << f.fingerprint << ','
          << err << '\n';
  }
  io::write_file(dir / "folds.csv", folds.str());

  for (const auto& f : report.folds) {
    const auto subject = std::to_string(f.target_subject);
    std::ostringstream c;
    c << "true";
    for (int p = 0; p < f.confusion.n_classes; ++p) c << ",pred_" << p;
    for (int p = 0; p < f.confusion.n_classes; ++p) c << ",pct_" << p;
    c << '\n';
    const auto pct = f.confusion.row_normalized();
    for (int t = 0; t < f.confusion.n_classes; ++t) {
      c << t;
      for (int p = 0; p < f.confusion.n_classes; ++p) c << ',' << f.confusion.at(t, p);
      for (int p = 0; p < f.confusion.n_classes; ++p)
        c << ',' << io::format_fixed(pct[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)], 4);
      c << '\n';
    }
    io::write_file(dir / ("confusion_" + subject + ".csv"), c.str());
    write_loss_trace(dir / ("losses_" + subject + ".csv"), f.trace);
  }
}

void write_sweep_outputs(const std::filesystem::path& dir, const SweepReport& sweep) {
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv;
  csv << "row,label,strategy,noise_eta,mean_accuracy,std_accuracy,formatted,n_valid\n";
  for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
    const SweepRow& row = sweep.rows[i];
    const Summary& s = row.report.summary;
    const std::string sub = "row_" + std::to_string(i);
    rows.push_back({{"row", i},
                    {"label", row.label},
                    {"strategy", row.strategy},
                    {"noise_eta", row.noise_eta},
                    {"ablation", row.flags.label()},
                    {"mean_accuracy", s.mean},
                    {"std_accuracy", s.std},
                    {"formatted", format_mean_std(s.mean, s.std)},
                    {"n_valid", s.n_valid},
                    {"dir", sub}});
    csv << i << ',' << row.label << ',' << row.strategy << ',' << io::format_double(row.noise_eta) << ','
        << io::format_double(s.mean) << ',' << io::format_double(s.std) << ','
        << format_mean_std(s.mean, s.std) << ',' << s.n_valid << '\n';
    write_loso_outputs(dir / sub, row.report);
  }
  nlohmann::json top = {{"axis", sweep.axis}, {"std_convention", "population"}, {"rows", rows}};
  io::write_file(dir / "summary.json", top.dump(2) + "\n");
  io::write_file(dir / "sweep.csv", csv.str());
}

}  // namespace pldcp
