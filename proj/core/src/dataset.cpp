#include "pldcp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"

namespace pldcp {

std::vector<BandSpec> default_bands() {
  return {{"delta", 1.0, 3.0}, {"theta", 4.0, 7.0}, {"alpha", 8.0, 12.0},
          {"beta", 14.0, 30.0}, {"gamma", 31.0, 50.0}};
}

std::vector<int> Dataset::subjects() const {
  std::set<int> s;
  for (const auto& sample : samples) s.insert(sample.subject);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Manifest + CSV

std::string manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["feature_dim"] = m.feature_dim;
  j["n_classes"] = m.n_classes;
  j["label_names"] = m.label_names;
  auto bands = nlohmann::ordered_json::array();
  for (const auto& b : m.bands) {
    bands.push_back({{"name", b.name}, {"low_hz", b.low_hz}, {"high_hz", b.high_hz}});
  }
  j["bands"] = bands;
  j["channels"] = m.channels;
  return j.dump(2) + "\n";
}

Manifest manifest_from_json(std::string_view text, const std::string& source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source, 1, std::string("invalid manifest JSON: ") + e.what());
  }
  Manifest m;
  try {
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.n_classes = j.at("n_classes").get<int>();
    if (j.contains("label_names")) m.label_names = j["label_names"].get<std::vector<std::string>>();
    if (j.contains("channels")) m.channels = j["channels"].get<std::vector<std::string>>();
    if (j.contains("bands")) {
      for (const auto& b : j["bands"]) {
        m.bands.push_back({b.at("name").get<std::string>(), b.at("low_hz").get<double>(),
                           b.at("high_hz").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source, 1, std::string("manifest schema: ") + e.what());
  }
  if (m.feature_dim == 0) throw ParseError(source, 1, "manifest feature_dim must be positive");
  if (m.n_classes < 2) throw ParseError(source, 1, "manifest n_classes must be at least 2");
  if (!m.label_names.empty() && m.label_names.size() != static_cast<std::size_t>(m.n_classes)) {
    throw ParseError(source, 1, "manifest label_names has " + std::to_string(m.label_names.size()) +
                                    " entries for " + std::to_string(m.n_classes) + " classes");
  }
  return m;
}

namespace {

std::string dataset_csv(const Dataset& d) {
  std::string out = "subject,session,trial,label";
  for (std::size_t f = 0; f < d.manifest.feature_dim; ++f) out += ",f" + std::to_string(f);
  out += '\n';
  for (const auto& s : d.samples) {
    out += std::to_string(s.subject) + ',' + std::to_string(s.session) + ',' +
           std::to_string(s.trial) + ',' + std::to_string(s.label);
    for (double v : s.features) {
      out += ',';
      out += io::format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::string checksum_of(std::string_view csv, std::string_view manifest) {
  return io::hex64(io::fnv1a64(manifest, io::fnv1a64(csv)));
}

}  // namespace

void save_dataset(const std::filesystem::path& csv_path, Dataset& dataset) {
  for (const auto& s : dataset.samples) {
    if (s.features.size() != dataset.manifest.feature_dim) {
      throw Error(ErrorKind::kData, "sample " + std::to_string(s.id) + " has " +
                                        std::to_string(s.features.size()) + " features, manifest says " +
                                        std::to_string(dataset.manifest.feature_dim));
    }
  }
  const std::string csv = dataset_csv(dataset);
  const std::string manifest = manifest_to_json(dataset.manifest);
  io::write_file(csv_path, csv);
  io::write_file(io::sidecar_path(csv_path), manifest);
  dataset.checksum = checksum_of(csv, manifest);
}

Dataset load_dataset(const std::filesystem::path& csv_path) {
  const std::string source = csv_path.string();
  const auto manifest_path = io::sidecar_path(csv_path);
  if (!std::filesystem::exists(manifest_path)) {
    throw Error(ErrorKind::kIo, "missing manifest " + manifest_path.string() + " for " + source);
  }
  const std::string manifest_text = io::read_file(manifest_path);
  Dataset d;
  d.manifest = manifest_from_json(manifest_text, manifest_path.string());
  const std::string text = io::read_file(csv_path);
  if (text.empty()) throw ParseError(source, 1, "empty file");

  const std::size_t f_dim = d.manifest.feature_dim;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto fields = io::split(line, ',');
    if (!header_seen) {
      header_seen = true;
      if (fields.size() < 5 || fields[0] != "subject" || fields[1] != "session" ||
          fields[2] != "trial" || fields[3] != "label") {
        throw ParseError(source, line_no, "header must start with subject,session,trial,label,f0");
      }
      if (fields.size() - 4 != f_dim) {
        throw ParseError(source, line_no, "header has " + std::to_string(fields.size() - 4) +
                                              " feature columns, manifest says " + std::to_string(f_dim));
      }
      for (std::size_t f = 0; f < f_dim; ++f) {
        if (fields[4 + f] != "f" + std::to_string(f)) {
          throw ParseError(source, line_no, "feature column " + std::to_string(f) + " must be named f" +
                                                std::to_string(f));
        }
      }
      continue;
    }
    if (fields.size() != f_dim + 4) {
      throw ParseError(source, line_no, "row has " + std::to_string(fields.size() - 4) +
                                            " features, expected " + std::to_string(f_dim));
    }
    Sample s;
    s.id = d.samples.size();
    long long ints[4];
    static constexpr const char* kNames[] = {"subject", "session", "trial", "label"};
    for (int k = 0; k < 4; ++k) {
      if (!io::parse_int(fields[static_cast<std::size_t>(k)], ints[k])) {
        throw ParseError(source, line_no, std::string("bad integer in column ") + kNames[k] + ": '" +
                                              std::string(fields[static_cast<std::size_t>(k)]) + "'");
      }
    }
    s.subject = static_cast<int>(ints[0]);
    s.session = static_cast<int>(ints[1]);
    s.trial = static_cast<int>(ints[2]);
    s.label = static_cast<int>(ints[3]);
    if (s.label < 0 || s.label >= d.manifest.n_classes) {
      throw ParseError(source, line_no, "unknown label " + std::to_string(s.label) + " (n_classes = " +
                                            std::to_string(d.manifest.n_classes) + ")");
    }
    s.features.resize(f_dim);
    for (std::size_t f = 0; f < f_dim; ++f) {
      if (!io::parse_double(fields[4 + f], s.features[f]) || !std::isfinite(s.features[f])) {
        throw ParseError(source, line_no, "bad feature f" + std::to_string(f) + ": '" +
                                              std::string(fields[4 + f]) + "'");
      }
    }
    d.samples.push_back(std::move(s));
  }
  if (!header_seen) throw ParseError(source, 1, "empty file");
  if (d.samples.empty()) throw ParseError(source, line_no, "no samples after header");
  d.checksum = checksum_of(text, manifest_text);
  return d;
}

// ---------------------------------------------------------------------------
// Domains

std::string to_string(DomainKey key) {
  return key == DomainKey::kSubject ? "subject" : "subject-session";
}

std::string to_string(Protocol protocol) {
  return protocol == Protocol::kSingleSession ? "single-session" : "cross-session";
}

DomainKey parse_domain_key(std::string_view text) {
  if (text == "subject") return DomainKey::kSubject;
  if (text == "subject-session") return DomainKey::kSubjectSession;
  throw Error(ErrorKind::kConfig, "unknown domain key '" + std::string(text) +
                                      "' (expected subject or subject-session)");
}

Protocol parse_protocol(std::string_view text) {
  if (text == "single-session") return Protocol::kSingleSession;
  if (text == "cross-session") return Protocol::kCrossSession;
  throw Error(ErrorKind::kConfig, "unknown protocol '" + std::string(text) +
                                      "' (expected single-session or cross-session)");
}

DomainIndex::DomainIndex(std::span<const Sample> samples, DomainKey key) : key_(key) {
  std::set<std::pair<int, int>> keys;
  for (const auto& s : samples) keys.insert(make_key(s));
  keys_.assign(keys.begin(), keys.end());
  for (std::size_t i = 0; i < keys_.size(); ++i) lookup_[keys_[i]] = static_cast<int>(i);
}

std::pair<int, int> DomainIndex::make_key(const Sample& s) const {
  return {s.subject, key_ == DomainKey::kSubjectSession ? s.session : 0};
}

int DomainIndex::domain_of(const Sample& sample) const {
  auto it = lookup_.find(make_key(sample));
  if (it == lookup_.end()) {
    throw Error(ErrorKind::kData, "subject " + std::to_string(sample.subject) + " session " +
                                      std::to_string(sample.session) + " is not a known domain");
  }
  return it->second;
}

SourceDomainSet make_source_set(std::vector<Sample> samples, int n_classes, std::size_t feature_dim,
                                DomainKey key) {
  SourceDomainSet set;
  set.n_classes = n_classes;
  set.feature_dim = feature_dim;
  set.domains = DomainIndex(samples, key);
  set.domain_ids.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= n_classes) {
      throw Error(ErrorKind::kData, "sample " + std::to_string(s.id) + " label out of range");
    }
    set.domain_ids.push_back(set.domains.domain_of(s));
  }
  set.samples = std::move(samples);
  return set;
}

SourceDomainSet make_source_set(const Dataset& dataset, std::span<const std::size_t> ids,
                                DomainKey key) {
  std::vector<Sample> picked;
  picked.reserve(ids.size());
  for (std::size_t id : ids) picked.push_back(dataset.samples.at(id));
  return make_source_set(std::move(picked), dataset.manifest.n_classes, dataset.manifest.feature_dim,
                         key);
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

std::vector<double> random_direction(std::size_t dim, double norm, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  double len = 0.0;
  do {
    for (double& x : v) x = gauss(rng);
    len = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  } while (len == 0.0);
  for (double& x : v) x *= norm / len;
  return v;
}

}  // namespace

Dataset synth_gen(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_subjects < 2) throw Error(ErrorKind::kConfig, "synth: n_subjects must be >= 2");
  if (cfg.n_classes < 2) throw Error(ErrorKind::kConfig, "synth: n_classes must be >= 2");
  if (cfg.samples_per_class < 1 || cfg.n_sessions < 1) {
    throw Error(ErrorKind::kConfig, "synth: samples_per_class and n_sessions must be >= 1");
  }
  if (cfg.latent_dim < static_cast<std::size_t>(cfg.n_classes)) {
    throw Error(ErrorKind::kConfig, "synth: latent_dim must be >= n_classes");
  }
  if (cfg.feature_dim == 0 || cfg.noise < 0.0 || cfg.separation < 0.0 || cfg.domain_shift < 0.0) {
    throw Error(ErrorKind::kConfig, "synth: dimensions must be positive and magnitudes non-negative");
  }

  std::mt19937_64 rng(seed);
  const std::size_t L = cfg.latent_dim;
  const std::size_t F = cfg.feature_dim;

  // Scaled basis vectors: every pair of centres is exactly `separation` apart.
  std::vector<std::vector<double>> centres(static_cast<std::size_t>(cfg.n_classes),
                                           std::vector<double>(L, 0.0));
  for (int k = 0; k < cfg.n_classes; ++k) centres[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)] = cfg.separation / std::sqrt(2.0);

  std::normal_distribution<double> mixing(0.0, 1.0 / std::sqrt(static_cast<double>(F)));
  std::vector<double> w(F * L);
  for (double& x : w) x = mixing(rng);

  std::vector<std::vector<double>> offsets;
  for (int n = 0; n < cfg.n_subjects; ++n) offsets.push_back(random_direction(L, cfg.domain_shift, rng));
  std::vector<std::vector<double>> session_offsets;
  for (int n = 0; n < cfg.n_subjects * cfg.n_sessions; ++n) {
    session_offsets.push_back(random_direction(L, cfg.session_shift, rng));
  }

  Dataset d;
  d.manifest.feature_dim = F;
  d.manifest.n_classes = cfg.n_classes;
  for (int k = 0; k < cfg.n_classes; ++k) d.manifest.label_names.push_back("class_" + std::to_string(k));

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> z(L);
  for (int n = 0; n < cfg.n_subjects; ++n) {
    for (int sess = 0; sess < cfg.n_sessions; ++sess) {
      const auto& so = session_offsets[static_cast<std::size_t>(n * cfg.n_sessions + sess)];
      for (int k = 0; k < cfg.n_classes; ++k) {
        for (int i = 0; i < cfg.samples_per_class; ++i) {
          for (std::size_t j = 0; j < L; ++j) {
            z[j] = centres[static_cast<std::size_t>(k)][j] + offsets[static_cast<std::size_t>(n)][j] + so[j] +
                   cfg.noise * gauss(rng);
          }
          Sample s;
          s.id = d.samples.size();
          s.subject = n + 1;
          s.session = sess + 1;
          s.trial = k + 1;
          s.label = k;
          s.features.assign(F, 0.0);
          for (std::size_t f = 0; f < F; ++f) {
            double acc = 0.0;
            for (std::size_t j = 0; j < L; ++j) acc += w[f * L + j] * z[j];
            s.features[f] = acc;
          }
          d.samples.push_back(std::move(s));
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Label noise

std::vector<Sample> inject_label_noise(std::span<const Sample> samples, int n_classes, double eta,
                                       std::uint64_t seed) {
  if (!(eta >= 0.0) || eta >= 1.0) {
    throw Error(ErrorKind::kConfig, "label noise ratio must be in [0, 1), got " + std::to_string(eta));
  }
  if (n_classes < 2) throw Error(ErrorKind::kConfig, "label noise needs at least 2 classes");
  std::vector<Sample> out(samples.begin(), samples.end());
  const std::size_t n = out.size();
  const auto count = static_cast<std::size_t>(std::llround(eta * static_cast<double>(n)));
  if (count == 0) return out;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform draw without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::uniform_int_distribution<int> other(0, n_classes - 2);
  for (std::size_t i = 0; i < count; ++i) {
    Sample& s = out[order[i]];
    const int r = other(rng);
    s.label = r < s.label ? r : r + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// LOSO folds

std::vector<FoldSpec> loso_splits(const Dataset& dataset, Protocol protocol) {
  const auto subjects = dataset.subjects();
  if (subjects.size() < 2) {
    throw Error(ErrorKind::kData, "leave-one-subject-out needs at least 2 subjects, found " +
                                      std::to_string(subjects.size()));
  }
  auto in_protocol = [&](const Sample& s) {
    return protocol == Protocol::kCrossSession || s.session == 1;
  };
  if (protocol == Protocol::kSingleSession) {
    for (int subj : subjects) {
      const bool has = std::any_of(dataset.samples.begin(), dataset.samples.end(),
                                   [&](const Sample& s) { return s.subject == subj && s.session == 1; });
      if (!has) {
        throw Error(ErrorKind::kData, "subject " + std::to_string(subj) +
                                          " has no session-1 data for the single-session protocol");
      }
    }
  }
  std::vector<FoldSpec> folds;
  for (int subj : subjects) {
    FoldSpec fold;
    fold.protocol = protocol;
    fold.target_subject = subj;
    for (const auto& s : dataset.samples) {
      if (!in_protocol(s)) continue;
      (s.subject == subj ? fold.target_ids : fold.source_ids).push_back(s.id);
    }
    folds.push_back(std::move(fold));
  }
  return folds;
}

}  // namespace pldcp
