#pragma once

// Sample data model, the CSV + manifest dataset format, the synthetic
// multi-subject generator, label-noise injection and leave-one-subject-out
// fold construction.
//
// Dataset file layout:
//   data.csv   header `subject,session,trial,label,f0,...,f{F-1}`, one sample
//              per row, labels 0-based
//   data.json  manifest {feature_dim, n_classes, label_names, bands, channels}

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pldcp {

struct BandSpec {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

/// Delta 1-3, Theta 4-7, Alpha 8-12, Beta 14-30, Gamma 31-50 Hz.
std::vector<BandSpec> default_bands();

struct Sample {
  std::size_t id = 0;  // row index within its Dataset
  std::vector<double> features;
  int label = 0;
  int subject = 0;
  int session = 1;
  int trial = 0;
};

struct Manifest {
  std::size_t feature_dim = 0;
  int n_classes = 0;
  std::vector<std::string> label_names;
  std::vector<BandSpec> bands;
  std::vector<std::string> channels;
};

struct Dataset {
  Manifest manifest;
  std::vector<Sample> samples;
  std::string checksum;  // fnv1a over the csv and manifest bytes; set by load/save

  std::vector<int> subjects() const;  // sorted, unique
};

void save_dataset(const std::filesystem::path& csv_path, Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& csv_path);
std::string manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(std::string_view text, const std::string& source);

enum class DomainKey { kSubject, kSubjectSession };
enum class Protocol { kSingleSession, kCrossSession };

std::string to_string(DomainKey key);
std::string to_string(Protocol protocol);
DomainKey parse_domain_key(std::string_view text);
Protocol parse_protocol(std::string_view text);

/// Maps (subject, session) pairs to contiguous domain ids [0, N_d), ordered
/// by subject then session.
class DomainIndex {
 public:
  DomainIndex() = default;
  DomainIndex(std::span<const Sample> samples, DomainKey key);

  int domain_of(const Sample& sample) const;
  std::size_t size() const noexcept { return keys_.size(); }
  DomainKey key() const noexcept { return key_; }
  /// (subject, session) for a domain; session is 0 under kSubject.
  std::pair<int, int> key_of(int domain) const { return keys_.at(static_cast<std::size_t>(domain)); }

 private:
  std::pair<int, int> make_key(const Sample& s) const;

  DomainKey key_ = DomainKey::kSubject;
  std::vector<std::pair<int, int>> keys_;
  std::map<std::pair<int, int>, int> lookup_;
};

/// The labelled training material: a subset of a Dataset plus domain ids.
struct SourceDomainSet {
  std::vector<Sample> samples;
  int n_classes = 0;
  std::size_t feature_dim = 0;
  DomainIndex domains;
  std::vector<int> domain_ids;  // parallel to samples

  std::size_t n_domains() const noexcept { return domains.size(); }
};

SourceDomainSet make_source_set(std::vector<Sample> samples, int n_classes, std::size_t feature_dim,
                                DomainKey key);
SourceDomainSet make_source_set(const Dataset& dataset, std::span<const std::size_t> ids,
                                DomainKey key);

struct SynthConfig {
  int n_subjects = 10;
  int n_classes = 3;
  int samples_per_class = 60;
  int n_sessions = 1;
  std::size_t latent_dim = 16;
  std::size_t feature_dim = 310;
  double separation = 10.0;    // pairwise distance of latent class centres
  double domain_shift = 2.0;   // norm of each subject's latent offset
  double session_shift = 0.0;  // norm of each (subject, session) extra offset
  double noise = 0.5;          // per-coordinate latent noise std
};

/// sample = W (c_k + a_n + e); deterministic for a fixed seed.
Dataset synth_gen(const SynthConfig& cfg, std::uint64_t seed);

/// Replaces exactly round(eta * N) labels, chosen uniformly without
/// replacement, with a uniformly drawn different class.
std::vector<Sample> inject_label_noise(std::span<const Sample> samples, int n_classes, double eta,
                                       std::uint64_t seed);

struct FoldSpec {
  Protocol protocol = Protocol::kSingleSession;
  int target_subject = 0;
  std::vector<std::size_t> source_ids;
  std::vector<std::size_t> target_ids;
};

std::vector<FoldSpec> loso_splits(const Dataset& dataset, Protocol protocol);

}  // namespace pldcp
