#pragma once

// Raw EEG -> differential-entropy feature vectors.
//
// Pipeline per recording: broadband zero-phase bandpass, per-band zero-phase
// bandpass, 1 s non-overlapping windows, DE per (channel, band), then LDS
// smoothing of every feature dimension across the windows.
//
// Raw recording layout: CSV with header `ch_0,...,ch_{C-1}` and one row per
// time step, plus a sidecar JSON {sample_rate, subject, session, trial, label}.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "pldcp/dataset.hpp"

namespace pldcp {

struct Recording {
  double sample_rate = 200.0;
  std::vector<std::vector<double>> channels;  // one series per channel
  int subject = 0;
  int session = 1;
  int trial = 0;
  int label = 0;

  std::size_t n_channels() const noexcept { return channels.size(); }
  std::size_t n_samples() const noexcept { return channels.empty() ? 0 : channels.front().size(); }
};

/// Throws unless the recording has equal-length channels and a positive rate.
void validate(const Recording& recording);
void validate(const BandSpec& band, double sample_rate);

/// 4th-order Butterworth high-pass at `low_hz` cascaded with a 4th-order
/// low-pass at `high_hz`, run forward then backward (zero phase).
std::vector<double> bandpass(std::span<const double> series, double sample_rate, double low_hz,
                             double high_hz);
Recording bandpass(const Recording& recording, double low_hz, double high_hz);

/// Non-overlapping windows; a trailing partial window is dropped.
std::vector<Recording> segment(const Recording& recording, double window_seconds = 1.0);

struct DeValue {
  double nats = 0.0;
  bool floored = false;  // variance fell at or below the floor and was clamped
};

/// 0.5 ln(2 pi e var) with var the unbiased sample variance.
DeValue de_feature(std::span<const double> window, double variance_floor = 1e-10);

/// Offline random-walk Kalman filter followed by a Rauch-Tung-Striebel
/// backward pass. `q` is the process variance, `r` the observation variance.
std::vector<double> lds_smooth(std::span<const double> series, double q = 0.01, double r = 1.0);

enum class SmoothingScope { kPerTrial, kPerSession };

struct FeatureConfig {
  std::vector<BandSpec> bands = default_bands();
  double prefilter_low_hz = 0.3;
  double prefilter_high_hz = 50.0;
  double window_seconds = 1.0;
  double variance_floor = 1e-10;
  bool smooth = true;
  double lds_q = 0.01;
  double lds_r = 1.0;
  SmoothingScope scope = SmoothingScope::kPerTrial;
  std::size_t expected_channels = 62;  // 0 accepts any channel count
};

/// Index of (channel, band) in a feature vector: channel-major, band-minor.
constexpr std::size_t feature_index(std::size_t channel, std::size_t band, std::size_t n_bands) {
  return channel * n_bands + band;
}

struct ExtractedFeatures {
  std::vector<Sample> samples;
  std::size_t floored_values = 0;
};

/// One Sample per window of one recording, smoothed across that recording.
ExtractedFeatures extract_features(const Recording& recording, const FeatureConfig& cfg);

/// Extracts every recording and honours cfg.scope: per-session smoothing runs
/// over the concatenated windows of all trials of a (subject, session) in
/// trial order. Sample ids are assigned in output order.
ExtractedFeatures extract_features(std::span<const Recording> recordings, const FeatureConfig& cfg);

Recording read_recording(const std::filesystem::path& csv_path);
void write_recording(const std::filesystem::path& csv_path, const Recording& recording);

}  // namespace pldcp
