#include "pldcp/signal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>

#include <json.hpp>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"

namespace pldcp {

void validate(const Recording& rec) {
  if (!(rec.sample_rate > 0.0)) throw Error(ErrorKind::kData, "recording sample_rate must be positive");
  if (rec.channels.empty()) throw Error(ErrorKind::kData, "recording has no channels");
  const std::size_t n = rec.channels.front().size();
  for (std::size_t c = 0; c < rec.channels.size(); ++c) {
    if (rec.channels[c].size() != n) {
      throw Error(ErrorKind::kData, "channel " + std::to_string(c) + " has " +
                                        std::to_string(rec.channels[c].size()) + " samples, channel 0 has " +
                                        std::to_string(n));
    }
  }
}

void validate(const BandSpec& band, double sample_rate) {
  if (!(band.low_hz > 0.0) || !(band.low_hz < band.high_hz) || band.high_hz > sample_rate / 2.0) {
    throw Error(ErrorKind::kConfig, "band '" + band.name + "' [" + io::format_double(band.low_hz) + ", " +
                                        io::format_double(band.high_hz) +
                                        "] Hz is not within (0, Nyquist = " +
                                        io::format_double(sample_rate / 2.0) + "]");
  }
}

// ---------------------------------------------------------------------------
// Butterworth filtering

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;  // a0 normalised to 1

  void run(std::vector<double>& x) const {
    double z1 = 0.0, z2 = 0.0;  // transposed direct form II
    for (double& v : x) {
      const double y = b0 * v + z1;
      z1 = b1 * v - a1 * y + z2;
      z2 = b2 * v - a2 * y;
      v = y;
    }
  }
};

// Pole-pair quality factors of a 4th-order Butterworth prototype.
constexpr std::array<double, 2> kButter4Q = {0.54119610014619698, 1.3065629648763766};

Biquad lowpass_section(double cutoff, double fs, double q) {
  const double w0 = 2.0 * std::numbers::pi * cutoff / fs;
  const double cw = std::cos(w0), alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  return {(1.0 - cw) / 2.0 / a0, (1.0 - cw) / a0, (1.0 - cw) / 2.0 / a0, -2.0 * cw / a0,
          (1.0 - alpha) / a0};
}

Biquad highpass_section(double cutoff, double fs, double q) {
  const double w0 = 2.0 * std::numbers::pi * cutoff / fs;
  const double cw = std::cos(w0), alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  return {(1.0 + cw) / 2.0 / a0, -(1.0 + cw) / a0, (1.0 + cw) / 2.0 / a0, -2.0 * cw / a0,
          (1.0 - alpha) / a0};
}

}  // namespace

std::vector<double> bandpass(std::span<const double> series, double fs, double low_hz, double high_hz) {
  validate(BandSpec{"bandpass", low_hz, high_hz}, fs);
  const std::size_t n = series.size();
  if (n == 0) return {};

  std::vector<Biquad> sections;
  for (double q : kButter4Q) sections.push_back(highpass_section(low_hz, fs, q));
  if (high_hz < fs / 2.0) {
    for (double q : kButter4Q) sections.push_back(lowpass_section(high_hz, fs, q));
  }

  // Odd reflection at both ends absorbs the start-up transient of each pass;
  // the longest time constant belongs to the high-pass corner.
  const auto want = static_cast<std::size_t>(std::ceil(3.0 * fs / low_hz));
  const std::size_t pad = std::min(n - 1, std::max<std::size_t>(want, 12));
  std::vector<double> x;
  x.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) x.push_back(2.0 * series[0] - series[i]);
  x.insert(x.end(), series.begin(), series.end());
  for (std::size_t i = 1; i <= pad; ++i) x.push_back(2.0 * series[n - 1] - series[n - 1 - i]);

  for (const auto& s : sections) s.run(x);
  std::reverse(x.begin(), x.end());
  for (const auto& s : sections) s.run(x);
  std::reverse(x.begin(), x.end());

  return {x.begin() + static_cast<std::ptrdiff_t>(pad), x.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

Recording bandpass(const Recording& rec, double low_hz, double high_hz) {
  validate(rec);
  Recording out = rec;
  for (auto& ch : out.channels) ch = bandpass(ch, rec.sample_rate, low_hz, high_hz);
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation and DE

std::vector<Recording> segment(const Recording& rec, double window_seconds) {
  validate(rec);
  if (!(window_seconds > 0.0)) throw Error(ErrorKind::kConfig, "window length must be positive");
  const auto width = static_cast<std::size_t>(std::llround(window_seconds * rec.sample_rate));
  if (width == 0 || rec.n_samples() < width) {
    throw Error(ErrorKind::kData, "recording of " + std::to_string(rec.n_samples()) +
                                      " samples is shorter than one " + io::format_double(window_seconds) +
                                      " s window");
  }
  std::vector<Recording> windows;
  for (std::size_t start = 0; start + width <= rec.n_samples(); start += width) {
    Recording w = rec;
    for (std::size_t c = 0; c < rec.channels.size(); ++c) {
      const auto first = rec.channels[c].begin() + static_cast<std::ptrdiff_t>(start);
      w.channels[c].assign(first, first + static_cast<std::ptrdiff_t>(width));
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

DeValue de_feature(std::span<const double> window, double variance_floor) {
  if (window.size() < 2) throw Error(ErrorKind::kData, "DE needs at least 2 samples per window");
  double mean = 0.0;
  for (double v : window) mean += v;
  mean /= static_cast<double>(window.size());
  double ss = 0.0;
  for (double v : window) ss += (v - mean) * (v - mean);
  double var = ss / static_cast<double>(window.size() - 1);
  DeValue out;
  if (!(var > variance_floor)) {
    var = variance_floor;
    out.floored = true;
  }
  out.nats = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
  return out;
}

// ---------------------------------------------------------------------------
// LDS smoothing

std::vector<double> lds_smooth(std::span<const double> y, double q, double r) {
  if (y.empty()) throw Error(ErrorKind::kData, "lds_smooth: empty series");
  if (!(q > 0.0) || !(r > 0.0)) throw Error(ErrorKind::kConfig, "lds_smooth: q and r must be positive");
  for (std::size_t t = 0; t < y.size(); ++t) {
    if (!std::isfinite(y[t])) {
      throw Error(ErrorKind::kNumeric, "lds_smooth: non-finite value at index " + std::to_string(t));
    }
  }
  const std::size_t n = y.size();
  std::vector<double> m(n), p(n);
  // Prior centred on the first observation with the observation variance.
  double m_pred = y[0], p_pred = r;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      m_pred = m[t - 1];
      p_pred = p[t - 1] + q;
    }
    const double k = p_pred / (p_pred + r);
    m[t] = m_pred + k * (y[t] - m_pred);
    p[t] = (1.0 - k) * p_pred;
  }
  std::vector<double> s(m);
  for (std::size_t t = n - 1; t-- > 0;) {
    const double gain = p[t] / (p[t] + q);
    s[t] = m[t] + gain * (s[t + 1] - m[t]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Feature extraction

namespace {

struct RawFeatures {
  std::vector<std::vector<double>> rows;  // windows x features
  std::size_t floored = 0;
};

RawFeatures de_rows(const Recording& rec, const FeatureConfig& cfg) {
  validate(rec);
  if (cfg.expected_channels != 0 && rec.n_channels() != cfg.expected_channels) {
    throw Error(ErrorKind::kData, "recording has " + std::to_string(rec.n_channels()) +
                                      " channels, expected " + std::to_string(cfg.expected_channels));
  }
  if (cfg.bands.empty()) throw Error(ErrorKind::kConfig, "no frequency bands configured");
  for (const auto& b : cfg.bands) validate(b, rec.sample_rate);

  const Recording clean = bandpass(rec, cfg.prefilter_low_hz, cfg.prefilter_high_hz);
  const std::size_t nb = cfg.bands.size();
  const std::size_t dim = rec.n_channels() * nb;
  const std::size_t n_windows = segment(rec, cfg.window_seconds).size();

  RawFeatures out;
  out.rows.assign(n_windows, std::vector<double>(dim, 0.0));
  for (std::size_t b = 0; b < nb; ++b) {
    const Recording banded = bandpass(clean, cfg.bands[b].low_hz, cfg.bands[b].high_hz);
    const auto windows = segment(banded, cfg.window_seconds);
    for (std::size_t w = 0; w < windows.size(); ++w) {
      for (std::size_t c = 0; c < windows[w].n_channels(); ++c) {
        const DeValue de = de_feature(windows[w].channels[c], cfg.variance_floor);
        out.rows[w][feature_index(c, b, nb)] = de.nats;
        out.floored += de.floored ? 1 : 0;
      }
    }
  }
  return out;
}

void smooth_columns(std::vector<std::vector<double>>& rows, const FeatureConfig& cfg) {
  if (!cfg.smooth || rows.empty()) return;
  const std::size_t dim = rows.front().size();
  std::vector<double> column(rows.size());
  for (std::size_t f = 0; f < dim; ++f) {
    for (std::size_t t = 0; t < rows.size(); ++t) column[t] = rows[t][f];
    const auto smoothed = lds_smooth(column, cfg.lds_q, cfg.lds_r);
    for (std::size_t t = 0; t < rows.size(); ++t) rows[t][f] = smoothed[t];
  }
}

Sample make_sample(const Recording& rec, std::vector<double> features) {
  Sample s;
  s.features = std::move(features);
  s.label = rec.label;
  s.subject = rec.subject;
  s.session = rec.session;
  s.trial = rec.trial;
  return s;
}

}  // namespace

ExtractedFeatures extract_features(const Recording& rec, const FeatureConfig& cfg) {
  RawFeatures raw = de_rows(rec, cfg);
  smooth_columns(raw.rows, cfg);
  ExtractedFeatures out;
  out.floored_values = raw.floored;
  for (auto& row : raw.rows) {
    out.samples.push_back(make_sample(rec, std::move(row)));
    out.samples.back().id = out.samples.size() - 1;
  }
  return out;
}

ExtractedFeatures extract_features(std::span<const Recording> recordings, const FeatureConfig& cfg) {
  ExtractedFeatures out;
  if (cfg.scope == SmoothingScope::kPerTrial) {
    for (const auto& rec : recordings) {
      auto part = extract_features(rec, cfg);
      out.floored_values += part.floored_values;
      for (auto& s : part.samples) out.samples.push_back(std::move(s));
    }
  } else {
    // Group by (subject, session), trials in ascending order.
    std::map<std::pair<int, int>, std::vector<const Recording*>> groups;
    for (const auto& rec : recordings) groups[{rec.subject, rec.session}].push_back(&rec);
    for (auto& [key, recs] : groups) {
      std::stable_sort(recs.begin(), recs.end(),
                       [](const Recording* a, const Recording* b) { return a->trial < b->trial; });
      std::vector<std::vector<double>> rows;
      std::vector<const Recording*> owner;
      for (const Recording* rec : recs) {
        RawFeatures raw = de_rows(*rec, cfg);
        out.floored_values += raw.floored;
        for (auto& row : raw.rows) {
          rows.push_back(std::move(row));
          owner.push_back(rec);
        }
      }
      smooth_columns(rows, cfg);
      for (std::size_t i = 0; i < rows.size(); ++i) out.samples.push_back(make_sample(*owner[i], std::move(rows[i])));
    }
  }
  for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i].id = i;
  return out;
}

// ---------------------------------------------------------------------------
// Raw recording files

Recording read_recording(const std::filesystem::path& csv_path) {
  const std::string source = csv_path.string();
  const auto meta_path = io::sidecar_path(csv_path);
  if (!std::filesystem::exists(meta_path)) {
    throw Error(ErrorKind::kIo, "missing sidecar " + meta_path.string() + " for " + source);
  }
  Recording rec;
  try {
    const auto meta = nlohmann::json::parse(io::read_file(meta_path));
    rec.sample_rate = meta.at("sample_rate").get<double>();
    rec.subject = meta.at("subject").get<int>();
    rec.session = meta.at("session").get<int>();
    rec.trial = meta.at("trial").get<int>();
    rec.label = meta.value("label", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(meta_path.string(), 1, std::string("recording sidecar: ") + e.what());
  }

  const std::string text = io::read_file(csv_path);
  std::size_t pos = 0, line_no = 0;
  bool header = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto fields = io::split(line, ',');
    if (!header) {
      header = true;
      for (std::size_t c = 0; c < fields.size(); ++c) {
        if (fields[c] != "ch_" + std::to_string(c)) {
          throw ParseError(source, line_no, "header column " + std::to_string(c) + " must be ch_" +
                                                std::to_string(c));
        }
      }
      rec.channels.assign(fields.size(), {});
      continue;
    }
    if (fields.size() != rec.channels.size()) {
      throw ParseError(source, line_no, "row has " + std::to_string(fields.size()) + " values, expected " +
                                            std::to_string(rec.channels.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      if (!io::parse_double(fields[c], v) || !std::isfinite(v)) {
        throw ParseError(source, line_no, "bad value in ch_" + std::to_string(c));
      }
      rec.channels[c].push_back(v);
    }
  }
  if (!header) throw ParseError(source, 1, "empty file");
  validate(rec);
  return rec;
}

void write_recording(const std::filesystem::path& csv_path, const Recording& rec) {
  validate(rec);
  std::string out;
  for (std::size_t c = 0; c < rec.n_channels(); ++c) out += (c ? ",ch_" : "ch_") + std::to_string(c);
  out += '\n';
  for (std::size_t t = 0; t < rec.n_samples(); ++t) {
    for (std::size_t c = 0; c < rec.n_channels(); ++c) {
      if (c) out += ',';
      out += io::format_double(rec.channels[c][t]);
    }
    out += '\n';
  }
  io::write_file(csv_path, out);
  nlohmann::ordered_json meta = {{"sample_rate", rec.sample_rate}, {"subject", rec.subject},
                                 {"session", rec.session},         {"trial", rec.trial},
                                 {"label", rec.label}};
  io::write_file(io::sidecar_path(csv_path), meta.dump(2) + "\n");
}

}  // namespace pldcp
