#ifndef TELEEMS_RPPG_HPP
#define TELEEMS_RPPG_HPP

// Heart rate from a PPG-like waveform: non-overlapping windows, moving
// average detrend, band-limited periodogram peak.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "teleems/domain.hpp"
#include "teleems/error.hpp"

namespace teleems::rppg {

struct PpgWaveform {
  std::vector<double> samples;
  double rate = 30.0;

  double duration() const { return rate > 0 ? static_cast<double>(samples.size()) / rate : 0.0; }
};

struct Band {
  double low = 0.75;
  double high = 2.5;
};

struct SpectralConfig {
  Band band;
  double window_seconds = 6.0;
  double freq_resolution = 0.01;  // zero-padding target, Hz
  double detrend_span_s = 4.0;
  bool time_domain_bandpass = false;  // also run bandpass() on each window before the periodogram
};

struct HrEstimate {
  std::size_t window_index = 0;
  double bpm = 0.0;
  double peak_power = 0.0;
};

// ---------------------------------------------------------------------------
// FFTW wrapper

namespace detail {

// Plan creation and destruction are not thread-safe in FFTW.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(fftw_planner_mutex());
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), out_, in_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(in_);
    fftw_free(out_);
  }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// Forward transform of x, zero-padded to n.
  void forward(std::span<const double> x) {
    std::fill(in_, in_ + n_, 0.0);
    std::copy_n(x.begin(), std::min(x.size(), n_), in_);
    fftw_execute(forward_);
  }

  std::complex<double> bin(std::size_t k) const { return {out_[k][0], out_[k][1]}; }
  double power(std::size_t k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }
  void zero_bin(std::size_t k) { out_[k][0] = out_[k][1] = 0.0; }

  /// Inverse of the current spectrum, normalized by n.
  std::vector<double> inverse() {
    fftw_execute(inverse_);
    std::vector<double> y(in_, in_ + n_);
    for (double& v : y) v /= static_cast<double>(n_);
    return y;
  }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

inline void check_band(const Band& band, double rate) {
  if (!(rate > 0)) fail(ErrorCode::InvalidArgument, "sample rate must be positive");
  if (!(band.low > 0 && band.low < band.high))
    fail(ErrorCode::InvalidArgument, "band needs 0 < low < high");
  if (band.high >= rate / 2)
    fail(ErrorCode::BandExceedsNyquist,
         "band edge " + std::to_string(band.high) + " Hz is not below Nyquist " + std::to_string(rate / 2) + " Hz");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline stages

inline std::size_t window_length(double rate, double window_seconds) {
  return static_cast<std::size_t>(std::llround(rate * window_seconds));
}

/// Contiguous, non-overlapping windows; the trailing partial window is dropped.
inline std::vector<PpgWaveform> segment_windows(const PpgWaveform& wave, double window_seconds = 6.0) {
  if (!(wave.rate > 0) || !(window_seconds > 0)) fail(ErrorCode::InvalidArgument, "rate and window must be positive");
  const std::size_t len = window_length(wave.rate, window_seconds);
  if (len == 0 || wave.samples.size() < len)
    fail(ErrorCode::TooShort, "waveform of " + std::to_string(wave.duration()) + " s is shorter than one " +
                                  std::to_string(window_seconds) + " s window");
  std::vector<PpgWaveform> out;
  for (std::size_t start = 0; start + len <= wave.samples.size(); start += len)
    out.push_back({{wave.samples.begin() + static_cast<std::ptrdiff_t>(start),
                    wave.samples.begin() + static_cast<std::ptrdiff_t>(start + len)},
                   wave.rate});
  return out;
}

/// Subtracts a centered moving average of `span_s` seconds. Near the edges
/// the average covers only the samples that exist.
inline PpgWaveform detrend(const PpgWaveform& window, double span_s = 4.0) {
  const std::size_t n = window.samples.size();
  PpgWaveform out{std::vector<double>(n), window.rate};
  if (n == 0) return out;
  const auto half = static_cast<std::size_t>(std::floor(span_s * window.rate / 2.0));
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + window.samples[i];
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + half + 1);
    const double avg = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    out.samples[i] = window.samples[i] - avg;
  }
  return out;
}

/// Zero-phase brick-wall filter: DFT, zero every bin outside the band, inverse.
inline PpgWaveform bandpass(const PpgWaveform& window, Band band = {}) {
  detail::check_band(band, window.rate);
  const std::size_t n = window.samples.size();
  if (n == 0) return window;
  detail::RealFft fft(n);
  fft.forward(window.samples);
  for (std::size_t k = 0; k < fft.bins(); ++k) {
    const double f = static_cast<double>(k) * window.rate / static_cast<double>(n);
    if (f < band.low || f > band.high) fft.zero_bin(k);
  }
  return {fft.inverse(), window.rate};
}

/// Peak of the Hann-tapered periodogram, zero-padded to the configured
/// resolution and restricted to the band. Equal peaks resolve to the lower
/// frequency.
inline HrEstimate estimate_hr(const PpgWaveform& window, const SpectralConfig& cfg = {}) {
  detail::check_band(cfg.band, window.rate);
  if (!(cfg.freq_resolution > 0)) fail(ErrorCode::InvalidArgument, "frequency resolution must be positive");
  const std::size_t n = window.samples.size();
  if (n < 2) fail(ErrorCode::TooShort, "window has fewer than two samples");

  double mean = 0.0;
  for (double v : window.samples) mean += v;
  mean /= static_cast<double>(n);
  std::vector<double> tapered(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(n - 1));
    tapered[t] = (window.samples[t] - mean) * w;
  }

  const auto m = std::max(n, static_cast<std::size_t>(std::ceil(window.rate / cfg.freq_resolution - 1e-9)));
  detail::RealFft fft(m);
  fft.forward(tapered);
  const double df = window.rate / static_cast<double>(m);

  double total = 0.0;
  for (std::size_t k = 0; k < fft.bins(); ++k) total += fft.power(k);
  const auto k_lo = static_cast<std::size_t>(std::ceil(cfg.band.low / df - 1e-9));
  const auto k_hi = std::min(fft.bins() - 1, static_cast<std::size_t>(std::floor(cfg.band.high / df + 1e-9)));

  double in_band = 0.0, best_p = -1.0;
  std::size_t best_k = k_lo;
  for (std::size_t k = k_lo; k <= k_hi; ++k) {
    const double p = fft.power(k);
    in_band += p;
    if (p > best_p) {
      best_p = p;
      best_k = k;
    }
  }
  if (total == 0.0 || in_band < 1e-12 * total) fail(ErrorCode::NoPeak, "no spectral power inside the HR band");
  return {0, 60.0 * static_cast<double>(best_k) * df, best_p};
}

/// Per-window estimates; windows without a peak come back empty.
inline std::vector<std::optional<HrEstimate>> hr_estimates(const PpgWaveform& wave, const SpectralConfig& cfg = {}) {
  const auto windows = segment_windows(wave, cfg.window_seconds);
  std::vector<std::optional<HrEstimate>> out;
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    PpgWaveform w = detrend(windows[i], cfg.detrend_span_s);
    if (cfg.time_domain_bandpass) w = bandpass(w, cfg.band);
    try {
      HrEstimate e = estimate_hr(w, cfg);
      e.window_index = i;
      out.emplace_back(e);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoPeak) throw;
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

/// One HR value per complete window; NoPeak windows become gaps.
inline domain::VitalsSeries hr_series(const PpgWaveform& wave, const SpectralConfig& cfg = {}) {
  domain::VitalsSeries out{domain::VitalKind::HR, {}, "bpm"};
  for (const auto& e : hr_estimates(wave, cfg)) out.values.push_back(e ? e->bpm : domain::kGap);
  return out;
}

// ---------------------------------------------------------------------------
// Sources

/// Pull interface for waveform producers (files, generators, or a model
/// running on video frames).
class WaveformSource {
 public:
  virtual ~WaveformSource() = default;
  virtual double rate() const = 0;
  /// Fills up to out.size() samples; returns how many were written. Zero
  /// means the source is exhausted.
  virtual std::size_t read(std::span<double> out) = 0;
};

class BufferSource : public WaveformSource {
 public:
  explicit BufferSource(PpgWaveform wave) : wave_(std::move(wave)) {}
  double rate() const override { return wave_.rate; }
  std::size_t read(std::span<double> out) override {
    const std::size_t n = std::min(out.size(), wave_.samples.size() - pos_);
    std::copy_n(wave_.samples.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
    pos_ += n;
    return n;
  }

 private:
  PpgWaveform wave_;
  std::size_t pos_ = 0;
};

/// Noise-free pulse: fundamental at bpm(t)/60 Hz plus a second harmonic,
/// phase continuous across rate changes.
class SyntheticSource : public WaveformSource {
 public:
  SyntheticSource(std::function<double(double)> bpm_at, double rate, double duration_s, double harmonic = 0.3)
      : bpm_at_(std::move(bpm_at)), rate_(rate), total_(static_cast<std::size_t>(std::llround(rate * duration_s))),
        harmonic_(harmonic) {}

  double rate() const override { return rate_; }
  std::size_t read(std::span<double> out) override {
    std::size_t n = 0;
    for (; n < out.size() && pos_ < total_; ++n, ++pos_) {
      out[n] = std::sin(phase_) + harmonic_ * std::sin(2.0 * phase_);
      phase_ += 2.0 * std::numbers::pi * bpm_at_(static_cast<double>(pos_) / rate_) / 60.0 / rate_;
    }
    return n;
  }

 private:
  std::function<double(double)> bpm_at_;
  double rate_;
  std::size_t total_;
  double harmonic_;
  std::size_t pos_ = 0;
  double phase_ = 0.0;
};

/// Streaming runner: pulls one window at a time until the source runs dry.
inline std::vector<std::optional<HrEstimate>> hr_estimates(WaveformSource& source, const SpectralConfig& cfg = {}) {
  const std::size_t len = window_length(source.rate(), cfg.window_seconds);
  if (len == 0) fail(ErrorCode::InvalidArgument, "window length is zero");
  std::vector<std::optional<HrEstimate>> out;
  std::vector<double> buf(len);
  for (std::size_t index = 0;; ++index) {
    std::size_t got = 0;
    while (got < len) {
      const std::size_t n = source.read(std::span<double>(buf).subspan(got));
      if (n == 0) break;
      got += n;
    }
    if (got < len) break;
    PpgWaveform w = detrend({buf, source.rate()}, cfg.detrend_span_s);
    if (cfg.time_domain_bandpass) w = bandpass(w, cfg.band);
    try {
      HrEstimate e = estimate_hr(w, cfg);
      e.window_index = index;
      out.emplace_back(e);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoPeak) throw;
      out.emplace_back(std::nullopt);
    }
  }
  if (out.empty()) fail(ErrorCode::TooShort, "source ended before one full window");
  return out;
}

// ---------------------------------------------------------------------------
// Waveform files
//
// Binary: "PPGF", f32 rate, then f32 samples to end of file, little-endian.
// Text:   one `<time_s> <value>` pair per line, `#` comments allowed.

inline constexpr char kWaveMagic[4] = {'P', 'P', 'G', 'F'};

namespace detail {
inline void put_f32(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}
inline float get_f32(std::string_view b, std::size_t at) {
  std::uint32_t u = 0;
  for (int i = 3; i >= 0; --i) u = (u << 8) | static_cast<unsigned char>(b[at + static_cast<std::size_t>(i)]);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}
}  // namespace detail

inline std::string encode_wave_f32(const PpgWaveform& w) {
  std::string out(kWaveMagic, 4);
  detail::put_f32(out, static_cast<float>(w.rate));
  for (double v : w.samples) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline std::string encode_wave_text(const PpgWaveform& w) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9f %.17g\n", static_cast<double>(i) / w.rate, w.samples[i]);
    out += buf;
  }
  return out;
}

inline bool is_wave_f32(std::string_view bytes) {
  return bytes.size() >= 4 && std::memcmp(bytes.data(), kWaveMagic, 4) == 0;
}

inline PpgWaveform decode_wave(std::string_view bytes) {
  PpgWaveform w;
  if (is_wave_f32(bytes)) {
    if (bytes.size() < 8 || (bytes.size() - 8) % 4 != 0) fail(ErrorCode::Io, "truncated f32 waveform");
    w.rate = detail::get_f32(bytes, 4);
    for (std::size_t at = 8; at < bytes.size(); at += 4) w.samples.push_back(detail::get_f32(bytes, at));
  } else {
    std::istringstream in{std::string(bytes)};
    std::string line;
    std::vector<double> times;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream row(line);
      double t, v;
      if (!(row >> t)) continue;
      if (!(row >> v)) fail(ErrorCode::Io, "waveform line " + std::to_string(line_no) + " needs time and value");
      times.push_back(t);
      w.samples.push_back(v);
    }
    if (times.size() < 2) fail(ErrorCode::Io, "text waveform needs at least two samples");
    const double dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
    if (!(dt > 0)) fail(ErrorCode::Io, "waveform timestamps must increase");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (std::abs(times[i] - times[i - 1] - dt) > 1e-3 * dt)
        fail(ErrorCode::Io, "waveform sampling is not uniform near line " + std::to_string(i + 1));
    w.rate = 1.0 / dt;
  }
  if (!(w.rate > 0) || !std::isfinite(w.rate)) fail(ErrorCode::Io, "waveform rate must be positive");
  for (double v : w.samples)
    if (!std::isfinite(v)) fail(ErrorCode::Io, "waveform contains non-finite samples");
  return w;
}

/// Reads either waveform format. A positive `rate_override` replaces the
/// rate stored in (or inferred from) the file.
class FileSource : public BufferSource {
 public:
  explicit FileSource(const std::string& path, double rate_override = 0.0) : BufferSource(load(path, rate_override)) {}

  static PpgWaveform load(const std::string& path, double rate_override = 0.0) {
    PpgWaveform w = decode_wave(domain::read_file(path));
    if (rate_override > 0) w.rate = rate_override;
    return w;
  }
};

/// HR rows for the dataset format: {"window": i, "bpm": value or null}.
inline std::vector<domain::json> hr_rows(const std::vector<std::optional<HrEstimate>>& estimates) {
  std::vector<domain::json> rows;
  for (std::size_t i = 0; i < estimates.size(); ++i)
    rows.push_back({{"window", i}, {"bpm", estimates[i] ? domain::json(estimates[i]->bpm) : domain::json(nullptr)}});
  return rows;
}

}  // namespace teleems::rppg

#endif  // TELEEMS_RPPG_HPP
