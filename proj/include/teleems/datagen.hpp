#ifndef TELEEMS_DATAGEN_HPP
#define TELEEMS_DATAGEN_HPP

// Seeded synthetic generators: incident records with label structure tied to
// symptoms and heart-rate level, PPG-like waveforms, and the subject library
// plus incident pool used for hooking.

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "teleems/domain.hpp"
#include "teleems/error.hpp"
#include "teleems/normalizer.hpp"
#include "teleems/random.hpp"
#include "teleems/rppg.hpp"

namespace teleems::datagen {

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t n_records = 1000;
  std::size_t k1 = 8;   // protocols
  std::size_t k2 = 6;   // medication types
  std::size_t k4 = 5;   // procedures
  double coupling = 1.0;
  /// Heart-rate bands. With one band the protocol depends on symptoms only;
  /// with more, text and vitals each carry part of it.
  std::size_t hr_levels = 1;
  double snr_db = 30.0;  // library waveforms; +inf for clean
  double incomplete_rate = 0.0;
  std::size_t hr_len_min = 8;
  std::size_t hr_len_max = 16;
  std::size_t library_size = 42;
  double library_seconds = 60.0;
  double library_rate = 30.0;
};

inline std::size_t complaint_groups(const GenConfig& c) { return (c.k1 + c.hr_levels - 1) / c.hr_levels; }

inline void validate(const GenConfig& c) {
  if (c.k1 < 2 || c.k2 < 2 || c.k4 < 2) fail(ErrorCode::InvalidArgument, "label vocabularies need at least 2 classes");
  if (!(c.coupling >= 0.0 && c.coupling <= 1.0)) fail(ErrorCode::InvalidArgument, "coupling must lie in [0, 1]");
  if (c.hr_levels == 0) fail(ErrorCode::InvalidArgument, "hr_levels must be positive");
  if (!(c.incomplete_rate >= 0.0 && c.incomplete_rate <= 1.0))
    fail(ErrorCode::InvalidArgument, "incomplete_rate must lie in [0, 1]");
  if (c.hr_len_min == 0 || c.hr_len_min > c.hr_len_max) fail(ErrorCode::InvalidArgument, "bad HR length range");
}

/// Complaint and associated vocabularies: alternate lexicon entries.
struct Vocabulary {
  std::vector<std::string> complaints;
  std::vector<std::string> associated;
};

inline Vocabulary vocabulary(const normalizer::Lexicon& lex = normalizer::Lexicon::bundled()) {
  Vocabulary v;
  for (std::size_t i = 0; i < lex.size(); ++i) (i % 2 ? v.associated : v.complaints).push_back(lex.entries()[i]);
  return v;
}

/// Coupled labels for complaint index c at HR level l.
struct LabelRule {
  int protocol;
  int med_type;
  int procedure;
};

inline LabelRule coupled_labels(const GenConfig& cfg, std::size_t c, std::size_t level) {
  const std::size_t g = c % complaint_groups(cfg);
  return {static_cast<int>((g * cfg.hr_levels + level) % cfg.k1), static_cast<int>(c % cfg.k2),
          static_cast<int>(c % cfg.k4)};
}

/// Heart-rate band centre for level l of L, spread over 55..135 bpm.
inline double level_centre(std::size_t level, std::size_t levels) {
  return 55.0 + 80.0 * (static_cast<double>(level) + 0.5) / static_cast<double>(levels);
}

namespace detail {
inline domain::VitalsSeries walk(Rng& rng, domain::VitalKind kind, std::string unit, double base, double step_sd,
                                 std::size_t n, double lo, double hi) {
  domain::VitalsSeries s{kind, {}, std::move(unit)};
  double v = base;
  for (std::size_t i = 0; i < n; ++i) {
    s.values.push_back(std::clamp(std::round(v), lo, hi));
    v += rng.normal(0.0, step_sd);
  }
  return s;
}
}  // namespace detail

/// Deterministic per seed; record i draws only from seed_for(seed, i).
/// The first few records are forced coupled and cycle through complaints
/// and levels so that every label class occurs.
inline std::vector<domain::IncidentRecord> gen_incidents(const GenConfig& cfg) {
  validate(cfg);
  const Vocabulary vocab = vocabulary();
  const std::size_t groups = complaint_groups(cfg);
  const std::size_t forced = std::max({cfg.k1, cfg.k2, cfg.k4, groups * cfg.hr_levels});
  if (forced > vocab.complaints.size())
    fail(ErrorCode::InvalidArgument, "label vocabulary larger than the complaint vocabulary");
  std::vector<domain::IncidentRecord> out;
  out.reserve(cfg.n_records);
  for (std::size_t i = 0; i < cfg.n_records; ++i) {
    Rng rng(seed_for(cfg.seed, i));
    domain::IncidentRecord r;
    char key[32];
    std::snprintf(key, sizeof key, "inc-%06zu", i);
    r.key = key;

    std::size_t c, level;
    if (i < forced) {
      // Complaint i covers group i % G; level (i / G) % L pairs with it.
      c = i;
      level = (i / groups) % cfg.hr_levels;
    } else {
      c = rng.below(vocab.complaints.size());
      level = rng.below(cfg.hr_levels);
    }
    const std::string& assoc = vocab.associated[rng.below(vocab.associated.size())];
    r.primary_symptoms = {vocab.complaints[c], assoc};
    for (std::size_t k = 0, n = rng.below(3); k < n; ++k)
      r.secondary_symptoms.push_back(vocab.associated[rng.below(vocab.associated.size())]);

    const LabelRule rule = coupled_labels(cfg, c, level);
    const bool force = i < forced;
    r.protocol = force || rng.bernoulli(cfg.coupling) ? rule.protocol : static_cast<int>(rng.below(cfg.k1));
    r.med_type = force || rng.bernoulli(cfg.coupling) ? rule.med_type : static_cast<int>(rng.below(cfg.k2));
    const double dose = 1.0 + 0.5 * static_cast<double>(*r.protocol % 4);
    r.med_quantity = std::round((dose + rng.normal(0.0, 0.1)) * 1000.0) / 1000.0;
    std::set<int> procs;
    if (force || rng.bernoulli(cfg.coupling)) {
      procs = {rule.procedure, static_cast<int>((static_cast<std::size_t>(*r.protocol) + 1) % cfg.k4)};
    } else {
      for (std::size_t k = 0; k < cfg.k4; ++k)
        if (rng.bernoulli(0.3)) procs.insert(static_cast<int>(k));
    }
    r.procedures = procs;

    const std::size_t len = cfg.hr_len_min + rng.below(cfg.hr_len_max - cfg.hr_len_min + 1);
    const double width = 80.0 / static_cast<double>(cfg.hr_levels);
    const double base = level_centre(level, cfg.hr_levels) + rng.uniform(-0.25, 0.25) * width;
    using domain::VitalKind;
    r.vitals[VitalKind::HR] = detail::walk(rng, VitalKind::HR, "bpm", base, 1.0, len, 30, 220);
    r.vitals[VitalKind::BP] = detail::walk(rng, VitalKind::BP, "mmHg", rng.normal(125, 12), 2.0, len, 60, 220);
    r.vitals[VitalKind::PO] = detail::walk(rng, VitalKind::PO, "%", rng.uniform(93, 99), 0.5, len, 70, 100);
    r.vitals[VitalKind::RR] = detail::walk(rng, VitalKind::RR, "/min", rng.uniform(12, 22), 0.7, len, 4, 60);
    r.vitals[VitalKind::CO2] = detail::walk(rng, VitalKind::CO2, "mmHg", rng.uniform(35, 45), 0.7, len, 10, 80);
    r.vitals[VitalKind::BG] = detail::walk(rng, VitalKind::BG, "mg/dL", rng.uniform(80, 140), 3.0, len, 30, 400);

    if (rng.bernoulli(cfg.incomplete_rate)) {
      if (rng.bernoulli(0.5)) r.protocol.reset();
      else r.vitals.erase(VitalKind::HR);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPG waveforms

/// Piecewise-constant heart rate, one value per `step_s` seconds.
struct HrProfile {
  std::vector<double> bpm;
  double step_s = 1.0;

  static HrProfile constant(double bpm, double duration_s) {
    return {std::vector<double>(static_cast<std::size_t>(std::ceil(duration_s)), bpm), 1.0};
  }
  double at(double t) const {
    const auto i = static_cast<std::size_t>(std::max(0.0, t / step_s));
    return bpm[std::min(i, bpm.size() - 1)];
  }
};

struct GeneratedPpg {
  rppg::PpgWaveform wave;
  std::vector<double> true_bpm;  // mean instantaneous rate per 6 s window
};

/// sin(phi) + 0.3 sin(2 phi) with phase integrated from the profile, plus
/// white Gaussian noise at `snr_db` relative to the clean signal power.
inline GeneratedPpg gen_ppg(const HrProfile& profile, double rate, double duration_s, double snr_db,
                            std::uint64_t seed, double window_s = 6.0) {
  if (profile.bpm.empty()) fail(ErrorCode::InvalidArgument, "empty HR profile");
  for (double b : profile.bpm)
    if (!(b > 45.0 && b < 150.0)) fail(ErrorCode::BandError, "profile rate " + std::to_string(b) + " outside (45, 150) bpm");
  if (!(rate > 0.0) || duration_s < window_s) fail(ErrorCode::InvalidArgument, "need a positive rate and one full window");
  const auto n = static_cast<std::size_t>(std::llround(rate * duration_s));
  GeneratedPpg g;
  g.wave.rate = rate;
  g.wave.samples.resize(n);
  std::vector<double> inst(n);
  double phase = 0.0, power = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    inst[i] = profile.at(static_cast<double>(i) / rate);
    g.wave.samples[i] = std::sin(phase) + 0.3 * std::sin(2.0 * phase);
    power += g.wave.samples[i] * g.wave.samples[i];
    phase += 2.0 * std::numbers::pi * inst[i] / 60.0 / rate;
  }
  if (std::isfinite(snr_db)) {
    const double sd = std::sqrt(power / static_cast<double>(n) / std::pow(10.0, snr_db / 10.0));
    Rng rng(seed);
    for (auto& s : g.wave.samples) s += rng.normal(0.0, sd);
  }
  const std::size_t len = rppg::window_length(rate, window_s);
  for (std::size_t w = 0; (w + 1) * len <= n; ++w) {
    double sum = 0.0;
    for (std::size_t i = w * len; i < (w + 1) * len; ++i) sum += inst[i];
    g.true_bpm.push_back(sum / static_cast<double>(len));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Library and pool

struct LibraryEntry {
  std::string key;
  rppg::PpgWaveform wave;
  domain::VitalsSeries true_hr;  // per-window ground truth
};

struct LibraryPool {
  std::vector<LibraryEntry> library;
  std::vector<domain::KeyedSeries> pool;  // complete incidents' pre-arrival HR
};

/// Subjects follow a slow random walk in 55..135 bpm.
inline std::vector<LibraryEntry> gen_library(const GenConfig& cfg) {
  std::vector<LibraryEntry> out;
  for (std::size_t i = 0; i < cfg.library_size; ++i) {
    Rng rng(seed_for(cfg.seed ^ 0x6c6962ULL, i));
    HrProfile p;
    double bpm = rng.uniform(60.0, 125.0);
    for (std::size_t s = 0; s < static_cast<std::size_t>(std::ceil(cfg.library_seconds)); ++s) {
      p.bpm.push_back(bpm);
      bpm = std::clamp(bpm + rng.normal(0.0, 0.4), 55.0, 135.0);
    }
    auto g = gen_ppg(p, cfg.library_rate, cfg.library_seconds, cfg.snr_db, rng.next_u64());
    char key[32];
    std::snprintf(key, sizeof key, "subject-%02zu", i);
    out.push_back({key, std::move(g.wave), {domain::VitalKind::HR, g.true_bpm, "bpm"}});
  }
  return out;
}

inline LibraryPool gen_library_pool(const GenConfig& cfg) {
  if (cfg.n_records < cfg.library_size)
    fail(ErrorCode::InvalidArgument, "the pool must be at least as large as the library");
  LibraryPool lp;
  lp.library = gen_library(cfg);
  for (const auto& r : gen_incidents(cfg))
    if (domain::is_complete(r)) lp.pool.push_back({r.key, domain::derive_prearrival_vitals(r)});
  return lp;
}

}  // namespace teleems::datagen

#endif  // TELEEMS_DATAGEN_HPP
