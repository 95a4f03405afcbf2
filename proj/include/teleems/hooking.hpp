#ifndef TELEEMS_HOOKING_HPP
#define TELEEMS_HOOKING_HPP

// Pairs HR sequences by the distance between their moment 4-tuples.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "teleems/domain.hpp"
#include "teleems/error.hpp"

namespace teleems::hooking {

struct MomentVector {
  double mu = 0.0;
  double var = 0.0;
  double skew = 0.0;
  double kurt = 0.0;

  bool operator==(const MomentVector&) const = default;
};

/// Population moments; kurtosis is Pearson's (not excess). A constant series
/// has skew = kurt = 0.
inline MomentVector moments(std::span<const double> series) {
  if (series.empty()) fail(ErrorCode::EmptySeries, "moments of an empty series");
  const double n = static_cast<double>(series.size());
  double sum = 0.0;
  for (double v : series) sum += v;
  const double mu = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : series) {
    const double d = v - mu;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (m2 == 0.0) return {mu, 0.0, 0.0, 0.0};
  return {mu, m2, m3 / (m2 * std::sqrt(m2)), m4 / (m2 * m2)};
}

inline double euclid(const MomentVector& a, const MomentVector& b) {
  const double d0 = a.mu - b.mu, d1 = a.var - b.var, d2 = a.skew - b.skew, d3 = a.kurt - b.kurt;
  return std::sqrt(d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3);
}

enum class HookDirection {
  LibraryToPool,  // one pair per library entry, searching the pool
  PoolToLibrary,  // one pair per pool entry, searching the library
};

struct HookPair {
  std::size_t library_index = 0;
  std::size_t pool_index = 0;
  double distance = 0.0;

  bool operator==(const HookPair&) const = default;
};

struct HookPairing {
  std::vector<HookPair> pairs;
  domain::DatasetStage library_tag = domain::DatasetStage::Vitals3;
  domain::DatasetStage pool_tag = domain::DatasetStage::Vitals1;
  std::uint64_t library_seed = 0;
  std::uint64_t pool_seed = 0;
  HookDirection direction = HookDirection::LibraryToPool;

  bool operator==(const HookPairing&) const = default;
};

inline std::vector<MomentVector> moments_of(const std::vector<domain::VitalsSeries>& series) {
  std::vector<MomentVector> out;
  out.reserve(series.size());
  for (const auto& s : series) out.push_back(moments(s.values));
  return out;
}

/// Nearest-neighbour pairing under euclid(moments, moments). Ties go to the
/// smallest candidate index; candidates may be reused.
inline HookPairing hook(const std::vector<domain::VitalsSeries>& library, const std::vector<domain::VitalsSeries>& pool,
                        HookDirection direction = HookDirection::LibraryToPool) {
  HookPairing out;
  out.direction = direction;
  if (library.empty() || pool.empty()) return out;
  const auto lib = moments_of(library);
  const auto pl = moments_of(pool);
  const bool from_library = direction == HookDirection::LibraryToPool;
  const auto& queries = from_library ? lib : pl;
  const auto& candidates = from_library ? pl : lib;
  out.pairs.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::size_t best = 0;
    double best_d = euclid(queries[q], candidates[0]);
    for (std::size_t c = 1; c < candidates.size(); ++c) {
      const double d = euclid(queries[q], candidates[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    out.pairs.push_back(from_library ? HookPair{q, best, best_d} : HookPair{best, q, best_d});
  }
  return out;
}

struct HookedSets {
  std::vector<domain::KeyedSeries> vitals2;  // matched pool HR, keyed by incident
  std::vector<domain::KeyedSeries> vitals3;  // library HR labels
  std::vector<domain::TextSample> text2;     // Text1 of the matched incidents
  std::size_t unique_text2 = 0;
};

/// Materializes the evaluation sets for a pairing. Duplicated matches are
/// kept; the number of distinct Text2 strings is reported separately.
inline HookedSets build_hooked_sets(const HookPairing& pairing, const std::vector<domain::KeyedSeries>& library,
                                    const std::vector<domain::KeyedSeries>& pool,
                                    const std::map<std::string, std::string>& text1_by_key) {
  HookedSets out;
  std::set<std::string> distinct;
  for (const auto& p : pairing.pairs) {
    if (p.library_index >= library.size())
      fail(ErrorCode::BrokenKeyLink, "library index " + std::to_string(p.library_index) + " out of range");
    if (p.pool_index >= pool.size())
      fail(ErrorCode::BrokenKeyLink, "pool index " + std::to_string(p.pool_index) + " out of range");
    const auto& match = pool[p.pool_index];
    auto text = text1_by_key.find(match.key);
    if (text == text1_by_key.end())
      fail(ErrorCode::BrokenKeyLink, "pool entry " + std::to_string(p.pool_index) + " key '" + match.key +
                                         "' has no Text1 sample");
    out.vitals2.push_back(match);
    out.vitals3.push_back(library[p.library_index]);
    out.text2.push_back({match.key, text->second});
    distinct.insert(text->second);
  }
  out.unique_text2 = distinct.size();
  return out;
}

// ---------------------------------------------------------------------------
// Pairing file: a `#` header line, then `<library_index> <pool_index> <distance>`.

inline std::string render_pairing(const HookPairing& p) {
  std::ostringstream s;
  s << "# pairing library=" << domain::to_string(p.library_tag) << " library_seed=" << p.library_seed
    << " pool=" << domain::to_string(p.pool_tag) << " pool_seed=" << p.pool_seed
    << " direction=" << (p.direction == HookDirection::LibraryToPool ? "library-to-pool" : "pool-to-library") << "\n";
  char buf[64];
  for (const auto& pair : p.pairs) {
    std::snprintf(buf, sizeof buf, "%.17g", pair.distance);
    s << pair.library_index << ' ' << pair.pool_index << ' ' << buf << "\n";
  }
  return s.str();
}

inline HookPairing parse_pairing(std::string_view content) {
  HookPairing p;
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream h(line.substr(1));
      std::string word;
      h >> word;
      if (word != "pairing") fail(ErrorCode::Io, "pairing header expected on line " + std::to_string(line_no));
      while (h >> word) {
        const auto eq = word.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = word.substr(0, eq), value = word.substr(eq + 1);
        if (key == "library") p.library_tag = domain::parse_stage(value);
        else if (key == "pool") p.pool_tag = domain::parse_stage(value);
        else if (key == "library_seed") p.library_seed = std::stoull(value);
        else if (key == "pool_seed") p.pool_seed = std::stoull(value);
        else if (key == "direction")
          p.direction = value == "pool-to-library" ? HookDirection::PoolToLibrary : HookDirection::LibraryToPool;
      }
      header = true;
      continue;
    }
    std::istringstream row(line);
    HookPair pair;
    std::string extra;
    if (!(row >> pair.library_index >> pair.pool_index >> pair.distance) || (row >> extra))
      fail(ErrorCode::Io, "malformed pairing line " + std::to_string(line_no));
    p.pairs.push_back(pair);
  }
  if (!header) fail(ErrorCode::Io, "pairing file has no header");
  return p;
}

}  // namespace teleems::hooking

#endif  // TELEEMS_HOOKING_HPP
