#ifndef TELEEMS_DOMAIN_HPP
#define TELEEMS_DOMAIN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "teleems/error.hpp"
#include "teleems/random.hpp"
#include "teleems/text.hpp"

namespace teleems::domain {

using json = nlohmann::json;

enum class VitalKind { HR, BP, PO, RR, CO2, BG };

inline constexpr std::array<VitalKind, 6> kAllVitalKinds = {VitalKind::HR, VitalKind::BP, VitalKind::PO,
                                                            VitalKind::RR, VitalKind::CO2, VitalKind::BG};

constexpr std::string_view to_string(VitalKind k) {
  switch (k) {
    case VitalKind::HR: return "HR";
    case VitalKind::BP: return "BP";
    case VitalKind::PO: return "PO";
    case VitalKind::RR: return "RR";
    case VitalKind::CO2: return "CO2";
    case VitalKind::BG: return "BG";
  }
  return "?";
}

inline VitalKind parse_vital_kind(std::string_view s) {
  for (VitalKind k : kAllVitalKinds)
    if (to_string(k) == s) return k;
  fail(ErrorCode::InvalidArgument, "unknown vital kind '" + std::string(s) + "'");
}

/// Gap marker inside a series (e.g. a window with no spectral peak).
inline constexpr double kGap = std::numeric_limits<double>::quiet_NaN();
inline bool is_gap(double v) { return std::isnan(v); }

struct VitalsSeries {
  VitalKind kind = VitalKind::HR;
  std::vector<double> values;
  std::string unit;

  bool operator==(const VitalsSeries& o) const {
    if (kind != o.kind || unit != o.unit || values.size() != o.values.size()) return false;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double a = values[i], b = o.values[i];
      if (!(a == b || (is_gap(a) && is_gap(b)))) return false;
    }
    return true;
  }
};

enum class DatasetStage {
  Text0, Text1, Text2, Text3, Text4, Text5, Text6, Text7,
  Vitals0, Vitals1, Vitals2, Vitals3, AudioSurrogate,
};

inline constexpr std::array<std::pair<DatasetStage, std::string_view>, 13> kStageNames = {{
    {DatasetStage::Text0, "Text0"},     {DatasetStage::Text1, "Text1"},     {DatasetStage::Text2, "Text2"},
    {DatasetStage::Text3, "Text3"},     {DatasetStage::Text4, "Text4"},     {DatasetStage::Text5, "Text5"},
    {DatasetStage::Text6, "Text6"},     {DatasetStage::Text7, "Text7"},     {DatasetStage::Vitals0, "Vitals0"},
    {DatasetStage::Vitals1, "Vitals1"}, {DatasetStage::Vitals2, "Vitals2"}, {DatasetStage::Vitals3, "Vitals3"},
    {DatasetStage::AudioSurrogate, "Audio-surrogate"},
}};

constexpr std::string_view to_string(DatasetStage s) {
  for (const auto& [stage, name] : kStageNames)
    if (stage == s) return name;
  return "?";
}

inline DatasetStage parse_stage(std::string_view s) {
  for (const auto& [stage, name] : kStageNames)
    if (name == s) return stage;
  fail(ErrorCode::InvalidArgument, "unknown dataset stage '" + std::string(s) + "'");
}

/// One 911 event. The four task labels are optional so that incomplete
/// source rows can be represented and filtered.
struct IncidentRecord {
  std::string key;
  std::vector<std::string> primary_symptoms;
  std::vector<std::string> secondary_symptoms;
  std::map<VitalKind, VitalsSeries> vitals;
  std::optional<int> protocol;
  std::optional<int> med_type;
  std::optional<double> med_quantity;
  std::optional<std::set<int>> procedures;

  bool operator==(const IncidentRecord&) const = default;
};

struct SplitSpec {
  std::array<unsigned, 3> ratios{3, 1, 1};
  std::uint64_t seed = 0;
};

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

struct Bounds {
  double low = 20.0;
  double high = 250.0;
};

struct NormRange {
  double min = 20.0;
  double max = 250.0;
};

// ---------------------------------------------------------------------------
// Preparation pipeline

inline bool is_complete(const IncidentRecord& r) {
  return !r.primary_symptoms.empty() && r.protocol && r.med_type && r.med_quantity && r.procedures &&
         r.vitals.contains(VitalKind::HR) && !r.vitals.at(VitalKind::HR).values.empty();
}

/// Keeps records with primary symptoms, all four labels and an HR series.
inline std::vector<IncidentRecord> filter_complete(const std::vector<IncidentRecord>& records) {
  std::vector<IncidentRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out), is_complete);
  return out;
}

/// Seeded shuffle, then a ratio partition. Validation and test get
/// floor(n * r / sum); whatever is left over lands in train.
template <typename T>
Split<T> split_dataset(std::vector<T> items, const SplitSpec& spec) {
  const unsigned total = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  if (total == 0 || std::any_of(spec.ratios.begin(), spec.ratios.end(), [](unsigned r) { return r == 0; }))
    fail(ErrorCode::InvalidArgument, "split ratios must be positive");
  if (items.size() < spec.ratios.size())
    fail(ErrorCode::InsufficientRecords,
         std::to_string(items.size()) + " records cannot be split into " + std::to_string(spec.ratios.size()) +
             " parts");

  Rng rng(spec.seed);
  rng.shuffle(items);

  const std::size_t n = items.size();
  const std::size_t n_val = n * spec.ratios[1] / total;
  const std::size_t n_test = n * spec.ratios[2] / total;
  const std::size_t n_train = n - n_val - n_test;

  Split<T> out;
  auto it = std::make_move_iterator(items.begin());
  out.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  it += static_cast<std::ptrdiff_t>(n_train);
  out.val.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  it += static_cast<std::ptrdiff_t>(n_val);
  out.test.assign(it, std::make_move_iterator(items.end()));
  return out;
}

/// Text1: primary symptoms only, space-joined in their original order.
inline std::string derive_prearrival_text(const IncidentRecord& r) { return text::join(r.primary_symptoms); }

/// Vitals1: the HR segment only.
inline VitalsSeries derive_prearrival_vitals(const IncidentRecord& r) {
  auto it = r.vitals.find(VitalKind::HR);
  if (it == r.vitals.end() || it->second.values.empty())
    fail(ErrorCode::MissingVital, "record '" + r.key + "' has no HR series");
  return it->second;
}

/// Drops samples outside `bounds` (and gap markers), then min-max scales
/// into [0, 1] with clamping.
inline VitalsSeries preprocess_vitals(const VitalsSeries& series, Bounds bounds, NormRange range) {
  if (!(range.min < range.max)) fail(ErrorCode::InvalidArgument, "normalization range needs min < max");
  VitalsSeries out{series.kind, {}, "normalized"};
  const double span = range.max - range.min;
  for (double v : series.values) {
    if (is_gap(v) || v < bounds.low || v > bounds.high) continue;
    out.values.push_back(std::clamp((v - range.min) / span, 0.0, 1.0));
  }
  if (out.values.empty())
    fail(ErrorCode::EmptyAfterFilter, "every sample of the " + std::string(to_string(series.kind)) +
                                          " series lies outside the outlier bounds");
  return out;
}

/// Min/max over in-bounds training samples. Computed once on the training
/// split and reused for validation and test.
inline NormRange fit_norm_range(const std::vector<VitalsSeries>& train, Bounds bounds) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : train)
    for (double v : s.values) {
      if (is_gap(v) || v < bounds.low || v > bounds.high) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo <= hi)) fail(ErrorCode::EmptyAfterFilter, "no in-bounds samples to fit a normalization range");
  if (lo == hi) hi = lo + 1.0;
  return {lo, hi};
}

/// Vitals0 channel stacking: one row per time step, one column per kind.
/// Shorter series are padded with their last value; absent kinds are 0.
inline std::vector<std::vector<double>> stack_channels(const IncidentRecord& r,
                                                       const std::vector<VitalKind>& kinds) {
  std::size_t steps = 0;
  for (VitalKind k : kinds)
    if (auto it = r.vitals.find(k); it != r.vitals.end()) steps = std::max(steps, it->second.values.size());
  std::vector<std::vector<double>> out(steps, std::vector<double>(kinds.size(), 0.0));
  for (std::size_t c = 0; c < kinds.size(); ++c) {
    auto it = r.vitals.find(kinds[c]);
    if (it == r.vitals.end() || it->second.values.empty()) continue;
    const auto& v = it->second.values;
    for (std::size_t t = 0; t < steps; ++t) out[t][c] = v[std::min(t, v.size() - 1)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: JSON lines, first line is a header object.

inline constexpr int kSchemaVersion = 1;

struct DatasetHeader {
  DatasetStage stage = DatasetStage::Text0;
  int schema = kSchemaVersion;
  std::uint64_t seed = 0;
  json meta = json::object();

  bool operator==(const DatasetHeader&) const = default;
};

struct TextSample {
  std::string key;
  std::string text;
  bool operator==(const TextSample&) const = default;
};

struct KeyedSeries {
  std::string key;
  VitalsSeries series;
  bool operator==(const KeyedSeries&) const = default;
};

inline json values_to_json(const std::vector<double>& values) {
  json arr = json::array();
  for (double v : values) arr.push_back(is_gap(v) ? json(nullptr) : json(v));
  return arr;
}

inline std::vector<double> values_from_json(const json& arr) {
  std::vector<double> out;
  for (const auto& v : arr) out.push_back(v.is_null() ? kGap : v.get<double>());
  return out;
}

inline json to_json(const VitalsSeries& s) {
  return {{"kind", std::string(to_string(s.kind))}, {"unit", s.unit}, {"values", values_to_json(s.values)}};
}

inline VitalsSeries series_from_json(const json& j) {
  return {parse_vital_kind(j.at("kind").get<std::string>()), values_from_json(j.at("values")),
          j.value("unit", std::string{})};
}

inline json to_json(const IncidentRecord& r) {
  json vitals = json::object();
  for (const auto& [kind, series] : r.vitals) vitals[std::string(to_string(kind))] = to_json(series);
  json j = {{"key", r.key},
            {"primary", r.primary_symptoms},
            {"secondary", r.secondary_symptoms},
            {"vitals", vitals},
            {"protocol", r.protocol ? json(*r.protocol) : json(nullptr)},
            {"med_type", r.med_type ? json(*r.med_type) : json(nullptr)},
            {"med_quantity", r.med_quantity ? json(*r.med_quantity) : json(nullptr)},
            {"procedures", r.procedures ? json(*r.procedures) : json(nullptr)}};
  return j;
}

inline IncidentRecord record_from_json(const json& j) {
  IncidentRecord r;
  r.key = j.at("key").get<std::string>();
  r.primary_symptoms = j.at("primary").get<std::vector<std::string>>();
  r.secondary_symptoms = j.at("secondary").get<std::vector<std::string>>();
  for (const auto& [name, series] : j.at("vitals").items())
    r.vitals[parse_vital_kind(name)] = series_from_json(series);
  if (!j.at("protocol").is_null()) r.protocol = j.at("protocol").get<int>();
  if (!j.at("med_type").is_null()) r.med_type = j.at("med_type").get<int>();
  if (!j.at("med_quantity").is_null()) r.med_quantity = j.at("med_quantity").get<double>();
  if (!j.at("procedures").is_null()) r.procedures = j.at("procedures").get<std::set<int>>();
  return r;
}

inline json to_json(const TextSample& s) { return {{"key", s.key}, {"text", s.text}}; }
inline TextSample text_sample_from_json(const json& j) {
  return {j.at("key").get<std::string>(), j.at("text").get<std::string>()};
}

inline json to_json(const KeyedSeries& s) {
  json j = to_json(s.series);
  j["key"] = s.key;
  return j;
}
inline KeyedSeries keyed_series_from_json(const json& j) {
  return {j.at("key").get<std::string>(), series_from_json(j)};
}

inline json header_to_json(const DatasetHeader& h) {
  return {{"stage", std::string(to_string(h.stage))}, {"schema", h.schema}, {"seed", h.seed}, {"meta", h.meta}};
}

inline DatasetHeader header_from_json(const json& j) {
  DatasetHeader h;
  h.stage = parse_stage(j.at("stage").get<std::string>());
  h.schema = j.at("schema").get<int>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.meta = j.value("meta", json::object());
  if (h.schema != kSchemaVersion)
    fail(ErrorCode::Io, "unsupported dataset schema version " + std::to_string(h.schema));
  return h;
}

/// Renders a dataset to its exact on-disk text.
inline std::string render_dataset(const DatasetHeader& header, const std::vector<json>& rows) {
  std::string out = header_to_json(header).dump();
  out.push_back('\n');
  for (const auto& row : rows) {
    out += row.dump();
    out.push_back('\n');
  }
  return out;
}

struct Dataset {
  DatasetHeader header;
  std::vector<json> rows;
};

inline Dataset parse_dataset(std::string_view content) {
  Dataset ds;
  bool have_header = false;
  std::size_t line_no = 0, pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorCode::Io, "dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!have_header) {
      ds.header = header_from_json(j);
      have_header = true;
    } else {
      ds.rows.push_back(std::move(j));
    }
  }
  if (!have_header) fail(ErrorCode::Io, "dataset has no header line");
  return ds;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) fail(ErrorCode::Io, "short write to '" + path + "'");
}

inline void write_dataset(const std::string& path, const DatasetHeader& header, const std::vector<json>& rows) {
  write_file(path, render_dataset(header, rows));
}

inline Dataset read_dataset(const std::string& path) { return parse_dataset(read_file(path)); }

template <typename T>
std::vector<json> rows_of(const std::vector<T>& items) {
  std::vector<json> rows;
  rows.reserve(items.size());
  for (const auto& item : items) rows.push_back(to_json(item));
  return rows;
}

}  // namespace teleems::domain

#endif  // TELEEMS_DOMAIN_HPP
