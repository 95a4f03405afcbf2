#ifndef TELEEMS_METRICS_HPP
#define TELEEMS_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "teleems/error.hpp"
#include "teleems/random.hpp"
#include "teleems/text.hpp"

namespace teleems::metrics {

using json = nlohmann::json;

/// Word error rate: word-level edit distance over max(1, |ref words|).
inline double wer(std::string_view ref, std::string_view hyp) {
  const auto r = text::tokenize(ref);
  const auto h = text::tokenize(hyp);
  return static_cast<double>(text::levenshtein(r, h)) / static_cast<double>(std::max<std::size_t>(1, r.size()));
}

/// Character error rate over the lowercased raw strings.
inline double cer(std::string_view ref, std::string_view hyp) {
  const auto r = text::to_lower(ref);
  const auto h = text::to_lower(hyp);
  return static_cast<double>(text::levenshtein(r, h)) / static_cast<double>(std::max<std::size_t>(1, r.size()));
}

inline int exact_match(std::string_view ref, std::string_view hyp) {
  return text::normalize_spaces(ref) == text::normalize_spaces(hyp) ? 1 : 0;
}

namespace detail {
inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& tokens,
                                                                    std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}
}  // namespace detail

/// Sentence BLEU against a single reference. Orders run 1..min(max_n,
/// |hyp|); an order with no clipped match uses (0 + 1) / (total + 1).
inline double bleu(std::string_view ref, std::string_view hyp, std::size_t max_n = 4) {
  const auto r = text::tokenize(ref);
  const auto h = text::tokenize(hyp);
  if (h.empty() || max_n == 0) return 0.0;
  const std::size_t orders = std::min(max_n, h.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto hc = detail::ngram_counts(h, n);
    const auto rc = detail::ngram_counts(r, n);
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, count] : hc) {
      total += count;
      if (auto it = rc.find(gram); it != rc.end()) matched += std::min(count, it->second);
    }
    const double p = matched == 0 ? 1.0 / static_cast<double>(total + 1)
                                  : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(h.size());
  const double rl = static_cast<double>(r.size());
  const double bp = c > rl ? 1.0 : std::exp(1.0 - rl / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

/// Share of samples whose truth is among the first k entries of its ranking.
inline double topk_accuracy(const std::vector<std::vector<int>>& rankings, const std::vector<int>& truths,
                            std::size_t k) {
  if (rankings.size() != truths.size()) fail(ErrorCode::LengthError, "rankings and truths differ in length");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    if (rankings[i].size() < k) fail(ErrorCode::RangeError, "ranking shorter than k");
    const auto end = rankings[i].begin() + static_cast<std::ptrdiff_t>(k);
    if (std::find(rankings[i].begin(), end, truths[i]) != end) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
};

/// Per-label F1 = 2TP / (2TP + FP + FN). A label never predicted and never
/// true scores 0 in the macro mean; micro is 0 when nothing is counted.
inline F1Scores f1_scores(const std::vector<std::set<int>>& truth, const std::vector<std::set<int>>& pred,
                          const std::set<int>& universe) {
  if (universe.empty()) fail(ErrorCode::EmptyUniverse, "label universe is empty");
  if (truth.size() != pred.size()) fail(ErrorCode::LengthError, "truth and prediction lists differ in length");
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0;
  };
  std::map<int, Counts> per;
  for (int label : universe) per[label];
  auto check = [&](int label) {
    if (!universe.contains(label)) fail(ErrorCode::InvalidArgument, "label " + std::to_string(label) + " outside universe");
  };
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int t : truth[i]) {
      check(t);
      if (pred[i].contains(t)) ++per[t].tp;
      else ++per[t].fn;
    }
    for (int p : pred[i]) {
      check(p);
      if (!truth[i].contains(p)) ++per[p].fp;
    }
  }
  auto f1 = [](const Counts& c) {
    const std::size_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
  };
  Counts total;
  double macro = 0.0;
  for (const auto& [label, c] : per) {
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    macro += f1(c);
  }
  return {f1(total), macro / static_cast<double>(per.size())};
}

inline double mse(std::span<const double> preds, std::span<const double> truths) {
  if (preds.size() != truths.size() || preds.empty())
    fail(ErrorCode::LengthError, "mse needs equal, non-zero lengths");
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += (preds[i] - truths[i]) * (preds[i] - truths[i]);
  return sum / static_cast<double>(preds.size());
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorCode::LengthError, "pearson needs equal lengths >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorCode::DegenerateVariance, "zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorCode::LengthError, "spearman needs equal lengths >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

// ---------------------------------------------------------------------------
// Report

/// Nested report: variant -> noise -> mode -> task -> metric -> value.
/// Cells that were not evaluated are present with a "skipped" reason.
class MetricReport {
 public:
  using Path = std::vector<std::string>;

  void set(const Path& path, const std::string& metric, double value) {
    if (!std::isfinite(value)) fail(ErrorCode::InvalidArgument, "metric '" + metric + "' is not finite");
    node(path)[metric] = value;
    ++evaluated_;
  }

  void skip(const Path& path, const std::string& reason) {
    node(path)["skipped"] = reason;
    ++skipped_;
  }

  void set_config(const std::string& key, json value) { config_[key] = std::move(value); }

  /// Side tables that do not belong on the grid axes.
  void set_section(const std::string& name, json value) { sections_[name] = std::move(value); }
  const json& sections() const { return sections_; }

  bool has(const Path& path) const {
    const json* j = &cells_;
    for (const auto& p : path) {
      if (!j->is_object() || !j->contains(p)) return false;
      j = &(*j)[p];
    }
    return true;
  }

  double get(const Path& path, const std::string& metric) const {
    const json* j = &cells_;
    for (const auto& p : path) j = &j->at(p);
    return j->at(metric).get<double>();
  }

  const json& cells() const { return cells_; }
  std::size_t evaluated() const { return evaluated_; }
  std::size_t skipped() const { return skipped_; }

  json to_json() const {
    json j = {{"cells", cells_}, {"counts", {{"evaluated", evaluated_}, {"skipped", skipped_}}}, {"config", config_}};
    if (!sections_.empty()) j["sections"] = sections_;
    return j;
  }

  /// Stable text form (object keys sorted by the json library).
  std::string render() const { return to_json().dump(2) + "\n"; }
  std::uint64_t hash() const { return fnv1a(to_json().dump()); }

  /// Every object holding top1/top3/top5 must be non-decreasing.
  bool topk_monotone() const { return topk_monotone(cells_); }

 private:
  json& node(const Path& path) {
    json* j = &cells_;
    for (const auto& p : path) j = &(*j)[p];
    return *j;
  }

  static bool topk_monotone(const json& j) {
    if (!j.is_object()) return true;
    if (j.contains("top1") && j.contains("top3") && j.contains("top5")) {
      const double a = j["top1"], b = j["top3"], c = j["top5"];
      if (!(a <= b && b <= c)) return false;
    }
    for (const auto& [k, v] : j.items())
      if (!topk_monotone(v)) return false;
    return true;
  }

  json cells_ = json::object();
  json config_ = json::object();
  json sections_ = json::object();
  std::size_t evaluated_ = 0, skipped_ = 0;
};

}  // namespace teleems::metrics

#endif  // TELEEMS_METRICS_HPP
