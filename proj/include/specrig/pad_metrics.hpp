#pragma once

// ROC-based PAD metrics. Attacks are the positive class: a sample is flagged
// as an attack when its score is >= the threshold.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/error.hpp"

namespace specrig {

inline constexpr double kDefaultFprTarget = 0.002;
inline constexpr double kDefaultApcerTarget = 0.05;
inline const std::string kBonaFideCategory = "bona_fide";

struct ScoredSample {
  double score = 0.0;
  int label = 0;  // 0 bona fide, 1 attack
  std::string category = kBonaFideCategory;
  std::string protocol;
  std::string id;
};

struct RocPoint {
  double threshold = 0.0;  // +inf for the reject-nothing origin
  double fpr = 0.0;
  double tpr = 0.0;
};

namespace detail {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

inline ClassCounts count_classes(const std::vector<ScoredSample>& s) {
  ClassCounts c;
  for (const auto& x : s) {
    if (x.label != 0 && x.label != 1) throw MetricsError("labels must be 0 or 1");
    (x.label == 1 ? c.pos : c.neg)++;
  }
  if (c.pos == 0 || c.neg == 0) throw MetricsError("metrics need both bona fide and attack samples");
  return c;
}

}  // namespace detail

/// Step ROC over the distinct scores, from the origin down to the lowest score.
inline std::vector<RocPoint> roc(const std::vector<ScoredSample>& samples) {
  const auto n = detail::count_classes(samples);
  std::vector<const ScoredSample*> sorted;
  for (const auto& s : samples) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->score > b->score; });
  std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i]->score;
    for (; i < sorted.size() && sorted[i]->score == t; ++i) (sorted[i]->label == 1 ? tp : fp)++;
    pts.push_back({t, static_cast<double>(fp) / n.neg, static_cast<double>(tp) / n.pos});
  }
  return pts;
}

/// Mann-Whitney statistic: P(attack > bona fide) + P(tie) / 2.
inline double auc(const std::vector<ScoredSample>& samples) {
  const auto n = detail::count_classes(samples);
  std::vector<std::pair<double, int>> v;
  for (const auto& s : samples) v.emplace_back(s.score, s.label);
  std::sort(v.begin(), v.end());
  // Twice the rank sum keeps midranks integral.
  double rank2_pos = 0.0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const double mid2 = static_cast<double>(i + 1 + j);  // 2 * average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (v[k].second == 1) rank2_pos += mid2;
    i = j;
  }
  const double np = static_cast<double>(n.pos), nn = static_cast<double>(n.neg);
  const double u2 = rank2_pos - np * (np + 1.0);
  return u2 / (2.0 * np * nn);
}

/// Highest TPR among operating points with FPR <= target.
inline double tpr_at_fpr(const std::vector<ScoredSample>& samples, double fpr_target = kDefaultFprTarget) {
  double best = 0.0;
  for (const auto& p : roc(samples))
    if (p.fpr <= fpr_target) best = std::max(best, p.tpr);
  return best;
}

/// BPCER at the most permissive threshold whose APCER (attacks scored below
/// it) stays within target.
inline double bpcer_at_apcer(const std::vector<ScoredSample>& samples, double apcer_target = kDefaultApcerTarget) {
  const auto n = detail::count_classes(samples);
  std::vector<double> attacks, bona;
  for (const auto& s : samples) (s.label == 1 ? attacks : bona).push_back(s.score);
  std::sort(attacks.begin(), attacks.end());
  std::sort(bona.begin(), bona.end());
  std::set<double> thresholds(attacks.begin(), attacks.end());
  thresholds.insert(bona.begin(), bona.end());
  double chosen = -std::numeric_limits<double>::infinity();
  for (double t : thresholds) {
    const auto below = static_cast<double>(std::lower_bound(attacks.begin(), attacks.end(), t) - attacks.begin());
    if (below / n.pos <= apcer_target) chosen = std::max(chosen, t);
  }
  const auto rejected = static_cast<double>(bona.end() - std::lower_bound(bona.begin(), bona.end(), chosen));
  return rejected / n.neg;
}

/// Element-wise mean of aligned score lists.
inline std::vector<double> mean_fusion(const std::vector<std::vector<double>>& lists) {
  if (lists.empty()) throw MetricsError("mean fusion needs at least one score list");
  const std::size_t n = lists.front().size();
  for (const auto& l : lists)
    if (l.size() != n)
      throw MetricsError("score lists differ in length (" + std::to_string(l.size()) + " vs " + std::to_string(n) + ")");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& l : lists) out[i] += l[i];
    out[i] /= static_cast<double>(lists.size());
  }
  return out;
}

struct Metrics {
  double auc = 0.0;
  double tpr_at_fpr = 0.0;
  double bpcer20 = 0.0;
  std::size_t bona_fide = 0;
  std::size_t attacks = 0;
};

inline Metrics compute_metrics(const std::vector<ScoredSample>& s) {
  const auto n = detail::count_classes(s);
  return {auc(s), tpr_at_fpr(s), bpcer_at_apcer(s), n.neg, n.pos};
}

struct CategoryRow {
  std::string category;
  Metrics metrics;
};

struct CategoryReport {
  std::vector<CategoryRow> rows;
  std::vector<std::string> notes;
};

/// Metrics on bona fide plus one attack category at a time. Categories in
/// `expected` without samples are reported in `notes` instead of a row.
inline CategoryReport per_category_report(const std::vector<ScoredSample>& samples,
                                          const std::vector<std::string>& expected = {}) {
  std::map<std::string, std::vector<ScoredSample>> by_cat;
  std::vector<ScoredSample> bona;
  for (const auto& s : samples) {
    if (s.label == 0) bona.push_back(s);
    else by_cat[s.category].push_back(s);
  }
  CategoryReport rep;
  for (const auto& c : expected)
    if (c != kBonaFideCategory && !by_cat.count(c)) rep.notes.push_back("no samples for category '" + c + "'");
  if (bona.empty()) {
    rep.notes.push_back("no bona fide samples");
    return rep;
  }
  for (auto& [cat, attacks] : by_cat) {
    auto subset = bona;
    subset.insert(subset.end(), attacks.begin(), attacks.end());
    rep.rows.push_back({cat, compute_metrics(subset)});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Output

inline nlohmann::ordered_json metrics_to_json(const Metrics& m) {
  return {{"auc", m.auc}, {"tpr_at_0.2pct_fpr", m.tpr_at_fpr}, {"bpcer20", m.bpcer20},
          {"bona_fide", m.bona_fide}, {"attacks", m.attacks}};
}

inline nlohmann::ordered_json roc_to_json(const std::vector<RocPoint>& pts) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& p : pts) {
    nlohmann::ordered_json t = nullptr;
    if (std::isfinite(p.threshold)) t = p.threshold;
    j.push_back({{"threshold", t}, {"fpr", p.fpr}, {"tpr", p.tpr}});
  }
  return j;
}

inline nlohmann::ordered_json category_report_to_json(const CategoryReport& r) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    auto m = metrics_to_json(row.metrics);
    m["category"] = row.category;
    rows.push_back(std::move(m));
  }
  j["rows"] = std::move(rows);
  j["notes"] = r.notes;
  return j;
}

/// One CSV line per (experiment, category); "all" is the global row.
struct ReportLine {
  std::string experiment;
  std::string category;
  Metrics metrics;
};

inline std::string report_csv(const std::vector<ReportLine>& lines) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "experiment,category,auc,tpr_at_0.2pct_fpr,bpcer20,bona_fide,attacks\n";
  for (const auto& l : lines)
    out << l.experiment << ',' << l.category << ',' << l.metrics.auc << ',' << l.metrics.tpr_at_fpr << ','
        << l.metrics.bpcer20 << ',' << l.metrics.bona_fide << ',' << l.metrics.attacks << '\n';
  return out.str();
}

}  // namespace specrig
