#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "specrig/pad_metrics.hpp"
#include "specrig/random.hpp"

using namespace specrig;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<ScoredSample> make(const std::vector<double>& neg, const std::vector<double>& pos,
                               const std::string& category = "silicone") {
  std::vector<ScoredSample> s;
  for (double v : neg) s.push_back({v, 0});
  for (double v : pos) s.push_back({v, 1, category});
  return s;
}

// Random fixture with plenty of ties; attacks score higher on average.
std::vector<ScoredSample> fixture(int n, std::uint64_t seed, double pos_rate = 0.5) {
  Rng rng(seed);
  std::vector<ScoredSample> s;
  for (int i = 0; i < n; ++i) {
    const int label = rng.uniform() < pos_rate ? 1 : 0;
    const double v = std::clamp(0.5 + 0.25 * (label ? 1 : -1) + 0.3 * rng.normal(), 0.0, 1.0);
    s.push_back({std::round(v * 100) / 100, label, label ? (rng.uniform() < 0.5 ? "glue" : "pdms") : "bona_fide"});
  }
  return s;
}

// --- brute-force oracles ----------------------------------------------------

struct Rates {
  double fpr, tpr;
};

Rates rates_at(const std::vector<ScoredSample>& s, double t) {
  double fp = 0, tp = 0, nn = 0, np = 0;
  for (const auto& x : s) {
    (x.label ? np : nn) += 1;
    if (x.score >= t) (x.label ? tp : fp) += 1;
  }
  return {fp / nn, tp / np};
}

std::vector<double> candidate_thresholds(const std::vector<ScoredSample>& s) {
  std::vector<double> t{kInf};
  for (const auto& x : s) t.push_back(x.score);
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

double brute_auc(const std::vector<ScoredSample>& s) {
  double num = 0, den = 0;
  for (const auto& p : s)
    if (p.label == 1)
      for (const auto& n : s)
        if (n.label == 0) {
          num += p.score > n.score ? 1.0 : p.score == n.score ? 0.5 : 0.0;
          den += 1;
        }
  return num / den;
}

double brute_tpr(const std::vector<ScoredSample>& s, double target) {
  double best = 0;
  for (double t : candidate_thresholds(s)) {
    const auto r = rates_at(s, t);
    if (r.fpr <= target) best = std::max(best, r.tpr);
  }
  return best;
}

double brute_bpcer(const std::vector<ScoredSample>& s, double target) {
  // Largest threshold whose APCER (attacks below it) is within target.
  for (double t : candidate_thresholds(s)) {
    double below = 0, np = 0, rejected = 0, nn = 0;
    for (const auto& x : s) {
      if (x.label) {
        np += 1;
        below += x.score < t;
      } else {
        nn += 1;
        rejected += x.score >= t;
      }
    }
    if (below / np <= target) return rejected / nn;
  }
  return 1.0;
}

}  // namespace

TEST(Roc, PerfectSeparationReachesCorner) {
  const auto pts = roc(make({0.1, 0.2, 0.3}, {0.7, 0.8}));
  bool corner = false;
  for (const auto& p : pts) corner |= p.fpr == 0.0 && p.tpr == 1.0;
  EXPECT_TRUE(corner);
}

TEST(Roc, AllEqualIsOnePointPastOrigin) {
  const auto pts = roc(make({0.5, 0.5}, {0.5, 0.5, 0.5}));
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].fpr, 0.0);
  EXPECT_EQ(pts[0].tpr, 0.0);
  EXPECT_EQ(pts[1].fpr, 1.0);
  EXPECT_EQ(pts[1].tpr, 1.0);
}

TEST(Roc, SmallStaircaseMatchesBruteForce) {
  const auto s = make({0.1, 0.4}, {0.35, 0.8});
  const auto pts = roc(s);
  const auto ts = candidate_thresholds(s);
  ASSERT_EQ(pts.size(), 5u);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(pts[i].threshold, ts[i]);
    const auto r = rates_at(s, ts[i]);
    EXPECT_EQ(pts[i].fpr, r.fpr);
    EXPECT_EQ(pts[i].tpr, r.tpr);
  }
}

TEST(Roc, MonotoneAlongSweep) {
  const auto pts = roc(fixture(500, 4));
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_GE(pts[i].fpr, pts[i - 1].fpr);
    EXPECT_GE(pts[i].tpr, pts[i - 1].tpr);
  }
}

TEST(Roc, SingleClassRejected) {
  EXPECT_THROW(roc(make({0.1, 0.2}, {})), MetricsError);
  EXPECT_THROW(auc(make({}, {0.1})), MetricsError);
  EXPECT_THROW(tpr_at_fpr(make({}, {0.1})), MetricsError);
  EXPECT_THROW(bpcer_at_apcer(make({0.3}, {})), MetricsError);
}

TEST(Auc, KnownValues) {
  EXPECT_EQ(auc(make({0.1, 0.2}, {0.8, 0.9})), 1.0);
  EXPECT_EQ(auc(make({0.1, 0.4}, {0.35, 0.8})), 0.75);
  EXPECT_EQ(auc(make({0.5, 0.5, 0.5}, {0.5, 0.5})), 0.5);
}

TEST(Auc, EqualsPairwiseBruteForce) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto s = fixture(1000, seed);
    EXPECT_NEAR(auc(s), brute_auc(s), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  auto s = fixture(300, 8);
  const double a = auc(s), t = tpr_at_fpr(s, 0.05), b = bpcer_at_apcer(s);
  for (auto& x : s) x.score = std::exp(3.0 * x.score) - 7.0;
  EXPECT_EQ(auc(s), a);
  EXPECT_EQ(tpr_at_fpr(s, 0.05), t);
  EXPECT_EQ(bpcer_at_apcer(s), b);
}

TEST(TprAtFpr, PerfectSeparation) { EXPECT_EQ(tpr_at_fpr(make({0.1, 0.2}, {0.8, 0.9})), 1.0); }

TEST(TprAtFpr, FewBonaFideLeavesOnlyTheOrigin) {
  // 100 bona fide: any flagged bona fide costs FPR 0.01 > 0.002. The top
  // score is bona fide, so no attack can be flagged at FPR 0.
  std::vector<double> neg(100), pos(50);
  for (int i = 0; i < 100; ++i) neg[i] = 0.2 + 0.007 * i;
  for (int i = 0; i < 50; ++i) pos[i] = 0.3 + 0.01 * i;
  EXPECT_EQ(tpr_at_fpr(make(neg, pos)), 0.0);
}

TEST(TprAtFpr, EqualsExhaustiveSweep) {
  for (std::uint64_t seed : {5, 6}) {
    const auto s = fixture(1000, seed);
    for (double target : {0.002, 0.01, 0.1, 0.5})
      EXPECT_EQ(tpr_at_fpr(s, target), brute_tpr(s, target)) << target;
  }
}

TEST(Bpcer, PerfectSeparationIsZero) {
  std::vector<double> neg, pos;
  for (int i = 0; i < 40; ++i) neg.push_back(0.01 * i), pos.push_back(0.6 + 0.01 * i);
  EXPECT_EQ(bpcer_at_apcer(make(neg, pos)), 0.0);
}

TEST(Bpcer, AntiCorrelatedIsOne) {
  std::vector<double> neg, pos;
  for (int i = 0; i < 40; ++i) pos.push_back(0.01 * i), neg.push_back(0.6 + 0.01 * i);
  EXPECT_EQ(bpcer_at_apcer(make(neg, pos)), 1.0);
}

TEST(Bpcer, EqualsExhaustiveSweep) {
  for (std::uint64_t seed : {7, 8, 9}) {
    const auto s = fixture(200, seed);
    for (double target : {0.0, 0.05, 0.2}) EXPECT_EQ(bpcer_at_apcer(s, target), brute_bpcer(s, target)) << target;
  }
}

TEST(Bpcer, MonotoneInTarget) {
  const auto s = fixture(400, 10);
  double prev = 2.0;
  for (double t = 0.0; t <= 1.0; t += 0.01) {
    const double b = bpcer_at_apcer(s, t);
    EXPECT_LE(b, prev);
    prev = b;
  }
}

TEST(Fusion, BasicCases) {
  const std::vector<double> a{0.2, 0.9, 0.4};
  EXPECT_EQ(mean_fusion({a}), a);
  EXPECT_EQ(mean_fusion({{0, 1}, {1, 0}}), (std::vector<double>{0.5, 0.5}));
  EXPECT_THROW(mean_fusion({{0, 1}, {1}}), MetricsError);
  EXPECT_THROW(mean_fusion({}), MetricsError);
}

TEST(Fusion, DisjointErrorsImproveAuc) {
  // Each channel ranks one different attack below all bona fide samples.
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
  const std::vector<double> c1{0.1, 0.2, 0.3, 0.4, 0.05, 0.8, 0.85, 0.9};
  const std::vector<double> c2{0.15, 0.25, 0.35, 0.3, 0.8, 0.02, 0.9, 0.95};
  auto with = [&](const std::vector<double>& sc) {
    std::vector<ScoredSample> s;
    for (std::size_t i = 0; i < sc.size(); ++i) s.push_back({sc[i], labels[i]});
    return s;
  };
  const double fused = brute_auc(with(mean_fusion({c1, c2})));
  EXPECT_GT(fused, brute_auc(with(c1)));
  EXPECT_GT(fused, brute_auc(with(c2)));
  EXPECT_EQ(auc(with(mean_fusion({c1, c2}))), fused);
}

TEST(Categories, SingleCategoryEqualsGlobal) {
  auto s = fixture(300, 11);
  for (auto& x : s)
    if (x.label) x.category = "glue";
  const auto rep = per_category_report(s);
  ASSERT_EQ(rep.rows.size(), 1u);
  const auto g = compute_metrics(s);
  EXPECT_EQ(rep.rows[0].metrics.auc, g.auc);
  EXPECT_EQ(rep.rows[0].metrics.tpr_at_fpr, g.tpr_at_fpr);
  EXPECT_EQ(rep.rows[0].metrics.bpcer20, g.bpcer20);
}

TEST(Categories, EmptyCategoryBecomesNote) {
  const auto rep = per_category_report(fixture(100, 12), {"glue", "pdms", "playdoh"});
  EXPECT_EQ(rep.rows.size(), 2u);
  ASSERT_EQ(rep.notes.size(), 1u);
  EXPECT_NE(rep.notes[0].find("playdoh"), std::string::npos);
}

TEST(Categories, RowsMatchFilteredSubsets) {
  const auto s = fixture(400, 13);
  const auto rep = per_category_report(s);
  for (const auto& row : rep.rows) {
    std::vector<ScoredSample> sub;
    for (const auto& x : s)
      if (x.label == 0 || x.category == row.category) sub.push_back(x);
    EXPECT_NEAR(row.metrics.auc, brute_auc(sub), 1e-12) << row.category;
    EXPECT_EQ(row.metrics.tpr_at_fpr, brute_tpr(sub, kDefaultFprTarget)) << row.category;
    EXPECT_EQ(row.metrics.bpcer20, brute_bpcer(sub, kDefaultApcerTarget)) << row.category;
  }
}

TEST(Output, JsonAndCsv) {
  const auto s = make({0.1, 0.4}, {0.35, 0.8});
  const auto j = roc_to_json(roc(s));
  EXPECT_TRUE(j[0]["threshold"].is_null());
  EXPECT_EQ(j.size(), 5u);
  const auto csv = report_csv({{"finger/swir", "all", compute_metrics(s)}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "experiment,category,auc,tpr_at_0.2pct_fpr,bpcer20,bona_fide,attacks");
  EXPECT_NE(csv.find("finger/swir,all,0.750000"), std::string::npos);
}
