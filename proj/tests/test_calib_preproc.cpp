#include <gtest/gtest.h>

#include <cmath>

#include "specrig/calib_preproc.hpp"
#include "specrig/random.hpp"
#include "specrig/scene.hpp"
#include "support.hpp"

using namespace specrig;

namespace {

std::vector<Correspondence> generate(const Eigen::Matrix3d& H, const std::vector<Point2>& src) {
  const auto h = Homography::from(H);
  std::vector<Correspondence> out;
  for (const auto& p : src) out.push_back({p, h.apply(p)});
  return out;
}

std::vector<Point2> random_points(int n, std::uint64_t seed, double extent = 100.0) {
  Rng rng(seed);
  std::vector<Point2> pts;
  for (int i = 0; i < n; ++i) pts.push_back({rng.uniform(0.0, extent), rng.uniform(0.0, extent)});
  return pts;
}

double max_abs_diff(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) { return (a - b).cwiseAbs().maxCoeff(); }

Image smooth_image(int w, int h) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(y, x) = 100.0 + 60.0 * std::sin(x * 0.11) * std::cos(y * 0.07) + 30.0 * std::sin((x + y) * 0.05);
  return img;
}

Frame constant_frame(int w, int h, int bits, std::uint16_t v) {
  Frame f(w, h, 1, bits);
  std::fill(f.pixels.begin(), f.pixels.end(), v);
  return f;
}

}  // namespace

TEST(Homography, IdentityCorners) {
  const std::vector<Point2> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  const auto fit = estimate_homography(generate(Eigen::Matrix3d::Identity(), sq));
  EXPECT_LT(max_abs_diff(fit.H.m, Eigen::Matrix3d::Identity()), 1e-10);
}

TEST(Homography, Translation) {
  Eigen::Matrix3d T;
  T << 1, 0, 5, 0, 1, -3, 0, 0, 1;
  const auto fit = estimate_homography(generate(T, random_points(8, 3)));
  EXPECT_LT(max_abs_diff(fit.H.m, T), 1e-9);
  EXPECT_LT(fit.rms, 1e-9);
}

TEST(Homography, ProjectiveOverdetermined) {
  Eigen::Matrix3d H;
  H << 1.1, 0.05, 12.0, -0.03, 0.95, -7.0, 2e-4, -1e-4, 1.0;
  const auto fit = estimate_homography(generate(H, random_points(20, 5)));
  EXPECT_LT(fit.rms, 1e-6);
  EXPECT_LT(max_abs_diff(fit.H.m, H), 1e-8);
}

TEST(Homography, ScaleInvariant) {
  Eigen::Matrix3d H;
  H << 0.9, 0.1, 4.0, -0.05, 1.05, 2.0, 1e-4, 2e-4, 1.0;
  auto pairs = generate(H, random_points(12, 9));
  const auto a = estimate_homography(pairs);
  for (auto& c : pairs) {
    c.src = {c.src.x * 10, c.src.y * 10};
    c.dst = {c.dst.x * 10, c.dst.y * 10};
  }
  const auto b = estimate_homography(pairs);
  const Eigen::Matrix3d S = Eigen::Vector3d(10, 10, 1).asDiagonal();
  const auto back = Homography::from(S.inverse() * b.H.m * S);
  EXPECT_LT(max_abs_diff(back.m, a.H.m), 1e-8);
}

TEST(Homography, CheckerboardAcrossCameras) {
  // Corners seen by two cameras with different views; the camera-to-camera
  // map is a homography recovered from the ground-truth corners.
  const auto board = make_preset("calib/checkerboard", 4);
  ASSERT_EQ(board.corners.size(), 48u);
  Eigen::Matrix3d A, B;
  A << 1.02, 0.03, -0.01, -0.02, 0.98, 0.02, 0.01, -0.02, 1.0;
  B << 0.97, -0.04, 0.03, 0.05, 1.01, -0.02, -0.02, 0.01, 1.0;
  const auto ha = Homography::from(A), hb = Homography::from(B);
  std::vector<Correspondence> pairs;
  for (const auto& c : board.corners) {
    const auto pa = ha.apply({c[0], c[1]}), pb = hb.apply({c[0], c[1]});
    pairs.push_back({{pa.x * 1984, pa.y * 1264}, {pb.x * 320, pb.y * 256}});
  }
  EXPECT_LT(estimate_homography(pairs).rms, 1e-6);
}

TEST(Homography, DegenerateInputs) {
  EXPECT_THROW(estimate_homography(generate(Eigen::Matrix3d::Identity(), {{0, 0}, {1, 0}, {0, 1}})), GeometryError);
  EXPECT_THROW(estimate_homography(generate(Eigen::Matrix3d::Identity(), {{0, 0}, {1, 1}, {2, 2}, {3, 3}, {0, 5}})),
               GeometryError);
  EXPECT_THROW(Homography::from(Eigen::Matrix3d::Zero()).inverse(), GeometryError);
}

TEST(Homography, NormalizedAndInvertible) {
  Eigen::Matrix3d H;
  H << 2, 0, 4, 0, 2, 6, 0, 0, 2;
  const auto h = Homography::from(H);
  EXPECT_DOUBLE_EQ(h.m(2, 2), 1.0);
  const auto p = h.inverse().apply(h.apply({3.5, -1.25}));
  EXPECT_NEAR(p.x, 3.5, 1e-12);
  EXPECT_NEAR(p.y, -1.25, 1e-12);
}

// ---------------------------------------------------------------------------

TEST(Bicubic, WeightsSumToOne) {
  for (int i = 0; i <= 1000; ++i) {
    const auto w = cubic_weights(i / 1000.0);
    EXPECT_LT(std::abs(w[0] + w[1] + w[2] + w[3] - 1.0), 1e-12);
  }
}

TEST(Bicubic, SameSizeIsIdentity) {
  const auto img = smooth_image(37, 23);
  const auto out = resize_bicubic(img, 37, 23);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-12);
}

TEST(Bicubic, ConstantStaysConstant) {
  const Image img(40, 30, 7.25);
  for (auto [w, h] : {std::pair{13, 9}, std::pair{80, 61}, std::pair{1, 1}}) {
    const auto out = resize_bicubic(img, w, h);
    for (double v : out.data) EXPECT_NEAR(v, 7.25, 1e-12);
  }
}

TEST(Bicubic, RampStaysLinearOnDownscale) {
  Image img(64, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 64; ++x) img.at(y, x) = 3.0 * x + 0.5 * y;
  const auto out = resize_bicubic(img, 32, 16);
  // Output pixel x covers source 2x..2x+2; its centre is at source 2x + 0.5.
  for (int y = 1; y < 15; ++y)
    for (int x = 1; x < 31; ++x) EXPECT_NEAR(out.at(y, x), 3.0 * (2 * x + 0.5) + 0.5 * (2 * y + 0.5), 1e-6);
}

TEST(Bicubic, RejectsEmptyOutput) { EXPECT_THROW(resize_bicubic(Image(4, 4), 0, 3), Error); }

// ---------------------------------------------------------------------------

TEST(Warp, IdentityKeepsInterior) {
  Frame f(20, 15, 1, 12);
  Rng rng(2);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(rng.below(4096));
  const auto out = warp_image(f, Homography::identity(), 20, 15);
  EXPECT_EQ(out.pixels, f.pixels);
}

TEST(Warp, IntegerTranslationIsExactShift) {
  Frame f(20, 15, 1, 8);
  Rng rng(3);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(rng.below(256));
  Eigen::Matrix3d T;
  T << 1, 0, 3, 0, 1, 2, 0, 0, 1;
  const auto out = warp_image(f, Homography::from(T), 20, 15);
  for (int y = 0; y < 15; ++y)
    for (int x = 0; x < 20; ++x) {
      if (x >= 3 && y >= 2) EXPECT_EQ(out.at(y, x), f.at(y - 2, x - 3));
      else EXPECT_EQ(out.at(y, x), 0);
    }
}

TEST(Warp, RoundTripPsnr) {
  const auto img = smooth_image(120, 90);
  Eigen::Matrix3d H;
  H << 1.03, 0.04, -2.0, -0.02, 0.99, 1.5, 1e-4, -5e-5, 1.0;
  const auto h = Homography::from(H);
  const auto back = warp_image(warp_image(img, h, 120, 90), h.inverse(), 120, 90);
  double se = 0.0, peak = 0.0;
  std::size_t n = 0;
  for (int y = 15; y < 75; ++y)
    for (int x = 15; x < 105; ++x) {
      const double d = back.at(y, x) - img.at(y, x);
      se += d * d;
      peak = std::max(peak, img.at(y, x));
      ++n;
    }
  const double psnr = 10.0 * std::log10(peak * peak / (se / n));
  EXPECT_GT(psnr, 40.0);
}

// ---------------------------------------------------------------------------

TEST(Preprocess, DarkEqualToSignalGivesZeros) {
  const auto spec = make_preprocess_spec(PreprocModality::finger, 12, Box{0, 0, 1, 1}, true);
  const auto out = preprocess({constant_frame(64, 32, 12, 900)}, spec, {constant_frame(64, 32, 12, 900)});
  for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, DarkSubtractionClampsAtZero) {
  const auto spec = make_preprocess_spec(PreprocModality::finger, 12, Box{0, 0, 1, 1}, true);
  const auto out = preprocess({constant_frame(64, 32, 12, 100)}, spec, {constant_frame(64, 32, 12, 900)});
  for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, FullScaleNormalizesToOne) {
  const auto spec = make_preprocess_spec(PreprocModality::iris, 12, Box{0, 0, 1, 1}, false);
  const auto out = preprocess({constant_frame(50, 50, 12, 4095)}, spec, {});
  ASSERT_EQ(out.width, 256);
  for (double v : out.data) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Preprocess, OutputSizes) {
  const Frame face = constant_frame(1984, 1264, 8, 10);
  const auto spec = make_preprocess_spec(PreprocModality::face, 8, face_roi(Box{0.3, 0.25, 0.7, 0.8}), false);
  const auto out = preprocess({face}, spec, {});
  EXPECT_EQ(out.width, 320);
  EXPECT_EQ(out.height, 256);
  EXPECT_EQ(modality_size(PreprocModality::finger), (std::pair{160, 80}));
  EXPECT_EQ(modality_size(PreprocModality::iris_thermal), (std::pair{120, 160}));
}

TEST(Preprocess, ValuesInUnitRangeThenStandardized) {
  Frame f(64, 48, 1, 10);
  Rng rng(6);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(rng.below(1024));
  const auto spec = make_preprocess_spec(PreprocModality::finger, 10, Box{0.1, 0.1, 0.9, 0.9}, false);
  const auto out = preprocess({f}, spec, {});
  for (double v : out.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const ChannelStats st{0.5, 0.25};
  const auto z = preprocess({f}, spec, {}, &st);
  for (std::size_t i = 0; i < z.data.size(); ++i) EXPECT_NEAR(z.data[i], (out.data[i] - 0.5) / 0.25, 1e-12);
}

TEST(Preprocess, MissingDarkFramesRejected) {
  const auto spec = make_preprocess_spec(PreprocModality::finger, 12, Box{0, 0, 1, 1}, true);
  EXPECT_THROW(preprocess({constant_frame(8, 8, 12, 1)}, spec, {}), Error);
}

TEST(Preprocess, TimeAverage) {
  const auto avg = time_average({constant_frame(4, 4, 8, 10), constant_frame(4, 4, 8, 20), constant_frame(4, 4, 8, 33)});
  for (double v : avg.data) EXPECT_DOUBLE_EQ(v, 21.0);
}

TEST(Preprocess, FaceRoiGrowsUpward) {
  const auto r = face_roi(Box{0.3, 0.2, 0.7, 0.6});
  EXPECT_DOUBLE_EQ(r.x0, 0.3);
  EXPECT_DOUBLE_EQ(r.x1, 0.7);
  EXPECT_DOUBLE_EQ(r.y1, 0.6);
  EXPECT_NEAR(r.y0, 0.1, 1e-12);
}
