#pragma once

// Planar homography estimation, bicubic resampling and the per-modality
// preprocessing chain (dark subtraction, ROI crop, resize, normalization).

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "specrig/error.hpp"
#include "specrig/frame.hpp"
#include "specrig/scene.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Correspondence {
  Point2 src;
  Point2 dst;
};

/// 3x3 projective map, scaled so the bottom-right element is 1 when nonzero.
struct Homography {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  static Homography identity() { return {}; }

  static Homography from(const Eigen::Matrix3d& raw) {
    Homography h{raw};
    h.normalize();
    return h;
  }

  void normalize() {
    if (std::abs(m(2, 2)) > 1e-12) m /= m(2, 2);
    else if (m.norm() > 0.0) m /= m.norm();
  }

  Point2 apply(Point2 p) const {
    const Eigen::Vector3d v = m * Eigen::Vector3d(p.x, p.y, 1.0);
    return {v.x() / v.z(), v.y() / v.z()};
  }

  Homography inverse() const {
    if (!(std::abs(m.determinant()) >= 1e-12)) throw GeometryError("homography is not invertible");
    return from(m.inverse());
  }
};

struct HomographyFit {
  Homography H;
  double rms = 0.0;  // reprojection error in destination units
};

inline double reprojection_rms(const Homography& H, std::span<const Correspondence> pairs) {
  if (pairs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : pairs) {
    const Point2 p = H.apply(c.src);
    s += (p.x - c.dst.x) * (p.x - c.dst.x) + (p.y - c.dst.y) * (p.y - c.dst.y);
  }
  return std::sqrt(s / pairs.size());
}

namespace detail {

// Similarity taking the points' centroid to the origin and their mean
// distance to sqrt(2).
inline Eigen::Matrix3d normalizing_transform(const std::vector<Point2>& pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) cx += p.x, cy += p.y;
  cx /= pts.size();
  cy /= pts.size();
  double d = 0;
  for (const auto& p : pts) d += std::hypot(p.x - cx, p.y - cy);
  d /= pts.size();
  if (d <= 0.0) throw GeometryError("degenerate configuration: all points coincide");
  const double s = std::sqrt(2.0) / d;
  Eigen::Matrix3d T;
  T << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return T;
}

inline bool collinear(Point2 a, Point2 b, Point2 c, double scale) {
  const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  return std::abs(cross) <= 1e-12 * scale * scale;
}

}  // namespace detail

/// Normalized direct linear transform over >= 4 correspondences.
inline HomographyFit estimate_homography(std::span<const Correspondence> pairs) {
  if (pairs.size() < 4) throw GeometryError("degenerate configuration: need at least 4 point pairs");
  std::vector<Point2> src, dst;
  for (const auto& c : pairs) src.push_back(c.src), dst.push_back(c.dst);
  const Eigen::Matrix3d Ts = detail::normalizing_transform(src);
  const Eigen::Matrix3d Td = detail::normalizing_transform(dst);

  // Source points must span the plane; with exactly four, no three may be collinear.
  double scale = 0;
  for (const auto& p : src) scale = std::max({scale, std::abs(p.x), std::abs(p.y), 1.0});
  if (pairs.size() == 4) {
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        for (int k = j + 1; k < 4; ++k)
          if (detail::collinear(src[i], src[j], src[k], scale))
            throw GeometryError("degenerate configuration: three source points are collinear");
  }

  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::MatrixXd A(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d s = Ts * Eigen::Vector3d(src[i].x, src[i].y, 1.0);
    const Eigen::Vector3d d = Td * Eigen::Vector3d(dst[i].x, dst[i].y, 1.0);
    const double x = s.x() / s.z(), y = s.y() / s.z(), u = d.x() / d.z(), v = d.y() / d.z();
    A.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    A.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv.size() >= 8 && sv(7) <= 1e-10 * sv(0))
    throw GeometryError("degenerate configuration: correspondences do not determine a homography");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d H = Td.inverse() * Hn * Ts;
  if (std::abs(H.determinant()) < 1e-12 * std::pow(H.norm(), 3))
    throw GeometryError("degenerate configuration: estimated homography is singular");
  HomographyFit fit{Homography::from(H), 0.0};
  fit.rms = reprojection_rms(fit.H, pairs);
  return fit;
}

inline HomographyFit estimate_homography(const std::vector<Correspondence>& pairs) {
  return estimate_homography(std::span<const Correspondence>(pairs));
}

// ---------------------------------------------------------------------------
// Bicubic sampling

inline constexpr double kCubicA = -0.5;

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2 around a sample at fractional position t.
inline std::array<double, 4> cubic_weights(double t) {
  auto k = [](double x) {
    x = std::abs(x);
    if (x <= 1.0) return ((kCubicA + 2.0) * x - (kCubicA + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((kCubicA * x - 5.0 * kCubicA) * x + 8.0 * kCubicA) * x - 4.0 * kCubicA;
    return 0.0;
  };
  return {k(1.0 + t), k(t), k(1.0 - t), k(2.0 - t)};
}

namespace detail {

inline double sample_bicubic_clamped(const Image& img, double sx, double sy) {
  const double fx = std::floor(sx), fy = std::floor(sy);
  const auto wx = cubic_weights(sx - fx), wy = cubic_weights(sy - fy);
  const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
  double acc = 0.0;
  for (int j = 0; j < 4; ++j) {
    if (wy[j] == 0.0) continue;
    const int yy = std::clamp(iy - 1 + j, 0, img.height - 1);
    double row = 0.0;
    for (int i = 0; i < 4; ++i) {
      if (wx[i] == 0.0) continue;
      row += wx[i] * img.at(yy, std::clamp(ix - 1 + i, 0, img.width - 1));
    }
    acc += wy[j] * row;
  }
  return acc;
}

}  // namespace detail

/// Resamples the source region [x0,x1) x [y0,y1) (pixel units) to out_w x out_h,
/// separable Catmull-Rom with edge clamping.
inline Image resize_region(const Image& img, double x0, double y0, double x1, double y1, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw Error("output size must be >= 1");
  const double sx = (x1 - x0) / out_w, sy = (y1 - y0) / out_h;
  // Horizontal pass into an intermediate of out_w x in_h, then vertical.
  Image tmp(out_w, img.height);
  for (int x = 0; x < out_w; ++x) {
    const double src = x0 + (x + 0.5) * sx - 0.5;
    const double f = std::floor(src);
    const auto w = cubic_weights(src - f);
    const int ix = static_cast<int>(f);
    for (int y = 0; y < img.height; ++y) {
      double acc = 0.0;
      for (int i = 0; i < 4; ++i)
        if (w[i] != 0.0) acc += w[i] * img.at(y, std::clamp(ix - 1 + i, 0, img.width - 1));
      tmp.at(y, x) = acc;
    }
  }
  Image out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const double src = y0 + (y + 0.5) * sy - 0.5;
    const double f = std::floor(src);
    const auto w = cubic_weights(src - f);
    const int iy = static_cast<int>(f);
    for (int x = 0; x < out_w; ++x) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j)
        if (w[j] != 0.0) acc += w[j] * tmp.at(std::clamp(iy - 1 + j, 0, img.height - 1), x);
      out.at(y, x) = acc;
    }
  }
  return out;
}

inline Image resize_bicubic(const Image& img, int out_w, int out_h) {
  return resize_region(img, 0.0, 0.0, img.width, img.height, out_w, out_h);
}

/// Inverse-mapped bicubic warp; H maps input pixel coordinates to output
/// pixel coordinates. Samples falling outside the input are 0.
inline Image warp_image(const Image& img, const Homography& H, int out_w, int out_h) {
  const Homography inv = H.inverse();
  Image out(out_w, out_h);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Point2 s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!(s.x >= 0.0 && s.y >= 0.0 && s.x <= img.width - 1 && s.y <= img.height - 1)) continue;
      out.at(y, x) = detail::sample_bicubic_clamped(img, s.x, s.y);
    }
  return out;
}

inline Frame warp_image(const Frame& f, const Homography& H, int out_w, int out_h) {
  Frame out(out_w, out_h, f.channels, f.bit_depth);
  out.timestamp_ms = f.timestamp_ms;
  out.illumination_tag = f.illumination_tag;
  out.dataset = f.dataset;
  out.device = f.device;
  out.sequence_index = f.sequence_index;
  out.exposure_us = f.exposure_us;
  const double full = f.max_value();
  for (int c = 0; c < f.channels; ++c) {
    const Image w = warp_image(channel_image(f, c), H, out_w, out_h);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) out.at(y, x, c) = static_cast<std::uint16_t>(std::clamp(std::round(w.at(y, x)), 0.0, full));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

enum class PreprocModality { face, finger, iris, iris_thermal };

struct PreprocessSpec {
  PreprocModality modality = PreprocModality::finger;
  int out_w = 160;
  int out_h = 80;
  bool subtract_dark = true;
  int bit_depth = 8;
  Box roi;  // normalized image coordinates
};

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Output size per modality.
inline std::pair<int, int> modality_size(PreprocModality m) {
  switch (m) {
    case PreprocModality::face: return {320, 256};
    case PreprocModality::finger: return {160, 80};
    case PreprocModality::iris: return {256, 256};
    case PreprocModality::iris_thermal: return {120, 160};
  }
  return {1, 1};
}

/// Scene-normalized box seen through a camera's view matrix (bounding box of the mapped corners).
inline Box map_box(const Box& b, const std::optional<ViewMatrix>& view) {
  if (!view) return b;
  const auto& m = *view;
  Box out{1e9, 1e9, -1e9, -1e9};
  for (double x : {b.x0, b.x1})
    for (double y : {b.y0, b.y1}) {
      const double w = m[6] * x + m[7] * y + m[8];
      const double u = (m[0] * x + m[1] * y + m[2]) / w, v = (m[3] * x + m[4] * y + m[5]) / w;
      out.x0 = std::min(out.x0, u), out.y0 = std::min(out.y0, v);
      out.x1 = std::max(out.x1, u), out.y1 = std::max(out.y1, v);
    }
  return out;
}

/// Face crop: the face box grown by 25% of its height toward the top.
inline Box face_roi(const Box& face) {
  return {face.x0, face.y0 - 0.25 * (face.y1 - face.y0), face.x1, face.y1};
}

/// Finger crop: the slit window from the fingertip to the frame edge.
inline Box finger_roi() { return {0.04, 0.2, 1.0, 0.8}; }

/// Iris crop: square around the iris circle (scene-normalized, square scene).
inline Box iris_roi(const Circle& c) { return {c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r}; }

/// Periocular window used for the thermal channel of the iris suite.
inline Box iris_thermal_roi(const Circle& c) { return {c.cx - 0.3, c.cy - 0.4, c.cx + 0.3, c.cy + 0.4}; }

inline PreprocessSpec make_preprocess_spec(PreprocModality m, int bit_depth, Box roi, bool subtract_dark) {
  PreprocessSpec s;
  s.modality = m;
  std::tie(s.out_w, s.out_h) = modality_size(m);
  s.bit_depth = bit_depth;
  s.roi = roi;
  s.subtract_dark = subtract_dark;
  return s;
}

/// Per-pixel mean of one channel over a set of frames.
inline Image time_average(const std::vector<Frame>& frames, int channel = 0) {
  if (frames.empty()) throw Error("no frames to average");
  Image acc(frames[0].width, frames[0].height);
  for (const auto& f : frames) {
    if (f.width != acc.width || f.height != acc.height) throw Error("frame shapes differ");
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x) acc.at(y, x) += f.at(y, x, channel);
  }
  for (auto& v : acc.data) v /= static_cast<double>(frames.size());
  return acc;
}

/// Dark subtraction (clamped at 0), ROI crop + bicubic resize, division by
/// the bit-depth full scale, and optional standardization.
inline Image preprocess(const std::vector<Frame>& frames, const PreprocessSpec& spec,
                        const std::vector<Frame>& dark_frames, const ChannelStats* stats = nullptr, int channel = 0) {
  Image img = time_average(frames, channel);
  if (spec.subtract_dark) {
    if (dark_frames.empty()) throw Error("preprocessing requires dark frames");
    const Image dark = time_average(dark_frames, channel);
    if (dark.width != img.width || dark.height != img.height) throw Error("dark frame shape differs");
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = std::max(0.0, img.data[i] - dark.data[i]);
  }
  const Box& r = spec.roi;
  Image out = resize_region(img, r.x0 * img.width, r.y0 * img.height, r.x1 * img.width, r.y1 * img.height,
                            spec.out_w, spec.out_h);
  const double full = static_cast<double>((1u << spec.bit_depth) - 1u);
  for (auto& v : out.data) v = std::clamp(v / full, 0.0, 1.0);
  if (stats)
    for (auto& v : out.data) v = (v - stats->mean) / (stats->std > 0.0 ? stats->std : 1.0);
  return out;
}

}  // namespace specrig
