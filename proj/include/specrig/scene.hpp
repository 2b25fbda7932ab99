#pragma once

// Synthetic spectral scenes: bona-fide and presentation-attack presets for
// the finger, face and iris suites, plus a checkerboard calibration target.
//
// Maps are stored at scene resolution in normalized coordinates [0,1]^2;
// cameras sample them through their view matrices.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "specrig/error.hpp"
#include "specrig/random.hpp"
#include "specrig/spectral.hpp"

namespace specrig {

struct MaterialSpec {
  std::string name;
  Spectrum reflectance;
  double transmittance = 0.0;
  bool is_bona_fide = false;
  std::string category;
};

/// Axis-aligned box in normalized coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
};

/// Circle in normalized coordinates; the radius is relative to the width.
struct Circle {
  double cx = 0.5, cy = 0.5, r = 0.0;
};

struct SpectralScene {
  std::string preset;
  int width = 0;
  int height = 0;
  std::vector<MaterialSpec> materials;  // index 0 is what lies outside the scene
  std::vector<std::uint8_t> material_map;
  std::vector<float> texture;           // multiplicative shading/detail, around 1
  Spectrum ambient = zero_spectrum();
  std::vector<float> flow_map;          // LSCI flow speed, >= 0
  std::vector<float> temperature_map;   // kelvin
  std::vector<float> thickness_map;     // optical thickness for transmission
  std::vector<std::uint8_t> vein_mask;
  double background_kelvin = 295.0;

  bool is_bona_fide = false;
  std::string category;  // PAI category or "bona_fide"

  std::optional<Box> face_box;
  std::optional<Circle> iris_circle;
  // Inner checkerboard corners (normalized), row-major over the board.
  int board_cols = 0;
  int board_rows = 0;
  std::vector<std::array<double, 2>> corners;

  SpectralScene() = default;
  SpectralScene(int w, int h)
      : width(w), height(h),
        material_map(static_cast<std::size_t>(w) * h, 0),
        texture(static_cast<std::size_t>(w) * h, 1.0f),
        flow_map(static_cast<std::size_t>(w) * h, 0.0f),
        temperature_map(static_cast<std::size_t>(w) * h, 295.0f),
        thickness_map(static_cast<std::size_t>(w) * h, 0.0f),
        vein_mask(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t pixel_count() const { return material_map.size(); }

  std::uint8_t add_material(MaterialSpec m) {
    if (materials.size() >= 255) throw Error("scene material table full");
    materials.push_back(std::move(m));
    return static_cast<std::uint8_t>(materials.size() - 1);
  }

  /// Throws if a map is inconsistent with the material table or value ranges.
  void validate(bool biological = true) const {
    const std::size_t n = static_cast<std::size_t>(width) * height;
    if (material_map.size() != n || texture.size() != n || flow_map.size() != n || temperature_map.size() != n ||
        thickness_map.size() != n || vein_mask.size() != n)
      throw Error("scene maps do not match " + std::to_string(width) + "x" + std::to_string(height));
    for (auto m : material_map)
      if (m >= materials.size()) throw Error("material index out of range");
    for (auto v : flow_map)
      if (!(v >= 0.0f)) throw Error("negative flow");
    if (biological)
      for (auto t : temperature_map)
        if (t < 273.0f || t > 315.0f) throw Error("temperature outside [273, 315] K");
    for (const auto& m : materials) {
      if (m.transmittance < 0.0 || m.transmittance > 1.0) throw Error("transmittance outside [0,1] for " + m.name);
      for (int b = 0; b < kReflectiveBands; ++b)
        if (m.reflectance[b] < 0.0 || m.reflectance[b] > 1.0) throw Error("reflectance outside [0,1] for " + m.name);
    }
  }
};

/// Seeds of one presentation: who is presented, and how.
struct PresetSeeds {
  std::uint64_t subject = 0;
  std::uint64_t presentation = 0;
};

// ---------------------------------------------------------------------------

namespace detail {

inline void clamp_unit(Spectrum& s) {
  for (int b = 0; b < kReflectiveBands; ++b) s[b] = std::clamp(s[b], 0.0, 1.0);
}

// Visible darkening by melanin-like pigment, fading out towards the NIR.
inline double melanin_factor(double nm, double m) { return 1.0 - 0.7 * m * std::exp(-(nm - 400.0) / 250.0); }

inline MaterialSpec base_spec(const BaseMaterial& b) {
  return {b.name, b.reflectance, b.transmittance, b.bona_fide, b.bona_fide ? "bona_fide" : b.category};
}

/// One physical instance of a library material: tone, brightness and tilt jitter.
inline MaterialSpec instance(const std::string& name, double tone, Rng& rng) {
  const auto& lib = SpectralLibrary::instance();
  const auto& b = lib.material(name);
  MaterialSpec m = base_spec(b);
  const double gain = 1.0 + rng.uniform(-0.04, 0.04);
  const double tilt = rng.uniform(-0.04, 0.04);
  for (int i = 0; i < kReflectiveBands; ++i) {
    const double nm = band_center_nm(i);
    double r = m.reflectance[i] * gain * (1.0 + tilt * (nm - 1000.0) / 700.0);
    if (b.melanin || b.pigment) r *= melanin_factor(nm, tone);
    m.reflectance[i] = r;
  }
  clamp_unit(m.reflectance);
  return m;
}

/// Transparent film over live skin: skin seen twice through the film plus the film's own reflection.
inline MaterialSpec overlay_on(const MaterialSpec& skin, Rng& rng) {
  const auto& film = SpectralLibrary::instance().material("transparent_overlay");
  MaterialSpec m = base_spec(film);
  const double thick = rng.uniform(0.8, 1.2);
  for (int i = 0; i < kReflectiveBands; ++i) {
    const double t = std::pow(film.film_transmittance[i], thick);
    m.reflectance[i] = skin.reflectance[i] * t * t + film.reflectance[i] * thick;
  }
  clamp_unit(m.reflectance);
  m.transmittance = skin.transmittance * film.transmittance;
  return m;
}

/// Printed reproduction of `orig` on paper: ink absorbs in the visible and
/// becomes transparent in the SWIR.
inline MaterialSpec printed(const MaterialSpec& orig, const MaterialSpec& paper) {
  auto vis_mean = [](const Spectrum& s) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < kReflectiveBands; ++i)
      if (band_center_nm(i) < 700.0) sum += s[i], ++n;
    return sum / n;
  };
  const double ink = std::clamp(1.0 - vis_mean(orig.reflectance) / vis_mean(paper.reflectance), 0.0, 0.95);
  MaterialSpec m = paper;
  m.name = "print_of_" + orig.name;
  for (int i = 0; i < kReflectiveBands; ++i) {
    const double nm = band_center_nm(i);
    const double w = nm < 700.0 ? 1.0 : std::max(0.25, 1.0 - (nm - 700.0) / 400.0);
    m.reflectance[i] = paper.reflectance[i] * (1.0 - ink * w);
  }
  clamp_unit(m.reflectance);
  return m;
}

inline MaterialSpec flat_material(const std::string& name, double r, const std::string& category) {
  MaterialSpec m;
  m.name = name;
  m.reflectance = zero_spectrum();
  for (int i = 0; i < kReflectiveBands; ++i) m.reflectance[i] = r;
  m.category = category;
  return m;
}

/// Smooth random field in [-1, 1]: bilinear interpolation of a cells x cells lattice.
inline std::vector<float> value_noise(int w, int h, int cells, Rng& rng) {
  std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  std::vector<float> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    const double gy = (y + 0.5) / h * cells;
    const int iy = std::min(cells - 1, static_cast<int>(gy));
    double fy = gy - iy;
    fy = fy * fy * (3.0 - 2.0 * fy);
    for (int x = 0; x < w; ++x) {
      const double gx = (x + 0.5) / w * cells;
      const int ix = std::min(cells - 1, static_cast<int>(gx));
      double fx = gx - ix;
      fx = fx * fx * (3.0 - 2.0 * fx);
      auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(b) * (cells + 1) + a]; };
      const double top = L(ix, iy) * (1 - fx) + L(ix + 1, iy) * fx;
      const double bot = L(ix, iy + 1) * (1 - fx) + L(ix + 1, iy + 1) * fx;
      out[static_cast<std::size_t>(y) * w + x] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return out;
}

inline Spectrum flat_ambient(double vis, double nir, double swir) {
  Spectrum a = zero_spectrum();
  for (int i = 0; i < kReflectiveBands; ++i) {
    const double nm = band_center_nm(i);
    a[i] = nm < 700.0 ? vis : nm < 1000.0 ? nir : swir;
  }
  return a;
}

// --- finger -------------------------------------------------------------

inline constexpr int kFingerW = 320;
inline constexpr int kFingerH = 160;

inline SpectralScene finger_scene(const std::string& kind, PresetSeeds seeds) {
  Rng subj(hash_combine(seeds.subject, 0xF1));
  Rng pose(hash_combine(seeds.presentation, 0xF2));
  Rng mat(hash_combine(hash_combine(seeds.subject, seeds.presentation), 0xF3));

  SpectralScene s(kFingerW, kFingerH);
  s.preset = "finger/" + kind;
  s.ambient = flat_ambient(0.0006, 0.0004, 0.0002);
  s.add_material(instance("slit_holder", 0.0, mat));

  const double tone = subj.uniform(0.05, 0.95);
  const double ry = subj.uniform(0.26, 0.30) * kFingerH;
  const double ridge_period = subj.uniform(5.5, 7.5);
  const double flow_base = subj.uniform(2.0, 5.0);
  const auto ridge_warp = value_noise(kFingerW, kFingerH, 6, subj);
  struct Vein { double y0, amp, wavelength, phase, slope; };
  std::vector<Vein> veins(3 + subj.below(3));
  for (auto& v : veins)
    v = {subj.uniform(-0.55, 0.55), subj.uniform(2.0, 7.0), subj.uniform(60.0, 160.0),
         subj.uniform(0.0, 2.0 * std::numbers::pi), subj.uniform(-0.06, 0.06)};
  const auto shade = value_noise(kFingerW, kFingerH, 8, mat);

  const double cy = (0.5 + pose.uniform(-0.03, 0.03)) * kFingerH;
  const double tip = (0.06 + pose.uniform(-0.02, 0.02)) * kFingerW;
  const double crease = tip + 0.5 * (kFingerW - tip) + pose.uniform(-4.0, 4.0);

  const bool live = kind == "bona_fide" || kind == "transparent_overlay";
  MaterialSpec skin = instance("skin", tone, mat);
  MaterialSpec finger_mat;
  if (kind == "bona_fide") {
    finger_mat = skin;
  } else if (kind == "transparent_overlay") {
    finger_mat = overlay_on(skin, mat);
  } else {
    finger_mat = instance(kind, mat.uniform(0.05, 0.95), mat);
  }
  const double ridge_amp = kind == "playdoh" ? 0.025 : kind == "prosthetic" ? 0.04 : 0.07;
  s.is_bona_fide = kind == "bona_fide";
  s.category = s.is_bona_fide ? "bona_fide" : finger_mat.category;
  const auto fm = s.add_material(finger_mat);
  const double pai_kelvin = 295.0 + mat.uniform(-0.5, 1.0);

  for (int y = 0; y < kFingerH; ++y) {
    const double dy = y + 0.5 - cy;
    if (std::abs(dy) >= ry) continue;
    const double half = std::sqrt(ry * ry - dy * dy);
    const double z = half / ry;  // 1 on the finger axis, 0 at its edges
    for (int x = 0; x < kFingerW; ++x) {
      const double lx = x + 0.5 - tip;
      if (lx < ry - half) continue;
      const std::size_t i = s.index(x, y);
      s.material_map[i] = fm;
      s.thickness_map[i] = static_cast<float>(1.0 + 0.9 * z);
      double t = (0.78 + 0.22 * z) * (1.0 + 0.04 * shade[i]);
      t *= 1.0 + ridge_amp * std::sin(2.0 * std::numbers::pi * (lx / ridge_period + 0.9 * ridge_warp[i]));
      const double dc = x + 0.5 - crease;
      t *= 1.0 - 0.18 * std::exp(-0.5 * dc * dc / 4.0);
      s.texture[i] = static_cast<float>(t);
      s.temperature_map[i] = static_cast<float>(live ? 304.0 + 1.5 * z : pai_kelvin);
      if (!live) continue;
      bool vein = false;
      for (const auto& v : veins) {
        const double vy = v.y0 * ry + v.amp * std::sin(2.0 * std::numbers::pi * lx / v.wavelength + v.phase) +
                          v.slope * lx;
        if (std::abs(dy - vy) < 1.7 && lx > ry * 0.6) vein = true;
      }
      s.vein_mask[i] = vein ? 1 : 0;
      s.flow_map[i] = static_cast<float>(flow_base * (0.6 + 0.4 * z) + (vein ? 6.0 : 0.0));
    }
  }
  return s;
}

// --- face ---------------------------------------------------------------

inline constexpr int kFaceSize = 256;

inline SpectralScene face_scene(const std::string& kind, PresetSeeds seeds) {
  Rng subj(hash_combine(seeds.subject, 0xFA1));
  Rng pose(hash_combine(seeds.presentation, 0xFA2));
  Rng mat(hash_combine(hash_combine(seeds.subject, seeds.presentation), 0xFA3));

  SpectralScene s(kFaceSize, kFaceSize);
  s.preset = "face/" + kind;
  s.ambient = flat_ambient(0.004, 0.0015, 0.0003);
  s.add_material(instance("background", 0.0, mat));

  const double tone = subj.uniform(0.05, 0.95);
  const double rx = subj.uniform(0.20, 0.24);
  const double ry = subj.uniform(0.28, 0.32);
  const double cx = 0.5 + pose.uniform(-0.03, 0.03);
  const double cy = 0.53 + pose.uniform(-0.03, 0.03);
  const auto shade = value_noise(kFaceSize, kFaceSize, 10, mat);

  MaterialSpec skin = instance("skin", tone, mat);
  MaterialSpec lips = skin;
  lips.name = "lips";
  for (int i = 0; i < kReflectiveBands; ++i)
    if (band_center_nm(i) < 620.0) lips.reflectance[i] *= 0.75;
  const MaterialSpec hair = instance("hair", 0.0, mat);
  const MaterialSpec sclera = instance("sclera", 0.0, mat);
  const MaterialSpec iris = instance("iris_tissue", subj.uniform(0.0, 1.0), mat);
  const MaterialSpec pupil = instance("pupil", 0.0, mat);

  enum Part : std::uint8_t { kNone, kHair, kSkin, kBrow, kLips, kSclera, kIris, kPupil, kParts };
  std::vector<std::uint8_t> part(s.pixel_count(), kNone);
  for (int y = 0; y < kFaceSize; ++y) {
    const double v = (y + 0.5) / kFaceSize;
    for (int x = 0; x < kFaceSize; ++x) {
      const double u = (x + 0.5) / kFaceSize;
      const double fx = (u - cx) / rx, fy = (v - cy) / ry;
      const double hx = (u - cx) / (rx + 0.03), hy = (v - cy + 0.06) / (ry + 0.03);
      std::uint8_t p = kNone;
      if (hx * hx + hy * hy < 1.0 && fy < -0.45) p = kHair;
      if (fx * fx + fy * fy < 1.0 && !(p == kHair && fy < -0.62)) p = kSkin;
      if (p == kSkin) {
        for (double side : {-1.0, 1.0}) {
          const double ex = cx + side * 0.4 * rx, ey = cy - 0.12 * ry;
          if (std::abs(v - (ey - 0.14 * ry)) < 0.012 && std::abs(u - ex) < 0.25 * rx) p = kBrow;
          const double sx = (u - ex) / (0.22 * rx), sy = (v - ey) / (0.07 * ry);
          if (sx * sx + sy * sy < 1.0) {
            const double d = std::hypot(u - ex, v - ey);
            p = d < 0.035 * rx ? kPupil : d < 0.085 * rx ? kIris : kSclera;
          }
        }
        const double mx = (u - cx) / (0.3 * rx), my = (v - (cy + 0.5 * ry)) / (0.06 * ry);
        if (mx * mx + my * my < 1.0) p = kLips;
      }
      part[s.index(x, y)] = p;
    }
  }
  s.face_box = Box{cx - rx, cy - ry, cx + rx, cy + ry};

  // Per part: material, temperature.
  std::array<MaterialSpec, kParts> mats{s.materials[0], hair, skin, hair, lips, sclera, iris, pupil};
  std::array<double, kParts> kelvin{295.0, 300.5, 307.0, 303.0, 307.5, 306.0, 306.0, 306.0};
  s.is_bona_fide = kind == "bona_fide";
  s.category = "bona_fide";
  std::function<bool(int, int)> covered = [](int, int) { return false; };
  if (kind == "plastic_mask" || kind == "silicone_mask") {
    const MaterialSpec mask = instance(kind, mat.uniform(0.05, 0.95), mat);
    MaterialSpec brow = mask;
    for (auto& r : brow.reflectance) r *= 0.35;
    mats[kSkin] = mask;
    mats[kLips] = mask;
    mats[kBrow] = brow;
    const double mk = kind == "plastic_mask" ? 295.0 + mat.uniform(0.0, 1.0) : 299.0 + mat.uniform(0.0, 2.0);
    kelvin[kSkin] = kelvin[kLips] = kelvin[kBrow] = mk;
    s.category = mask.category;
  } else if (kind == "print") {
    const MaterialSpec paper = instance("paper_print", 0.0, mat);
    for (int p = 0; p < kParts; ++p) {
      mats[p] = printed(mats[p], paper);
      kelvin[p] = 294.5;
    }
    s.category = paper.category;
    const Box sheet{cx - 1.25 * rx, cy - 1.3 * ry, cx + 1.25 * rx, cy + 1.15 * ry};
    covered = [sheet](int x, int y) {
      const double u = (x + 0.5) / kFaceSize, v = (y + 0.5) / kFaceSize;
      return u >= sheet.x0 && u <= sheet.x1 && v >= sheet.y0 && v <= sheet.y1;
    };
  } else if (kind != "bona_fide") {
    throw Error("unknown preset 'face/" + kind + "'");
  }

  std::array<std::uint8_t, kParts> idx{};
  idx[kNone] = 0;
  for (int p = 1; p < kParts; ++p) idx[p] = s.add_material(mats[p]);
  std::uint8_t sheet_bg = 0;
  if (kind == "print") sheet_bg = s.add_material(mats[kNone]);

  for (int y = 0; y < kFaceSize; ++y) {
    for (int x = 0; x < kFaceSize; ++x) {
      const std::size_t i = s.index(x, y);
      const auto p = part[i];
      if (p == kNone) {
        if (covered(x, y)) {
          s.material_map[i] = sheet_bg;
          s.temperature_map[i] = 294.5f;
        }
        continue;
      }
      s.material_map[i] = idx[p];
      const double u = (x + 0.5) / kFaceSize, v = (y + 0.5) / kFaceSize;
      const double fx = (u - cx) / rx, fy = (v - cy) / ry;
      const double z = std::sqrt(std::max(0.0, 1.0 - fx * fx - fy * fy));
      s.texture[i] = static_cast<float>((0.75 + 0.25 * z) * (1.0 + 0.05 * shade[i]));
      s.temperature_map[i] = static_cast<float>(kelvin[p] + (p == kSkin && s.is_bona_fide ? 0.8 * (z - 0.5) : 0.0));
    }
  }
  return s;
}

// --- iris ---------------------------------------------------------------

inline constexpr int kIrisSize = 256;

inline SpectralScene iris_scene(const std::string& kind, PresetSeeds seeds) {
  Rng subj(hash_combine(seeds.subject, 0x151));
  Rng pose(hash_combine(seeds.presentation, 0x152));
  Rng mat(hash_combine(hash_combine(seeds.subject, seeds.presentation), 0x153));

  SpectralScene s(kIrisSize, kIrisSize);
  s.preset = "iris/" + kind;
  s.ambient = flat_ambient(0.002, 0.0005, 0.0001);

  const double tone = subj.uniform(0.05, 0.95);
  const double eye_color = subj.uniform(0.0, 1.0);
  const double iris_r = subj.uniform(0.12, 0.14);
  const int spokes = 20 + static_cast<int>(subj.below(20));
  const double spoke_phase = subj.uniform(0.0, 2.0 * std::numbers::pi);
  const auto crypts = value_noise(kIrisSize, kIrisSize, 24, subj);
  const double cx = 0.5 + pose.uniform(-0.03, 0.03);
  const double cy = 0.5 + pose.uniform(-0.03, 0.03);
  const double pupil_r = iris_r * pose.uniform(0.3, 0.45);
  const double open_rx = 0.32, open_ry = 0.17 + pose.uniform(-0.02, 0.02);

  MaterialSpec skin = instance("skin", tone, mat);
  MaterialSpec lashes = instance("hair", 0.0, mat);
  MaterialSpec sclera = instance("sclera", 0.0, mat);
  MaterialSpec iris = instance("iris_tissue", eye_color, mat);
  MaterialSpec pupil = instance("pupil", 0.0, mat);
  double skin_k = 306.0, eye_k = 305.5;
  s.is_bona_fide = kind == "bona_fide";
  s.category = "bona_fide";
  if (kind == "fake_eye") {
    skin = instance("plastic_mask", tone, mat);
    lashes = skin;
    sclera = flat_material("acrylic_sclera", 0.62, "fake_eye");
    iris = instance("fake_eye_acrylic", eye_color, mat);
    pupil = flat_material("acrylic_pupil", 0.04, "fake_eye");
    skin_k = eye_k = 295.0 + mat.uniform(0.0, 1.0);
    s.category = "fake_eye";
  } else if (kind == "contact_lens") {
    s.category = "contact_lens";
  } else if (kind != "bona_fide") {
    throw Error("unknown preset 'iris/" + kind + "'");
  }
  s.add_material(skin);
  const auto i_lash = s.add_material(lashes);
  const auto i_sclera = s.add_material(sclera);
  const auto i_iris = s.add_material(iris);
  const auto i_pupil = s.add_material(pupil);
  std::uint8_t i_lens = 0;
  Rng lens_rng(hash_combine(seeds.presentation, 0x154));
  const double dot_cell = 0.012;
  const std::uint64_t lens_key = lens_rng();
  if (kind == "contact_lens") i_lens = s.add_material(instance("lens_pigment", mat.uniform(0.3, 1.0), mat));

  const auto shade = value_noise(kIrisSize, kIrisSize, 8, mat);
  for (int y = 0; y < kIrisSize; ++y) {
    const double v = (y + 0.5) / kIrisSize;
    for (int x = 0; x < kIrisSize; ++x) {
      const double u = (x + 0.5) / kIrisSize;
      const std::size_t i = s.index(x, y);
      const double ex = (u - cx) / open_rx, ey = (v - cy) / open_ry;
      const double lid = ex * ex + ey * ey;
      s.texture[i] = static_cast<float>(1.0 + 0.05 * shade[i]);
      s.temperature_map[i] = static_cast<float>(skin_k);
      if (lid >= 1.0) {
        if (lid < 1.18 && ey < 0.0) s.material_map[i] = i_lash;
        continue;
      }
      s.temperature_map[i] = static_cast<float>(eye_k);
      const double d = std::hypot(u - cx, v - cy);
      if (d < pupil_r) {
        s.material_map[i] = i_pupil;
      } else if (d < iris_r) {
        s.material_map[i] = i_iris;
        const double theta = std::atan2(v - cy, u - cx);
        s.texture[i] = static_cast<float>((1.0 + 0.18 * std::sin(spokes * theta + spoke_phase)) *
                                          (1.0 + 0.15 * crypts[i]) * (0.85 + 0.3 * (d - pupil_r) / (iris_r - pupil_r)));
        if (kind == "contact_lens" && d > pupil_r * 1.1) {
          const auto gx = static_cast<std::int64_t>(std::floor(u / dot_cell));
          const auto gy = static_cast<std::int64_t>(std::floor(v / dot_cell));
          const std::uint64_t h = hash_combine(hash_combine(lens_key, static_cast<std::uint64_t>(gx)),
                                               static_cast<std::uint64_t>(gy));
          const double ox = (gx + 0.5) * dot_cell, oy = (gy + 0.5) * dot_cell;
          if ((h & 3) != 0 && std::hypot(u - ox, v - oy) < dot_cell * 0.42) {
            s.material_map[i] = i_lens;
            s.texture[i] = 1.0f;
          }
        }
      } else {
        s.material_map[i] = i_sclera;
      }
    }
  }
  s.iris_circle = Circle{cx, cy, iris_r};
  return s;
}

// --- calibration --------------------------------------------------------

inline SpectralScene checkerboard_scene(PresetSeeds seeds) {
  Rng pose(hash_combine(seeds.presentation, 0xCB));
  constexpr int kSize = 256;
  SpectralScene s(kSize, kSize);
  s.preset = "calib/checkerboard";
  s.category = "calibration";
  s.ambient = flat_ambient(0.003, 0.003, 0.003);  // halogen floods every band
  s.add_material(flat_material("backdrop", 0.3, "scene"));
  const auto white = s.add_material(flat_material("checker_white", 0.8, "scene"));
  const auto black = s.add_material(flat_material("checker_black", 0.05, "scene"));
  s.board_cols = 9;
  s.board_rows = 7;
  const double x0 = 0.15 + pose.uniform(-0.02, 0.02), y0 = 0.2 + pose.uniform(-0.02, 0.02);
  const double sq_w = 0.7 / s.board_cols, sq_h = 0.6 / s.board_rows;
  for (int y = 0; y < kSize; ++y) {
    const double v = (y + 0.5) / kSize;
    for (int x = 0; x < kSize; ++x) {
      const double u = (x + 0.5) / kSize;
      const std::size_t i = s.index(x, y);
      const int cxq = static_cast<int>(std::floor((u - x0) / sq_w));
      const int cyq = static_cast<int>(std::floor((v - y0) / sq_h));
      if (cxq < 0 || cyq < 0 || cxq >= s.board_cols || cyq >= s.board_rows) continue;
      const bool dark = (cxq + cyq) % 2 == 0;
      s.material_map[i] = dark ? black : white;
      // Dark squares absorb more of the halogen light and run warmer.
      s.temperature_map[i] = dark ? 303.0f : 298.0f;
    }
  }
  for (int r = 1; r < s.board_rows; ++r)
    for (int c = 1; c < s.board_cols; ++c) s.corners.push_back({x0 + c * sq_w, y0 + r * sq_h});
  return s;
}

}  // namespace detail

/// Every preset make_preset() understands.
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{
      "finger/bona_fide", "finger/silicone",     "finger/glue",          "finger/pdms",
      "finger/playdoh",   "finger/gelatin",      "finger/prosthetic",    "finger/transparent_overlay",
      "face/bona_fide",   "face/plastic_mask",   "face/silicone_mask",   "face/print",
      "iris/bona_fide",   "iris/fake_eye",       "iris/contact_lens",    "calib/checkerboard"};
  return names;
}

/// Randomized instance of a named scene. The subject seed fixes identity
/// (skin tone, veins, iris pattern); the presentation seed fixes pose and
/// material jitter.
inline SpectralScene make_preset(const std::string& name, PresetSeeds seeds) {
  const auto slash = name.find('/');
  const std::string suite = name.substr(0, slash);
  const std::string kind = slash == std::string::npos ? "" : name.substr(slash + 1);
  if (std::find(preset_names().begin(), preset_names().end(), name) == preset_names().end())
    throw Error("unknown preset '" + name + "'");
  if (suite == "finger") return detail::finger_scene(kind, seeds);
  if (suite == "face") return detail::face_scene(kind, seeds);
  if (suite == "iris") return detail::iris_scene(kind, seeds);
  return detail::checkerboard_scene(seeds);
}

inline SpectralScene make_preset(const std::string& name, std::uint64_t seed = 0) {
  return make_preset(name, PresetSeeds{seed, seed});
}

/// Uniform single-material scene, handy for tests.
inline SpectralScene uniform_scene(int w, int h, MaterialSpec m, double kelvin = 295.0, double flow = 0.0) {
  SpectralScene s(w, h);
  s.preset = "uniform";
  s.category = m.is_bona_fide ? "bona_fide" : m.category;
  s.is_bona_fide = m.is_bona_fide;
  s.add_material(std::move(m));
  std::fill(s.temperature_map.begin(), s.temperature_map.end(), static_cast<float>(kelvin));
  std::fill(s.flow_map.begin(), s.flow_map.end(), static_cast<float>(flow));
  return s;
}

}  // namespace specrig
