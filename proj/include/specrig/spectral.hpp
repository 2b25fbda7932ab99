#pragma once

// Spectral discretization and the built-in material/sensor library.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/embedded_data.hpp"
#include "specrig/error.hpp"

namespace specrig {

inline constexpr int kReflectiveBands = 64;
inline constexpr int kBands = kReflectiveBands + 1;  // plus one LWIR pseudo-band
inline constexpr int kLwirBand = kReflectiveBands;
inline constexpr double kMinNm = 400.0;
inline constexpr double kMaxNm = 1700.0;
inline constexpr double kBandWidthNm = (kMaxNm - kMinNm) / kReflectiveBands;

using Spectrum = std::vector<double>;

inline double band_center_nm(int b) { return kMinNm + (b + 0.5) * kBandWidthNm; }

/// Reflective band containing `nm`, or -1 outside 400-1700 nm.
inline int band_of(double nm) {
  if (nm < kMinNm || nm > kMaxNm) return -1;
  return std::min(kReflectiveBands - 1, static_cast<int>((nm - kMinNm) / kBandWidthNm));
}

inline Spectrum zero_spectrum() { return Spectrum(kBands, 0.0); }

/// Piecewise-linear spectrum through (nm, value) anchors, flat beyond the ends.
inline Spectrum interpolate_spectrum(const std::vector<std::pair<double, double>>& anchors) {
  Spectrum s = zero_spectrum();
  if (anchors.empty()) return s;
  for (int b = 0; b < kReflectiveBands; ++b) {
    const double nm = band_center_nm(b);
    if (nm <= anchors.front().first) {
      s[b] = anchors.front().second;
    } else if (nm >= anchors.back().first) {
      s[b] = anchors.back().second;
    } else {
      for (std::size_t i = 1; i < anchors.size(); ++i) {
        if (nm <= anchors[i].first) {
          const auto [x0, y0] = anchors[i - 1];
          const auto [x1, y1] = anchors[i];
          s[b] = y0 + (y1 - y0) * (nm - x0) / (x1 - x0);
          break;
        }
      }
    }
  }
  return s;
}

/// Mean |a-b| over the reflective bands whose centers lie in [lo_nm, hi_nm].
inline double mean_abs_distance(const Spectrum& a, const Spectrum& b, double lo_nm, double hi_nm) {
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < kReflectiveBands; ++i) {
    const double nm = band_center_nm(i);
    if (nm < lo_nm || nm > hi_nm) continue;
    sum += std::abs(a[i] - b[i]);
    ++n;
  }
  return n ? sum / n : 0.0;
}

struct BaseMaterial {
  std::string name;
  std::string category;
  bool bona_fide = false;
  bool melanin = false;  // visible response modulated by the subject's skin tone
  bool pigment = false;  // colored to mimic a skin tone
  bool overlay = false;  // thin film over live skin
  double transmittance = 0.0;
  Spectrum reflectance;
  Spectrum film_transmittance;
};

enum class Modality { reflective, thermal, depth, lsci };

struct SensorEntry {
  std::string id;
  Modality modality = Modality::reflective;
  double dark_level = 0.0;
  double read_noise_sigma = 0.0;
  double gain = 1.0;
  std::vector<Spectrum> channels;
  double internal_emitter_nm = 0.0;
  double internal_power = 0.0;
  double depth_mm = 0.0;
  double reference_kelvin = 307.0;
};

/// Parsed form of data/materials.json (embedded at build time).
class SpectralLibrary {
 public:
  static const SpectralLibrary& instance() {
    static const SpectralLibrary lib(nlohmann::json::parse(embedded::kMaterialsJson));
    return lib;
  }

  explicit SpectralLibrary(const nlohmann::json& doc) {
    auto anchors = [](const nlohmann::json& a) {
      std::vector<std::pair<double, double>> out;
      for (const auto& p : a) out.emplace_back(p[0].get<double>(), p[1].get<double>());
      return out;
    };
    for (const auto& [name, m] : doc.at("materials").items()) {
      BaseMaterial bm;
      bm.name = name;
      bm.category = m.at("category").get<std::string>();
      bm.bona_fide = m.value("bona_fide", false);
      bm.melanin = m.value("melanin", false);
      bm.pigment = m.value("pigment", false);
      bm.overlay = m.value("overlay", false);
      bm.transmittance = m.value("transmittance", 0.0);
      bm.reflectance = interpolate_spectrum(anchors(m.at("reflectance")));
      if (m.contains("film_transmittance")) bm.film_transmittance = interpolate_spectrum(anchors(m["film_transmittance"]));
      materials_.emplace(name, std::move(bm));
    }
    for (const auto& [id, s] : doc.at("sensors").items()) {
      SensorEntry e;
      e.id = id;
      const auto mod = s.at("modality").get<std::string>();
      e.modality = mod == "thermal" ? Modality::thermal
                   : mod == "depth" ? Modality::depth
                   : mod == "lsci"  ? Modality::lsci
                                    : Modality::reflective;
      e.dark_level = s.value("dark_level", 0.0);
      e.read_noise_sigma = s.value("read_noise_sigma", 0.0);
      e.gain = s.value("gain", 1.0);
      e.internal_emitter_nm = s.value("internal_emitter_nm", 0.0);
      e.internal_power = s.value("internal_power", 0.0);
      e.depth_mm = s.value("depth_mm", 0.0);
      e.reference_kelvin = s.value("reference_kelvin", 307.0);
      for (const auto& ch : s.at("channels")) e.channels.push_back(interpolate_spectrum(anchors(ch)));
      sensors_.emplace(id, std::move(e));
    }
    led_fwhm_nm_ = doc.at("led").value("fwhm_nm", 35.0);
    led_slot_power_ = doc.at("led").value("slot_power", 0.125);
    laser_power_at_max_ = doc.at("laser").value("power_at_max", 1.0);
  }

  const BaseMaterial& material(const std::string& name) const {
    auto it = materials_.find(name);
    if (it == materials_.end()) throw Error("unknown material '" + name + "'");
    return it->second;
  }
  const std::map<std::string, BaseMaterial>& materials() const { return materials_; }

  const SensorEntry* sensor(const std::string& id) const {
    auto it = sensors_.find(id);
    return it == sensors_.end() ? nullptr : &it->second;
  }

  double led_fwhm_nm() const { return led_fwhm_nm_; }
  double led_slot_power() const { return led_slot_power_; }
  double laser_power_at_max() const { return laser_power_at_max_; }

 private:
  std::map<std::string, BaseMaterial> materials_;
  std::map<std::string, SensorEntry> sensors_;
  double led_fwhm_nm_ = 35.0;
  double led_slot_power_ = 0.125;
  double laser_power_at_max_ = 1.0;
};

/// Gaussian LED emission with total power `power`, spread over the bands.
inline void add_led(Spectrum& s, double nm, double power, double fwhm_nm) {
  const double sigma = fwhm_nm / 2.3548200450309493;
  double norm = 0.0;
  std::vector<double> w(kReflectiveBands);
  for (int b = 0; b < kReflectiveBands; ++b) {
    const double d = (band_center_nm(b) - nm) / sigma;
    w[b] = std::exp(-0.5 * d * d);
    norm += w[b];
  }
  if (norm <= 0.0) {
    const int b = band_of(nm);
    if (b >= 0) s[b] += power;
    return;
  }
  for (int b = 0; b < kReflectiveBands; ++b) s[b] += power * w[b] / norm;
}

/// Narrow-line (laser) emission: all power in one band.
inline void add_line(Spectrum& s, double nm, double power) {
  const int b = band_of(nm);
  if (b >= 0) s[b] += power;
}

}  // namespace specrig
