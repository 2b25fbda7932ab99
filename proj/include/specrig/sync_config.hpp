#pragma once

// JSON synchronization program: parsing, validation and compilation into an
// absolute-time event schedule with per-device frame accounting.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/error.hpp"
#include "specrig/events.hpp"

namespace specrig {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

enum class TriggerMode { hardware, software };

/// Row-major 3x3 homography from normalized scene coordinates to normalized
/// image coordinates (both [0,1]^2); resolution independent.
using ViewMatrix = std::array<double, 9>;

struct DeviceSpec {
  std::string id;
  TriggerMode trigger_mode = TriggerMode::hardware;
  int width = 1;
  int height = 1;
  int channels = 1;
  int bit_depth = 8;
  Exposure exposure = FixedExposure{1000};
  std::string sensitivity_id;
  int port = 0;
  // Software-timer devices only.
  std::int64_t frame_period_ms = 0;
  double jitter_ms = 2.0;
  std::string tag = "ambient";
  // False for devices that do not respond to the LED sources (thermal): all of
  // their frames count as non-lit.
  bool lit = true;
  std::optional<ViewMatrix> view;
  // Fixed region of interest [x0, y0, x1, y1] in normalized image coordinates.
  std::optional<std::array<double, 4>> roi;

  int bytes_per_sample() const noexcept { return (bit_depth + 7) / 8; }
};

enum class IlluminationKind { led_module_chain, laser };

inline constexpr int kSlotsPerModule = 16;

struct IlluminationGroupSpec {
  std::string id;
  IlluminationKind kind = IlluminationKind::led_module_chain;
  int slots = 0;
  // One entry per slot; 0 marks an unpopulated slot.
  std::vector<double> wavelength_nm;
  int max_dac_mv = 0;
  // "front" sources light the sample for reflective imaging; "back" sources
  // shine through it (back-illumination).
  bool back_side = false;
};

struct IlluminationOn {
  std::string group;
  std::vector<int> slots;
  std::vector<std::uint8_t> current;  // per slot, same length as slots
  std::vector<std::uint8_t> pwm;
};

struct TriggerAction {
  std::string device;
  std::string illumination_tag;
  std::optional<Exposure> exposure;
};

struct DacSet {
  std::string group;
  int millivolts = 0;
};

using Action = std::variant<IlluminationOn, TriggerAction, DacSet>;

struct TimelineEvent {
  std::int64_t at_ms = 0;
  std::int64_t duration_ms = 0;
  Action action;
};

/// A device activated after all cycles complete (the iris suite's IrisID stage).
struct TrailerStage {
  std::string device;
  int frames = 0;
  std::int64_t duration_ms = 0;
  std::string tag;
};

struct CaptureConfig {
  std::string name;
  std::vector<DeviceSpec> devices;
  std::vector<IlluminationGroupSpec> illumination_groups;
  std::vector<TimelineEvent> cycle_events;
  std::int64_t cycle_period_ms = 1;
  int cycle_count = 1;
  std::vector<TimelineEvent> preview_events;
  std::int64_t preview_period_ms = 0;
  std::map<std::pair<std::string, std::string>, std::string> dataset_names;
  std::vector<TrailerStage> trailer;
  // Verbatim document, embedded into archives for provenance.
  std::string source_text;

  const DeviceSpec* find_device(std::string_view id) const {
    for (const auto& d : devices)
      if (d.id == id) return &d;
    return nullptr;
  }
  const IlluminationGroupSpec* find_group(std::string_view id) const {
    for (const auto& g : illumination_groups)
      if (g.id == id) return &g;
    return nullptr;
  }
  std::optional<std::string> dataset_for(const std::string& device, const std::string& tag) const {
    auto it = dataset_names.find({device, tag});
    if (it == dataset_names.end()) return std::nullopt;
    return it->second;
  }
  bool is_trailer_device(std::string_view id) const {
    return std::any_of(trailer.begin(), trailer.end(), [&](const TrailerStage& t) { return t.device == id; });
  }
  std::int64_t core_duration_ms() const { return cycle_period_ms * cycle_count; }
};

/// Free-running frame window of a software-timer device.
struct SoftwarePlan {
  std::string device;
  std::string dataset;
  std::string illumination_tag;
  std::int64_t start_ms = 0;
  std::int64_t period_ms = 0;
  int frames = 0;
};

struct Schedule {
  std::vector<ControllerEvent> events;
  std::int64_t total_duration_ms = 0;
  std::int64_t cycle_period_ms = 0;
  int cycle_count = 0;
  std::map<std::string, std::map<std::string, int>> per_device_frame_plan;
  std::vector<SoftwarePlan> software_plans;

  int frames_for(const std::string& device) const {
    auto it = per_device_frame_plan.find(device);
    if (it == per_device_frame_plan.end()) return 0;
    int n = 0;
    for (const auto& [_, c] : it->second) n += c;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

[[noreturn]] inline void schema_error(const std::string& field, const std::string& rule) {
  throw ConfigError(ConfigError::Kind::schema, field, "schema violation at '" + field + "': " + rule);
}

[[noreturn]] inline void dangling(const std::string& id, const std::string& where) {
  throw ConfigError(ConfigError::Kind::dangling_reference, id,
                    "dangling reference '" + id + "' in " + where);
}

inline const Json& require(const Json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) schema_error(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) schema_error(path + "." + key, "required field missing");
  return *it;
}

inline std::int64_t get_int(const Json& v, const std::string& path) {
  if (!v.is_number_integer()) schema_error(path, "expected an integer");
  return v.get<std::int64_t>();
}

inline double get_number(const Json& v, const std::string& path) {
  if (!v.is_number()) schema_error(path, "expected a number");
  return v.get<double>();
}

inline std::string get_string(const Json& v, const std::string& path) {
  if (!v.is_string()) schema_error(path, "expected a string");
  return v.get<std::string>();
}

inline std::int64_t opt_int(const Json& obj, const char* key, std::int64_t fallback, const std::string& path) {
  auto it = obj.find(key);
  return it == obj.end() ? fallback : get_int(*it, path + "." + key);
}

inline Exposure parse_exposure(const Json& v, const std::string& path) {
  if (!v.is_object()) schema_error(path, "expected {\"fixed_us\":n} or {\"auto\":{...}}");
  if (auto it = v.find("fixed_us"); it != v.end()) {
    const auto us = get_int(*it, path + ".fixed_us");
    if (us <= 0) schema_error(path + ".fixed_us", "fixed exposure must be > 0");
    return FixedExposure{us};
  }
  if (auto it = v.find("auto"); it != v.end()) {
    const std::string p = path + ".auto";
    if (!it->is_object()) schema_error(p, "expected an object");
    AutoExposure a;
    if (auto t = it->find("target"); t != it->end()) a.target_fraction = get_number(*t, p + ".target");
    if (auto t = it->find("tolerance"); t != it->end()) a.tolerance_fraction = get_number(*t, p + ".tolerance");
    a.max_frames = static_cast<int>(opt_int(*it, "max_frames", a.max_frames, p));
    a.initial_us = opt_int(*it, "initial_us", a.initial_us, p);
    a.max_us = opt_int(*it, "max_us", a.max_us, p);
    if (!(a.target_fraction > 0.0 && a.target_fraction < 1.0)) schema_error(p + ".target", "must lie in (0,1)");
    if (!(a.tolerance_fraction > 0.0)) schema_error(p + ".tolerance", "must be > 0");
    if (a.max_frames < 1) schema_error(p + ".max_frames", "must be >= 1");
    if (a.initial_us <= 0 || a.max_us < a.initial_us) schema_error(p, "need 0 < initial_us <= max_us");
    return a;
  }
  schema_error(path, "expected fixed_us or auto");
}

inline std::vector<std::uint8_t> parse_levels(const Json& obj, const char* key, std::size_t n,
                                              const std::string& path) {
  const std::string p = path + "." + key;
  auto it = obj.find(key);
  std::vector<std::int64_t> raw;
  if (it == obj.end()) {
    raw.assign(n, 255);
  } else if (it->is_array()) {
    if (it->size() != n) schema_error(p, "per-slot level list must match the slot count");
    for (std::size_t i = 0; i < it->size(); ++i) raw.push_back(get_int((*it)[i], p));
  } else {
    raw.assign(n, get_int(*it, p));
  }
  std::vector<std::uint8_t> out;
  for (auto v : raw) {
    if (v < 0 || v > 255) schema_error(p, "intensity level must lie in [0,255]");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

inline DeviceSpec parse_device(const Json& d, const std::string& path) {
  DeviceSpec s;
  s.id = get_string(require(d, "id", path), path + ".id");
  const auto mode = get_string(require(d, "trigger", path), path + ".trigger");
  if (mode == "hardware") {
    s.trigger_mode = TriggerMode::hardware;
  } else if (mode == "software") {
    s.trigger_mode = TriggerMode::software;
  } else {
    schema_error(path + ".trigger", "must be \"hardware\" or \"software\"");
  }
  s.width = static_cast<int>(get_int(require(d, "width", path), path + ".width"));
  s.height = static_cast<int>(get_int(require(d, "height", path), path + ".height"));
  s.channels = static_cast<int>(opt_int(d, "channels", 1, path));
  s.bit_depth = static_cast<int>(get_int(require(d, "bit_depth", path), path + ".bit_depth"));
  if (s.width < 1 || s.height < 1) schema_error(path + ".width", "width and height must be >= 1");
  if (s.channels < 1) schema_error(path + ".channels", "must be >= 1");
  if (s.bit_depth < 1 || s.bit_depth > 16) schema_error(path + ".bit_depth", "must lie in [1,16]");
  if (auto it = d.find("exposure"); it != d.end()) s.exposure = parse_exposure(*it, path + ".exposure");
  s.sensitivity_id = get_string(require(d, "sensitivity", path), path + ".sensitivity");
  s.port = static_cast<int>(opt_int(d, "port", 0, path));
  if (s.port < 0 || s.port > 65535) schema_error(path + ".port", "must lie in [0,65535]");
  s.frame_period_ms = opt_int(d, "frame_period_ms", 0, path);
  if (auto it = d.find("jitter_ms"); it != d.end()) s.jitter_ms = get_number(*it, path + ".jitter_ms");
  if (s.jitter_ms < 0.0) schema_error(path + ".jitter_ms", "must be >= 0");
  if (auto it = d.find("tag"); it != d.end()) s.tag = get_string(*it, path + ".tag");
  if (auto it = d.find("lit"); it != d.end()) {
    if (!it->is_boolean()) schema_error(path + ".lit", "expected a boolean");
    s.lit = it->get<bool>();
  }
  if (auto it = d.find("view"); it != d.end()) {
    if (!it->is_array() || it->size() != 3) schema_error(path + ".view", "expected a 3x3 array");
    ViewMatrix m{};
    for (int r = 0; r < 3; ++r) {
      const auto& row = (*it)[r];
      if (!row.is_array() || row.size() != 3) schema_error(path + ".view", "expected a 3x3 array");
      for (int c = 0; c < 3; ++c) m[r * 3 + c] = get_number(row[c], path + ".view");
    }
    s.view = m;
  }
  if (auto it = d.find("roi"); it != d.end()) {
    if (!it->is_array() || it->size() != 4) schema_error(path + ".roi", "expected [x0, y0, x1, y1]");
    std::array<double, 4> r{};
    for (int i = 0; i < 4; ++i) r[i] = get_number((*it)[i], path + ".roi");
    if (!(0.0 <= r[0] && r[0] < r[2] && r[2] <= 1.0 && 0.0 <= r[1] && r[1] < r[3] && r[3] <= 1.0))
      schema_error(path + ".roi", "must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1");
    s.roi = r;
  }
  return s;
}

inline IlluminationGroupSpec parse_group(const Json& g, const std::string& path) {
  IlluminationGroupSpec s;
  s.id = get_string(require(g, "id", path), path + ".id");
  const auto kind = get_string(require(g, "kind", path), path + ".kind");
  if (kind == "led_module_chain") {
    s.kind = IlluminationKind::led_module_chain;
  } else if (kind == "laser") {
    s.kind = IlluminationKind::laser;
  } else {
    schema_error(path + ".kind", "must be \"led_module_chain\" or \"laser\"");
  }
  if (auto it = g.find("placement"); it != g.end()) {
    const auto placement = get_string(*it, path + ".placement");
    if (placement != "front" && placement != "back") schema_error(path + ".placement", "must be \"front\" or \"back\"");
    s.back_side = placement == "back";
  }
  if (s.kind == IlluminationKind::led_module_chain) {
    s.slots = static_cast<int>(get_int(require(g, "slots", path), path + ".slots"));
    if (s.slots <= 0 || s.slots % kSlotsPerModule != 0)
      schema_error(path + ".slots", "LED chains need a positive multiple of 16 slots");
    if (auto it = g.find("layout"); it != g.end()) {
      if (!it->is_array()) schema_error(path + ".layout", "expected an array");
      for (const auto& run : *it) {
        const auto count = get_int(require(run, "count", path + ".layout"), path + ".layout.count");
        const auto& nm = require(run, "nm", path + ".layout");
        const double w = nm.is_null() ? 0.0 : get_number(nm, path + ".layout.nm");
        if (!nm.is_null() && w <= 0.0) schema_error(path + ".layout.nm", "wavelengths must be positive");
        for (std::int64_t i = 0; i < count; ++i) s.wavelength_nm.push_back(w);
      }
    } else {
      const auto& w = require(g, "wavelength_nm", path);
      if (!w.is_array()) schema_error(path + ".wavelength_nm", "expected an array");
      for (const auto& v : w) {
        const double nm = v.is_null() ? 0.0 : get_number(v, path + ".wavelength_nm");
        if (!v.is_null() && nm <= 0.0) schema_error(path + ".wavelength_nm", "wavelengths must be positive");
        s.wavelength_nm.push_back(nm);
      }
    }
    if (static_cast<int>(s.wavelength_nm.size()) != s.slots)
      schema_error(path + ".wavelength_nm", "one wavelength per slot required");
  } else {
    s.slots = 0;
    const auto& w = require(g, "wavelength_nm", path);
    const double nm = w.is_array() && w.size() == 1 ? get_number(w[0], path + ".wavelength_nm")
                                                    : get_number(w, path + ".wavelength_nm");
    if (nm <= 0.0) schema_error(path + ".wavelength_nm", "wavelengths must be positive");
    s.wavelength_nm = {nm};
    s.max_dac_mv = static_cast<int>(get_int(require(g, "max_dac_mv", path), path + ".max_dac_mv"));
    if (s.max_dac_mv <= 0) schema_error(path + ".max_dac_mv", "must be > 0");
  }
  return s;
}

inline TimelineEvent parse_event(const Json& e, const std::string& path) {
  TimelineEvent ev;
  ev.at_ms = get_int(require(e, "at_ms", path), path + ".at_ms");
  ev.duration_ms = opt_int(e, "duration_ms", 0, path);
  if (ev.at_ms < 0) schema_error(path + ".at_ms", "must be >= 0");
  if (ev.duration_ms < 0) schema_error(path + ".duration_ms", "must be >= 0");
  const auto& a = require(e, "action", path);
  const std::string ap = path + ".action";
  const auto type = get_string(require(a, "type", ap), ap + ".type");
  if (type == "illumination_on") {
    IlluminationOn on;
    on.group = get_string(require(a, "group", ap), ap + ".group");
    if (auto it = a.find("slots"); it != a.end()) {
      if (!it->is_array()) schema_error(ap + ".slots", "expected an array");
      for (const auto& s : *it) on.slots.push_back(static_cast<int>(get_int(s, ap + ".slots")));
    } else if (!a.contains("wavelength_nm")) {
      schema_error(ap, "illumination_on needs slots or wavelength_nm");
    }
    // wavelength_nm is resolved against the group's layout during validation.
    ev.action = std::move(on);
  } else if (type == "trigger") {
    TriggerAction t;
    t.device = get_string(require(a, "device", ap), ap + ".device");
    t.illumination_tag = get_string(require(a, "tag", ap), ap + ".tag");
    if (auto it = a.find("exposure"); it != a.end()) {
      if (it->is_string() && it->get<std::string>() == "auto") {
        t.exposure = AutoExposure{};
      } else {
        t.exposure = parse_exposure(*it, ap + ".exposure");
      }
    } else if (auto us = a.find("exposure_us"); us != a.end()) {
      const auto v = get_int(*us, ap + ".exposure_us");
      if (v <= 0) schema_error(ap + ".exposure_us", "fixed exposure must be > 0");
      t.exposure = FixedExposure{v};
    }
    ev.action = std::move(t);
  } else if (type == "dac_set") {
    DacSet d;
    d.group = get_string(require(a, "group", ap), ap + ".group");
    d.millivolts = static_cast<int>(get_int(require(a, "millivolts", ap), ap + ".millivolts"));
    if (d.millivolts < 0) schema_error(ap + ".millivolts", "must be >= 0");
    ev.action = std::move(d);
  } else {
    schema_error(ap + ".type", "unknown action type '" + type + "'");
  }
  return ev;
}

// Second pass over an event list: references, slot ranges, levels, and window bounds.
inline void resolve_events(std::vector<TimelineEvent>& events, const Json& raw, const CaptureConfig& cfg,
                           std::int64_t period_ms, const std::string& path) {
  for (std::size_t i = 0; i < events.size(); ++i) {
    auto& ev = events[i];
    const std::string p = path + "[" + std::to_string(i) + "]";
    const std::string ap = p + ".action";
    if (period_ms > 0 && ev.at_ms + ev.duration_ms > period_ms)
      schema_error(p + ".at_ms", "event window must lie within [0, period_ms]");
    if (auto* on = std::get_if<IlluminationOn>(&ev.action)) {
      const auto* g = cfg.find_group(on->group);
      if (!g) dangling(on->group, ap + ".group");
      if (g->kind != IlluminationKind::led_module_chain)
        schema_error(ap + ".group", "illumination_on targets LED chains; use dac_set for lasers");
      const Json& a = raw[i]["action"];
      if (on->slots.empty() && a.contains("wavelength_nm")) {
        const double nm = get_number(a["wavelength_nm"], ap + ".wavelength_nm");
        for (int s = 0; s < g->slots; ++s)
          if (g->wavelength_nm[s] == nm) on->slots.push_back(s);
        if (on->slots.empty()) schema_error(ap + ".wavelength_nm", "no slot of the group carries this wavelength");
      }
      for (int s : on->slots) {
        if (s < 0 || s >= g->slots) schema_error(ap + ".slots", "slot index outside the chain");
        if (g->wavelength_nm[s] <= 0.0) schema_error(ap + ".slots", "slot is unpopulated");
      }
      on->current = parse_levels(a, "current", on->slots.size(), ap);
      on->pwm = parse_levels(a, "pwm", on->slots.size(), ap);
    } else if (const auto* t = std::get_if<TriggerAction>(&ev.action)) {
      if (!cfg.find_device(t->device)) dangling(t->device, ap + ".device");
    } else if (const auto* d = std::get_if<DacSet>(&ev.action)) {
      const auto* g = cfg.find_group(d->group);
      if (!g) dangling(d->group, ap + ".group");
      if (g->kind != IlluminationKind::laser) schema_error(ap + ".group", "dac_set targets laser groups");
      if (d->millivolts > g->max_dac_mv) schema_error(ap + ".millivolts", "exceeds the group's max_dac_mv");
    }
  }
}

}  // namespace detail

/// Parses and validates a configuration document.
inline CaptureConfig parse_config(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    throw ConfigError(ConfigError::Kind::syntax, "byte " + std::to_string(e.byte),
                      "JSON syntax error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  using namespace detail;
  if (!doc.is_object()) schema_error("$", "top level must be an object");

  CaptureConfig cfg;
  cfg.source_text = std::string(text);
  if (auto it = doc.find("name"); it != doc.end()) cfg.name = get_string(*it, "name");

  if (auto it = doc.find("devices"); it != doc.end()) {
    if (!it->is_array()) schema_error("devices", "expected an array");
    for (std::size_t i = 0; i < it->size(); ++i)
      cfg.devices.push_back(parse_device((*it)[i], "devices[" + std::to_string(i) + "]"));
  }
  if (auto it = doc.find("illumination"); it != doc.end()) {
    if (!it->is_array()) schema_error("illumination", "expected an array");
    for (std::size_t i = 0; i < it->size(); ++i)
      cfg.illumination_groups.push_back(parse_group((*it)[i], "illumination[" + std::to_string(i) + "]"));
  }
  {
    std::set<std::string> ids;
    for (const auto& d : cfg.devices)
      if (!ids.insert(d.id).second) schema_error("devices", "duplicate device id '" + d.id + "'");
    ids.clear();
    for (const auto& g : cfg.illumination_groups)
      if (!ids.insert(g.id).second) schema_error("illumination", "duplicate group id '" + g.id + "'");
  }

  Json raw_cycle_events = Json::array();
  const auto& cycle = require(doc, "cycle", "$");
  cfg.cycle_period_ms = get_int(require(cycle, "period_ms", "cycle"), "cycle.period_ms");
  cfg.cycle_count = static_cast<int>(get_int(require(cycle, "count", "cycle"), "cycle.count"));
  if (cfg.cycle_period_ms <= 0) schema_error("cycle.period_ms", "must be a positive integer");
  if (cfg.cycle_count <= 0) schema_error("cycle.count", "must be a positive integer");
  if (auto it = cycle.find("events"); it != cycle.end()) {
    if (!it->is_array()) schema_error("cycle.events", "expected an array");
    raw_cycle_events = *it;
    for (std::size_t i = 0; i < it->size(); ++i)
      cfg.cycle_events.push_back(parse_event((*it)[i], "cycle.events[" + std::to_string(i) + "]"));
  }

  Json raw_preview_events = Json::array();
  if (auto it = doc.find("preview"); it != doc.end()) {
    cfg.preview_period_ms = opt_int(*it, "period_ms", cfg.cycle_period_ms, "preview");
    if (cfg.preview_period_ms <= 0) schema_error("preview.period_ms", "must be a positive integer");
    if (auto ev = it->find("events"); ev != it->end()) {
      if (!ev->is_array()) schema_error("preview.events", "expected an array");
      raw_preview_events = *ev;
      for (std::size_t i = 0; i < ev->size(); ++i)
        cfg.preview_events.push_back(parse_event((*ev)[i], "preview.events[" + std::to_string(i) + "]"));
    }
  }

  if (auto it = doc.find("trailer"); it != doc.end()) {
    if (!it->is_array()) schema_error("trailer", "expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string p = "trailer[" + std::to_string(i) + "]";
      const auto& t = (*it)[i];
      TrailerStage st;
      st.device = get_string(require(t, "device", p), p + ".device");
      st.frames = static_cast<int>(get_int(require(t, "frames", p), p + ".frames"));
      st.duration_ms = get_int(require(t, "duration_ms", p), p + ".duration_ms");
      st.tag = t.contains("tag") ? get_string(t["tag"], p + ".tag") : std::string("ambient");
      if (st.frames < 0) schema_error(p + ".frames", "must be >= 0");
      if (st.duration_ms <= 0) schema_error(p + ".duration_ms", "must be > 0");
      if (!cfg.find_device(st.device)) dangling(st.device, p + ".device");
      cfg.trailer.push_back(std::move(st));
    }
  }

  if (auto it = doc.find("datasets"); it != doc.end()) {
    if (!it->is_object()) schema_error("datasets", "expected an object of device -> {tag: name}");
    for (const auto& [device, tags] : it->items()) {
      if (!cfg.find_device(device)) dangling(device, "datasets");
      if (!tags.is_object()) schema_error("datasets." + device, "expected an object of tag -> name");
      for (const auto& [tag, name] : tags.items())
        cfg.dataset_names[{device, tag}] = get_string(name, "datasets." + device + "." + tag);
    }
  }

  resolve_events(cfg.cycle_events, raw_cycle_events, cfg, cfg.cycle_period_ms, "cycle.events");
  resolve_events(cfg.preview_events, raw_preview_events, cfg, cfg.preview_period_ms, "preview.events");

  for (std::size_t i = 0; i < cfg.devices.size(); ++i) {
    const auto& d = cfg.devices[i];
    if (d.trigger_mode != TriggerMode::software) continue;
    const std::string p = "devices[" + std::to_string(i) + "]";
    if (!cfg.is_trailer_device(d.id)) {
      if (d.frame_period_ms <= 0) schema_error(p + ".frame_period_ms", "software-timer devices need a frame period");
      if (!cfg.dataset_for(d.id, d.tag))
        schema_error("datasets." + d.id, "no dataset name for tag '" + d.tag + "'");
    }
  }
  for (std::size_t i = 0; i < cfg.cycle_events.size(); ++i) {
    if (const auto* t = std::get_if<TriggerAction>(&cfg.cycle_events[i].action)) {
      if (!cfg.dataset_for(t->device, t->illumination_tag))
        schema_error("datasets." + t->device,
                     "no dataset name for (" + t->device + ", " + t->illumination_tag + ")");
    }
  }
  for (const auto& st : cfg.trailer)
    if (!cfg.dataset_for(st.device, st.tag))
      schema_error("datasets." + st.device, "no dataset name for trailer tag '" + st.tag + "'");
  return cfg;
}

/// Drops one device with every event, dataset name and trailer stage that
/// references it.
inline CaptureConfig without_device(CaptureConfig cfg, const std::string& id) {
  std::erase_if(cfg.devices, [&](const DeviceSpec& d) { return d.id == id; });
  auto refs = [&](const TimelineEvent& e) {
    const auto* t = std::get_if<TriggerAction>(&e.action);
    return t && t->device == id;
  };
  std::erase_if(cfg.cycle_events, refs);
  std::erase_if(cfg.preview_events, refs);
  std::erase_if(cfg.trailer, [&](const TrailerStage& t) { return t.device == id; });
  std::erase_if(cfg.dataset_names, [&](const auto& kv) { return kv.first.first == id; });
  return cfg;
}

// ---------------------------------------------------------------------------
// Compilation

inline constexpr std::int64_t kTriggerPulseWidthMs = 1;

namespace detail {

inline void emit_cycle(const std::vector<TimelineEvent>& events, std::int64_t base,
                       std::vector<ControllerEvent>& out) {
  for (const auto& ev : events) {
    const std::int64_t t0 = base + ev.at_ms;
    if (const auto* on = std::get_if<IlluminationOn>(&ev.action)) {
      for (std::size_t i = 0; i < on->slots.size(); ++i)
        out.push_back({t0, LedCommand{on->group, on->slots[i], on->current[i], on->pwm[i]}});
      if (ev.duration_ms > 0)
        for (int s : on->slots) out.push_back({t0 + ev.duration_ms, LedCommand{on->group, s, 0, 0}});
    } else if (const auto* t = std::get_if<TriggerAction>(&ev.action)) {
      out.push_back({t0, TriggerPulse{t->device, t->illumination_tag, t->exposure}});
    } else if (const auto* d = std::get_if<DacSet>(&ev.action)) {
      out.push_back({t0, DacLevel{d->group, d->millivolts}});
      if (ev.duration_ms > 0) out.push_back({t0 + ev.duration_ms, DacLevel{d->group, 0}});
    }
  }
}

inline void sort_events(std::vector<ControllerEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const ControllerEvent& a, const ControllerEvent& b) {
    if (a.t_ms != b.t_ms) return a.t_ms < b.t_ms;
    return a.rank() < b.rank();
  });
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace detail

/// Expands the cycle program into absolute time and plans every device's frames.
inline Schedule compile_schedule(const CaptureConfig& cfg) {
  Schedule sched;
  sched.cycle_period_ms = cfg.cycle_period_ms;
  sched.cycle_count = cfg.cycle_count;
  for (int k = 0; k < cfg.cycle_count; ++k)
    detail::emit_cycle(cfg.cycle_events, static_cast<std::int64_t>(k) * cfg.cycle_period_ms, sched.events);

  const std::int64_t core = cfg.core_duration_ms();
  for (const auto& d : cfg.devices) {
    sched.per_device_frame_plan[d.id];  // every device appears, even with zero frames
    if (d.trigger_mode != TriggerMode::software || cfg.is_trailer_device(d.id)) continue;
    SoftwarePlan sp{d.id, *cfg.dataset_for(d.id, d.tag), d.tag, 0, d.frame_period_ms,
                    static_cast<int>(detail::ceil_div(core, d.frame_period_ms))};
    sched.software_plans.push_back(sp);
  }

  std::int64_t stage_start = core;
  for (const auto& st : cfg.trailer) {
    const auto* dev = cfg.find_device(st.device);
    const std::int64_t step = st.frames > 0 ? std::max<std::int64_t>(1, st.duration_ms / st.frames) : 0;
    if (dev->trigger_mode == TriggerMode::hardware) {
      for (int i = 0; i < st.frames; ++i)
        sched.events.push_back({stage_start + i * step, TriggerPulse{st.device, st.tag, std::nullopt}});
    } else {
      sched.software_plans.push_back({st.device, *cfg.dataset_for(st.device, st.tag), st.tag, stage_start, step,
                                      st.frames});
    }
    stage_start += st.duration_ms;
  }
  sched.total_duration_ms = stage_start;
  detail::sort_events(sched.events);

  // (time, exposure in ms) of every pulse per hardware device
  std::map<std::string, std::vector<std::pair<std::int64_t, std::int64_t>>> pulses;
  for (const auto& e : sched.events) {
    if (const auto* p = std::get_if<TriggerPulse>(&e.kind)) {
      const auto* dev = cfg.find_device(p->device);
      if (dev->trigger_mode == TriggerMode::software) continue;  // software devices ignore pulses
      ++sched.per_device_frame_plan[p->device][*cfg.dataset_for(p->device, p->illumination_tag)];
      const Exposure ex = p->exposure ? *p->exposure : dev->exposure;
      pulses[p->device].emplace_back(e.t_ms, detail::ceil_div(max_exposure_us(ex), 1000));
    }
  }
  for (const auto& sp : sched.software_plans) sched.per_device_frame_plan[sp.device][sp.dataset] += sp.frames;

  // Pulses to one hardware device may neither overlap each other nor land
  // inside the previous exposure.
  for (const auto& [id, times] : pulses) {
    for (std::size_t i = 1; i < times.size(); ++i) {
      const std::int64_t min_gap = std::max(kTriggerPulseWidthMs, times[i - 1].second);
      if (times[i].first - times[i - 1].first < min_gap) {
        throw ConfigError(ConfigError::Kind::overlap, id,
                          "trigger pulses to '" + id + "' at " + std::to_string(times[i - 1].first) + " ms and " +
                              std::to_string(times[i].first) + " ms overlap (minimum spacing " +
                              std::to_string(min_gap) + " ms)");
      }
    }
  }
  return sched;
}

/// Exposure used by one trigger pulse, with per-pulse overrides applied.
inline Exposure effective_exposure(const DeviceSpec& dev, const TriggerPulse& pulse) {
  if (!pulse.exposure) return dev.exposure;
  if (std::holds_alternative<AutoExposure>(*pulse.exposure) && std::holds_alternative<AutoExposure>(dev.exposure))
    return dev.exposure;  // the device's own auto parameters win over the bare "auto" marker
  return *pulse.exposure;
}

// ---------------------------------------------------------------------------
// Serialization and accounting

inline OrderedJson exposure_to_json(const Exposure& e) {
  OrderedJson j;
  if (const auto* f = std::get_if<FixedExposure>(&e)) {
    j["fixed_us"] = f->microseconds;
  } else {
    const auto& a = std::get<AutoExposure>(e);
    j["auto"] = {{"target", a.target_fraction}, {"tolerance", a.tolerance_fraction}, {"max_frames", a.max_frames},
                 {"initial_us", a.initial_us}, {"max_us", a.max_us}};
  }
  return j;
}

/// Inverse of the device entry parser.
inline OrderedJson device_to_json(const DeviceSpec& d) {
  OrderedJson j;
  j["id"] = d.id;
  j["trigger"] = d.trigger_mode == TriggerMode::hardware ? "hardware" : "software";
  j["width"] = d.width;
  j["height"] = d.height;
  j["channels"] = d.channels;
  j["bit_depth"] = d.bit_depth;
  j["exposure"] = exposure_to_json(d.exposure);
  j["sensitivity"] = d.sensitivity_id;
  j["port"] = d.port;
  if (d.trigger_mode == TriggerMode::software) {
    j["frame_period_ms"] = d.frame_period_ms;
    j["jitter_ms"] = d.jitter_ms;
  }
  j["tag"] = d.tag;
  j["lit"] = d.lit;
  if (d.view) {
    const auto& m = *d.view;
    j["view"] = {{m[0], m[1], m[2]}, {m[3], m[4], m[5]}, {m[6], m[7], m[8]}};
  }
  if (d.roi) j["roi"] = {(*d.roi)[0], (*d.roi)[1], (*d.roi)[2], (*d.roi)[3]};
  return j;
}

inline DeviceSpec device_from_json(const Json& j) { return detail::parse_device(j, "device"); }

inline OrderedJson event_to_json(const ControllerEvent& e) {
  OrderedJson j;
  j["t_ms"] = e.t_ms;
  if (const auto* led = std::get_if<LedCommand>(&e.kind)) {
    j["kind"] = "led";
    j["group"] = led->group;
    j["slot"] = led->slot;
    j["current"] = led->current_level;
    j["pwm"] = led->pwm_level;
  } else if (const auto* p = std::get_if<TriggerPulse>(&e.kind)) {
    j["kind"] = "trigger";
    j["device"] = p->device;
    j["tag"] = p->illumination_tag;
    if (p->exposure) j["exposure"] = exposure_to_json(*p->exposure);
  } else {
    const auto& d = std::get<DacLevel>(e.kind);
    j["kind"] = "dac";
    j["group"] = d.group;
    j["mv"] = d.millivolts;
  }
  return j;
}

inline ControllerEvent event_from_json(const Json& j) {
  ControllerEvent e;
  e.t_ms = j.at("t_ms").get<std::int64_t>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "led") {
    e.kind = LedCommand{j.at("group").get<std::string>(), j.at("slot").get<int>(),
                        j.at("current").get<std::uint8_t>(), j.at("pwm").get<std::uint8_t>()};
  } else if (kind == "trigger") {
    TriggerPulse p{j.at("device").get<std::string>(), j.at("tag").get<std::string>(), std::nullopt};
    if (j.contains("exposure")) p.exposure = detail::parse_exposure(j["exposure"], "exposure");
    e.kind = std::move(p);
  } else if (kind == "dac") {
    e.kind = DacLevel{j.at("group").get<std::string>(), j.at("mv").get<int>()};
  } else {
    throw Error("unknown controller event kind '" + kind + "'");
  }
  return e;
}

/// Cycle-level timeline (one lane per device or illumination group), used by the console's Gantt view.
inline OrderedJson cycle_to_json(const CaptureConfig& cfg) {
  OrderedJson lanes = OrderedJson::array();
  for (const auto& ev : cfg.cycle_events) {
    OrderedJson item;
    item["at_ms"] = ev.at_ms;
    item["duration_ms"] = ev.duration_ms;
    if (const auto* on = std::get_if<IlluminationOn>(&ev.action)) {
      const auto* g = cfg.find_group(on->group);
      std::set<double> nm;
      for (int s : on->slots) nm.insert(g->wavelength_nm[s]);
      item["lane"] = on->group;
      item["type"] = "illumination";
      item["wavelength_nm"] = std::vector<double>(nm.begin(), nm.end());
    } else if (const auto* t = std::get_if<TriggerAction>(&ev.action)) {
      const auto* dev = cfg.find_device(t->device);
      item["lane"] = t->device;
      item["type"] = "exposure";
      item["tag"] = t->illumination_tag;
      const Exposure ex = t->exposure ? *t->exposure : dev->exposure;
      if (std::holds_alternative<AutoExposure>(ex)) {
        item["exposure"] = "auto";
      } else {
        item["exposure_us"] = std::get<FixedExposure>(ex).microseconds;
      }
    } else {
      const auto& d = std::get<DacSet>(ev.action);
      item["lane"] = d.group;
      item["type"] = "laser";
      item["millivolts"] = d.millivolts;
    }
    lanes.push_back(std::move(item));
  }
  return lanes;
}

inline OrderedJson schedule_to_json(const Schedule& s) {
  OrderedJson j;
  j["total_duration_ms"] = s.total_duration_ms;
  j["cycle_period_ms"] = s.cycle_period_ms;
  j["cycle_count"] = s.cycle_count;
  OrderedJson plan = OrderedJson::object();
  for (const auto& [dev, sets] : s.per_device_frame_plan) {
    OrderedJson d = OrderedJson::object();
    for (const auto& [name, n] : sets) d[name] = n;
    plan[dev] = std::move(d);
  }
  j["frame_plan"] = std::move(plan);
  OrderedJson sw = OrderedJson::array();
  for (const auto& p : s.software_plans)
    sw.push_back({{"device", p.device}, {"dataset", p.dataset}, {"tag", p.illumination_tag},
                  {"start_ms", p.start_ms}, {"period_ms", p.period_ms}, {"frames", p.frames}});
  j["software_plans"] = std::move(sw);
  OrderedJson ev = OrderedJson::array();
  for (const auto& e : s.events) ev.push_back(event_to_json(e));
  j["events"] = std::move(ev);
  return j;
}

/// Non-lit datasets: every frame of a device flagged lit=false, and tags
/// beginning with "dark".
inline bool is_lit(const DeviceSpec& dev, std::string_view tag) {
  return dev.lit && !tag.starts_with("dark");
}

/// Data type of a dataset, taken from its name "<suite>/<type>/<condition>";
/// names without a '/' use the device id.
inline std::string data_type_of(const std::string& dataset, const std::string& device) {
  const auto last = dataset.rfind('/');
  if (last == std::string::npos) return device;
  const auto prev = dataset.rfind('/', last == 0 ? 0 : last - 1);
  if (prev == std::string::npos || prev >= last) return dataset.substr(0, last);
  return dataset.substr(prev + 1, last - prev - 1);
}

struct DatasetStats {
  std::string name;
  std::string tag;
  bool lit = true;
  int frames = 0;
};

/// Frames of one (device, data type) pair: one row of the suite's frame table.
struct DataTypeRow {
  std::string device;
  std::string data_type;
  int lit_frames = 0;
  int nonlit_frames = 0;
  std::string lit_notation;     // "frames x datasets", e.g. "20x7"
  std::string nonlit_notation;  // "-" when empty
  int bit_depth = 0;
};

struct DeviceStats {
  std::string device;
  int lit_frames = 0;
  int nonlit_frames = 0;
  int lit_datasets = 0;
  int nonlit_datasets = 0;
  int dataset_count = 0;
  int total_frames = 0;
  std::uint64_t bytes = 0;
  std::vector<DatasetStats> datasets;
};

struct ScheduleStats {
  std::vector<DeviceStats> devices;
  std::vector<DataTypeRow> rows;
  int total_frames = 0;
  int total_datasets = 0;
  std::uint64_t total_bytes = 0;
  std::int64_t total_duration_ms = 0;

  const DeviceStats* device(std::string_view id) const {
    for (const auto& d : devices)
      if (d.device == id) return &d;
    return nullptr;
  }
  const DataTypeRow* row(std::string_view device, std::string_view type) const {
    for (const auto& r : rows)
      if (r.device == device && r.data_type == type) return &r;
    return nullptr;
  }
};

namespace detail {

// "20x7", or "20x6 + 40x1" when datasets differ in length.
inline std::string notation(const std::vector<int>& counts) {
  if (counts.empty()) return "-";
  std::map<int, int, std::greater<>> by_count;
  for (int c : counts) ++by_count[c];
  std::string out;
  for (const auto& [frames, sets] : by_count) {
    if (!out.empty()) out += " + ";
    out += std::to_string(frames) + "x" + std::to_string(sets);
  }
  return out;
}

}  // namespace detail

/// Frame and storage accounting; storage is uncompressed.
inline ScheduleStats schedule_stats(const Schedule& sched, const CaptureConfig& cfg) {
  ScheduleStats st;
  st.total_duration_ms = sched.total_duration_ms;
  std::map<std::string, std::string> tag_of;  // dataset -> tag
  for (const auto& [key, name] : cfg.dataset_names) tag_of[name] = key.second;

  for (const auto& dev : cfg.devices) {
    DeviceStats ds;
    ds.device = dev.id;
    std::map<std::string, std::pair<std::vector<int>, std::vector<int>>> per_type;
    auto it = sched.per_device_frame_plan.find(dev.id);
    if (it != sched.per_device_frame_plan.end()) {
      for (const auto& [name, n] : it->second) {
        const std::string& tag = tag_of[name];
        const bool lit = is_lit(dev, tag);
        ds.datasets.push_back({name, tag, lit, n});
        auto& slot = per_type[data_type_of(name, dev.id)];
        if (lit) {
          ds.lit_frames += n;
          ++ds.lit_datasets;
          slot.first.push_back(n);
        } else {
          ds.nonlit_frames += n;
          ++ds.nonlit_datasets;
          slot.second.push_back(n);
        }
      }
    }
    ds.dataset_count = ds.lit_datasets + ds.nonlit_datasets;
    ds.total_frames = ds.lit_frames + ds.nonlit_frames;
    ds.bytes = static_cast<std::uint64_t>(ds.total_frames) * static_cast<std::uint64_t>(dev.width) *
               static_cast<std::uint64_t>(dev.height) * static_cast<std::uint64_t>(dev.channels) *
               static_cast<std::uint64_t>(dev.bytes_per_sample());
    for (const auto& [type, counts] : per_type) {
      DataTypeRow r;
      r.device = dev.id;
      r.data_type = type;
      for (int c : counts.first) r.lit_frames += c;
      for (int c : counts.second) r.nonlit_frames += c;
      r.lit_notation = detail::notation(counts.first);
      r.nonlit_notation = detail::notation(counts.second);
      r.bit_depth = dev.bit_depth;
      st.rows.push_back(std::move(r));
    }
    st.total_frames += ds.total_frames;
    st.total_datasets += ds.dataset_count;
    st.total_bytes += ds.bytes;
    st.devices.push_back(std::move(ds));
  }
  return st;
}

inline OrderedJson stats_to_json(const ScheduleStats& st) {
  OrderedJson j;
  j["total_duration_ms"] = st.total_duration_ms;
  j["total_frames"] = st.total_frames;
  j["total_datasets"] = st.total_datasets;
  j["total_bytes"] = st.total_bytes;
  OrderedJson devs = OrderedJson::array();
  for (const auto& d : st.devices) {
    OrderedJson sets = OrderedJson::array();
    for (const auto& s : d.datasets) sets.push_back({{"name", s.name}, {"tag", s.tag}, {"lit", s.lit}, {"frames", s.frames}});
    devs.push_back({{"device", d.device}, {"lit_frames", d.lit_frames}, {"nonlit_frames", d.nonlit_frames},
                    {"lit_datasets", d.lit_datasets}, {"nonlit_datasets", d.nonlit_datasets},
                    {"total_frames", d.total_frames}, {"bytes", d.bytes}, {"datasets", std::move(sets)}});
  }
  j["devices"] = std::move(devs);
  OrderedJson rows = OrderedJson::array();
  for (const auto& r : st.rows)
    rows.push_back({{"device", r.device}, {"data_type", r.data_type}, {"lit", r.lit_notation},
                    {"non_lit", r.nonlit_notation}, {"bit_depth", r.bit_depth}});
  j["rows"] = std::move(rows);
  return j;
}

/// Reads and parses a configuration file.
inline CaptureConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(ConfigError::Kind::syntax, path.string(), "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace specrig
