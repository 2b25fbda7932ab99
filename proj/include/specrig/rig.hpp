#pragma once

// Rig orchestration: brings up one device server per configured camera,
// drives captures over REST (capture requests, controller replay, trailer),
// packages and verifies archives, and serves the operator console API.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/capture_archive.hpp"
#include "specrig/controller_sim.hpp"
#include "specrig/device_server.hpp"
#include "specrig/png.hpp"
#include "specrig/scene.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

// ---------------------------------------------------------------------------
// Environment

/// SPECRIG_SEED, or `fallback` when unset or not a number.
inline std::uint64_t env_seed(std::uint64_t fallback = 0) {
  const char* v = std::getenv("SPECRIG_SEED");
  if (!v || !*v) return fallback;
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    return fallback;
  }
}

/// SPECRIG_PORT_BASE, or 0 (use the ports in the configuration).
inline int env_port_base() {
  const char* v = std::getenv("SPECRIG_PORT_BASE");
  if (!v || !*v) return 0;
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    return 0;
  }
}

// ---------------------------------------------------------------------------
// Capture helpers shared by the rig and in-process synthesis

using FrameGroups = std::map<std::string, std::vector<Frame>>;

inline std::string sanitize(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return s;
}

/// Scene facts recorded with every capture; preprocessing reads the crop
/// geometry back from here.
inline nlohmann::ordered_json capture_attributes(const CaptureConfig& cfg, const SceneBinding& b) {
  nlohmann::ordered_json a;
  a["config"] = cfg.name;
  a["preset"] = b.preset;
  a["subject_seed"] = b.seeds.subject;
  a["presentation_seed"] = b.seeds.presentation;
  a["seed"] = b.seed;
  a["divisor"] = b.divisor;
  if (!b.preset.empty()) {
    const auto scene = make_preset(b.preset, b.seeds);
    a["category"] = scene.category;
    a["label"] = scene.is_bona_fide ? 0 : 1;
    if (scene.face_box) a["face_box"] = {scene.face_box->x0, scene.face_box->y0, scene.face_box->x1, scene.face_box->y1};
    if (scene.iris_circle) a["iris_circle"] = {scene.iris_circle->cx, scene.iris_circle->cy, scene.iris_circle->r};
  }
  return a;
}

inline void group_frames(FrameGroups& groups, std::vector<Frame> frames) {
  for (auto& f : frames) {
    auto name = f.dataset;
    groups[name].push_back(std::move(f));
  }
}

/// A whole capture in this process: one session per device, the controller
/// replay and the trailer, without the network hop. Frames are identical to
/// a rig capture with the same binding.
inline FrameGroups capture_in_process(const CaptureConfig& cfg, const Schedule& schedule, const SceneBinding& binding,
                                      EventLog* log = nullptr) {
  std::map<std::string, std::unique_ptr<DeviceSession>> sessions;
  for (const auto& d : cfg.devices) {
    auto s = std::make_unique<DeviceSession>();
    s->initialize(d, binding);
    s->capture(request_for(cfg, schedule, d.id));
    sessions[d.id] = std::move(s);
  }
  RigClock clock;
  auto events = replay_triggers(cfg, schedule, clock, [&](const std::string& dev, const TriggerInput& in) {
    if (auto it = sessions.find(dev); it != sessions.end()) it->second->on_trigger(in);
  });
  if (log) *log = std::move(events);
  FrameGroups groups;
  for (auto& [_, s] : sessions) {
    s->wait_done();
    group_frames(groups, s->frames());
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Rig

enum class RigPhase { idle, previewing, capturing, packaging, done, failed };

inline const char* to_string(RigPhase s) {
  switch (s) {
    case RigPhase::idle: return "idle";
    case RigPhase::previewing: return "previewing";
    case RigPhase::capturing: return "capturing";
    case RigPhase::packaging: return "packaging";
    case RigPhase::done: return "done";
    case RigPhase::failed: return "failed";
  }
  return "?";
}

struct RigOptions {
  std::string host = "127.0.0.1";
  // > 0: device i listens on port_base + i. Otherwise the configured port,
  // where 0 picks any free port.
  int port_base = 0;
  int divisor = 4;
  std::int64_t deadline_ms = 10000;
  // Connect to device servers already listening instead of starting them.
  bool attach = false;
  LogFn log;
};

struct DeviceEndpoint {
  std::string device;
  std::string host;
  int port = 0;
};

struct CaptureParams {
  std::string preset;
  PresetSeeds seeds;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = ".";
};

struct CaptureResult {
  std::string session_id;
  std::filesystem::path archive;
  ArchiveSummary summary;
  AccountingDiff diff;
  EventLog log;
  double seconds = 0.0;
};

/// Ports each device will use; throws naming the port when two devices collide.
inline std::vector<int> assign_ports(const CaptureConfig& cfg, int port_base) {
  std::vector<int> ports;
  std::map<int, std::string> owner;
  for (std::size_t i = 0; i < cfg.devices.size(); ++i) {
    const auto& d = cfg.devices[i];
    const int port = port_base > 0 ? port_base + static_cast<int>(i) : d.port;
    if (port != 0) {
      if (auto it = owner.find(port); it != owner.end())
        throw ConfigError(ConfigError::Kind::overlap, std::to_string(port),
                          "port " + std::to_string(port) + " is assigned to both '" + it->second + "' and '" + d.id + "'");
      owner[port] = d.id;
    }
    ports.push_back(port);
  }
  return ports;
}

class Rig {
 public:
  /// Starts (or attaches to) every device server and initializes it with an
  /// empty scene. Fails naming the device or port at fault.
  Rig(CaptureConfig cfg, RigOptions opt) : cfg_(std::move(cfg)), opt_(std::move(opt)) {
    schedule_ = compile_schedule(cfg_);
    const auto ports = assign_ports(cfg_, opt_.port_base);
    for (std::size_t i = 0; i < cfg_.devices.size(); ++i) {
      const auto& d = cfg_.devices[i];
      int port = ports[i];
      if (!opt_.attach) {
        auto server = std::make_unique<DeviceServer>(d, opt_.log);
        try {
          port = server->start(opt_.host, port);
        } catch (const Error&) {
          throw Error("device '" + d.id + "': port " + std::to_string(port) + " is not free");
        }
        servers_.push_back(std::move(server));
      }
      endpoints_.push_back({d.id, opt_.host, port});
    }
    for (const auto& ep : endpoints_) {
      DeviceClient cli(ep.host, ep.port);
      if (!cli.health()) throw Error("device '" + ep.device + "' is not answering on port " + std::to_string(ep.port));
      try {
        SceneBinding b;
        b.divisor = opt_.divisor;
        if (cli.status()["state"] == "idle") cli.initialize(b);
        cli.set_params({{"deadline_ms", opt_.deadline_ms}});
      } catch (const std::exception& e) {
        throw Error("device '" + ep.device + "' failed to initialize: " + e.what());
      }
    }
  }

  ~Rig() {
    for (auto& s : servers_) s->stop();
  }
  Rig(const Rig&) = delete;
  Rig& operator=(const Rig&) = delete;

  const CaptureConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return schedule_; }
  const std::vector<DeviceEndpoint>& endpoints() const { return endpoints_; }
  const RigOptions& options() const { return opt_; }

  RigPhase state() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  nlohmann::ordered_json status() const {
    nlohmann::ordered_json j;
    {
      std::lock_guard lock(mu_);
      j["session_id"] = session_id_;
      j["state"] = to_string(state_);
      j["config"] = cfg_.name;
      if (!archive_.empty()) j["archive"] = archive_.string();
      if (last_diff_) j["verified"] = last_diff_->empty();
      if (!error_.empty()) j["error"] = error_;
    }
    auto devs = nlohmann::ordered_json::array();
    for (const auto& ep : endpoints_) {
      nlohmann::ordered_json d{{"id", ep.device}, {"port", ep.port}};
      try {
        const auto st = DeviceClient(ep.host, ep.port).status();
        for (const char* k : {"mode", "state", "frames_expected", "frames_captured", "timed_out", "latest_frame_id"})
          d[k] = st[k];
      } catch (const std::exception& e) {
        d["state"] = "unreachable";
        d["error"] = e.what();
      }
      devs.push_back(std::move(d));
    }
    j["devices"] = std::move(devs);
    return j;
  }

  void set_preview(bool on) {
    {
      std::lock_guard lock(mu_);
      if (state_ == RigPhase::capturing || state_ == RigPhase::packaging)
        throw ConflictError("rig is capturing");
      state_ = on ? RigPhase::previewing : RigPhase::idle;
    }
    for (const auto& ep : endpoints_) {
      DeviceClient cli(ep.host, ep.port);
      if (on && cli.status()["state"] == "done") cli.reset();
      cli.set_params({{"preview", on}});
    }
  }

  std::optional<PreviewFrame> preview(const std::string& device) const {
    for (const auto& ep : endpoints_)
      if (ep.device == device) return DeviceClient(ep.host, ep.port).preview();
    throw Error("no device '" + device + "' in the rig");
  }

  static std::string session_name(const CaptureConfig& cfg, const CaptureParams& p) {
    return sanitize(cfg.name + "-" + (p.preset.empty() ? std::string("empty") : p.preset) + "-s" +
                    std::to_string(p.seeds.subject) + "-p" + std::to_string(p.seeds.presentation) + "-" +
                    std::to_string(p.seed));
  }

  /// One capture: requests to every device, controller replay over
  /// POST /trigger, frame collection, archive write and verification.
  CaptureResult capture(const CaptureParams& p) {
    const auto t0 = std::chrono::steady_clock::now();
    CaptureResult res;
    res.session_id = session_name(cfg_, p);
    {
      std::lock_guard lock(mu_);
      if (state_ == RigPhase::capturing || state_ == RigPhase::packaging)
        throw ConflictError("rig is already capturing");
      state_ = RigPhase::capturing;
      session_id_ = res.session_id;
      archive_.clear();
      last_diff_.reset();
      error_.clear();
    }
    std::filesystem::create_directories(p.out_dir);
    SceneBinding binding;
    binding.preset = p.preset;
    binding.seeds = p.seeds;
    binding.seed = p.seed;
    binding.divisor = opt_.divisor;
    try {
      std::vector<DeviceClient> clients;
      for (const auto& ep : endpoints_) clients.emplace_back(ep.host, ep.port);
      for (std::size_t i = 0; i < endpoints_.size(); ++i) {
        auto& cli = clients[i];
        const auto st = cli.status()["state"].get<std::string>();
        if (st == "previewing") cli.set_params({{"preview", false}});
        if (st == "done") cli.reset();
        cli.set_params({{"scene", binding.to_json()}, {"deadline_ms", opt_.deadline_ms}});
        cli.capture(request_for(cfg_, schedule_, endpoints_[i].device));
      }
      wait_all(clients, {"capturing", "done"}, "ready");

      std::map<std::string, std::size_t> index;
      for (std::size_t i = 0; i < endpoints_.size(); ++i) index[endpoints_[i].device] = i;
      RigClock clock;
      res.log = replay_triggers(cfg_, schedule_, clock, [&](const std::string& dev, const TriggerInput& in) {
        auto it = index.find(dev);
        if (it == index.end()) return;
        if (!clients[it->second].trigger(in)["accepted"].get<bool>() && opt_.log)
          opt_.log("warning: device '" + dev + "' ignored the pulse at t=" + std::to_string(in.t_ms));
      });
      wait_all(clients, {"done"}, "finished");

      set_state(RigPhase::packaging);
      FrameGroups groups;
      for (auto& cli : clients) {
        const auto n = cli.status()["frames_captured"].get<std::size_t>();
        std::vector<Frame> frames;
        frames.reserve(n);
        for (std::size_t i = 0; i < n; ++i) frames.push_back(cli.frame(i));
        group_frames(groups, std::move(frames));
      }
      ArchiveOptions ao;
      ao.attributes = capture_attributes(cfg_, binding);
      ao.attributes["session_id"] = res.session_id;
      res.archive = p.out_dir / (res.session_id + ".mbc1");
      res.summary = write_archive(groups, cfg_, res.archive, ao);
      res.diff = verify_archive(read_archive(res.archive), cfg_);
      if (!res.diff.empty()) throw Error("archive accounting differs from the schedule:\n" + res.diff.to_string());
    } catch (const std::exception& e) {
      std::ofstream(p.out_dir / (res.session_id + ".failed.ndjson")) << res.log.to_ndjson();
      std::lock_guard lock(mu_);
      state_ = RigPhase::failed;
      error_ = e.what();
      throw;
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard lock(mu_);
    state_ = RigPhase::done;
    archive_ = res.archive;
    last_diff_ = res.diff;
    return res;
  }

 private:
  void set_state(RigPhase s) {
    std::lock_guard lock(mu_);
    state_ = s;
  }

  // Polls every device until its session state is one of `ok`; a timed-out
  // device fails the wait, naming it.
  void wait_all(std::vector<DeviceClient>& clients, std::set<std::string> ok, const char* what) {
    const auto give_up = std::chrono::steady_clock::now() + std::chrono::milliseconds(opt_.deadline_ms);
    for (std::size_t i = 0; i < clients.size(); ++i) {
      for (;;) {
        const auto st = clients[i].status();
        if (st.contains("error")) throw Error("device '" + endpoints_[i].device + "': " + st["error"].get<std::string>());
        if (ok.count(st["state"].get<std::string>())) break;
        if (st["timed_out"].get<bool>() || std::chrono::steady_clock::now() > give_up)
          throw TimeoutError("device '" + endpoints_[i].device + "' not " + what + " after " +
                             std::to_string(opt_.deadline_ms) + " ms (" + st["frames_captured"].dump() + "/" +
                             st["frames_expected"].dump() + " frames)");
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    }
  }

  CaptureConfig cfg_;
  RigOptions opt_;
  Schedule schedule_;
  std::vector<std::unique_ptr<DeviceServer>> servers_;
  std::vector<DeviceEndpoint> endpoints_;
  mutable std::mutex mu_;
  RigPhase state_ = RigPhase::idle;
  std::string session_id_;
  std::filesystem::path archive_;
  std::optional<AccountingDiff> last_diff_;
  std::string error_;
};

inline std::unique_ptr<Rig> rig_up(const CaptureConfig& cfg, RigOptions opt = {}) {
  return std::make_unique<Rig>(cfg, std::move(opt));
}

// ---------------------------------------------------------------------------
// Console REST surface

struct ConsoleOptions {
  std::filesystem::path archive_dir = "archives";
  std::filesystem::path runs_dir = "runs";
  std::uint64_t default_seed = 0;
};

/// Archives in `dir` with their verification result against `cfg`.
inline nlohmann::ordered_json list_archives(const std::filesystem::path& dir, const CaptureConfig* cfg) {
  auto out = nlohmann::ordered_json::array();
  if (!std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".mbc1") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    nlohmann::ordered_json a{{"name", f.filename().string()}, {"bytes", std::filesystem::file_size(f)}};
    try {
      const auto r = read_archive(f);
      a["datasets"] = r.datasets.size();
      a["attributes"] = r.attributes;
      if (cfg) {
        const auto diff = verify_archive(r, *cfg);
        a["verified"] = diff.empty();
        if (!diff.empty()) a["diff"] = diff.to_string();
      }
    } catch (const ArchiveError& e) {
      a["verified"] = false;
      a["error"] = e.what();
    }
    out.push_back(std::move(a));
  }
  return out;
}

/// Schedule, cycle lanes and accounting for the timeline view.
inline nlohmann::ordered_json schedule_document(const CaptureConfig& cfg, const Schedule& s) {
  nlohmann::ordered_json j;
  j["config"] = cfg.name;
  j["schedule"] = schedule_to_json(s);
  j["cycle"] = cycle_to_json(cfg);
  j["stats"] = stats_to_json(schedule_stats(s, cfg));
  return j;
}

class ConsoleServer {
 public:
  ConsoleServer(Rig& rig, ConsoleOptions opt) : rig_(rig), opt_(std::move(opt)) {
    server_.set_socket_options(detail::exclusive_socket);
    routes();
  }
  ~ConsoleServer() { stop(); }
  ConsoleServer(const ConsoleServer&) = delete;
  ConsoleServer& operator=(const ConsoleServer&) = delete;

  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ <= 0) throw Error("console cannot bind port " + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
    if (worker_.joinable()) worker_.join();
  }

  /// Blocks until a capture started over REST has finished.
  void wait_capture() {
    if (worker_.joinable()) worker_.join();
  }

 private:
  void routes() {
    server_.Get("/rig/status", [this](const httplib::Request&, httplib::Response& res) {
      detail::guarded(res, [&] { detail::json_reply(res, nlohmann::json::parse(rig_.status().dump())); });
    });
    server_.Get("/rig/schedule", [this](const httplib::Request&, httplib::Response& res) {
      detail::guarded(res, [&] {
        detail::json_reply(res, nlohmann::json::parse(schedule_document(rig_.config(), rig_.schedule()).dump()));
      });
    });
    server_.Post("/rig/capture", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] { start_capture(req, res); });
    });
    server_.Post("/rig/preview", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        rig_.set_preview(body.value("on", true));
        detail::json_reply(res, {{"state", to_string(rig_.state())}});
      });
    });
    server_.Get(R"(/rig/preview/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const std::string device = req.matches[1].str();
        const auto& eps = rig_.endpoints();
        if (std::none_of(eps.begin(), eps.end(), [&](const DeviceEndpoint& e) { return e.device == device; })) {
          detail::json_reply(res, {{"error", "no device '" + device + "'"}}, 404);
          return;
        }
        const auto p = rig_.preview(device);
        if (!p) {
          res.status = 204;
          return;
        }
        const auto format = req.has_param("format") ? req.get_param_value("format") : std::string("png");
        res.set_header("X-Frame-Id", std::to_string(p->id));
        res.set_header("X-Timestamp-Ms", std::to_string(p->frame.timestamp_ms));
        if (format == "png") {
          res.set_content(encode_png(p->frame), "image/png");
        } else if (format == "pgm") {
          res.set_content(encode_pgm(p->frame), "image/x-portable-graymap");
        } else {
          res.set_content(encode_msf1(p->frame), "application/octet-stream");
        }
      });
    });
    server_.Get("/archives", [this](const httplib::Request&, httplib::Response& res) {
      detail::guarded(res, [&] {
        detail::json_reply(res, nlohmann::json::parse(list_archives(opt_.archive_dir, &rig_.config()).dump()));
      });
    });
    server_.Get(R"(/runs/([^/]+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const std::string id = req.matches[1].str();
        const auto path = opt_.runs_dir / id / "report.json";
        if (id.find("..") != std::string::npos || !std::filesystem::exists(path)) {
          detail::json_reply(res, {{"error", "no report for run '" + id + "'"}}, 404);
          return;
        }
        std::ifstream in(path);
        detail::json_reply(res, nlohmann::json::parse(in));
      });
    });
  }

  void start_capture(const httplib::Request& req, httplib::Response& res) {
    const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
    std::lock_guard lock(mu_);
    const auto st = rig_.state();
    if (st == RigPhase::capturing || st == RigPhase::packaging) throw ConflictError("rig is already capturing");
    if (worker_.joinable()) worker_.join();
    CaptureParams p;
    p.preset = body.value("preset", std::string{});
    p.seed = body.value("seed", opt_.default_seed);
    p.seeds.subject = body.value("subject_seed", p.seed);
    p.seeds.presentation = body.value("presentation_seed", p.seed);
    p.out_dir = opt_.archive_dir;
    if (!p.preset.empty()) make_preset(p.preset, p.seeds);  // reject unknown presets before starting
    const auto id = Rig::session_name(rig_.config(), p);
    worker_ = std::thread([this, p] {
      try {
        rig_.capture(p);
      } catch (const std::exception&) {
        // The rig records the failure; /rig/status reports it.
      }
    });
    // Wait until the rig has left idle so a status poll right after sees the session.
    while (rig_.state() != RigPhase::capturing && rig_.state() != RigPhase::packaging &&
           rig_.state() != RigPhase::done && rig_.state() != RigPhase::failed)
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    detail::json_reply(res, {{"session_id", id}, {"state", to_string(rig_.state())}}, 202);
  }

  Rig& rig_;
  ConsoleOptions opt_;
  httplib::Server server_;
  std::thread thread_;
  std::thread worker_;
  std::mutex mu_;
  int port_ = 0;
};

}  // namespace specrig
