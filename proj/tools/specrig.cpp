// specrig command line: schedules, rig control, device servers, dataset
// synthesis, training/evaluation and archive utilities.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "specrig/experiment.hpp"
#include "specrig/png.hpp"
#include "specrig/rig.hpp"

#include <CLI11.hpp>

using namespace specrig;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::atomic<bool> g_stop{false};

void wait_for_signal() {
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

LogFn stderr_log(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) { std::cerr << line << "\n"; };
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + p.string() + "'");
}

fs::path fixture_or_path(const std::string& s) {
  if (fs::exists(s)) return s;
  const auto fx = default_config_path(s);
  if (fs::exists(fx)) return fx;
  throw Error("no configuration '" + s + "' (neither a file nor a bundled fixture)");
}

/// "--ports 9000" is a base port; "--ports 9000,9001,..." lists one port per device.
RigOptions rig_options(CaptureConfig& cfg, const std::string& ports, int divisor, bool attach, bool quiet) {
  RigOptions opt;
  opt.divisor = divisor;
  opt.attach = attach;
  opt.log = stderr_log(quiet);
  opt.port_base = env_port_base();
  if (!ports.empty()) {
    std::vector<int> list;
    std::stringstream ss(ports);
    for (std::string item; std::getline(ss, item, ',');) list.push_back(std::stoi(item));
    if (list.size() == 1) {
      opt.port_base = list[0];
    } else {
      if (list.size() != cfg.devices.size())
        throw Error("--ports lists " + std::to_string(list.size()) + " ports for " +
                    std::to_string(cfg.devices.size()) + " devices");
      for (std::size_t i = 0; i < list.size(); ++i) cfg.devices[i].port = list[i];
      opt.port_base = 0;
    }
  }
  return opt;
}

httplib::Client client_for(const std::string& url) {
  httplib::Client cli(url);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(120);
  return cli;
}

nlohmann::json get_json(httplib::Client& cli, const std::string& path) {
  auto res = cli.Get(path);
  if (!res) throw Error("GET " + path + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw Error("GET " + path + ": HTTP " + std::to_string(res->status) + " " + res->body);
  return nlohmann::json::parse(res->body);
}

void print_devices(const Rig& rig) {
  for (const auto& ep : rig.endpoints())
    std::cout << "  " << std::left << std::setw(12) << ep.device << ep.host << ":" << ep.port << "\n";
}

// ---------------------------------------------------------------------------

int cmd_schedule(const std::string& config, bool as_json) {
  const auto cfg = load_config(fixture_or_path(config));
  const auto s = compile_schedule(cfg);
  if (as_json) {
    std::cout << schedule_document(cfg, s).dump(1) << "\n";
    return 0;
  }
  const auto st = schedule_stats(s, cfg);
  std::cout << cfg.name << ": " << s.total_duration_ms << " ms, " << s.events.size() << " controller events\n";
  std::cout << std::left << std::setw(14) << "device" << std::setw(14) << "data type" << std::setw(22) << "lit"
            << std::setw(22) << "non-lit" << "frames\n";
  for (const auto& d : cfg.devices)
    for (const auto& row : st.rows)
      if (row.device == d.id)
        std::cout << std::setw(14) << row.device << std::setw(14) << row.data_type << std::setw(22)
                  << row.lit_notation << std::setw(22) << row.nonlit_notation << row.lit_frames + row.nonlit_frames
                  << "\n";
  return 0;
}

int cmd_rig_up(const std::string& config, const std::string& ports, int console_port, const fs::path& archives,
               const fs::path& runs, int divisor, bool attach, bool quiet) {
  auto cfg = load_config(fixture_or_path(config));
  auto rig = rig_up(cfg, rig_options(cfg, ports, divisor, attach, quiet));
  ConsoleServer console(*rig, {archives, runs, env_seed()});
  const int port = console.start("127.0.0.1", console_port);
  std::cout << "rig '" << cfg.name << "' up with " << rig->endpoints().size() << " devices\n";
  print_devices(*rig);
  std::cout << "console API on http://127.0.0.1:" << port << "\n" << std::flush;
  wait_for_signal();
  console.stop();
  return 0;
}

int cmd_rig_capture(const std::string& url, const std::string& config, const std::string& preset,
                    std::uint64_t seed, const fs::path& out, int divisor, bool quiet) {
  if (!url.empty()) {
    auto cli = client_for(url);
    const nlohmann::json body{{"preset", preset}, {"seed", seed}};
    auto res = cli.Post("/rig/capture", body.dump(), "application/json");
    if (!res) throw Error("POST /rig/capture: " + httplib::to_string(res.error()));
    if (res->status != 202) throw Error("POST /rig/capture: HTTP " + std::to_string(res->status) + " " + res->body);
    for (;;) {
      const auto st = get_json(cli, "/rig/status");
      const auto state = st.value("state", std::string{});
      if (state == "done") {
        std::cout << st.value("archive", std::string{}) << "\n";
        return 0;
      }
      if (state == "failed") throw Error("capture failed: " + st.value("error", std::string{}));
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
  }
  auto cfg = load_config(fixture_or_path(config));
  auto rig = rig_up(cfg, rig_options(cfg, "", divisor, false, quiet));
  const auto r = rig->capture({preset, {seed, seed}, seed, out});
  std::cerr << r.session_id << ": " << r.summary.datasets.size() << " datasets, " << r.summary.file_bytes
            << " bytes, verified in " << std::fixed << std::setprecision(2) << r.seconds << " s\n";
  std::cout << r.archive.string() << "\n";
  return 0;
}

std::string encode_as(const Frame& f, const std::string& format) {
  if (format == "png") return encode_png(f);
  if (format == "pgm") return encode_pgm(f);
  if (format == "msf1") return encode_msf1(f);
  throw Error("unknown preview format '" + format + "'");
}

int cmd_rig_preview(const std::string& url, const std::string& config, const std::string& device,
                    const std::string& format, const fs::path& out, const std::string& toggle, bool quiet) {
  if (!url.empty()) {
    auto cli = client_for(url);
    if (!toggle.empty()) {
      const nlohmann::json body{{"on", toggle == "on"}};
      auto res = cli.Post("/rig/preview", body.dump(), "application/json");
      if (!res || res->status != 200) throw Error("POST /rig/preview failed");
      std::cout << res->body << "\n";
      if (device.empty()) return 0;
    }
    if (device.empty()) throw Error("--device is required");
    for (int i = 0; i < 100; ++i) {
      auto res = cli.Get("/rig/preview/" + device + "?format=" + format);
      if (!res) throw Error("GET preview: " + httplib::to_string(res.error()));
      if (res->status == 200) {
        write_text(out, res->body);
        std::cout << out.string() << "\n";
        return 0;
      }
      if (res->status != 204) throw Error("GET preview: HTTP " + std::to_string(res->status) + " " + res->body);
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    throw Error("no preview frame from '" + device + "'; is preview on?");
  }
  if (device.empty()) throw Error("--device is required");
  auto cfg = load_config(fixture_or_path(config));
  auto rig = rig_up(cfg, rig_options(cfg, "", 4, false, quiet));
  rig->set_preview(true);
  for (int i = 0; i < 200; ++i) {
    if (auto p = rig->preview(device)) {
      write_text(out, encode_as(p->frame, format));
      std::cout << out.string() << "\n";
      return 0;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  throw Error("no preview frame from '" + device + "'");
}

int cmd_rig_status(const std::string& url) {
  auto cli = client_for(url);
  std::cout << get_json(cli, "/rig/status").dump(1) << "\n";
  return 0;
}

int cmd_device_serve(const std::string& config, const std::string& device, const std::string& host, int port,
                     bool quiet) {
  const auto cfg = load_config(fixture_or_path(config));
  const auto* spec = cfg.find_device(device);
  if (!spec) throw Error("no device '" + device + "' in '" + cfg.name + "'");
  DeviceServer server(*spec, stderr_log(quiet));
  const int bound = server.start(host, port > 0 ? port : spec->port);
  std::cout << "device '" << device << "' on http://" << host << ":" << bound << "\n" << std::flush;
  wait_for_signal();
  server.stop();
  return 0;
}

int cmd_synth(const fs::path& spec_path, const fs::path& out, std::uint64_t seed, bool quiet) {
  const auto j = ojson::parse(read_text(spec_path));
  const auto spec = SynthSpec::from_json(j, spec_path.parent_path());
  const auto m = synth_dataset(spec, out, seed, stderr_log(quiet));
  std::cout << m.samples.size() << " samples, manifest " << (out / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train(const std::vector<fs::path>& manifests, const std::string& channels, const std::string& protocol,
              const fs::path& run, std::uint64_t seed, int epochs, double lr, int batch, int patience, int downscale,
              int hidden, bool quiet) {
  std::vector<Manifest> ms;
  for (const auto& p : manifests) ms.push_back(load_manifest(p));
  EvalOptions opt;
  opt.protocol = protocol;
  opt.seed = seed;
  opt.hp.epochs = epochs;
  opt.hp.lr = lr;
  opt.hp.batch_size = batch;
  opt.hp.patience = patience;
  opt.extract.downscale = downscale;
  opt.model.h = hidden;
  opt.log = stderr_log(quiet);
  fs::create_directories(run);
  const auto rep = train_eval(ms, parse_channels(channels), opt, run);
  std::cout << report_csv(report_lines(rep));
  std::cerr << "run written to " << run.string() << " (" << std::fixed << std::setprecision(1) << rep.seconds
            << " s)\n";
  return 0;
}

std::string metric(const nlohmann::json& m, const char* key) {
  if (!m.contains(key) || m[key].is_null()) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << m[key].get<double>();
  return s.str();
}

int cmd_report(const fs::path& run) {
  const auto j = nlohmann::json::parse(read_text(run / "report.json"));
  std::cout << "protocol " << j.value("protocol", std::string{}) << "\n";
  std::cout << std::left << std::setw(44) << "experiment / category" << std::setw(10) << "AUC" << std::setw(12)
            << "TPR@0.2%" << std::setw(10) << "BPCER20" << "n\n";
  for (const auto& e : j.at("experiments")) {
    const auto& p = e.contains("pooled") ? e["pooled"] : nlohmann::json::object();
    std::cout << std::setw(44) << e.value("name", std::string{}) << std::setw(10) << metric(p, "auc")
              << std::setw(12) << metric(p, "tpr_at_0.2pct_fpr") << std::setw(10) << metric(p, "bpcer20")
              << p.value("bona_fide", 0) << "+" << p.value("attacks", 0) << "\n";
    if (e.contains("categories"))
      for (const auto& r : e["categories"].value("rows", nlohmann::json::array()))
        std::cout << "  " << std::setw(42) << r.value("category", std::string{}) << std::setw(10) << metric(r, "auc")
                  << std::setw(12) << metric(r, "tpr_at_0.2pct_fpr") << std::setw(10) << metric(r, "bpcer20")
                  << r.value("bona_fide", 0) << "+" << r.value("attacks", 0) << "\n";
  }
  return 0;
}

int cmd_archive_inspect(const fs::path& file, bool as_json) {
  const auto r = read_archive(file);
  if (as_json) {
    ojson j{{"path", file.string()}, {"version", r.version}, {"capture_time", r.capture_time}};
    j["attributes"] = ojson::parse(r.attributes.dump());
    auto ds = ojson::array();
    for (const auto& d : r.datasets)
      ds.push_back(ojson{{"name", d.name},
                         {"kind", d.kind},
                         {"dtype", dtype_name(d.dtype)},
                         {"shape", d.shape},
                         {"bit_depth", d.bit_depth},
                         {"device", d.device},
                         {"tag", d.tag},
                         {"bytes", d.length},
                         {"checksum", detail::hex64(d.checksum)}});
    j["datasets"] = std::move(ds);
    std::cout << j.dump(1) << "\n";
    return 0;
  }
  std::cout << file.string() << ": MBC1 v" << r.version << ", captured " << r.capture_time << "\n";
  if (!r.attributes.empty()) std::cout << "attributes " << r.attributes.dump() << "\n";
  std::cout << std::left << std::setw(26) << "dataset" << std::setw(12) << "device" << std::setw(10) << "tag"
            << std::setw(6) << "dtype" << std::setw(20) << "shape" << "checksum\n";
  for (const auto& d : r.datasets) {
    std::string shape;
    for (auto v : d.shape) shape += (shape.empty() ? "" : "x") + std::to_string(v);
    std::cout << std::setw(26) << d.name << std::setw(12) << d.device << std::setw(10) << d.tag << std::setw(6)
              << dtype_name(d.dtype) << std::setw(20) << shape << detail::hex64(d.checksum) << "\n";
  }
  return 0;
}

int cmd_archive_verify(const fs::path& file, const std::string& config) {
  const auto r = read_archive(file);
  const auto cfg = config.empty() ? parse_config(r.config_text) : load_config(fixture_or_path(config));
  for (const auto& d : r.datasets) r.bytes(d.name);  // checksum every payload
  const auto diff = verify_archive(r, cfg);
  if (diff.empty()) {
    std::cout << file.string() << ": ok, " << r.datasets.size() << " datasets match '" << cfg.name << "'\n";
    return 0;
  }
  std::cout << file.string() << ": accounting differs from '" << cfg.name << "'\n" << diff.to_string() << "\n";
  return 1;
}

fs::path hdf5_converter() {
  if (const char* p = std::getenv("SPECRIG_HDF5_CONVERTER"); p && *p) return p;
  return fs::path(SPECRIG_TOOLS_DIR) / "mbc1_to_hdf5.py";
}

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

int cmd_export_hdf5(const fs::path& file, const fs::path& out) {
  read_archive(file);  // fail fast on a bad archive
  const auto script = hdf5_converter();
  if (!fs::exists(script)) throw Error("HDF5 converter not found at '" + script.string() + "'");
  const std::string python = std::getenv("PYTHON") ? std::getenv("PYTHON") : "python3";
  const std::string cmd = shell_quote(python) + " " + shell_quote(script.string()) + " " +
                          shell_quote(file.string()) + " " + shell_quote(out.string());
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw Error("HDF5 conversion failed (exit " + std::to_string(rc) + ")");
  std::cout << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"specrig: multispectral biometrics rig simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress logging");
  int rc = 0;
  std::function<int()> action;

  // schedule
  auto* sched = app.add_subcommand("schedule", "Compile a configuration and print its frame accounting");
  std::string sched_config;
  bool sched_json = false;
  sched->add_option("config", sched_config, "Configuration file or fixture name (face, finger, iris)")->required();
  sched->add_flag("--json", sched_json, "Print the full schedule document");
  sched->callback([&] { action = [&] { return cmd_schedule(sched_config, sched_json); }; });

  // rig
  auto* rig = app.add_subcommand("rig", "Run the capture rig");
  rig->require_subcommand(1);
  std::string rig_config = "face", rig_ports, rig_url, preset, device, format = "png", toggle;
  std::uint64_t seed = env_seed();
  int console_port = 8080, divisor = 4;
  bool attach = false;
  fs::path archives = "archives", runs = "runs", out = "archives";

  auto* up = rig->add_subcommand("up", "Start device servers and the console API; runs until interrupted");
  up->add_option("--config", rig_config, "Configuration file or fixture name")->required();
  up->add_option("--ports", rig_ports, "Base port, or one comma-separated port per device");
  up->add_option("--console-port", console_port, "Console API port (0 picks one)");
  up->add_option("--archives", archives, "Archive directory");
  up->add_option("--runs", runs, "Training run directory");
  up->add_option("--divisor", divisor, "Frame downscale factor for simulated sensors")->check(CLI::PositiveNumber);
  up->add_flag("--attach", attach, "Use device servers that are already listening");
  up->callback([&] {
    action = [&] { return cmd_rig_up(rig_config, rig_ports, console_port, archives, runs, divisor, attach, quiet); };
  });

  auto* cap = rig->add_subcommand("capture", "Capture one presentation and write a verified archive");
  cap->add_option("--preset", preset, "Scene preset, e.g. finger/silicone")->required();
  cap->add_option("--seed", seed, "Seed (default SPECRIG_SEED or 0)");
  cap->add_option("--out", out, "Output directory");
  cap->add_option("--config", rig_config, "Configuration for a one-shot rig");
  cap->add_option("--url", rig_url, "Console API of a running rig, e.g. http://127.0.0.1:8080");
  cap->add_option("--divisor", divisor, "Frame downscale factor")->check(CLI::PositiveNumber);
  cap->callback([&] {
    action = [&] { return cmd_rig_capture(rig_url, rig_config, preset, seed, out, divisor, quiet); };
  });

  auto* prev = rig->add_subcommand("preview", "Toggle preview or save the latest preview frame of a device");
  fs::path prev_out = "preview.png";
  prev->add_option("--device", device, "Device id");
  prev->add_option("--format", format, "png, pgm or msf1")->check(CLI::IsMember({"png", "pgm", "msf1"}));
  prev->add_option("--out", prev_out, "Output file");
  prev->add_option("--config", rig_config, "Configuration for a one-shot rig");
  prev->add_option("--url", rig_url, "Console API of a running rig");
  prev->add_option("--set", toggle, "Turn preview on or off (with --url)")->check(CLI::IsMember({"on", "off"}));
  prev->callback([&] {
    action = [&] { return cmd_rig_preview(rig_url, rig_config, device, format, prev_out, toggle, quiet); };
  });

  auto* status = rig->add_subcommand("status", "Print the status of a running rig");
  status->add_option("--url", rig_url, "Console API of a running rig")->required();
  status->callback([&] { action = [&] { return cmd_rig_status(rig_url); }; });

  // device
  auto* dev = app.add_subcommand("device", "Device servers");
  dev->require_subcommand(1);
  auto* serve = dev->add_subcommand("serve", "Serve one device of a configuration until interrupted");
  std::string dev_config, dev_host = "127.0.0.1";
  int dev_port = 0;
  serve->add_option("--config", dev_config, "Configuration file or fixture name")->required();
  serve->add_option("--device", device, "Device id")->required();
  serve->add_option("--host", dev_host, "Bind address");
  serve->add_option("--port", dev_port, "Port (default: the configured port)");
  serve->callback([&] { action = [&] { return cmd_device_serve(dev_config, device, dev_host, dev_port, quiet); }; });

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize a dataset of archives with a manifest");
  fs::path synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "Synthesis spec (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", seed, "Seed (default SPECRIG_SEED or 0)");
  synth->callback([&] { action = [&] { return cmd_synth(synth_spec, synth_out, seed, quiet); }; });

  // train
  auto* tr = app.add_subcommand("train", "Train and evaluate per-channel models");
  std::vector<fs::path> manifests;
  std::string channels, protocol = "3fold";
  fs::path run = "runs/run";
  int epochs = 10, batch = 16, patience = 10, downscale = 4, hidden = 16;
  double lr = 2e-3;
  tr->add_option("--manifest", manifests, "Manifest(s); cross protocol needs datasets I and II")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--channels", channels, "Experiments, comma-separated; '+' joins channels")->required();
  tr->add_option("--protocol", protocol, "3fold or cross")->check(CLI::IsMember({"3fold", "cross"}));
  tr->add_option("--out", run, "Run directory");
  tr->add_option("--seed", seed, "Seed (default SPECRIG_SEED or 0)");
  tr->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  tr->add_option("--lr", lr)->check(CLI::PositiveNumber);
  tr->add_option("--batch", batch)->check(CLI::PositiveNumber);
  tr->add_option("--patience", patience)->check(CLI::PositiveNumber);
  tr->add_option("--downscale", downscale)->check(CLI::PositiveNumber);
  tr->add_option("--hidden", hidden, "Hidden width h")->check(CLI::PositiveNumber);
  tr->callback([&] {
    action = [&] {
      return cmd_train(manifests, channels, protocol, run, seed, epochs, lr, batch, patience, downscale, hidden,
                       quiet);
    };
  });

  // report
  auto* rep = app.add_subcommand("report", "Print the metrics of a training run");
  fs::path rep_run;
  rep->add_option("--run", rep_run, "Run directory")->required()->check(CLI::ExistingDirectory);
  rep->callback([&] { action = [&] { return cmd_report(rep_run); }; });

  // archive
  auto* arch = app.add_subcommand("archive", "MBC1 archive utilities");
  arch->require_subcommand(1);
  fs::path arch_file;
  std::string arch_config;
  bool arch_json = false;
  auto* inspect = arch->add_subcommand("inspect", "List datasets and attributes");
  inspect->add_option("file", arch_file)->required()->check(CLI::ExistingFile);
  inspect->add_flag("--json", arch_json);
  inspect->callback([&] { action = [&] { return cmd_archive_inspect(arch_file, arch_json); }; });
  auto* verify = arch->add_subcommand("verify", "Check checksums and frame accounting");
  verify->add_option("file", arch_file)->required()->check(CLI::ExistingFile);
  verify->add_option("--config", arch_config, "Configuration (default: the one embedded in the archive)");
  verify->callback([&] { action = [&] { return cmd_archive_verify(arch_file, arch_config); }; });

  auto* h5 = app.add_subcommand("export-hdf5", "Convert an archive to HDF5 (needs python3 with h5py)");
  fs::path h5_out;
  h5->add_option("file", arch_file)->required()->check(CLI::ExistingFile);
  h5->add_option("--out", h5_out, "Output .h5 file")->required();
  h5->callback([&] { action = [&] { return cmd_export_hdf5(arch_file, h5_out); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    rc = action ? action() : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    rc = 2;
  }
  return rc;
}
