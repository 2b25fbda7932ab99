#pragma once

// Synthetic dataset generation and PAD train/eval protocols on top of the
// capture stack: seeded captures per preset, a manifest per dataset,
// subject-disjoint splits, per-channel models, Mean fusion and reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/calib_preproc.hpp"
#include "specrig/capture_archive.hpp"
#include "specrig/pad_metrics.hpp"
#include "specrig/pad_model.hpp"
#include "specrig/rig.hpp"

namespace specrig {

// ---------------------------------------------------------------------------
// Synthesis

struct ManifestSample {
  std::string id;
  std::string archive;  // relative to the manifest directory
  std::string preset;
  std::string category;
  int label = 0;
  int subject = 0;
  std::string dataset;
};

struct Manifest {
  std::filesystem::path dir;
  std::string name;
  std::string dataset;
  std::uint64_t seed = 0;
  std::vector<ManifestSample> samples;

  std::filesystem::path archive_path(const ManifestSample& s) const { return dir / s.archive; }
};

inline nlohmann::ordered_json manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["name"] = m.name;
  j["dataset"] = m.dataset;
  j["seed"] = m.seed;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : m.samples)
    arr.push_back({{"id", s.id}, {"archive", s.archive}, {"preset", s.preset}, {"category", s.category},
                   {"label", s.label}, {"subject", s.subject}, {"dataset", s.dataset}});
  j["samples"] = std::move(arr);
  return j;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  Manifest m;
  m.dir = path.parent_path();
  m.name = j.value("name", std::string{});
  m.dataset = j.value("dataset", std::string{});
  m.seed = j.value("seed", std::uint64_t{0});
  for (const auto& s : j.at("samples"))
    m.samples.push_back({s.at("id"), s.at("archive"), s.at("preset"), s.at("category"), s.at("label"),
                         s.at("subject"), s.value("dataset", m.dataset)});
  return m;
}

struct SynthSpec {
  std::string name = "synth";
  std::string dataset = "I";
  // Preset -> sample count, in generation order.
  std::vector<std::pair<std::string, int>> counts;
  // Synthetic subjects per modality; sample k of each preset belongs to subject k mod subjects.
  int subjects = 10;
  int divisor = 8;
  // Modality (preset prefix) -> configuration path; defaults to the bundled fixtures.
  std::map<std::string, std::filesystem::path> configs;

  static SynthSpec from_json(const nlohmann::ordered_json& j, const std::filesystem::path& base = {}) {
    SynthSpec s;
    s.name = j.value("name", s.name);
    s.dataset = j.value("dataset", s.dataset);
    s.subjects = j.value("subjects", s.subjects);
    s.divisor = j.value("divisor", s.divisor);
    if (s.subjects < 1) throw Error("synth spec: subjects must be >= 1");
    if (s.divisor < 1) throw Error("synth spec: divisor must be >= 1");
    for (const auto& [preset, n] : j.at("counts").items()) {
      if (!n.is_number_integer() || n.get<int>() < 0) throw Error("synth spec: count for '" + preset + "' must be >= 0");
      s.counts.emplace_back(preset, n.get<int>());
    }
    if (auto it = j.find("configs"); it != j.end())
      for (const auto& [mod, p] : it->items()) {
        std::filesystem::path path = p.get<std::string>();
        s.configs[mod] = path.is_relative() && !base.empty() ? base / path : path;
      }
    return s;
  }
};

inline std::filesystem::path default_config_path(const std::string& modality) {
#ifdef SPECRIG_FIXTURE_DIR
  return std::filesystem::path(SPECRIG_FIXTURE_DIR) / (modality + ".json");
#else
  return std::filesystem::path("fixtures") / (modality + ".json");
#endif
}

inline std::string preset_modality(const std::string& preset) { return preset.substr(0, preset.find('/')); }

/// Captures every requested sample in-process and writes one archive each
/// plus manifest.json. Identical spec and seed give identical bytes.
inline Manifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& out, std::uint64_t seed,
                              const LogFn& log = {}) {
  for (const auto& [preset, _] : spec.counts) {
    const auto& names = preset_names();
    if (std::find(names.begin(), names.end(), preset) == names.end()) throw Error("unknown preset '" + preset + "'");
  }
  std::filesystem::create_directories(out / "archives");
  Manifest m;
  m.dir = out;
  m.name = spec.name;
  m.dataset = spec.dataset;
  m.seed = seed;

  struct Suite {
    CaptureConfig cfg;
    Schedule schedule;
  };
  std::map<std::string, Suite> rigs;
  for (const auto& [preset, count] : spec.counts) {
    if (count == 0) continue;
    const auto mod = preset_modality(preset);
    if (!rigs.count(mod)) {
      auto it = spec.configs.find(mod);
      auto cfg = load_config(it != spec.configs.end() ? it->second : default_config_path(mod));
      auto sched = compile_schedule(cfg);
      rigs.emplace(mod, Suite{std::move(cfg), std::move(sched)});
    }
    const auto& rig = rigs.at(mod);
    const auto kind = preset.substr(preset.find('/') + 1);
    for (int k = 0; k < count; ++k) {
      ManifestSample s;
      std::ostringstream id;
      id << spec.dataset << '-' << mod << '-' << kind << '-' << std::setw(4) << std::setfill('0') << k;
      s.id = sanitize(id.str());
      s.preset = preset;
      s.subject = k % spec.subjects;
      s.dataset = spec.dataset;
      s.archive = "archives/" + s.id + ".mbc1";

      SceneBinding b;
      b.preset = preset;
      b.seeds.subject = hash_combine(seed, hash_string(mod + "/subject/" + std::to_string(s.subject)));
      b.seeds.presentation = hash_combine(seed, hash_string(s.id + "/presentation"));
      b.seed = hash_combine(seed, hash_string(s.id));
      b.divisor = spec.divisor;
      const auto groups = capture_in_process(rig.cfg, rig.schedule, b);
      ArchiveOptions ao;
      ao.attributes = capture_attributes(rig.cfg, b);
      ao.attributes["sample_id"] = s.id;
      ao.attributes["subject"] = s.subject;
      ao.attributes["dataset"] = s.dataset;
      write_archive(groups, rig.cfg, out / s.archive, ao);
      s.category = ao.attributes["category"].get<std::string>();
      s.label = ao.attributes["label"].get<int>();
      if (log) log("captured " + s.id);
      m.samples.push_back(std::move(s));
    }
  }
  std::ofstream(out / "manifest.json") << manifest_to_json(m).dump(1) << "\n";
  return m;
}

// ---------------------------------------------------------------------------
// Channel extraction

/// One experiment: a single dataset or a "+"-joined stack used as one
/// multi-channel input.
struct Experiment {
  std::string name;
  std::vector<std::string> datasets;
};

/// "a,b+c+d" -> experiments {a} and {b, c, d}.
inline std::vector<Experiment> parse_channels(const std::string& text) {
  std::vector<Experiment> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    Experiment e;
    e.name = item;
    std::stringstream parts(item);
    std::string d;
    while (std::getline(parts, d, '+'))
      if (!d.empty()) e.datasets.push_back(d);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw Error("no channels selected");
  return out;
}

struct ExtractOptions {
  // Input size is the modality size divided by this factor.
  int downscale = 4;
};

namespace detail {

inline PreprocModality modality_of(const std::string& dataset, const DatasetInfo& info) {
  const auto mod = preset_modality(dataset);
  if (mod == "face") return PreprocModality::face;
  if (mod == "iris") return info.tag == "lwir" ? PreprocModality::iris_thermal : PreprocModality::iris;
  return PreprocModality::finger;
}

inline Box scene_roi(PreprocModality m, const nlohmann::json& attrs, const DeviceSpec& dev) {
  if (m == PreprocModality::finger) {
    if (dev.roi) return Box{(*dev.roi)[0], (*dev.roi)[1], (*dev.roi)[2], (*dev.roi)[3]};
    return map_box(finger_roi(), dev.view);
  }
  if (m == PreprocModality::face) {
    if (!attrs.contains("face_box")) throw Error("archive has no face_box attribute");
    const auto& b = attrs["face_box"];
    return map_box(face_roi(Box{b[0], b[1], b[2], b[3]}), dev.view);
  }
  if (!attrs.contains("iris_circle")) throw Error("archive has no iris_circle attribute");
  const auto& c = attrs["iris_circle"];
  const Circle circle{c[0], c[1], c[2]};
  return map_box(m == PreprocModality::iris_thermal ? iris_thermal_roi(circle) : iris_roi(circle), dev.view);
}

}  // namespace detail

/// Preprocessed channel images of one archive, keyed by dataset. Finger
/// channels average every frame; face and iris channels take the single frame
/// closest in time to the middle frame of the first requested dataset.
inline std::map<std::string, Image> extract_channels(const ArchiveReader& r, const std::set<std::string>& wanted,
                                                     const std::string& reference, const ExtractOptions& opt) {
  const auto cfg = parse_config(r.config_text);
  std::optional<std::int64_t> ref_t;
  if (const auto* ref = r.find(reference); ref && !ref->timestamps_ms.empty())
    ref_t = ref->timestamps_ms[ref->timestamps_ms.size() / 2];
  std::map<std::string, Image> out;
  for (const auto& name : wanted) {
    const auto& info = r.info(name);
    const auto* dev = cfg.find_device(info.device);
    if (!dev) throw Error("archive config has no device '" + info.device + "'");
    const auto m = detail::modality_of(name, info);
    auto spec = make_preprocess_spec(m, info.bit_depth, detail::scene_roi(m, r.attributes, *dev), false);
    spec.out_w = std::max(1, spec.out_w / opt.downscale);
    spec.out_h = std::max(1, spec.out_h / opt.downscale);
    std::vector<Frame> dark;
    for (const std::string& dtag : {"dark_" + info.tag, std::string("dark")}) {
      const auto dname = cfg.dataset_for(info.device, dtag);
      if (dname && *dname != name && r.find(*dname)) {
        dark = r.frames(*dname);
        spec.subtract_dark = true;
        break;
      }
    }
    auto frames = r.frames(name);
    if (frames.empty()) throw Error("dataset '" + name + "' has no frames");
    if (m != PreprocModality::finger && ref_t) {
      std::vector<std::int64_t> ts;
      for (const auto& f : frames) ts.push_back(f.timestamp_ms);
      frames = {frames[static_cast<std::size_t>(nearest_frame(ts, *ref_t))]};
    }
    out.emplace(name, preprocess(frames, spec, dark));
  }
  return out;
}

/// Stacks channel images into a model input.
inline TrainingSample stack_channels(const std::vector<const Image*>& chans, int label) {
  TrainingSample s;
  const int w = chans.front()->width, h = chans.front()->height;
  s.shape = {static_cast<int>(chans.size()), h, w};
  s.g = label;
  s.x.reserve(chans.size() * static_cast<std::size_t>(w) * h);
  for (const auto* c : chans) {
    if (c->width != w || c->height != h) throw Error("channel sizes differ within an experiment");
    s.x.insert(s.x.end(), c->data.begin(), c->data.end());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Protocols

struct EvalOptions {
  std::string protocol = "3fold";  // 3fold | cross
  int folds = 3;
  // Validation share of the non-test subjects (15 of 70 in the 55/15/30 split).
  double val_fraction = 15.0 / 70.0;
  // Validation share of dataset I under the cross protocol.
  double cross_val_fraction = 0.15;
  TrainHyper hp;
  PadModelConfig model;
  ExtractOptions extract;
  std::uint64_t seed = 0;
  LogFn log;
};

/// Sample indices of each split.
struct Split {
  std::string protocol;
  std::vector<std::size_t> train, val, test;
};

struct PooledSample {
  ManifestSample meta;
  std::string subject_key;  // dataset-qualified subject
  std::size_t manifest = 0;
};

namespace detail {

inline std::vector<std::size_t> take_subjects(const std::vector<PooledSample>& samples,
                                              const std::set<std::string>& subjects) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (subjects.count(samples[i].subject_key)) out.push_back(i);
  return out;
}

inline void check_split(const Split& s, const std::vector<PooledSample>& samples) {
  auto classes = [&](const std::vector<std::size_t>& idx) {
    std::set<int> c;
    for (auto i : idx) c.insert(samples[i].meta.label);
    return c.size();
  };
  if (s.train.empty() || s.val.empty() || s.test.empty())
    throw Error("fold infeasible: " + s.protocol + " has an empty train, validation or test split");
  if (classes(s.test) < 2) throw Error("fold infeasible: " + s.protocol + " test split lacks one class");
  if (classes(s.train) < 2) throw Error("fold infeasible: " + s.protocol + " training split lacks one class");
}

inline std::pair<std::set<std::string>, std::set<std::string>> split_subjects(std::vector<std::string> subjects,
                                                                               double val_fraction, Rng& rng) {
  rng.shuffle(std::span<std::string>(subjects));
  const auto n_val = static_cast<std::size_t>(std::max(1.0, std::round(val_fraction * subjects.size())));
  std::set<std::string> val(subjects.begin(), subjects.begin() + std::min(n_val, subjects.size()));
  std::set<std::string> train(subjects.begin() + std::min(n_val, subjects.size()), subjects.end());
  return {train, val};
}

}  // namespace detail

/// Subject-disjoint k-fold: shuffled subjects are dealt round-robin into
/// folds; each fold is tested once and the rest split into train and
/// validation by subject.
inline std::vector<Split> three_fold_splits(const std::vector<PooledSample>& samples, const EvalOptions& opt) {
  std::vector<std::string> subjects;
  {
    std::set<std::string> seen;
    for (const auto& s : samples)
      if (seen.insert(s.subject_key).second) subjects.push_back(s.subject_key);
  }
  std::sort(subjects.begin(), subjects.end());
  if (static_cast<int>(subjects.size()) < opt.folds)
    throw Error("fold infeasible: " + std::to_string(subjects.size()) + " subjects for " + std::to_string(opt.folds) +
                " folds");
  Rng rng(hash_combine(opt.seed, hash_string("folds")));
  rng.shuffle(std::span<std::string>(subjects));
  std::vector<std::vector<std::string>> fold_subjects(static_cast<std::size_t>(opt.folds));
  for (std::size_t i = 0; i < subjects.size(); ++i) fold_subjects[i % opt.folds].push_back(subjects[i]);
  std::vector<Split> out;
  for (int f = 0; f < opt.folds; ++f) {
    std::vector<std::string> rest;
    for (int g = 0; g < opt.folds; ++g)
      if (g != f) rest.insert(rest.end(), fold_subjects[g].begin(), fold_subjects[g].end());
    Rng vr(hash_combine(opt.seed, hash_string("val/" + std::to_string(f))));
    const auto [train, val] = detail::split_subjects(rest, opt.val_fraction, vr);
    Split s;
    s.protocol = "fold" + std::to_string(f);
    s.test = detail::take_subjects(samples, {fold_subjects[f].begin(), fold_subjects[f].end()});
    s.train = detail::take_subjects(samples, train);
    s.val = detail::take_subjects(samples, val);
    detail::check_split(s, samples);
    out.push_back(std::move(s));
  }
  return out;
}

/// Train and validate on dataset I (subject-disjoint), test on dataset II.
inline Split cross_split(const std::vector<PooledSample>& samples, const EvalOptions& opt) {
  std::vector<std::string> subjects_i;
  std::set<std::string> seen;
  Split s;
  s.protocol = "cross";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& d = samples[i].meta.dataset;
    if (d == "II") s.test.push_back(i);
    else if (d == "I" && seen.insert(samples[i].subject_key).second) subjects_i.push_back(samples[i].subject_key);
  }
  if (subjects_i.size() < 2) throw Error("fold infeasible: cross protocol needs at least 2 subjects in dataset I");
  std::sort(subjects_i.begin(), subjects_i.end());
  Rng rng(hash_combine(opt.seed, hash_string("cross")));
  const auto [train, val] = detail::split_subjects(subjects_i, opt.cross_val_fraction, rng);
  s.train = detail::take_subjects(samples, train);
  s.val = detail::take_subjects(samples, val);
  detail::check_split(s, samples);
  return s;
}

inline std::vector<PooledSample> pool_manifests(const std::vector<Manifest>& manifests) {
  std::vector<PooledSample> out;
  for (std::size_t k = 0; k < manifests.size(); ++k)
    for (const auto& s : manifests[k].samples) out.push_back({s, s.dataset + "/" + std::to_string(s.subject), k});
  if (out.empty()) throw Error("manifest is empty");
  std::set<int> labels;
  for (const auto& s : out) labels.insert(s.meta.label);
  if (labels.size() < 2) throw Error("manifest needs both bona fide and attack samples");
  return out;
}

// ---------------------------------------------------------------------------
// Train / evaluate

struct FoldResult {
  std::string protocol;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::optional<Metrics> metrics;
  std::string note;
};

struct ExperimentResult {
  std::string name;
  std::vector<FoldResult> folds;
  std::vector<ScoredSample> scores;  // pooled over test splits, aligned across experiments
  Metrics pooled;
  double mean_fold_auc = 0.0;
  CategoryReport categories;
};

struct EvalReport {
  std::string protocol;
  std::vector<Split> splits;
  std::vector<ExperimentResult> experiments;  // the last one is the Mean fusion
  double seconds = 0.0;
};

inline const ExperimentResult& find_experiment(const EvalReport& r, const std::string& name) {
  for (const auto& e : r.experiments)
    if (e.name == name) return e;
  throw Error("no experiment '" + name + "' in the report");
}

namespace detail {

inline void summarize(ExperimentResult& e, const std::vector<std::string>& expected) {
  e.pooled = compute_metrics(e.scores);
  e.categories = per_category_report(e.scores, expected);
  double sum = 0.0;
  int n = 0;
  for (const auto& f : e.folds)
    if (f.metrics) sum += f.metrics->auc, ++n;
  e.mean_fold_auc = n ? sum / n : e.pooled.auc;
}

inline std::optional<Metrics> try_metrics(const std::vector<ScoredSample>& s, std::string& note) {
  try {
    return compute_metrics(s);
  } catch (const MetricsError& err) {
    note = err.what();
    return std::nullopt;
  }
}

}  // namespace detail

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& r, const std::vector<PooledSample>& samples) {
  nlohmann::ordered_json j;
  j["protocol"] = r.protocol;
  j["seconds"] = r.seconds;
  auto splits = nlohmann::ordered_json::array();
  const double total = static_cast<double>(samples.size());
  for (const auto& s : r.splits) {
    const double used = static_cast<double>(s.train.size() + s.val.size() + s.test.size());
    std::set<std::string> test_subjects;
    for (auto i : s.test) test_subjects.insert(samples[i].subject_key);
    splits.push_back({{"protocol", s.protocol},
                      {"train", s.train.size()},
                      {"val", s.val.size()},
                      {"test", s.test.size()},
                      {"fractions", {{"train", s.train.size() / used}, {"val", s.val.size() / used},
                                     {"test", s.test.size() / used}}},
                      {"samples_used", used / total},
                      {"test_subjects", test_subjects}});
  }
  j["splits"] = std::move(splits);
  auto exps = nlohmann::ordered_json::array();
  for (const auto& e : r.experiments) {
    nlohmann::ordered_json x;
    x["name"] = e.name;
    x["mean_fold_auc"] = e.mean_fold_auc;
    x["pooled"] = metrics_to_json(e.pooled);
    auto folds = nlohmann::ordered_json::array();
    for (const auto& f : e.folds) {
      nlohmann::ordered_json fj{{"protocol", f.protocol}, {"train", f.n_train}, {"val", f.n_val}, {"test", f.n_test}};
      if (f.best_epoch) fj["best_epoch"] = f.best_epoch, fj["best_val_loss"] = f.best_val_loss;
      if (f.metrics) fj["metrics"] = metrics_to_json(*f.metrics);
      if (!f.note.empty()) fj["note"] = f.note;
      folds.push_back(std::move(fj));
    }
    x["folds"] = std::move(folds);
    x["categories"] = category_report_to_json(e.categories);
    exps.push_back(std::move(x));
  }
  j["experiments"] = std::move(exps);
  return j;
}

inline std::vector<ReportLine> report_lines(const EvalReport& r) {
  std::vector<ReportLine> lines;
  for (const auto& e : r.experiments) {
    lines.push_back({e.name, "all", e.pooled});
    for (const auto& row : e.categories.rows) lines.push_back({e.name, row.category, row.metrics});
  }
  return lines;
}

inline std::string scores_csv(const EvalReport& r, const std::vector<PooledSample>& samples) {
  std::ostringstream out;
  out.precision(10);
  out << "id,dataset,subject,label,category,protocol";
  for (const auto& e : r.experiments) out << ',' << e.name;
  out << '\n';
  if (r.experiments.empty()) return out.str();
  const auto& first = r.experiments.front().scores;
  std::map<std::string, const PooledSample*> by_id;
  for (const auto& s : samples) by_id[s.meta.id] = &s;
  for (std::size_t i = 0; i < first.size(); ++i) {
    const auto* p = by_id.at(first[i].id);
    out << first[i].id << ',' << p->meta.dataset << ',' << p->meta.subject << ',' << first[i].label << ','
        << first[i].category << ',' << first[i].protocol;
    for (const auto& e : r.experiments) out << ',' << e.scores[i].score;
    out << '\n';
  }
  return out.str();
}

/// Trains one model per experiment and split, scores the test samples, adds
/// the Mean fusion of all experiments, and writes report.json, report.csv,
/// scores.csv, training histories and checkpoints to `run_dir` (if set).
inline EvalReport train_eval(const std::vector<Manifest>& manifests, const std::vector<Experiment>& experiments,
                             const EvalOptions& opt, const std::filesystem::path& run_dir = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (experiments.empty()) throw Error("no channels selected");
  const auto samples = pool_manifests(manifests);

  EvalReport report;
  report.protocol = opt.protocol;
  if (opt.protocol == "3fold") report.splits = three_fold_splits(samples, opt);
  else if (opt.protocol == "cross") report.splits = {cross_split(samples, opt)};
  else throw Error("unknown protocol '" + opt.protocol + "' (expected 3fold or cross)");

  // Samples any split touches, preprocessed once per archive.
  std::set<std::size_t> used;
  for (const auto& s : report.splits)
    for (const auto* part : {&s.train, &s.val, &s.test}) used.insert(part->begin(), part->end());
  std::set<std::string> wanted;
  for (const auto& e : experiments) wanted.insert(e.datasets.begin(), e.datasets.end());
  std::vector<std::vector<TrainingSample>> inputs(experiments.size(), std::vector<TrainingSample>(samples.size()));
  const std::string reference = experiments.front().datasets.front();
  for (auto i : used) {
    const auto& meta = samples[i].meta;
    const auto reader = read_archive(manifests[samples[i].manifest].archive_path(meta));
    const auto images = extract_channels(reader, wanted, reference, opt.extract);
    for (std::size_t e = 0; e < experiments.size(); ++e) {
      std::vector<const Image*> chans;
      for (const auto& d : experiments[e].datasets) chans.push_back(&images.at(d));
      inputs[e][i] = stack_channels(chans, meta.label);
    }
  }
  if (opt.log) opt.log("preprocessed " + std::to_string(used.size()) + " samples");

  std::vector<std::string> expected;
  {
    std::set<std::string> cats;
    for (const auto& s : samples) cats.insert(s.meta.category);
    expected.assign(cats.begin(), cats.end());
  }
  if (!run_dir.empty()) std::filesystem::create_directories(run_dir / "models");

  for (std::size_t e = 0; e < experiments.size(); ++e) {
    ExperimentResult res;
    res.name = experiments[e].name;
    for (std::size_t k = 0; k < report.splits.size(); ++k) {
      const auto& split = report.splits[k];
      auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<TrainingSample> out;
        for (auto i : idx) out.push_back(inputs[e][i]);
        return out;
      };
      PadModelConfig mc = opt.model;
      mc.c = static_cast<int>(experiments[e].datasets.size());
      mc.seed = hash_combine(opt.model.seed, hash_string(res.name + "/" + split.protocol));
      TrainHyper hp = opt.hp;
      hp.seed = hash_combine(opt.hp.seed, hash_string(res.name + "/" + split.protocol));
      auto tr = train(gather(split.train), gather(split.val), mc, hp);
      FoldResult fr;
      fr.protocol = split.protocol;
      fr.n_train = split.train.size();
      fr.n_val = split.val.size();
      fr.n_test = split.test.size();
      fr.best_epoch = tr.best_epoch;
      fr.best_val_loss = tr.best_val_loss;
      std::vector<ScoredSample> fold_scores;
      for (auto i : split.test) {
        const auto& meta = samples[i].meta;
        fold_scores.push_back({predict(tr.model, inputs[e][i]), meta.label, meta.category, split.protocol, meta.id});
      }
      fr.metrics = detail::try_metrics(fold_scores, fr.note);
      res.scores.insert(res.scores.end(), fold_scores.begin(), fold_scores.end());
      if (!run_dir.empty()) {
        const auto stem = sanitize(res.name) + "." + split.protocol;
        std::ofstream(run_dir / "models" / (stem + ".history.csv")) << history_csv(tr.history);
        save_checkpoint(tr.model, run_dir / "models" / (stem + ".ckpt"));
      }
      if (opt.log)
        opt.log(res.name + " " + split.protocol + ": best epoch " + std::to_string(tr.best_epoch) +
                (fr.metrics ? ", AUC " + std::to_string(fr.metrics->auc) : ", " + fr.note));
      res.folds.push_back(std::move(fr));
    }
    detail::summarize(res, expected);
    report.experiments.push_back(std::move(res));
  }

  // Mean fusion over all experiments, fold by fold.
  ExperimentResult fused;
  fused.name = "Mean";
  {
    std::vector<std::vector<double>> lists;
    for (const auto& e : report.experiments) {
      lists.emplace_back();
      for (const auto& s : e.scores) lists.back().push_back(s.score);
    }
    const auto mean = mean_fusion(lists);
    fused.scores = report.experiments.front().scores;
    for (std::size_t i = 0; i < mean.size(); ++i) fused.scores[i].score = mean[i];
    for (const auto& split : report.splits) {
      FoldResult fr;
      fr.protocol = split.protocol;
      fr.n_train = split.train.size();
      fr.n_val = split.val.size();
      fr.n_test = split.test.size();
      std::vector<ScoredSample> sub;
      for (const auto& s : fused.scores)
        if (s.protocol == split.protocol) sub.push_back(s);
      fr.metrics = detail::try_metrics(sub, fr.note);
      fused.folds.push_back(std::move(fr));
    }
    detail::summarize(fused, expected);
  }
  report.experiments.push_back(std::move(fused));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!run_dir.empty()) {
    auto j = eval_report_to_json(report, samples);
    auto ms = nlohmann::ordered_json::array();
    for (const auto& m : manifests) ms.push_back({{"name", m.name}, {"dataset", m.dataset}, {"dir", m.dir.string()}});
    j["manifests"] = std::move(ms);
    j["options"] = {{"folds", opt.folds},
                    {"val_fraction", opt.val_fraction},
                    {"cross_val_fraction", opt.cross_val_fraction},
                    {"downscale", opt.extract.downscale},
                    {"seed", opt.seed},
                    {"model", opt.model.to_json()},
                    {"lr", opt.hp.lr},
                    {"epochs", opt.hp.epochs},
                    {"batch_size", opt.hp.batch_size},
                    {"patience", opt.hp.patience}};
    std::ofstream(run_dir / "report.json") << j.dump(1) << "\n";
    std::ofstream(run_dir / "report.csv") << report_csv(report_lines(report));
    std::ofstream(run_dir / "scores.csv") << scores_csv(report, samples);
    nlohmann::ordered_json rocs;
    for (const auto& e : report.experiments) rocs[e.name] = roc_to_json(roc(e.scores));
    std::ofstream(run_dir / "roc.json") << rocs.dump(1) << "\n";
  }
  return report;
}

}  // namespace specrig
