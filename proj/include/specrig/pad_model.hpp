#pragma once

// Fully convolutional PAD classifier: a stride-1 score map M in [0,1], a
// shallow feature extractor over M, and a linear head producing t in [0,1].
// Trained with BCE(t, g) + (w / |M|) * sum_i BCE(M_i, g).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/autograd.hpp"
#include "specrig/capture_archive.hpp"
#include "specrig/error.hpp"
#include "specrig/random.hpp"

namespace specrig {

struct PadModelConfig {
  int h = 16;
  double w = 10.0;
  int c = 1;
  std::uint64_t seed = 0;

  int r() const noexcept { return 4 * h; }

  void validate() const {
    if (h < 1 || c < 1) throw Error("model widths must be >= 1");
    if (!(w >= 0.0)) throw Error("loss weight must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    return {{"h", h}, {"r", r()}, {"w", w}, {"c", c}, {"seed", seed}};
  }
  static PadModelConfig from_json(const nlohmann::json& j) {
    PadModelConfig cfg;
    cfg.h = j.at("h").get<int>();
    cfg.w = j.at("w").get<double>();
    cfg.c = j.at("c").get<int>();
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.validate();
    return cfg;
  }
};

/// One preprocessed input: shape {c, H, W}, label 0 bona fide, 1 attack.
struct TrainingSample {
  ag::Shape shape;
  std::vector<double> x;
  int g = 0;
};

/// Receptive field of the score-map branch: three valid 3x3 convolutions.
inline constexpr int kScoreMapShrink = 6;

// ---------------------------------------------------------------------------
// Loss

inline double pad_loss(std::span<const double> M, double t, int g, double w) {
  const double gt = g;
  double L = ag::bce(t, gt);
  if (w == 0.0) return L;
  double s = 0.0;
  for (double m : M) s += ag::bce(m, gt);
  return L + w / static_cast<double>(M.size()) * s;
}

// ---------------------------------------------------------------------------
// Model

class PadModel {
 public:
  struct Output {
    ag::Var M;  // [N,1,H-6,W-6]
    ag::Var t;  // [N,1]
  };

  explicit PadModel(PadModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(hash_combine(cfg_.seed, 0x9ad));
    const int h = cfg_.h;
    add_conv("score.conv1", h, cfg_.c, 3, rng);
    add_bn("score.bn1", h);
    add_conv("score.conv2", 2 * h, h, 3, rng);
    add_bn("score.bn2", 2 * h);
    add_conv("score.conv3", 2 * h, 2 * h, 3, rng);
    add_bn("score.bn3", 2 * h);
    add_conv("score.head", 1, 2 * h, 1, rng);
    add_conv("feature.conv", h, 1, 3, rng);
    add_conv("feature.expand", h, h, 1, rng);
    // Linear head: uniform in +-1/sqrt(fan_in).
    const int r = cfg_.r();
    const double bound = 1.0 / std::sqrt(static_cast<double>(r));
    std::vector<double> lw(static_cast<std::size_t>(r));
    for (auto& v : lw) v = (2.0 * rng.uniform() - 1.0) * bound;
    add_param("classifier.weight", {1, r}, std::move(lw));
    add_param("classifier.bias", {1}, {0.0});
    channel_mean.assign(static_cast<std::size_t>(cfg_.c), 0.0);
    channel_std.assign(static_cast<std::size_t>(cfg_.c), 1.0);
  }

  PadModel(const PadModel&) = delete;
  PadModel& operator=(const PadModel&) = delete;
  PadModel(PadModel&&) = default;
  PadModel& operator=(PadModel&&) = default;

  /// Deep copy; parameters are not shared with the original.
  PadModel clone() const {
    PadModel m(cfg_);
    m.restore(snapshot());
    m.channel_mean = channel_mean;
    m.channel_std = channel_std;
    return m;
  }

  const PadModelConfig& config() const noexcept { return cfg_; }

  std::vector<std::pair<std::string, ag::Var>>& parameters() noexcept { return params_; }
  const std::vector<std::pair<std::string, ag::Var>>& parameters() const noexcept { return params_; }

  ag::Var& param(const std::string& name) {
    for (auto& [n, v] : params_)
      if (n == name) return v;
    throw Error("no parameter '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) std::fill(v->grad.begin(), v->grad.end(), 0.0);
  }

  /// x: [N,c,H,W], already standardized.
  Output forward(const ag::Var& x, bool training) {
    if (x->shape.size() != 4) throw Error("model input must be [N,c,H,W]");
    if (x->shape[1] != cfg_.c)
      throw Error("channel mismatch: model expects " + std::to_string(cfg_.c) + " channels, input has " +
                  std::to_string(x->shape[1]));
    if (x->shape[2] < kScoreMapShrink + 3 || x->shape[3] < kScoreMapShrink + 3)
      throw Error("input smaller than " + std::to_string(kScoreMapShrink + 3) + " pixels");
    auto block = [&](const ag::Var& in, const char* conv, const char* bn, std::size_t bi) {
      auto y = ag::conv2d(in, P(conv, ".weight"), P(conv, ".bias"));
      y = ag::batch_norm(y, P(bn, ".gamma"), P(bn, ".beta"), bn_[bi], training);
      return ag::relu(y);
    };
    auto a = block(x, "score.conv1", "score.bn1", 0);
    a = block(a, "score.conv2", "score.bn2", 1);
    a = block(a, "score.conv3", "score.bn3", 2);
    auto M = ag::sigmoid(ag::conv2d(a, P("score.head", ".weight"), P("score.head", ".bias")));
    auto f = ag::relu(ag::conv2d(M, P("feature.conv", ".weight"), P("feature.conv", ".bias")));
    f = ag::conv2d(f, P("feature.expand", ".weight"), P("feature.expand", ".bias"));
    auto t = ag::sigmoid(ag::linear(ag::spatial_stats(f), param("classifier.weight"), param("classifier.bias")));
    return {M, t};
  }

  /// Applies the stored per-channel standardization.
  std::vector<double> standardize(const TrainingSample& s) const {
    check_sample(s);
    const std::size_t plane = s.x.size() / static_cast<std::size_t>(cfg_.c);
    std::vector<double> out(s.x.size());
    for (int c = 0; c < cfg_.c; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        out[c * plane + i] = (s.x[c * plane + i] - channel_mean[c]) / channel_std[c];
    return out;
  }

  void check_sample(const TrainingSample& s) const {
    if (s.shape.size() != 3 || ag::numel(s.shape) != s.x.size()) throw Error("sample shape must be {c,H,W}");
    if (s.shape[0] != cfg_.c)
      throw Error("channel mismatch: model expects " + std::to_string(cfg_.c) + " channels, input has " +
                  std::to_string(s.shape[0]));
  }

  /// Stacks standardized samples into one [N,c,H,W] constant.
  ag::Var batch(std::span<const TrainingSample* const> samples) const {
    const auto& s0 = *samples.front();
    std::vector<double> data;
    data.reserve(samples.size() * s0.x.size());
    for (const auto* s : samples) {
      if (s->shape != s0.shape) throw Error("batch mixes input sizes");
      auto v = standardize(*s);
      data.insert(data.end(), v.begin(), v.end());
    }
    return ag::constant({static_cast<int>(samples.size()), s0.shape[0], s0.shape[1], s0.shape[2]}, std::move(data));
  }

  struct Snapshot {
    std::vector<std::vector<double>> params;
    std::vector<ag::BatchNormState> bn;
  };
  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& [_, v] : params_) s.params.push_back(v->value);
    s.bn = bn_;
    return s;
  }
  void restore(const Snapshot& s) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second->value = s.params[i];
    bn_ = s.bn;
  }

  std::vector<ag::BatchNormState>& batch_norm_states() noexcept { return bn_; }
  const std::vector<ag::BatchNormState>& batch_norm_states() const noexcept { return bn_; }

  std::vector<double> channel_mean;
  std::vector<double> channel_std;

 private:
  const ag::Var& P(const char* prefix, const char* suffix) { return param(std::string(prefix) + suffix); }

  void add_param(std::string name, ag::Shape shape, std::vector<double> v) {
    params_.emplace_back(std::move(name), ag::parameter(std::move(shape), std::move(v)));
  }

  // Kaiming-uniform over fan-in, zero bias.
  void add_conv(const std::string& name, int out, int in, int k, Rng& rng) {
    const double bound = std::sqrt(6.0 / (in * k * k));
    std::vector<double> w(static_cast<std::size_t>(out) * in * k * k);
    for (auto& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
    add_param(name + ".weight", {out, in, k, k}, std::move(w));
    add_param(name + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  }

  void add_bn(const std::string& name, int ch) {
    add_param(name + ".gamma", {ch}, std::vector<double>(static_cast<std::size_t>(ch), 1.0));
    add_param(name + ".beta", {ch}, std::vector<double>(static_cast<std::size_t>(ch), 0.0));
    bn_.push_back({std::vector<double>(static_cast<std::size_t>(ch), 0.0), std::vector<double>(static_cast<std::size_t>(ch), 1.0)});
  }

  PadModelConfig cfg_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::vector<ag::BatchNormState> bn_;
};

/// Mean over the batch of the per-sample loss, as a differentiable scalar.
inline ag::Var batch_loss(const PadModel::Output& out, const std::vector<double>& labels, double w) {
  const double n = static_cast<double>(labels.size());
  auto L = ag::bce_sum(out.t, labels, std::vector<double>(labels.size(), 1.0 / n));
  if (w == 0.0) return L;
  const double nm = static_cast<double>(out.M->value.size()) / n;
  return ag::add(L, ag::bce_sum(out.M, labels, std::vector<double>(labels.size(), w / (n * nm))));
}

struct Inference {
  std::vector<double> M;
  int map_width = 0;
  int map_height = 0;
  double t = 0.0;
};

/// Evaluation-mode pass on one sample.
inline Inference infer(PadModel& model, const TrainingSample& s) {
  const TrainingSample* one[] = {&s};
  auto out = model.forward(model.batch(one), false);
  return {out.M->value, out.M->shape[3], out.M->shape[2], out.t->value[0]};
}

inline double predict(PadModel& model, const TrainingSample& s) { return infer(model, s).t; }

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;
  std::string worst;
};

/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are not compared on a relative scale.
inline constexpr double kGradCheckFloor = 1e-6;

/// Central differences against the reverse sweep on every parameter scalar.
/// Probes whose two sides take different ReLU/argmax/top-k branches are
/// skipped and counted: the loss is not differentiable across them.
inline GradCheckResult grad_check(const PadModelConfig& cfg, const TrainingSample& sample, double step = 1e-4) {
  if (cfg.h > 4 || sample.shape.size() != 3 || sample.shape[1] > 16 || sample.shape[2] > 16)
    throw Error("grad_check is meant for h <= 4 and inputs up to 16x16");
  PadModel model(cfg);
  const TrainingSample* one[] = {&sample};
  const auto x = model.batch(one);
  const std::vector<double> labels{static_cast<double>(sample.g)};
  auto eval = [&](ag::DecisionTrace* trace) {
    ag::active_trace() = trace;
    auto out = model.forward(x, true);
    auto L = batch_loss(out, labels, cfg.w);
    ag::active_trace() = nullptr;
    return L;
  };
  model.zero_grad();
  ag::DecisionTrace base;
  ag::backward(eval(&base));

  GradCheckResult res;
  for (auto& [name, p] : model.parameters()) {
    const auto analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      ag::DecisionTrace plus, minus;
      p->value[i] = orig + step;
      const double lp = eval(&plus)->value[0];
      p->value[i] = orig - step;
      const double lm = eval(&minus)->value[0];
      p->value[i] = orig;
      if (plus.hash != base.hash || minus.hash != base.hash) {
        ++res.kinks_skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainHyper {
  double lr = 2e-4;
  int epochs = 100;
  int batch_size = 16;
  int patience = 10;
  double threshold = 1e-4;
  double factor = 0.5;
  double min_lr = 1e-7;
  std::uint64_t seed = 0;
};

/// Multiplies the rate by `factor` once the metric has failed to improve by a
/// relative `threshold` for more than `patience` consecutive steps.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double threshold, double min_lr)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold), min_lr_(min_lr) {}

  double step(double metric) {
    if (metric < best_ * (1.0 - threshold_)) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ > patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      bad_ = 0;
    }
    return lr_;
  }
  double lr() const noexcept { return lr_; }

 private:
  double lr_, factor_;
  int patience_;
  double threshold_, min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

class Adam {
 public:
  explicit Adam(PadModel& model, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : b1_(b1), b2_(b2), eps_(eps) {
    for (auto& [_, p] : model.parameters()) {
      params_.push_back(p);
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * g;
        v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * g * g;
        p.value[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<ag::Var> params_;
  std::vector<std::vector<double>> m_, v_;
};

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& r : rows) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << '\n';
  return out.str();
}

/// Per-channel mean and standard deviation over every training pixel.
inline std::pair<std::vector<double>, std::vector<double>> channel_statistics(const std::vector<TrainingSample>& set,
                                                                               int channels) {
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0), sq(sum), count(sum);
  for (const auto& s : set) {
    const std::size_t plane = s.x.size() / static_cast<std::size_t>(channels);
    for (int c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = s.x[c * plane + i];
        sum[c] += v;
        sq[c] += v * v;
        count[c] += 1.0;
      }
  }
  std::vector<double> mean(sum.size()), sd(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) {
    mean[c] = count[c] > 0 ? sum[c] / count[c] : 0.0;
    const double var = count[c] > 0 ? sq[c] / count[c] - mean[c] * mean[c] : 0.0;
    sd[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return {mean, sd};
}

/// Evaluation-mode mean loss over a set.
inline double mean_loss(PadModel& model, const std::vector<TrainingSample>& set, int batch_size) {
  double total = 0.0;
  std::vector<const TrainingSample*> ptrs;
  for (std::size_t i = 0; i < set.size(); i += static_cast<std::size_t>(batch_size)) {
    ptrs.clear();
    std::vector<double> labels;
    for (std::size_t j = i; j < std::min(set.size(), i + batch_size); ++j) {
      ptrs.push_back(&set[j]);
      labels.push_back(set[j].g);
    }
    auto out = model.forward(model.batch(ptrs), false);
    total += batch_loss(out, labels, model.config().w)->value[0] * static_cast<double>(ptrs.size());
  }
  return total / static_cast<double>(set.size());
}

struct TrainResult {
  PadModel model;
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Adam with plateau decay; returns the weights of the epoch with the lowest
/// validation loss.
inline TrainResult train(const std::vector<TrainingSample>& train_set, const std::vector<TrainingSample>& val_set,
                         const PadModelConfig& cfg, const TrainHyper& hp,
                         const std::function<void(const HistoryRow&)>& progress = {}) {
  if (train_set.empty()) throw Error("empty training split");
  if (val_set.empty()) throw Error("empty validation split");
  PadModel model(cfg);
  for (const auto& s : train_set) model.check_sample(s);
  std::tie(model.channel_mean, model.channel_std) = channel_statistics(train_set, cfg.c);

  Adam adam(model);
  PlateauScheduler sched(hp.lr, hp.factor, hp.patience, hp.threshold, hp.min_lr);
  Rng rng(hash_combine(hp.seed, 0x7a1));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  PadModel::Snapshot best = model.snapshot();
  std::vector<const TrainingSample*> ptrs;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    const double lr = sched.lr();
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(hp.batch_size)) {
      ptrs.clear();
      std::vector<double> labels;
      for (std::size_t j = i; j < std::min(order.size(), i + hp.batch_size); ++j) {
        ptrs.push_back(&train_set[order[j]]);
        labels.push_back(train_set[order[j]].g);
      }
      model.zero_grad();
      auto L = batch_loss(model.forward(model.batch(ptrs), true), labels, cfg.w);
      ag::backward(L);
      adam.step(lr);
      total += L->value[0] * static_cast<double>(ptrs.size());
    }
    HistoryRow row{epoch, total / static_cast<double>(train_set.size()), mean_loss(model, val_set, hp.batch_size), lr};
    history.push_back(row);
    if (row.val_loss < best_val) {
      best_val = row.val_loss;
      best_epoch = epoch;
      best = model.snapshot();
    }
    sched.step(row.val_loss);
    if (progress) progress(row);
  }
  model.restore(best);
  return TrainResult{std::move(model), std::move(history), best_epoch, best_val};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::vector<std::uint8_t> encode_checkpoint(const PadModel& model) {
  std::vector<RawDataset> sets;
  for (const auto& [name, p] : model.parameters()) {
    std::vector<std::int64_t> shape(p->shape.begin(), p->shape.end());
    sets.push_back(tensor_dataset("param/" + name, shape, p->value));
  }
  const auto& bn = model.batch_norm_states();
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const auto n = static_cast<std::int64_t>(bn[i].running_mean.size());
    sets.push_back(tensor_dataset("bn/" + std::to_string(i) + "/running_mean", {n}, bn[i].running_mean));
    sets.push_back(tensor_dataset("bn/" + std::to_string(i) + "/running_var", {n}, bn[i].running_var));
  }
  const auto c = static_cast<std::int64_t>(model.channel_mean.size());
  sets.push_back(tensor_dataset("standardize/mean", {c}, model.channel_mean));
  sets.push_back(tensor_dataset("standardize/std", {c}, model.channel_std));
  ArchiveOptions opts;
  opts.attributes["model"] = model.config().to_json();
  return encode_mbc1(std::move(sets), model.config().to_json().dump(), opts);
}

inline void save_checkpoint(const PadModel& model, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(model));
}

inline PadModel load_checkpoint(const std::filesystem::path& path) {
  const auto ar = read_archive(path);
  PadModel model(PadModelConfig::from_json(ar.attributes.at("model")));
  for (auto& [name, p] : model.parameters()) {
    auto v = ar.tensor("param/" + name);
    if (v.size() != p->value.size()) throw Error("checkpoint parameter '" + name + "' has the wrong size");
    p->value = std::move(v);
  }
  auto& bn = model.batch_norm_states();
  for (std::size_t i = 0; i < bn.size(); ++i) {
    bn[i].running_mean = ar.tensor("bn/" + std::to_string(i) + "/running_mean");
    bn[i].running_var = ar.tensor("bn/" + std::to_string(i) + "/running_var");
  }
  model.channel_mean = ar.tensor("standardize/mean");
  model.channel_std = ar.tensor("standardize/std");
  return model;
}

}  // namespace specrig
