#pragma once

// Small tape-based reverse-mode differentiation over dense NCHW tensors.
// Only the operators the PAD network needs are provided.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "specrig/error.hpp"
#include "specrig/random.hpp"

namespace specrig::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Shape shape, std::vector<double> value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  if (numel(shape) != value.size()) throw Error("tensor shape does not match its data");
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

inline Var constant(Shape shape, std::vector<double> value) { return make_var(std::move(shape), std::move(value)); }

inline Var parameter(Shape shape, std::vector<double> value) {
  auto v = make_var(std::move(shape), std::move(value), true);
  v->ensure_grad();
  return v;
}

namespace detail {

inline Var result(Shape shape, std::vector<double> value, std::vector<Var> parents) {
  auto n = make_var(std::move(shape), std::move(value));
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Columns of all k x k patches of one C x H x W image: (C k k) x (Ho Wo).
inline void im2col(const double* x, int C, int H, int W, int k, double* cols) {
  const int Ho = H - k + 1, Wo = W - k + 1;
  std::size_t row = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++row) {
        double* dst = cols + row * static_cast<std::size_t>(Ho) * Wo;
        for (int y = 0; y < Ho; ++y) {
          const double* src = x + (static_cast<std::size_t>(c) * H + y + ky) * W + kx;
          std::copy(src, src + Wo, dst + static_cast<std::size_t>(y) * Wo);
        }
      }
}

inline void col2im_add(const double* cols, int C, int H, int W, int k, double* dx) {
  const int Ho = H - k + 1, Wo = W - k + 1;
  std::size_t row = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++row) {
        const double* src = cols + row * static_cast<std::size_t>(Ho) * Wo;
        for (int y = 0; y < Ho; ++y) {
          double* d = dx + (static_cast<std::size_t>(c) * H + y + ky) * W + kx;
          const double* s = src + static_cast<std::size_t>(y) * Wo;
          for (int x = 0; x < Wo; ++x) d[x] += s[x];
        }
      }
}

}  // namespace detail

/// Records the discrete choices (ReLU signs, argmax, top-k membership) made
/// during a forward pass, so a finite-difference probe can tell when it
/// straddled a kink.
struct DecisionTrace {
  std::uint64_t hash = 0;
  void add(std::uint64_t v) { hash = hash_combine(hash, v); }
};

inline DecisionTrace*& active_trace() {
  thread_local DecisionTrace* t = nullptr;
  return t;
}

/// Valid (no padding), stride-1 2-D convolution. x: [N,C,H,W], w: [O,C,k,k], b: [O].
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
  if (x->shape.size() != 4 || w->shape.size() != 4) throw Error("conv2d expects 4-D tensors");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int O = w->shape[0], k = w->shape[2];
  if (w->shape[1] != C) throw Error("channel mismatch: input has " + std::to_string(C) + ", weights expect " +
                                    std::to_string(w->shape[1]));
  if (H < k || W < k) throw Error("conv2d input smaller than the kernel");
  const int Ho = H - k + 1, Wo = W - k + 1;
  const int K = C * k * k, P = Ho * Wo;
  std::vector<double> out(static_cast<std::size_t>(N) * O * P);
  std::vector<double> cols(static_cast<std::size_t>(K) * P);
  detail::CMapMat Wm(w->value.data(), O, K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x->value.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k, cols.data());
    detail::MapMat Y(out.data() + static_cast<std::size_t>(n) * O * P, O, P);
    Y.noalias() = Wm * detail::CMapMat(cols.data(), K, P);
    for (int o = 0; o < O; ++o) Y.row(o).array() += b->value[o];
  }
  auto r = detail::result({N, O, Ho, Wo}, std::move(out), {x, w, b});
  r->backward_fn = [N, C, H, W, O, k, K, P](Node& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    std::vector<double> cols(static_cast<std::size_t>(K) * P), dcols(static_cast<std::size_t>(K) * P);
    detail::CMapMat Wm(w.value.data(), O, K);
    if (w.requires_grad) w.ensure_grad();
    if (b.requires_grad) b.ensure_grad();
    if (x.requires_grad) x.ensure_grad();
    for (int n = 0; n < N; ++n) {
      detail::CMapMat dY(self.grad.data() + static_cast<std::size_t>(n) * O * P, O, P);
      if (w.requires_grad) {
        detail::im2col(x.value.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k, cols.data());
        detail::MapMat(w.grad.data(), O, K).noalias() += dY * detail::CMapMat(cols.data(), K, P).transpose();
      }
      if (b.requires_grad)
        for (int o = 0; o < O; ++o) b.grad[o] += dY.row(o).sum();
      if (x.requires_grad) {
        detail::MapMat(dcols.data(), K, P).noalias() = Wm.transpose() * dY;
        detail::col2im_add(dcols.data(), C, H, W, k, x.grad.data() + static_cast<std::size_t>(n) * C * H * W);
      }
    }
  };
  return r;
}

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

/// Per-channel batch normalization over N, H, W. Training mode normalizes
/// with the batch statistics and updates the running estimates (unbiased
/// variance); evaluation mode uses the running estimates.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training,
                      double momentum = 0.1, double eps = 1e-5) {
  const int N = x->shape[0], C = x->shape[1];
  const std::size_t S = numel(x->shape) / (static_cast<std::size_t>(N) * C);
  const std::size_t M = static_cast<std::size_t>(N) * S;
  std::vector<double> mean(C), invstd(C);
  for (int c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x->value.data() + (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      const double mu = s / M;
      double ss = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x->value.data() + (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / M;
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = M > 1 ? ss / (M - 1) : var;
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * unbiased;
    } else {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
    }
  }
  std::vector<double> out(x->value.size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t i = 0; i < S; ++i)
        out[off + i] = gamma->value[c] * (x->value[off + i] - mean[c]) * invstd[c] + beta->value[c];
    }
  auto r = detail::result(x->shape, std::move(out), {x, gamma, beta});
  r->backward_fn = [N, C, S, M, mean, invstd, training](Node& self) {
    auto& x = *self.parents[0];
    auto& g = *self.parents[1];
    auto& b = *self.parents[2];
    if (x.requires_grad) x.ensure_grad();
    if (g.requires_grad) g.ensure_grad();
    if (b.requires_grad) b.ensure_grad();
    for (int c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double xhat = (x.value[off + i] - mean[c]) * invstd[c];
          sum_dy += self.grad[off + i];
          sum_dy_xhat += self.grad[off + i] * xhat;
        }
      }
      if (g.requires_grad) g.grad[c] += sum_dy_xhat;
      if (b.requires_grad) b.grad[c] += sum_dy;
      if (!x.requires_grad) continue;
      const double gi = g.value[c] * invstd[c];
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          if (training) {
            const double xhat = (x.value[off + i] - mean[c]) * invstd[c];
            x.grad[off + i] += gi * (self.grad[off + i] - sum_dy / M - xhat * sum_dy_xhat / M);
          } else {
            x.grad[off + i] += gi * self.grad[off + i];
          }
        }
      }
    }
  };
  return r;
}

inline Var relu(const Var& x) {
  std::vector<double> out(x->value.size());
  auto* trace = active_trace();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
    if (trace) trace->add(x->value[i] > 0.0 ? i * 2 + 1 : i * 2);
  }
  auto r = detail::result(x->shape, std::move(out), {x});
  r->backward_fn = [](Node& self) {
    auto& x = *self.parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < x.value.size(); ++i)
      if (x.value[i] > 0.0) x.grad[i] += self.grad[i];
  };
  return r;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  std::vector<double> out(x->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(x->value[i]);
  auto r = detail::result(x->shape, std::move(out), {x});
  r->backward_fn = [](Node& self) {
    auto& x = *self.parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < x.value.size(); ++i) x.grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  };
  return r;
}

inline constexpr double kStdEps = 1e-12;

/// Global statistics per channel: [N,C,H,W] -> [N,4C], laid out as C averages,
/// C maxima, C means of the top decile, C standard deviations.
inline Var spatial_stats(const Var& x) {
  const int N = x->shape[0], C = x->shape[1];
  const std::size_t S = numel(x->shape) / (static_cast<std::size_t>(N) * C);
  const std::size_t top = std::max<std::size_t>(1, (S + 9) / 10);
  std::vector<double> out(static_cast<std::size_t>(N) * 4 * C);
  std::vector<std::size_t> argmax(static_cast<std::size_t>(N) * C);
  std::vector<std::vector<std::size_t>> topidx(static_cast<std::size_t>(N) * C);
  auto* trace = active_trace();
  std::vector<std::size_t> order(S);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t nc = static_cast<std::size_t>(n) * C + c;
      const double* p = x->value.data() + nc * S;
      double s = 0.0;
      std::size_t am = 0;
      for (std::size_t i = 0; i < S; ++i) {
        s += p[i];
        if (p[i] > p[am]) am = i;
      }
      const double mu = s / S;
      double ss = 0.0;
      for (std::size_t i = 0; i < S; ++i) ss += (p[i] - mu) * (p[i] - mu);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                        [p](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
      auto& ti = topidx[nc];
      ti.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top));
      std::sort(ti.begin(), ti.end());
      double ts = 0.0;
      for (auto i : ti) ts += p[i];
      argmax[nc] = am;
      const std::size_t base = static_cast<std::size_t>(n) * 4 * C;
      out[base + c] = mu;
      out[base + C + c] = p[am];
      out[base + 2 * C + c] = ts / top;
      out[base + 3 * C + c] = std::sqrt(ss / S + kStdEps);
      if (trace) {
        trace->add(am);
        for (auto i : ti) trace->add(i);
      }
    }
  auto r = detail::result({N, 4 * C}, std::move(out), {x});
  r->backward_fn = [N, C, S, top, argmax = std::move(argmax), topidx = std::move(topidx)](Node& self) {
    auto& x = *self.parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t nc = static_cast<std::size_t>(n) * C + c;
        const std::size_t base = static_cast<std::size_t>(n) * 4 * C;
        const double g_avg = self.grad[base + c], g_max = self.grad[base + C + c];
        const double g_top = self.grad[base + 2 * C + c], g_std = self.grad[base + 3 * C + c];
        const double sd = self.value[base + 3 * C + c];
        const double mu = self.value[base + c];
        double* dx = x.grad.data() + nc * S;
        const double* p = x.value.data() + nc * S;
        for (std::size_t i = 0; i < S; ++i) dx[i] += g_avg / S + g_std * (p[i] - mu) / (S * sd);
        dx[argmax[nc]] += g_max;
        for (auto i : topidx[nc]) dx[i] += g_top / top;
      }
  };
  return r;
}

/// x: [N,F], w: [O,F], b: [O] -> [N,O].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const int N = x->shape[0], F = x->shape[1], O = w->shape[0];
  if (w->shape[1] != F) throw Error("linear: feature mismatch");
  std::vector<double> out(static_cast<std::size_t>(N) * O);
  detail::MapMat(out.data(), N, O).noalias() =
      detail::CMapMat(x->value.data(), N, F) * detail::CMapMat(w->value.data(), O, F).transpose();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) out[static_cast<std::size_t>(n) * O + o] += b->value[o];
  auto r = detail::result({N, O}, std::move(out), {x, w, b});
  r->backward_fn = [N, F, O](Node& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    detail::CMapMat dY(self.grad.data(), N, O);
    if (w.requires_grad) {
      w.ensure_grad();
      detail::MapMat(w.grad.data(), O, F).noalias() += dY.transpose() * detail::CMapMat(x.value.data(), N, F);
    }
    if (b.requires_grad) {
      b.ensure_grad();
      for (int o = 0; o < O; ++o) b.grad[o] += dY.col(o).sum();
    }
    if (x.requires_grad) {
      x.ensure_grad();
      detail::MapMat(x.grad.data(), N, F).noalias() += dY * detail::CMapMat(w.value.data(), O, F);
    }
  };
  return r;
}

inline constexpr double kBceEps = 1e-7;

inline double clip_prob(double p) { return std::clamp(p, kBceEps, 1.0 - kBceEps); }

inline double bce(double p, double g) {
  const double q = clip_prob(p);
  return -(g * std::log(q) + (1.0 - g) * std::log(1.0 - q));
}

/// sum_n weight_n * sum_i BCE(p[n,i], g_n) as a scalar.
inline Var bce_sum(const Var& p, const std::vector<double>& labels, const std::vector<double>& weights) {
  const int N = p->shape[0];
  const std::size_t S = p->value.size() / static_cast<std::size_t>(N);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::size_t i = 0; i < S; ++i) s += bce(p->value[n * S + i], labels[n]);
    total += weights[n] * s;
  }
  auto r = detail::result({1}, {total}, {p});
  r->backward_fn = [N, S, labels, weights](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) {
        const double v = p.value[n * S + i];
        if (v < kBceEps || v > 1.0 - kBceEps) continue;  // clipped: flat
        const double g = labels[n];
        p.grad[n * S + i] += self.grad[0] * weights[n] * (-(g / v) + (1.0 - g) / (1.0 - v));
      }
  };
  return r;
}

inline Var add(const Var& a, const Var& b) {
  if (a->value.size() != b->value.size()) throw Error("add: size mismatch");
  std::vector<double> out(a->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  auto r = detail::result(a->shape, std::move(out), {a, b});
  r->backward_fn = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  };
  return r;
}

/// Reverse sweep from a scalar.
inline void backward(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  std::fill(root->grad.begin(), root->grad.end(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace specrig::ag
