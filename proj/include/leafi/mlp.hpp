#pragma once

// One-hidden-layer rectifier perceptron regressor, trained with minibatch
// SGD on mean squared error and a divide-on-plateau learning-rate schedule.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "leafi/core.hpp"

namespace leafi {

/// weights1 is stored input-major: weights1[i * hidden_dim + j] connects
/// input i to hidden unit j.
template <std::floating_point T>
struct BasicMlp {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::vector<T> weights1;
  std::vector<T> bias1;
  std::vector<T> weights2;
  T bias2 = 0;

  std::size_t parameter_count() const noexcept {
    return weights1.size() + bias1.size() + weights2.size() + 1;
  }

  friend bool operator==(const BasicMlp&, const BasicMlp&) = default;
};

using MlpModel = BasicMlp<float>;

template <std::floating_point T = float>
BasicMlp<T> init_model(std::size_t m, std::uint64_t seed) {
  if (m < 2) throw InvalidInput("model input dimension must be >= 2");
  BasicMlp<T> model;
  model.input_dim = model.hidden_dim = m;
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(double(m));
  std::uniform_real_distribution<double> u(-bound, bound);
  model.weights1.resize(m * m);
  for (auto& w : model.weights1) w = static_cast<T>(u(rng));
  model.bias1.assign(m, T(0));
  model.weights2.resize(m);
  for (auto& w : model.weights2) w = static_cast<T>(u(rng));
  return model;
}

template <std::floating_point T>
BasicMlp<T> zero_model(std::size_t m) {
  BasicMlp<T> model;
  model.input_dim = model.hidden_dim = m;
  model.weights1.assign(m * m, T(0));
  model.bias1.assign(m, T(0));
  model.weights2.assign(m, T(0));
  return model;
}

template <std::floating_point To, std::floating_point From>
BasicMlp<To> model_cast(const BasicMlp<From>& m) {
  BasicMlp<To> out;
  out.input_dim = m.input_dim;
  out.hidden_dim = m.hidden_dim;
  out.weights1.assign(m.weights1.begin(), m.weights1.end());
  out.bias1.assign(m.bias1.begin(), m.bias1.end());
  out.weights2.assign(m.weights2.begin(), m.weights2.end());
  out.bias2 = static_cast<To>(m.bias2);
  return out;
}

namespace detail {

// Hidden pre-activations into `z`; returns the output.
template <std::floating_point T, class U>
T forward_into(const BasicMlp<T>& model, std::span<const U> x, std::vector<T>& z) {
  const std::size_t h = model.hidden_dim;
  z.assign(model.bias1.begin(), model.bias1.end());
  T* zp = z.data();
  for (std::size_t i = 0; i < model.input_dim; ++i) {
    const T xi = static_cast<T>(x[i]);
    const T* w = model.weights1.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) zp[j] += xi * w[j];
  }
  T y = model.bias2;
  for (std::size_t j = 0; j < h; ++j) y += model.weights2[j] * std::max(zp[j], T(0));
  return y;
}

}  // namespace detail

/// bias2 + weights2 . max(weights1 x + bias1, 0)
template <std::floating_point T, class U>
T forward(const BasicMlp<T>& model, std::span<const U> x) {
  if (x.size() != model.input_dim)
    throw InvalidInput("model input dimension " + std::to_string(model.input_dim) +
                       " does not match series length " + std::to_string(x.size()));
  thread_local std::vector<T> z;
  return detail::forward_into(model, x, z);
}

template <std::floating_point T>
T forward(const BasicMlp<T>& model, SeriesView x) {
  return forward<T, float>(model, x);
}

/// Parameter gradients, always accumulated in double.
struct MlpGradient {
  std::vector<double> weights1, bias1, weights2;
  double bias2 = 0;

  explicit MlpGradient(std::size_t in = 0, std::size_t hidden = 0)
      : weights1(in * hidden, 0.0), bias1(hidden, 0.0), weights2(hidden, 0.0) {}

  void clear() {
    std::fill(weights1.begin(), weights1.end(), 0.0);
    std::fill(bias1.begin(), bias1.end(), 0.0);
    std::fill(weights2.begin(), weights2.end(), 0.0);
    bias2 = 0;
  }
};

/// Adds `scale * dL/dtheta` for L = (f(x) - target)^2 into `grad`; returns f(x).
template <std::floating_point T, class U>
T accumulate_gradient(const BasicMlp<T>& model, std::span<const U> x, double target,
                      double scale, MlpGradient& grad) {
  thread_local std::vector<T> z;
  thread_local std::vector<double> delta;
  const T y = detail::forward_into(model, x, z);
  const std::size_t h = model.hidden_dim;
  const double dy = scale * 2.0 * (double(y) - target);
  grad.bias2 += dy;
  delta.resize(h);
  for (std::size_t j = 0; j < h; ++j) {
    const bool active = z[j] > T(0);
    grad.weights2[j] += active ? dy * double(z[j]) : 0.0;
    delta[j] = active ? dy * double(model.weights2[j]) : 0.0;
    grad.bias1[j] += delta[j];
  }
  const double* dp = delta.data();
  for (std::size_t i = 0; i < model.input_dim; ++i) {
    const double xi = double(x[i]);
    if (xi == 0.0) continue;
    double* g = grad.weights1.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) g[j] += xi * dp[j];
  }
  return y;
}

template <std::floating_point T>
void apply_gradient(BasicMlp<T>& model, const MlpGradient& grad, double lr) {
  for (std::size_t k = 0; k < model.weights1.size(); ++k)
    model.weights1[k] = static_cast<T>(double(model.weights1[k]) - lr * grad.weights1[k]);
  for (std::size_t k = 0; k < model.bias1.size(); ++k)
    model.bias1[k] = static_cast<T>(double(model.bias1[k]) - lr * grad.bias1[k]);
  for (std::size_t k = 0; k < model.weights2.size(); ++k)
    model.weights2[k] = static_cast<T>(double(model.weights2[k]) - lr * grad.weights2[k]);
  model.bias2 = static_cast<T>(double(model.bias2) - lr * grad.bias2);
}

/// Smallest |pre-activation| for x; finite differences are unreliable when a
/// perturbation can cross a rectifier kink.
template <std::floating_point T, class U>
double min_abs_preactivation(const BasicMlp<T>& model, std::span<const U> x) {
  std::vector<T> z;
  detail::forward_into(model, x, z);
  double best = std::numeric_limits<double>::infinity();
  for (T v : z) best = std::min(best, std::abs(double(v)));
  return best;
}

/// Max relative error between analytic gradients of (f(x) - y)^2 and
/// central finite differences with step h. Denominators are floored at
/// 1e-6: central differences carry roughly eps * loss / h of roundoff, so
/// gradients of inactive units compare absolutely.
inline double gradient_check(const BasicMlp<double>& model, std::span<const double> x, double y,
                             double h = 1e-5) {
  MlpGradient analytic(model.input_dim, model.hidden_dim);
  accumulate_gradient(model, x, y, 1.0, analytic);

  auto loss = [&](const BasicMlp<double>& m) {
    const double d = forward(m, x) - y;
    return d * d;
  };
  double worst = 0;
  auto compare = [&](double a, double n) {
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}));
  };
  BasicMlp<double> probe = model;
  auto check_param = [&](double& param, double a) {
    const double saved = param;
    param = saved + h;
    const double up = loss(probe);
    param = saved - h;
    const double down = loss(probe);
    param = saved;
    compare(a, (up - down) / (2 * h));
  };
  for (std::size_t k = 0; k < probe.weights1.size(); ++k)
    check_param(probe.weights1[k], analytic.weights1[k]);
  for (std::size_t k = 0; k < probe.bias1.size(); ++k)
    check_param(probe.bias1[k], analytic.bias1[k]);
  for (std::size_t k = 0; k < probe.weights2.size(); ++k)
    check_param(probe.weights2[k], analytic.weights2[k]);
  check_param(probe.bias2, analytic.bias2);
  return worst;
}

struct TrainConfig {
  double initial_lr = 0.01;
  double lr_decay_factor = 10.0;
  double min_lr = 1e-5;
  std::size_t max_epochs = 1000;
  std::size_t batch_size = 32;
  std::size_t plateau_patience = 20;
  double plateau_min_delta = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(initial_lr > min_lr && min_lr > 0)) throw InvalidInput("need initial_lr > min_lr > 0");
    if (max_epochs < 1) throw InvalidInput("max_epochs must be >= 1");
    if (batch_size < 1) throw InvalidInput("batch_size must be >= 1");
    if (!(lr_decay_factor > 1)) throw InvalidInput("lr_decay_factor must be > 1");
  }
};

struct TrainReport {
  std::size_t epochs_run = 0;
  double final_train_loss = 0;
  double final_val_loss = 0;
  /// Learning rate used in each epoch.
  std::vector<double> lr_trajectory;
  std::vector<double> val_loss_trajectory;
};

template <std::floating_point T>
double mean_squared_error(const BasicMlp<T>& model, std::span<const SeriesView> inputs,
                          std::span<const double> targets) {
  if (inputs.empty()) return 0;
  thread_local std::vector<T> z;
  double sum = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const double d = double(detail::forward_into(model, inputs[k], z)) - targets[k];
    sum += d * d;
  }
  return sum / double(inputs.size());
}

/// Minibatch SGD on MSE. After every epoch the validation loss is compared
/// with the best seen; `plateau_patience` epochs without a relative
/// improvement of `plateau_min_delta` divide the rate by `lr_decay_factor`.
/// Stops at `max_epochs` or once the rate falls below `min_lr`, and returns
/// the parameters with the lowest validation loss. An empty validation set
/// falls back to the training loss.
template <std::floating_point T>
std::pair<BasicMlp<T>, TrainReport> train(BasicMlp<T> model, std::span<const SeriesView> inputs,
                                          std::span<const double> targets,
                                          std::span<const SeriesView> val_inputs,
                                          std::span<const double> val_targets,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (inputs.empty() || inputs.size() != targets.size())
    throw InvalidInput("training inputs and targets must be non-empty and aligned");
  if (val_inputs.size() != val_targets.size())
    throw InvalidInput("validation inputs and targets must be aligned");
  for (double t : targets)
    if (!(std::isfinite(t) && t >= 0)) throw InvalidInput("targets must be finite and >= 0");
  for (const auto& x : inputs)
    if (x.size() != model.input_dim) throw InvalidInput("training input has the wrong length");
  for (const auto& x : val_inputs)
    if (x.size() != model.input_dim) throw InvalidInput("validation input has the wrong length");

  const bool has_val = !val_inputs.empty();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  MlpGradient grad(model.input_dim, model.hidden_dim);

  TrainReport report;
  BasicMlp<T> best = model;
  double best_loss = std::numeric_limits<double>::infinity();
  double plateau_ref = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  double lr = cfg.initial_lr;
  const double lr_floor = cfg.min_lr * (1 - 1e-9);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / double(stop - start);
      grad.clear();
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t k = order[b];
        const double y = accumulate_gradient(model, inputs[k], targets[k], scale, grad);
        train_sum += (y - targets[k]) * (y - targets[k]);
      }
      apply_gradient(model, grad, lr);
    }
    const double train_loss = train_sum / double(order.size());
    const double val_loss =
        has_val ? mean_squared_error(model, val_inputs, val_targets) : train_loss;
    report.lr_trajectory.push_back(lr);
    report.val_loss_trajectory.push_back(val_loss);
    report.epochs_run = epoch;
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw TrainingError("loss became non-finite at epoch " + std::to_string(epoch) +
                          " (lr " + std::to_string(lr) + ")");

    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = model;
    }
    if (val_loss < plateau_ref * (1 - cfg.plateau_min_delta)) {
      plateau_ref = val_loss;
      stale = 0;
    } else if (++stale >= cfg.plateau_patience) {
      lr /= cfg.lr_decay_factor;
      stale = 0;
      if (lr < lr_floor) break;
    }
  }

  report.final_val_loss = best_loss;
  report.final_train_loss = mean_squared_error(best, inputs, targets);
  return {std::move(best), std::move(report)};
}

// ---------------------------------------------------------------------------
// Serialization: 16-byte header ("LMLP", version, input_dim, hidden_dim) then
// weights1, bias1, weights2, bias2 as little-endian binary32.

inline constexpr std::array<char, 4> kModelMagic = {'L', 'M', 'L', 'P'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderBytes = 16;

/// Serialized size of a square model over length-m inputs.
constexpr std::size_t model_bytes(std::size_t m) noexcept {
  return kModelHeaderBytes + 4 * (m * m + m + m + 1);
}

inline std::string encode_model(const MlpModel& model) {
  std::string out;
  out.reserve(kModelHeaderBytes + 4 * model.parameter_count());
  out.append(kModelMagic.data(), 4);
  detail::put_u32(out, kModelVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(model.input_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(model.hidden_dim));
  for (float v : model.weights1) detail::put_f32(out, v);
  for (float v : model.bias1) detail::put_f32(out, v);
  for (float v : model.weights2) detail::put_f32(out, v);
  detail::put_f32(out, model.bias2);
  return out;
}

inline MlpModel decode_model(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kModelHeaderBytes) throw FormatError("truncated model header", bytes.size());
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), bytes.begin()))
    throw FormatError("bad model magic", 0);
  if (detail::get_u32(p + 4) != kModelVersion) throw FormatError("unsupported model version", 4);
  MlpModel model;
  model.input_dim = detail::get_u32(p + 8);
  model.hidden_dim = detail::get_u32(p + 12);
  if (model.input_dim < 2 || model.hidden_dim < 1) throw FormatError("bad model dimensions", 8);
  const std::size_t h = model.hidden_dim;
  const std::size_t expected = kModelHeaderBytes + 4 * (model.input_dim * h + h + h + 1);
  if (bytes.size() < expected) throw FormatError("truncated model payload", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after model", expected);
  std::size_t off = kModelHeaderBytes;
  auto take = [&](std::vector<float>& dst, std::size_t count) {
    dst.resize(count);
    for (auto& v : dst) {
      v = detail::get_f32(p + off);
      if (!std::isfinite(v)) throw FormatError("non-finite model parameter", off);
      off += 4;
    }
  };
  take(model.weights1, model.input_dim * h);
  take(model.bias1, h);
  take(model.weights2, h);
  model.bias2 = detail::get_f32(p + off);
  if (!std::isfinite(model.bias2)) throw FormatError("non-finite model parameter", off);
  return model;
}

}  // namespace leafi
