#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "config_json.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "models.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace l2ae {

enum class Optimizer { adam, sgd_momentum };

inline std::string to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd-momentum"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::adam;
  if (s == "sgd-momentum" || s == "sgd") return Optimizer::sgd_momentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|sgd-momentum)");
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::adam;
  double momentum = 0.9;  // sgd-momentum only
  std::uint64_t seed = 0;
  int eval_precision = 32;

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be a positive number");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (eval_precision != 32 && eval_precision != 64) fail("eval_precision must be 32 or 64");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)}, {"momentum", c.momentum}, {"seed", c.seed},
          {"eval_precision", c.eval_precision}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& path, TrainConfig base = {}) {
  ObjectReader r(j, path);
  TrainConfig c = base;
  c.epochs = r.get<std::size_t>("epochs", c.epochs);
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.learning_rate = r.get<double>("learning_rate", c.learning_rate);
  if (r.has("optimizer")) {
    try {
      c.optimizer = parse_optimizer(r.require<std::string>("optimizer"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.path("optimizer") + ": " + e.what());
    }
  }
  c.momentum = r.get<double>("momentum", c.momentum);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.eval_precision = r.get<int>("eval_precision", c.eval_precision);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError((path.empty() ? std::string("train") : path) + ": " + e.what());
  }
  return c;
}

struct TrainHistory {
  std::vector<double> loss;      // per-epoch mean over samples
  std::vector<double> seconds;   // wall time per epoch
  std::size_t best_epoch = 0;
  std::vector<std::vector<double>> batch_loss;
  std::vector<std::vector<std::size_t>> batch_size;
  std::vector<double> latent_norm_deviation;  // unit-ball only: max |‖z‖ − 1| over each epoch's batches
};

struct Checkpoint {
  AutoencoderSpec spec;
  TrainConfig config;
  std::size_t epoch = 0;
  Parameters<float> params;

  bool operator==(const Checkpoint&) const = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

struct EpochRecord {
  std::size_t epoch;
  double loss;
  double seconds;
};

using EpochObserver = std::function<void(const EpochRecord&)>;

/// Sample order of one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  Rng rng = Rng(seed).child("shuffle").child(static_cast<std::uint64_t>(epoch));
  return rng.permutation(n);
}

/// Throws DimensionError unless the dataset image shape is the spec input shape.
inline void check_dataset(const AutoencoderSpec& spec, const ImageDataset& ds) {
  if (ds.height != spec.height || ds.width != spec.width || ds.channels != spec.channels)
    throw DimensionError("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                         std::to_string(ds.channels) + " but the model expects " + std::to_string(spec.height) +
                         "x" + std::to_string(spec.width) + "x" + std::to_string(spec.channels));
  if (ds.pixels.rank() != 2 || ds.pixels.dim(1) != spec.input_dim())
    throw DimensionError("dataset pixel tensor " + shape_str(ds.pixels.shape()) + " does not match input size " +
                         std::to_string(spec.input_dim()));
}

namespace detail {

template <class T>
class OptimizerState {
 public:
  explicit OptimizerState(const TrainConfig& c) : cfg_(c) {}

  void step(Parameters<T>& params, const std::map<std::string, const Tensor<T>*>& grads) {
    ++t_;
    const double lr = cfg_.learning_rate;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [key, value] : params.trainable) {
      const Tensor<T>& g = *grads.at(key);
      auto& m = first_.try_emplace(key, value.shape(), T(0)).first->second;
      if (cfg_.optimizer == Optimizer::sgd_momentum) {
        const T mu = static_cast<T>(cfg_.momentum), step = static_cast<T>(lr);
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = mu * m[i] + g[i];
          value[i] -= step * m[i];
        }
        continue;
      }
      auto& v = second_.try_emplace(key, value.shape(), T(0)).first->second;
      const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
      const T step = static_cast<T>(lr / c1), vscale = static_cast<T>(1.0 / c2), teps = static_cast<T>(eps);
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = tb1 * m[i] + (T(1) - tb1) * g[i];
        v[i] = tb2 * v[i] + (T(1) - tb2) * g[i] * g[i];
        value[i] -= step * m[i] / (std::sqrt(v[i] * vscale) + teps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor<T>> first_, second_;
};

template <class T>
Tensor<T> gather_samples(const Tensor<T>& pixels, const std::vector<std::size_t>& order, std::size_t begin,
                         std::size_t end) {
  const std::size_t d = pixels.dim(1);
  Tensor<T> out({end - begin, d});
  for (std::size_t i = begin; i < end; ++i) {
    const T* src = pixels.data() + order[i] * d;
    std::copy(src, src + d, out.data() + (i - begin) * d);
  }
  return out;
}

template <class T>
TrainResult train_impl(const ImageDataset& ds, const AutoencoderSpec& spec, const TrainConfig& cfg,
                       const EpochObserver& observer) {
  const std::size_t n = ds.size();
  const Tensor<T> pixels = ds.pixels.template cast<T>();
  const Rng rng(cfg.seed);
  Parameters<T> params = build<T>(spec, rng.child("init"));
  OptimizerState<T> opt(cfg);
  const bool unit_ball = spec.normalization == NormalizationMode::unit_ball;

  TrainResult result;
  auto& hist = result.history;
  Parameters<T> best = params;
  double best_loss = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, cfg.seed, epoch);
    std::vector<double> losses;
    std::vector<std::size_t> sizes;
    double weighted = 0, deviation = 0;
    for (std::size_t begin = 0, batch = 0; begin < n; begin += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      Tape<T> tape;
      auto state = params.state;
      auto bound = l2ae::bind(tape, params, true, &state);
      auto x = tape.constant(gather_samples(pixels, order, begin, end));
      auto z = encode(spec, bound, x, Phase::train);
      if (unit_ball) {
        const auto& zv = z.value();
        for (std::size_t i = 0; i < zv.rows(); ++i) {
          double s = 0;
          for (auto v : zv.row(i)) s += double(v) * double(v);
          deviation = std::max(deviation, std::abs(std::sqrt(s) - 1.0));
        }
      }
      auto recon = decode(spec, bound, z);
      auto loss = mse_loss(recon, reshape(x, recon.shape()));
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
      tape.backward(loss);
      std::map<std::string, const Tensor<T>*> grads;
      for (const auto& [key, var] : bound.vars) grads.emplace(key, &tape.grad(var));
      opt.step(params, grads);
      params.state = std::move(state);
      losses.push_back(value);
      sizes.push_back(end - begin);
      weighted += value * static_cast<double>(end - begin);
    }
    for (const auto& [key, value] : params.trainable)
      for (auto v : value.values())
        if (!std::isfinite(v))
          throw TrainingError("non-finite parameter '" + key + "' after epoch " + std::to_string(epoch));
    const double epoch_loss = weighted / static_cast<double>(n);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    hist.loss.push_back(epoch_loss);
    hist.seconds.push_back(secs);
    hist.batch_loss.push_back(std::move(losses));
    hist.batch_size.push_back(std::move(sizes));
    if (unit_ball) hist.latent_norm_deviation.push_back(deviation);
    // The epoch loss is measured while the epoch's updates happen; the
    // snapshot is the parameters at the end of that epoch.
    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      hist.best_epoch = epoch;
      best = params;
    }
    if (observer) observer({epoch, epoch_loss, secs});
  }
  result.checkpoint.spec = spec;
  result.checkpoint.config = cfg;
  result.checkpoint.epoch = hist.best_epoch;
  result.checkpoint.params = best.template cast<float>();
  return result;
}

}  // namespace detail

/// Mini-batch training on mean squared reconstruction error.
///
/// Each epoch visits the samples in the order `epoch_order(n, seed, epoch)`
/// in batches of `batch_size`, keeping the final partial batch. Parameters
/// are initialized from `Rng(seed).child("init")`. The returned checkpoint is
/// the end-of-epoch snapshot of the epoch with the lowest mean loss (earliest
/// on ties). With eval_precision 64 training runs in double and the
/// checkpoint is rounded to float.
inline TrainResult train(const ImageDataset& ds, const AutoencoderSpec& spec, const TrainConfig& cfg,
                         const EpochObserver& observer = {}) {
  spec.validate();
  cfg.validate();
  check_dataset(spec, ds);
  if (ds.size() == 0) throw ConfigError("cannot train on an empty dataset");
  if (spec.normalization == NormalizationMode::batch) {
    if (cfg.batch_size < 2) throw ConfigError("batch normalization needs batch_size >= 2");
    if (ds.size() % cfg.batch_size == 1)
      throw ConfigError("batch normalization: " + std::to_string(ds.size()) + " samples leave a final batch of 1");
  }
  return cfg.eval_precision == 64 ? detail::train_impl<double>(ds, spec, cfg, observer)
                                  : detail::train_impl<float>(ds, spec, cfg, observer);
}

/// Latent codes of every sample.
inline Tensor<float> encode_dataset(const Checkpoint& ckpt, const ImageDataset& ds) {
  check_dataset(ckpt.spec, ds);
  return encode(ckpt.params, ckpt.spec, ds.pixels);
}

/// Per-sample mean squared error between each image and its reconstruction.
inline std::vector<double> reconstruction_errors(const Checkpoint& ckpt, const ImageDataset& ds) {
  check_dataset(ckpt.spec, ds);
  const auto recon = reconstruct(ckpt.params, ckpt.spec, ds.pixels);
  const std::size_t d = ds.dim();
  std::vector<double> err(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = double(recon[i * d + j]) - double(ds.pixels[i * d + j]);
      s += diff * diff;
    }
    err[i] = s / static_cast<double>(d);
  }
  return err;
}

inline void write_history_csv(const std::string& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "epoch,loss,seconds\n";
  char buf[96];
  for (std::size_t e = 0; e < h.loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.6f\n", e, h.loss[e], h.seconds[e]);
    out << buf;
  }
}

}  // namespace l2ae
