#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace l2ae {

enum class Variant { dense, conv };

/// Operation applied to the encoder output before it reaches the decoder.
enum class NormalizationMode { none, unit_ball, batch, layer };

inline std::string to_string(Variant v) { return v == Variant::dense ? "dense" : "conv"; }

inline std::string to_string(NormalizationMode m) {
  switch (m) {
    case NormalizationMode::none: return "none";
    case NormalizationMode::unit_ball: return "unit-ball";
    case NormalizationMode::batch: return "batch";
    case NormalizationMode::layer: return "layer";
  }
  return "none";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "dense") return Variant::dense;
  if (s == "conv") return Variant::conv;
  throw ConfigError("unknown model variant '" + s + "' (expected dense|conv)");
}

inline NormalizationMode parse_normalization(const std::string& s) {
  if (s == "none") return NormalizationMode::none;
  if (s == "unit-ball" || s == "l2") return NormalizationMode::unit_ball;
  if (s == "batch") return NormalizationMode::batch;
  if (s == "layer") return NormalizationMode::layer;
  throw ConfigError("unknown normalization '" + s + "' (expected none|unit-ball|batch|layer)");
}

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t filters = 32;
  std::size_t stride = 2;

  bool operator==(const ConvLayerSpec&) const = default;
};

/// Architecture of one autoencoder.
///
/// Dense: hidden widths h1..hk then the latent layer; the decoder mirrors the
/// hidden widths in reverse and ends in a linear layer of the input size.
/// Leaky ReLU follows every hidden layer, never the latent or output layer.
///
/// Conv: stride-s same-padded convolutions with ReLU, flatten, linear latent;
/// the decoder is dense(flatten, ReLU), reshape, then transpose convolutions
/// mirroring the encoder (kernel sizes reversed, filter counts shifted down by
/// one layer, ending in the input channel count) with ReLU on all but the last.
struct AutoencoderSpec {
  Variant variant = Variant::dense;
  std::size_t height = 28, width = 28, channels = 1;
  std::size_t latent_dim = 10;
  std::vector<std::size_t> hidden = {500, 500, 2000};
  std::vector<ConvLayerSpec> conv = {{5, 32, 2}, {5, 64, 2}, {3, 128, 2}};
  double leaky_slope = 0.01;
  NormalizationMode normalization = NormalizationMode::none;

  static AutoencoderSpec dense_for(std::size_t h, std::size_t w, std::size_t c, NormalizationMode mode) {
    AutoencoderSpec s;
    s.variant = Variant::dense;
    s.height = h;
    s.width = w;
    s.channels = c;
    s.normalization = mode;
    return s;
  }

  static AutoencoderSpec conv_for(std::size_t h, std::size_t w, std::size_t c, NormalizationMode mode) {
    AutoencoderSpec s = dense_for(h, w, c, mode);
    s.variant = Variant::conv;
    return s;
  }

  std::size_t input_dim() const { return height * width * channels; }

  /// Spatial sizes through the conv stack: entry 0 is the input, entry i the output of conv i-1.
  std::vector<std::pair<std::size_t, std::size_t>> spatial_sizes() const {
    std::vector<std::pair<std::size_t, std::size_t>> sizes{{height, width}};
    for (const auto& layer : conv) {
      auto [h, w] = sizes.back();
      sizes.emplace_back(conv_out_size(h, layer.kernel, layer.stride, Padding::same),
                         conv_out_size(w, layer.kernel, layer.stride, Padding::same));
    }
    return sizes;
  }

  std::size_t flatten_size() const {
    const auto last = spatial_sizes().back();
    return last.first * last.second * conv.back().filters;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid autoencoder spec: " + what); };
    if (height == 0 || width == 0 || channels == 0) fail("input dimensions must be positive");
    if (latent_dim == 0) fail("latent_dim must be positive");
    if (normalization == NormalizationMode::layer && latent_dim < 2) fail("layer normalization needs latent_dim >= 2");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must be in [0, 1)");
    if (variant == Variant::dense) {
      for (auto w : hidden)
        if (w == 0) fail("dense hidden widths must be positive");
    } else {
      if (conv.empty()) fail("conv variant needs at least one conv layer");
      for (const auto& layer : conv)
        if (layer.kernel == 0 || layer.filters == 0 || layer.stride == 0)
          fail("conv layers need positive kernel, filters and stride");
    }
  }

  bool operator==(const AutoencoderSpec&) const = default;
};

/// Trainable tensors plus non-trainable state (batch-norm running statistics),
/// both keyed by layer path.
template <class T>
struct Parameters {
  std::map<std::string, Tensor<T>> trainable;
  std::map<std::string, Tensor<T>> state;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : trainable) n += t.size();
    return n;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& [k, t] : trainable) out.trainable.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : state) out.state.emplace(k, t.template cast<U>());
    return out;
  }

  bool operator==(const Parameters&) const = default;
};

namespace detail {

template <class T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <class T>
void add_dense(Parameters<T>& p, const std::string& key, std::size_t in, std::size_t out, const Rng& rng) {
  p.trainable.emplace(key + "/kernel", glorot_uniform<T>({in, out}, in, out, rng.child(key)));
  p.trainable.emplace(key + "/bias", Tensor<T>({out}, T{0}));
}

// Kernel [k, k, a, b]: fans are k²·a and k²·b.
template <class T>
void add_conv(Parameters<T>& p, const std::string& key, std::size_t k, std::size_t a, std::size_t b,
              std::size_t bias_size, const Rng& rng) {
  p.trainable.emplace(key + "/kernel", glorot_uniform<T>({k, k, a, b}, k * k * a, k * k * b, rng.child(key)));
  p.trainable.emplace(key + "/bias", Tensor<T>({bias_size}, T{0}));
}

}  // namespace detail

/// Allocates and initializes every parameter of `spec`.
///
/// Each layer draws from `rng.child(layer_path)`, so a layer's initial weights
/// depend only on the seed and its path.
template <class T = float>
Parameters<T> build(const AutoencoderSpec& spec, const Rng& rng) {
  spec.validate();
  Parameters<T> p;
  if (spec.variant == Variant::dense) {
    std::vector<std::size_t> enc{spec.input_dim()};
    enc.insert(enc.end(), spec.hidden.begin(), spec.hidden.end());
    enc.push_back(spec.latent_dim);
    for (std::size_t i = 0; i + 1 < enc.size(); ++i)
      detail::add_dense(p, "encoder/dense" + std::to_string(i), enc[i], enc[i + 1], rng);
    const std::vector<std::size_t> dec(enc.rbegin(), enc.rend());
    for (std::size_t i = 0; i + 1 < dec.size(); ++i)
      detail::add_dense(p, "decoder/dense" + std::to_string(i), dec[i], dec[i + 1], rng);
  } else {
    std::size_t in_c = spec.channels;
    for (std::size_t i = 0; i < spec.conv.size(); ++i) {
      const auto& layer = spec.conv[i];
      detail::add_conv(p, "encoder/conv" + std::to_string(i), layer.kernel, in_c, layer.filters, layer.filters, rng);
      in_c = layer.filters;
    }
    detail::add_dense(p, "encoder/latent", spec.flatten_size(), spec.latent_dim, rng);
    detail::add_dense(p, "decoder/dense", spec.latent_dim, spec.flatten_size(), rng);
    // deconv j undoes encoder conv (L-1-j): kernel [k, k, C_below, C_above].
    const std::size_t layers = spec.conv.size();
    for (std::size_t j = 0; j < layers; ++j) {
      const std::size_t i = layers - 1 - j;
      const std::size_t below = i == 0 ? spec.channels : spec.conv[i - 1].filters;
      detail::add_conv(p, "decoder/deconv" + std::to_string(j), spec.conv[i].kernel, below, spec.conv[i].filters,
                       below, rng);
    }
  }
  if (spec.normalization == NormalizationMode::batch || spec.normalization == NormalizationMode::layer) {
    p.trainable.emplace("latent_norm/gamma", Tensor<T>({spec.latent_dim}, T{1}));
    p.trainable.emplace("latent_norm/beta", Tensor<T>({spec.latent_dim}, T{0}));
  }
  if (spec.normalization == NormalizationMode::batch) {
    p.state.emplace("latent_norm/running_mean", Tensor<T>({spec.latent_dim}, T{0}));
    p.state.emplace("latent_norm/running_var", Tensor<T>({spec.latent_dim}, T{1}));
  }
  return p;
}

/// Parameters registered on one tape. Train-phase batch norm writes running
/// statistics to `state_sink`, which must then be set.
template <class T>
struct BoundParameters {
  std::map<std::string, Var<T>> vars;
  const Parameters<T>* params = nullptr;
  std::map<std::string, Tensor<T>>* state_sink = nullptr;

  Var<T> operator[](const std::string& key) const {
    auto it = vars.find(key);
    if (it == vars.end()) throw ConfigError("missing parameter '" + key + "'");
    return it->second;
  }
};

template <class T>
BoundParameters<T> bind(Tape<T>& tape, const Parameters<T>& params, bool trainable,
                        std::map<std::string, Tensor<T>>* state_sink = nullptr) {
  BoundParameters<T> b;
  b.params = &params;
  b.state_sink = state_sink;
  for (const auto& [key, value] : params.trainable)
    b.vars.emplace(key, trainable ? tape.variable(value) : tape.constant(value));
  return b;
}

namespace detail {

template <class T>
Var<T> dense_layer(const BoundParameters<T>& p, const std::string& key, Var<T> x) {
  return add_bias(matmul(x, p[key + "/kernel"]), p[key + "/bias"]);
}

template <class T>
Var<T> latent_post(const AutoencoderSpec& spec, BoundParameters<T>& p, Var<T> z, Phase phase) {
  switch (spec.normalization) {
    case NormalizationMode::none: return z;
    case NormalizationMode::unit_ball: return l2_normalize(z);
    case NormalizationMode::layer: return layer_norm(z, p["latent_norm/gamma"], p["latent_norm/beta"]);
    case NormalizationMode::batch: {
      const auto& state = p.params->state;
      BatchNormStats<T> stats{state.at("latent_norm/running_mean"), state.at("latent_norm/running_var")};
      auto out = batch_norm(z, p["latent_norm/gamma"], p["latent_norm/beta"], stats, phase);
      if (phase == Phase::train) {
        if (p.state_sink == nullptr) throw UsageError("train-phase batch norm needs a state sink");
        p.state_sink->at("latent_norm/running_mean") = std::move(stats.mean);
        p.state_sink->at("latent_norm/running_var") = std::move(stats.var);
      }
      return out;
    }
  }
  return z;
}

}  // namespace detail

/// Encoder graph: x is [N, input_dim] or [N, H, W, C]; result is [N, latent_dim]
/// after the latent normalization of `spec`.
template <class T>
Var<T> encode(const AutoencoderSpec& spec, BoundParameters<T>& p, Var<T> x, Phase phase = Phase::eval) {
  const auto& xs = x.shape();
  const bool flat_ok = xs.size() == 2 && xs[1] == spec.input_dim();
  const bool image_ok = xs.size() == 4 && xs[1] == spec.height && xs[2] == spec.width && xs[3] == spec.channels;
  if (!flat_ok && !image_ok)
    throw DimensionError("encoder input " + shape_str(xs) + " does not match spec input " +
                         std::to_string(spec.height) + "x" + std::to_string(spec.width) + "x" +
                         std::to_string(spec.channels));
  const std::size_t n = xs[0];
  const T slope = static_cast<T>(spec.leaky_slope);
  Var<T> h = x;
  if (spec.variant == Variant::dense) {
    if (image_ok) h = reshape(h, {n, spec.input_dim()});
    for (std::size_t i = 0; i < spec.hidden.size(); ++i)
      h = leaky_relu(detail::dense_layer(p, "encoder/dense" + std::to_string(i), h), slope);
    h = detail::dense_layer(p, "encoder/dense" + std::to_string(spec.hidden.size()), h);
  } else {
    if (flat_ok) h = reshape(h, {n, spec.height, spec.width, spec.channels});
    for (std::size_t i = 0; i < spec.conv.size(); ++i) {
      const std::string key = "encoder/conv" + std::to_string(i);
      h = relu(add_bias(conv2d(h, p[key + "/kernel"], spec.conv[i].stride, Padding::same), p[key + "/bias"]));
    }
    h = reshape(h, {n, spec.flatten_size()});
    h = detail::dense_layer(p, "encoder/latent", h);
  }
  return detail::latent_post(spec, p, h, phase);
}

/// Decoder graph: z is [N, latent_dim]; result is [N, input_dim] (dense) or [N, H, W, C] (conv).
template <class T>
Var<T> decode(const AutoencoderSpec& spec, BoundParameters<T>& p, Var<T> z) {
  const auto& zs = z.shape();
  if (zs.size() != 2 || zs[1] != spec.latent_dim)
    throw DimensionError("decoder input " + shape_str(zs) + " must be [N x " + std::to_string(spec.latent_dim) + "]");
  const std::size_t n = zs[0];
  const T slope = static_cast<T>(spec.leaky_slope);
  Var<T> h = z;
  if (spec.variant == Variant::dense) {
    const std::size_t layers = spec.hidden.size() + 1;
    for (std::size_t i = 0; i < layers; ++i) {
      h = detail::dense_layer(p, "decoder/dense" + std::to_string(i), h);
      if (i + 1 < layers) h = leaky_relu(h, slope);
    }
    return h;
  }
  h = relu(detail::dense_layer(p, "decoder/dense", h));
  const auto sizes = spec.spatial_sizes();
  const std::size_t layers = spec.conv.size();
  h = reshape(h, {n, sizes.back().first, sizes.back().second, spec.conv.back().filters});
  for (std::size_t j = 0; j < layers; ++j) {
    const std::size_t i = layers - 1 - j;
    const std::string key = "decoder/deconv" + std::to_string(j);
    h = add_bias(conv2d_transpose(h, p[key + "/kernel"], spec.conv[i].stride, sizes[i], Padding::same),
                 p[key + "/bias"]);
    if (j + 1 < layers) h = relu(h);
  }
  return h;
}

namespace detail {

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t rs = x.row_size();
  std::vector<T> vals(x.data() + begin * rs, x.data() + end * rs);
  return Tensor<T>(std::move(shape), std::move(vals));
}

/// Applies `fn` to row chunks of x and stacks the results along axis 0.
template <class T, class Fn>
Tensor<T> map_chunks(const Tensor<T>& x, std::size_t chunk, Fn fn) {
  Shape out_shape;
  std::vector<T> out;
  for (std::size_t begin = 0; begin < x.rows(); begin += chunk) {
    const std::size_t end = std::min(x.rows(), begin + chunk);
    Tensor<T> part = fn(gather_rows(x, begin, end));
    if (out_shape.empty()) out_shape = part.shape();
    out.insert(out.end(), part.values().begin(), part.values().end());
  }
  out_shape[0] = x.rows();
  return Tensor<T>(std::move(out_shape), std::move(out));
}

inline constexpr std::size_t kInferenceChunk = 256;

}  // namespace detail

/// Eval-mode latent codes for a batch, computed in fixed-size chunks.
template <class T>
Tensor<T> encode(const Parameters<T>& params, const AutoencoderSpec& spec, const Tensor<T>& x) {
  return detail::map_chunks(x, detail::kInferenceChunk, [&](const Tensor<T>& part) {
    Tape<T> tape;
    auto bound = bind(tape, params, false);
    return encode(spec, bound, tape.constant(part), Phase::eval).value();
  });
}

template <class T>
Tensor<T> decode(const Parameters<T>& params, const AutoencoderSpec& spec, const Tensor<T>& z) {
  return detail::map_chunks(z, detail::kInferenceChunk, [&](const Tensor<T>& part) {
    Tape<T> tape;
    auto bound = bind(tape, params, false);
    return decode(spec, bound, tape.constant(part)).value();
  });
}

/// Eval-mode reconstructions for a batch.
template <class T>
Tensor<T> reconstruct(const Parameters<T>& params, const AutoencoderSpec& spec, const Tensor<T>& x) {
  return detail::map_chunks(x, detail::kInferenceChunk, [&](const Tensor<T>& part) {
    Tape<T> tape;
    auto bound = bind(tape, params, false);
    auto z = encode(spec, bound, tape.constant(part), Phase::eval);
    return decode(spec, bound, z).value();
  });
}

}  // namespace l2ae
