#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "errors.hpp"
#include "models.hpp"

namespace l2ae {

using Json = nlohmann::json;

namespace detail {

inline std::string json_kind(const Json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  return "object";
}

template <class T>
T json_as(const Json& j, const std::string& path) {
  auto bad = [&](const std::string& want) -> ConfigError {
    return ConfigError(path + ": expected " + want + ", got " + json_kind(j));
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw bad("boolean");
    return j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw bad("string");
    return j.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw bad("number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw ConfigError(path + ": must be finite");
    return static_cast<T>(v);
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!j.is_number_integer()) throw bad("non-negative integer");
    if (!j.is_number_unsigned() && j.get<std::int64_t>() < 0) throw ConfigError(path + ": must be non-negative");
    const auto v = j.get<std::uint64_t>();
    if (v > std::numeric_limits<T>::max()) throw ConfigError(path + ": value too large");
    return static_cast<T>(v);
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw bad("integer");
    return static_cast<T>(j.get<std::int64_t>());
  } else {
    static_assert(sizeof(T) == 0, "unsupported JSON field type");
  }
}

}  // namespace detail

/// Reads one JSON object, tracking the dotted path of every field for error
/// messages. `finish` rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected object, got " + detail::json_kind(j_));
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(path(key) + ": required field missing");
    return j_.at(key);
  }

  template <class T>
  T require(const std::string& key) {
    return detail::json_as<T>(raw(key), path(key));
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    return j_.contains(key) ? detail::json_as<T>(j_.at(key), path(key)) : fallback;
  }

  template <class T>
  std::vector<T> get_list(const std::string& key, std::vector<T> fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    const Json& a = j_.at(key);
    if (!a.is_array()) throw ConfigError(path(key) + ": expected array, got " + detail::json_kind(a));
    std::vector<T> out;
    for (std::size_t i = 0; i < a.size(); ++i)
      out.push_back(detail::json_as<T>(a[i], path(key) + "[" + std::to_string(i) + "]"));
    return out;
  }

  ObjectReader object(const std::string& key) { return ObjectReader(raw(key), path(key)); }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError(path(item.key()) + ": unknown key");
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json to_json(const AutoencoderSpec& s) {
  Json conv = Json::array();
  for (const auto& c : s.conv) conv.push_back({{"kernel", c.kernel}, {"filters", c.filters}, {"stride", c.stride}});
  return {{"variant", to_string(s.variant)},
          {"input_shape", {s.height, s.width, s.channels}},
          {"latent_dim", s.latent_dim},
          {"hidden", s.hidden},
          {"conv", conv},
          {"leaky_slope", s.leaky_slope},
          {"normalization", to_string(s.normalization)}};
}

/// Spec from JSON; absent fields keep the value in `base`.
inline AutoencoderSpec spec_from_json(const Json& j, const std::string& path, AutoencoderSpec base = {}) {
  ObjectReader r(j, path);
  AutoencoderSpec s = base;
  if (r.has("variant")) {
    try {
      s.variant = parse_variant(r.require<std::string>("variant"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.path("variant") + ": " + e.what());
    }
  }
  if (r.has("input_shape")) {
    const auto dims = r.get_list<std::size_t>("input_shape", {});
    if (dims.size() != 3) throw ConfigError(r.path("input_shape") + ": expected [height, width, channels]");
    s.height = dims[0];
    s.width = dims[1];
    s.channels = dims[2];
  }
  s.latent_dim = r.get<std::size_t>("latent_dim", s.latent_dim);
  s.hidden = r.get_list<std::size_t>("hidden", s.hidden);
  if (r.has("conv")) {
    const Json& a = r.raw("conv");
    if (!a.is_array()) throw ConfigError(r.path("conv") + ": expected array, got " + detail::json_kind(a));
    s.conv.clear();
    for (std::size_t i = 0; i < a.size(); ++i) {
      ObjectReader c(a[i], r.path("conv") + "[" + std::to_string(i) + "]");
      ConvLayerSpec layer;
      layer.kernel = c.require<std::size_t>("kernel");
      layer.filters = c.require<std::size_t>("filters");
      layer.stride = c.get<std::size_t>("stride", 2);
      c.finish();
      s.conv.push_back(layer);
    }
  }
  s.leaky_slope = r.get<double>("leaky_slope", s.leaky_slope);
  if (r.has("normalization")) {
    try {
      s.normalization = parse_normalization(r.require<std::string>("normalization"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.path("normalization") + ": " + e.what());
    }
  }
  r.finish();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError((path.empty() ? std::string("model") : path) + ": " + e.what());
  }
  return s;
}

}  // namespace l2ae
