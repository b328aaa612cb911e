#pragma once

#include <stdexcept>
#include <string>

namespace l2ae {

/// Shapes that do not line up (matmul inner dims, channel counts, dataset vs spec).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid settings: bad spec, impossible subsample, unreachable transpose-conv target.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input files. Loaders throw this and never return partial data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse such as running backward twice on one tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Divergence during optimization (NaN/Inf loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// AUC requested for ground truth that holds a single class.
class UndefinedAucError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace l2ae
