#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "clustering.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "training.hpp"

namespace l2ae {

struct AnomalySetup {
  int anomaly_class = 0;
  double keep_ratio = 0.1;
  std::size_t k = 9;
  std::size_t repetitions = 10;
  std::uint64_t master_seed = 0;

  void validate() const {
    if (anomaly_class < 0) throw ConfigError("anomaly_class must be a non-negative label");
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("keep_ratio must be in (0, 1]");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
  }

  bool operator==(const AnomalySetup&) const = default;
};

/// Stream of one repetition; the trainset, training seed and k-means all derive from it.
inline Rng repetition_rng(const AnomalySetup& s, std::size_t repetition) {
  return Rng(s.master_seed).child("anomaly").child(static_cast<std::uint64_t>(repetition));
}

/// ⌊keep_ratio · n⌋, robust to ratios like 0.29 that sit just below a representable product.
inline std::size_t kept_count(double keep_ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(keep_ratio * static_cast<double>(n) + 1e-9));
}

/// Every sample outside the anomaly class plus a seeded uniform subset of
/// ⌊keep_ratio · n_class⌋ anomaly-class samples, in the original order.
inline ImageDataset build_anomaly_trainset(const ImageDataset& ds, const AnomalySetup& setup, std::size_t repetition) {
  setup.validate();
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == setup.anomaly_class) members.push_back(i);
  if (members.empty())
    throw ConfigError("anomaly class " + std::to_string(setup.anomaly_class) + " is absent from " + ds.source);
  const std::size_t keep = kept_count(setup.keep_ratio, members.size());
  if (keep < 1)
    throw ConfigError("keep_ratio " + std::to_string(setup.keep_ratio) + " keeps no sample of the " +
                      std::to_string(members.size()) + " in class " + std::to_string(setup.anomaly_class));
  Rng rng = repetition_rng(setup, repetition).child("subset");
  std::vector<bool> chosen(ds.size(), true);
  for (auto i : members) chosen[i] = false;
  for (auto j : rng.sample_without_replacement(members.size(), keep)) chosen[members[j]] = true;
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (chosen[i]) indices.push_back(i);
  return select(ds, indices, ds.source + ":anomaly-train(class=" + std::to_string(setup.anomaly_class) +
                                 ",rep=" + std::to_string(repetition) + ")");
}

struct NormalityScores {
  std::vector<double> score;           // v_i in [-1, 1]
  std::vector<std::size_t> nearest;    // arg max centroid, lowest index on ties
  std::vector<std::size_t> zero_centroids;
};

/// v_i = max_j latent_i · C_j / ‖C_j‖.
///
/// Latent rows must be unit norm within 1e-5 unless `normalize_latents`, in
/// which case each row is divided by max(‖row‖, 1e-12). Centroids get the
/// same guard, so a zero centroid scores 0 and is listed in `zero_centroids`.
template <class P>
NormalityScores normality_score(const Tensor<P>& latents, const CentroidSet& c, bool normalize_latents = false) {
  if (latents.rank() != 2) throw DimensionError("latents must be [N x d], got " + shape_str(latents.shape()));
  if (c.centroids.rank() != 2 || c.centroids.dim(0) < 1 || c.centroids.dim(1) != latents.dim(1))
    throw DimensionError("centroids " + shape_str(c.centroids.shape()) + " do not match latents " +
                         shape_str(latents.shape()));
  constexpr double eps = 1e-12;
  const std::size_t n = latents.dim(0), d = latents.dim(1), k = c.centroids.dim(0);
  NormalityScores out;
  Tensor<double> unit({k, d});
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0;
    for (std::size_t q = 0; q < d; ++q) s += c.centroids(j, q) * c.centroids(j, q);
    const double norm = std::sqrt(s);
    if (norm < eps) out.zero_centroids.push_back(j);
    for (std::size_t q = 0; q < d; ++q) unit(j, q) = c.centroids(j, q) / std::max(norm, eps);
  }
  out.score.resize(n);
  out.nearest.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = latents.row(i);
    double s = 0;
    for (auto v : row) s += double(v) * double(v);
    const double norm = std::sqrt(s);
    double scale = 1.0;
    if (normalize_latents)
      scale = 1.0 / std::max(norm, eps);
    else if (std::abs(norm - 1.0) > 1e-5)
      throw DimensionError("latent row " + std::to_string(i) + " has norm " + std::to_string(norm) +
                           "; normality scores need unit latents");
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0;
      for (std::size_t q = 0; q < d; ++q) dot += double(row[q]) * unit(j, q);
      if (dot > best) {
        best = dot;
        arg = j;
      }
    }
    out.score[i] = std::clamp(best * scale, -1.0, 1.0);
    out.nearest[i] = arg;
  }
  return out;
}

enum class Orientation { higher_is_normal, higher_is_anomalous };

inline std::string to_string(Orientation o) {
  return o == Orientation::higher_is_normal ? "higher-is-normal" : "higher-is-anomalous";
}

struct ScoredSet {
  std::vector<double> score;
  std::vector<bool> anomalous;
};

struct RocPoint {
  double threshold;  // in score units; see roc_auc
  double fpr, tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0;
  std::size_t positives = 0, negatives = 0;
};

namespace detail {

/// Round-half-even of num · 2^44 / den, as a multiple of 2^-44.
inline double dyadic_ratio(unsigned __int128 num, unsigned __int128 den) {
  const unsigned __int128 scaled = num << 44;
  unsigned __int128 q = scaled / den;
  const unsigned __int128 r = scaled % den;
  if (2 * r > den || (2 * r == den && (q & 1))) ++q;
  return std::ldexp(static_cast<double>(static_cast<std::uint64_t>(q)), -44);
}

}  // namespace detail

/// ROC curve with anomalies as positives, swept over every distinct score.
///
/// Under higher-is-anomalous a sample is flagged when its score exceeds the
/// threshold; under higher-is-normal when its score falls below it.
/// Thresholds run through ±∞ and every midpoint of consecutive distinct
/// scores, so the points go from (0, 0) to (1, 1). The AUC is the trapezoid
/// area, accumulated exactly in integers: it equals the Mann–Whitney
/// statistic P(a⁺ > a⁻) + ½P(a⁺ = a⁻), reported as the nearest multiple of
/// 2^-44 (ties to even) so the two orientations give exactly AUC and 1 − AUC.
inline RocCurve roc_auc(const ScoredSet& s, Orientation orientation) {
  if (s.score.size() != s.anomalous.size())
    throw DimensionError("scores and ground truth differ in length: " + std::to_string(s.score.size()) + " vs " +
                         std::to_string(s.anomalous.size()));
  for (auto v : s.score)
    if (!std::isfinite(v)) throw ConfigError("ROC scores must be finite");
  RocCurve curve;
  for (bool a : s.anomalous) (a ? curve.positives : curve.negatives)++;
  if (curve.positives == 0 || curve.negatives == 0)
    throw UndefinedAucError("AUC is undefined: ground truth holds only " +
                            std::string(curve.positives ? "anomalies" : "normal samples"));

  const bool flip = orientation == Orientation::higher_is_normal;
  std::vector<std::size_t> order(s.score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Most anomalous first.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return flip ? s.score[a] < s.score[b] : s.score[a] > s.score[b];
  });
  const double inf = std::numeric_limits<double>::infinity();
  const double P = static_cast<double>(curve.positives), N = static_cast<double>(curve.negatives);
  curve.points.push_back({flip ? -inf : inf, 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0;
  unsigned __int128 twice_area = 0;  // Σ ΔFP · (TP_prev + TP_cur)
  for (std::size_t i = 0; i < order.size();) {
    const double value = s.score[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && s.score[order[i]] == value; ++i) (s.anomalous[order[i]] ? tp : fp)++;
    twice_area += static_cast<unsigned __int128>(fp - fp0) * (tp0 + tp);
    const double threshold = i < order.size() ? value + (s.score[order[i]] - value) / 2 : (flip ? inf : -inf);
    curve.points.push_back({threshold, double(fp) / N, double(tp) / P});
  }
  curve.auc = detail::dyadic_ratio(twice_area, static_cast<unsigned __int128>(2) * curve.positives * curve.negatives);
  return curve;
}

inline void write_roc_csv(const std::string& path, const RocCurve& c) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "threshold,fpr,tpr\n";
  char buf[128];
  for (const auto& p : c.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.fpr, p.tpr);
    out << buf;
  }
}

struct RepetitionResult {
  std::size_t repetition = 0;
  std::uint64_t train_seed = 0;
  std::size_t train_size = 0, kept_anomalies = 0;
  std::size_t best_epoch = 0;
  double final_loss = 0;
  double auc_cluster = 0;          // normality score, higher-is-normal
  double auc_reconstruction = 0;   // reconstruction error, higher-is-anomalous (raw)
  double auc_reconstruction_flipped = 0;
  std::vector<std::size_t> zero_centroids;
  RocCurve roc_cluster, roc_reconstruction;
};

struct ProtocolResult {
  std::vector<RepetitionResult> repetitions;
  double mean_auc_cluster = 0, mean_auc_reconstruction = 0, mean_auc_reconstruction_flipped = 0;
};

struct ProtocolOptions {
  std::size_t kmeans_restarts = 20;
  std::size_t kmeans_max_iter = 300;
  std::size_t jobs = 1;  // repetitions run in parallel
  std::function<void(std::size_t repetition, const EpochRecord&)> on_epoch;
};

namespace detail {

template <class E>
[[noreturn]] void rethrow_tagged(const E& e, std::size_t rep) {
  throw E("repetition " + std::to_string(rep) + ": " + e.what());
}

// AUCs are multiples of 2^-44 in [0, 1], so this sum is exact for up to 512
// repetitions and the mean does not depend on their order.
inline double mean(const std::vector<RepetitionResult>& reps, double RepetitionResult::*field) {
  double s = 0;
  for (const auto& r : reps) s += r.*field;
  return s / static_cast<double>(reps.size());
}

inline RepetitionResult run_repetition(const ImageDataset& full_train, const ImageDataset& test,
                                       const AutoencoderSpec& spec, TrainConfig cfg, const AnomalySetup& setup,
                                       const ProtocolOptions& opt, std::size_t rep) {
  RepetitionResult out;
  out.repetition = rep;
  const Rng rng = repetition_rng(setup, rep);
  const auto trainset = build_anomaly_trainset(full_train, setup, rep);
  out.train_size = trainset.size();
  out.kept_anomalies = trainset.count(setup.anomaly_class);
  cfg.seed = out.train_seed = rng.child("train").seed();
  EpochObserver observer;
  if (opt.on_epoch) observer = [&](const EpochRecord& r) { opt.on_epoch(rep, r); };
  const auto trained = train(trainset, spec, cfg, observer);
  out.best_epoch = trained.history.best_epoch;
  out.final_loss = trained.history.loss.back();

  KMeansOptions km;
  km.k = setup.k;
  km.restarts = opt.kmeans_restarts;
  km.max_iter = opt.kmeans_max_iter;
  const auto clusters = kmeans(encode_dataset(trained.checkpoint, trainset), km, rng.child("kmeans"));

  ScoredSet truth;
  truth.anomalous.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) truth.anomalous[i] = test.labels[i] == setup.anomaly_class;
  const bool normalize = spec.normalization != NormalizationMode::unit_ball;
  auto normality = normality_score(encode_dataset(trained.checkpoint, test), clusters.centroids, normalize);
  out.zero_centroids = normality.zero_centroids;
  ScoredSet cluster{std::move(normality.score), truth.anomalous};
  out.roc_cluster = roc_auc(cluster, Orientation::higher_is_normal);
  out.auc_cluster = out.roc_cluster.auc;

  ScoredSet recon{reconstruction_errors(trained.checkpoint, test), truth.anomalous};
  out.roc_reconstruction = roc_auc(recon, Orientation::higher_is_anomalous);
  out.auc_reconstruction = out.roc_reconstruction.auc;
  out.auc_reconstruction_flipped = roc_auc(recon, Orientation::higher_is_normal).auc;
  return out;
}

}  // namespace detail

/// The anomaly protocol over `setup.repetitions` independent repetitions.
///
/// Repetition r derives everything from `repetition_rng(setup, r)`: the
/// subsampled trainset, the training seed (overriding `cfg.seed`) and the
/// k-means stream. Centroids come from training latents only; the test set
/// is scored unmodified, with membership in the anomaly class as ground truth.
inline ProtocolResult run_protocol(const ImageDataset& full_train, const ImageDataset& test,
                                   const AutoencoderSpec& spec, const TrainConfig& cfg, const AnomalySetup& setup,
                                   const ProtocolOptions& opt = {}) {
  setup.validate();
  check_dataset(spec, full_train);
  check_dataset(spec, test);
  ProtocolResult result;
  result.repetitions.resize(setup.repetitions);
  std::vector<std::exception_ptr> errors(setup.repetitions);
  auto run = [&](std::size_t rep) {
    try {
      try {
        result.repetitions[rep] = detail::run_repetition(full_train, test, spec, cfg, setup, opt, rep);
      } catch (const TrainingError& e) {
        detail::rethrow_tagged(e, rep);
      } catch (const DimensionError& e) {
        detail::rethrow_tagged(e, rep);
      } catch (const UndefinedAucError& e) {
        detail::rethrow_tagged(e, rep);
      } catch (const ConfigError& e) {
        detail::rethrow_tagged(e, rep);
      }
    } catch (...) {
      errors[rep] = std::current_exception();
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(opt.jobs, 1, setup.repetitions);
  if (jobs == 1) {
    for (std::size_t r = 0; r < setup.repetitions; ++r) run(r);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
      workers.emplace_back([&, w] {
        for (std::size_t r = w; r < setup.repetitions; r += jobs) run(r);
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  result.mean_auc_cluster = detail::mean(result.repetitions, &RepetitionResult::auc_cluster);
  result.mean_auc_reconstruction = detail::mean(result.repetitions, &RepetitionResult::auc_reconstruction);
  result.mean_auc_reconstruction_flipped =
      detail::mean(result.repetitions, &RepetitionResult::auc_reconstruction_flipped);
  return result;
}

}  // namespace l2ae
