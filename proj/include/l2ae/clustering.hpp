#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace l2ae {

/// k centroids in latent space with the inertia of the assignment that produced them.
struct CentroidSet {
  std::size_t k = 0;
  Tensor<double> centroids;  // [k, d]
  double inertia = 0.0;
};

using Assignment = std::vector<int>;

struct KMeansOptions {
  std::size_t k = 10;
  std::size_t restarts = 20;
  std::size_t max_iter = 300;
  std::size_t jobs = 1;
};

struct KMeansResult {
  CentroidSet centroids;
  Assignment assignment;
  std::size_t restart = 0;              // winning restart
  std::size_t iterations = 0;           // Lloyd iterations of the winner
  std::vector<double> inertia_trace;    // winner's inertia after each assignment step
};

namespace detail {

template <class P>
double squared_distance(const P* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = static_cast<double>(a[j]) - b[j];
    s += diff * diff;
  }
  return s;
}

template <class P>
void check_points(const Tensor<P>& points, std::size_t k) {
  if (points.rank() != 2) throw DimensionError("k-means points must be [N x d], got " + shape_str(points.shape()));
  if (k < 1) throw ConfigError("k-means needs k >= 1");
  if (points.dim(0) < k)
    throw ConfigError("k-means needs at least k points: N=" + std::to_string(points.dim(0)) +
                      " < k=" + std::to_string(k));
}

}  // namespace detail

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to the squared distance to the nearest chosen
/// centroid. When every remaining distance is zero the lowest unchosen index
/// is taken.
template <class P>
Tensor<double> kmeans_pp_init(const Tensor<P>& points, std::size_t k, Rng rng) {
  detail::check_points(points, k);
  const std::size_t n = points.dim(0), d = points.dim(1);
  Tensor<double> c({k, d});
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t idx, std::size_t slot) {
    chosen[idx] = true;
    for (std::size_t j = 0; j < d; ++j) c(slot, j) = static_cast<double>(points(idx, j));
  };
  take(rng.below(n), 0);
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = detail::squared_distance(points.data() + i * d, c.data(), d);
  for (std::size_t slot = 1; slot < k; ++slot) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : dist[i];
    std::size_t pick = n;
    if (total > 0) {
      const double target = rng.uniform() * total;
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || dist[i] <= 0) continue;
        acc += dist[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    take(pick, slot);
    const double* centroid = c.data() + slot * d;
    for (std::size_t i = 0; i < n; ++i)
      dist[i] = std::min(dist[i], detail::squared_distance(points.data() + i * d, centroid, d));
  }
  return c;
}

namespace detail {

/// Nearest centroid per point (ties to the lowest index) with its squared distance.
template <class P>
void assign_nearest(const Tensor<P>& points, const Tensor<double>& c, Assignment& labels, std::vector<double>& dist) {
  const std::size_t n = points.dim(0), d = points.dim(1), k = c.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dd = squared_distance(points.data() + i * d, c.data() + j * d, d);
      if (dd < best) {
        best = dd;
        arg = static_cast<int>(j);
      }
    }
    labels[i] = arg;
    dist[i] = best;
  }
}

/// One k-means run from a given seeding.
template <class P>
KMeansResult lloyd(const Tensor<P>& points, Tensor<double> c, std::size_t max_iter) {
  const std::size_t n = points.dim(0), d = points.dim(1), k = c.dim(0);
  KMeansResult res;
  Assignment labels(n, -1), prev;
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iter, 1); ++it) {
    assign_nearest(points, c, labels, dist);
    res.iterations = it + 1;
    // Empty clusters take the point farthest from its centroid (lowest index on ties).
    std::vector<std::size_t> sizes(k, 0);
    for (auto l : labels) ++sizes[l];
    for (std::size_t j = 0; j < k; ++j) {
      if (sizes[j] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      if (sizes[labels[far]] <= 1) continue;  // all points coincide with their centroids
      --sizes[labels[far]];
      labels[far] = static_cast<int>(j);
      ++sizes[j];
      dist[far] = 0;
      for (std::size_t q = 0; q < d; ++q) c(j, q) = static_cast<double>(points(far, q));
    }
    res.inertia_trace.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
    if (labels == prev || it + 1 >= max_iter) break;
    prev = labels;
    Tensor<double> next({k, d}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t q = 0; q < d; ++q) next(labels[i], q) += static_cast<double>(points(i, q));
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t q = 0; q < d; ++q) next(j, q) = sizes[j] ? next(j, q) / static_cast<double>(sizes[j]) : c(j, q);
    c = std::move(next);
  }
  res.centroids.k = k;
  res.centroids.centroids = std::move(c);
  res.centroids.inertia = res.inertia_trace.back();
  res.assignment = std::move(labels);
  return res;
}

}  // namespace detail

/// Best of `restarts` k-means++-seeded Lloyd runs by (inertia, restart index).
///
/// Restart r is seeded from `rng.child(r)`, so a run with more restarts sees
/// the same first runs and can only lower the inertia. Lloyd stops when an
/// assignment repeats or after `max_iter` assignment steps; the returned
/// centroids are the ones the final assignment was made against.
template <class P>
KMeansResult kmeans(const Tensor<P>& points, const KMeansOptions& opt, const Rng& rng) {
  detail::check_points(points, opt.k);
  if (opt.restarts < 1) throw ConfigError("k-means needs restarts >= 1");
  std::vector<KMeansResult> runs(opt.restarts);
  auto run = [&](std::size_t r) {
    runs[r] = detail::lloyd(points, kmeans_pp_init(points, opt.k, rng.child(r)), opt.max_iter);
    runs[r].restart = r;
  };
  const std::size_t jobs = std::clamp<std::size_t>(opt.jobs, 1, opt.restarts);
  if (jobs == 1) {
    for (std::size_t r = 0; r < opt.restarts; ++r) run(r);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
      workers.emplace_back([&, w] {
        for (std::size_t r = w; r < opt.restarts; r += jobs) run(r);
      });
  }
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].centroids.inertia < runs[best].centroids.inertia) best = r;
  return std::move(runs[best]);
}

struct HungarianResult {
  std::vector<int> assignment;  // row -> column
  double cost = 0.0;
};

/// Minimum-cost perfect matching on a square matrix by shortest augmenting
/// paths with dual potentials, O(n³).
inline HungarianResult hungarian(const Tensor<double>& cost) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1))
    throw DimensionError("hungarian needs a square cost matrix, got " + shape_str(cost.shape()));
  for (auto v : cost.values())
    if (!std::isfinite(v)) throw ConfigError("hungarian cost matrix must be finite");
  const std::size_t n = cost.dim(0);
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  HungarianResult res;
  res.assignment.assign(n, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (match[j] != 0) res.assignment[match[j] - 1] = static_cast<int>(j - 1);
  for (std::size_t i = 0; i < n; ++i) res.cost += cost(i, static_cast<std::size_t>(res.assignment[i]));
  return res;
}

/// Counts[c][l] of cluster c against label l, zero-padded to K×K with
/// K = max(#clusters, #labels).
inline Tensor<double> contingency(const std::vector<int>& labels, const Assignment& clusters) {
  if (labels.size() != clusters.size())
    throw DimensionError("labels (" + std::to_string(labels.size()) + ") and assignment (" +
                         std::to_string(clusters.size()) + ") differ in length");
  if (labels.empty()) throw DimensionError("clustering accuracy of an empty set");
  int kk = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || clusters[i] < 0) throw ConfigError("labels and cluster ids must be non-negative");
    kk = std::max({kk, labels[i] + 1, clusters[i] + 1});
  }
  const auto k = static_cast<std::size_t>(kk);
  Tensor<double> m({k, k}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) m(clusters[i], labels[i]) += 1.0;
  return m;
}

/// Fraction of samples whose cluster maps to their label under the best
/// one-to-one cluster→label mapping, found by hungarian on negated counts.
inline double clustering_accuracy(const std::vector<int>& labels, const Assignment& clusters) {
  const auto counts = contingency(labels, clusters);
  Tensor<double> cost = counts;
  for (auto& v : cost.values()) v = -v;
  const auto match = hungarian(cost);
  double hit = 0;
  for (std::size_t c = 0; c < counts.dim(0); ++c) hit += counts(c, match.assignment[c]);
  return hit / static_cast<double>(labels.size());
}

}  // namespace l2ae
