#pragma once

#include <Eigen/Eigenvalues>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace l2ae {

struct Embedding2D {
  Tensor<double> coords;      // [n, 2]
  Tensor<double> components;  // [2, d], orthonormal rows
  std::vector<double> variance;  // explained variance of each component
};

/// Projection of latent codes onto their two leading principal directions.
///
/// The directions are eigenvectors of the centered covariance, each signed
/// so its largest-magnitude entry is positive. The codes themselves are
/// projected without centering, so the map is a partial isometry: ‖xy‖ ≤ ‖z‖
/// and 2-D inputs are rotated or reflected.
template <class P>
Embedding2D pca_2d(const Tensor<P>& latents) {
  if (latents.rank() != 2 || latents.dim(0) == 0 || latents.dim(1) == 0)
    throw DimensionError("PCA needs a non-empty [N x d] matrix, got " + shape_str(latents.shape()));
  const Eigen::Index n = Eigen::Index(latents.dim(0)), d = Eigen::Index(latents.dim(1));
  Eigen::MatrixXd z(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = static_cast<double>(latents(i, j));
  const Eigen::RowVectorXd mean = z.colwise().mean();
  const Eigen::MatrixXd centered = z.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw DimensionError("PCA eigen decomposition failed");

  Embedding2D out;
  out.components = Tensor<double>({2, static_cast<std::size_t>(d)}, 0.0);
  out.variance = {0.0, 0.0};
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);  // eigenvalues ascend
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (Eigen::Index j = 0; j < d; ++j) out.components(c, j) = v(j);
    out.variance[c] = std::max(0.0, eig.eigenvalues()(d - 1 - c));
  }
  out.coords = Tensor<double>({static_cast<std::size_t>(n), 2}, 0.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0;
      for (Eigen::Index j = 0; j < d; ++j) s += z(i, j) * out.components(c, j);
      out.coords(i, c) = s;
    }
  return out;
}

struct ClassCentroid2D {
  int label;
  std::size_t count;
  double x, y;
};

inline std::vector<ClassCentroid2D> class_centroids(const Embedding2D& e, const std::vector<int>& labels) {
  if (labels.size() != e.coords.dim(0)) throw DimensionError("labels and embedding differ in length");
  std::map<int, ClassCentroid2D> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& c = acc.try_emplace(labels[i], ClassCentroid2D{labels[i], 0, 0.0, 0.0}).first->second;
    ++c.count;
    c.x += e.coords(i, 0);
    c.y += e.coords(i, 1);
  }
  std::vector<ClassCentroid2D> out;
  for (auto& [label, c] : acc) {
    c.x /= static_cast<double>(c.count);
    c.y /= static_cast<double>(c.count);
    out.push_back(c);
  }
  return out;
}

inline void write_embedding_csv(const std::string& path, const Embedding2D& e, const std::vector<int>& labels) {
  if (labels.size() != e.coords.dim(0)) throw DimensionError("labels and embedding differ in length");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "index,label,x,y\n";
  char buf[96];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g\n", i, labels[i], e.coords(i, 0), e.coords(i, 1));
    out << buf;
  }
}

inline void write_class_centroids_csv(const std::string& path, const std::vector<ClassCentroid2D>& cs) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "label,count,x,y\n";
  char buf[96];
  for (const auto& c : cs) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.17g,%.17g\n", c.label, c.count, c.x, c.y);
    out << buf;
  }
}

}  // namespace l2ae
