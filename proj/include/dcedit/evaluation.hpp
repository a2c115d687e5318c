#pragma once

// Distribution distance (FID form), perceptual distance (LPIPS form) and mask IoU.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dcedit/deghosting.hpp"
#include "dcedit/image.hpp"

namespace dcedit::eval {

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  int count = 0;

  int dims() const { return static_cast<int>(mean.size()); }

  void validate() const {
    require(count >= 2, ErrorCode::invalid_argument, "feature stats need at least two samples");
    require(covariance.rows() == mean.size() && covariance.cols() == mean.size(), ErrorCode::shape_mismatch,
            "covariance does not match mean dimension");
    require(covariance.isApprox(covariance.transpose(), 1e-9) || covariance.norm() == 0.0, ErrorCode::invalid_argument,
            "covariance is not symmetric");
  }
};

// Rows are samples. Covariance uses the (count - 1) denominator.
inline FeatureStats feature_stats(const Eigen::MatrixXd& samples) {
  require(samples.rows() >= 2, ErrorCode::invalid_argument, "feature_stats needs at least two samples");
  FeatureStats s;
  s.count = static_cast<int>(samples.rows());
  s.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - s.mean.transpose();
  s.covariance = (centered.transpose() * centered) / static_cast<double>(s.count - 1);
  return s;
}

inline constexpr double kEigenClip = -1e-6;

namespace detail {

// Symmetric PSD square root; eigenvalues in [kEigenClip, 0) are treated as zero.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  require(es.info() == Eigen::Success, ErrorCode::invalid_argument, std::string(what) + ": eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    require(ev[i] >= kEigenClip, ErrorCode::invalid_argument,
            std::string(what) + ": matrix is indefinite (eigenvalue " + std::to_string(ev[i]) + ")");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
// Tr((S_a S_b)^{1/2}) is taken from the symmetric form (S_a^{1/2} S_b S_a^{1/2})^{1/2}.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  a.validate();
  b.validate();
  require(a.dims() == b.dims(), ErrorCode::shape_mismatch,
          "frechet_distance: dimension " + std::to_string(a.dims()) + " vs " + std::to_string(b.dims()));
  const Eigen::MatrixXd ra = detail::sqrt_psd(a.covariance, "covariance a");
  detail::sqrt_psd(b.covariance, "covariance b");
  const Eigen::MatrixXd cross = detail::sqrt_psd(ra * b.covariance * ra, "covariance product");
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

// Per-image feature vectors: spatially averaged channels of every extractor tap, concatenated.
inline Eigen::MatrixXd pooled_features(const std::vector<Image>& images, const deghost::FeatureExtractor& v) {
  require(!images.empty(), ErrorCode::invalid_argument, "pooled_features: no images");
  ag::NoGradGuard no_grad;
  Eigen::MatrixXd out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<double> row;
    for (const ag::Var& t : v.taps(deghost::image_var(images[i]))) {
      const Tensor m = ag::spatial_mean(t).value();
      row.insert(row.end(), m.values().begin(), m.values().end());
    }
    if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(row.size()));
    require(static_cast<Eigen::Index>(row.size()) == out.cols(), ErrorCode::shape_mismatch, "pooled_features: images differ in shape");
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), static_cast<Eigen::Index>(row.size()));
  }
  return out;
}

inline double frechet_distance(const std::vector<Image>& a, const std::vector<Image>& b, const deghost::FeatureExtractor& v) {
  return frechet_distance(feature_stats(pooled_features(a, v)), feature_stats(pooled_features(b, v)));
}

inline constexpr double kUnitNormEps = 1e-10;

// Each tap: features normalized to unit length over channels at every position,
// squared difference summed over channels and averaged over positions. Taps are averaged.
inline double perceptual_similarity(const Image& a, const Image& b, const deghost::FeatureExtractor& v) {
  require(a.same_shape(b), ErrorCode::shape_mismatch,
          "perceptual_similarity: " + shape_str(a.tensor().shape()) + " vs " + shape_str(b.tensor().shape()));
  ag::NoGradGuard no_grad;
  const auto ta = v.taps(deghost::image_var(a));
  const auto tb = v.taps(deghost::image_var(b));
  double total = 0.0;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    const Tensor& fa = ta[k].value();
    const Tensor& fb = tb[k].value();
    const int c = fa.dim(1), hw = fa.dim(2) * fa.dim(3);
    double acc = 0.0;
    for (int p = 0; p < hw; ++p) {
      double na = 0.0, nb = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        na += fa[static_cast<std::size_t>(ch) * hw + p] * fa[static_cast<std::size_t>(ch) * hw + p];
        nb += fb[static_cast<std::size_t>(ch) * hw + p] * fb[static_cast<std::size_t>(ch) * hw + p];
      }
      na = std::sqrt(na) + kUnitNormEps;
      nb = std::sqrt(nb) + kUnitNormEps;
      for (int ch = 0; ch < c; ++ch) {
        const double d = fa[static_cast<std::size_t>(ch) * hw + p] / na - fb[static_cast<std::size_t>(ch) * hw + p] / nb;
        acc += d * d;
      }
    }
    total += acc / hw;
  }
  return total / static_cast<double>(ta.size());
}

inline double mask_iou(const ActivationMask& pred, const ActivationMask& truth, double threshold = 0.5) {
  require(pred.tensor().shape() == truth.tensor().shape(), ErrorCode::shape_mismatch,
          "mask_iou: " + shape_str(pred.tensor().shape()) + " vs " + shape_str(truth.tensor().shape()));
  require(threshold > 0.0 && threshold < 1.0, ErrorCode::invalid_argument, "mask_iou: threshold must be in (0, 1)");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.tensor().size(); ++i) {
    const bool p = pred[i] >= threshold, t = truth[i] >= threshold;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::vector<std::string> dataset_ids;
  std::string extractor_id;

  nlohmann::json to_json() const {
    return {{"metric", metric}, {"value", value}, {"dataset_ids", dataset_ids}, {"extractor_id", extractor_id}};
  }
};

}  // namespace dcedit::eval
