#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

#include "gct/tensor.hpp"

namespace gct::geo {

/// Relative pose between two calibrated views. Rotation is orthonormal with
/// det +1; translation is unit length (its scale is unobservable from
/// correspondences alone).
struct Pose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d(0, 0, 1);
};

/// 3x3 essential matrix, kept at unit Frobenius norm.
struct EssentialMatrix {
    Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
};

/// N correspondences in camera-normalized coordinates, stored row-major as
/// (x, y, x', y'). Labels and the generating pose are carried when known.
struct CorrespondenceSet {
    std::vector<double> coords;  // 4 doubles per correspondence
    std::vector<uint8_t> labels;  // empty when unknown
    std::optional<Pose> pose;

    int size() const { return static_cast<int>(coords.size() / 4); }
    const double* row(int i) const { return coords.data() + 4 * static_cast<size_t>(i); }
    bool has_labels() const { return !labels.empty(); }
};

EssentialMatrix essential_from_pose(const Pose& pose);

/// Forces singular values to be proportional to (1,1,0), then renormalizes.
/// A matrix already of that form is returned unchanged, making the
/// projection an exact fixed point.
EssentialMatrix project_to_essential(const EssentialMatrix& e);

struct EightPointResult {
    EssentialMatrix e;            // smallest right singular vector, unit Frobenius
    EssentialMatrix e_projected;  // singular values forced to (1,1,0)
    bool degenerate = false;      // repeated smallest singular values
};

/// Weighted eight-point estimate from rows scaled by `weights`. Requires at
/// least 8 strictly positive weights.
EightPointResult weighted_eight_point(const CorrespondenceSet& corrs,
                                      const std::vector<double>& weights);

/// Squared symmetric epipolar distance:
/// (p'^T E p)^2 / (|Ep|_1^2 + |Ep|_2^2 + |E^T p'|_1^2 + |E^T p'|_2^2),
/// denominator clamped below at 1e-15. Invariant to rescaling of E.
double symmetric_epipolar_residual(const EssentialMatrix& e, double x, double y, double xp,
                                   double yp);
double symmetric_epipolar_residual(const EssentialMatrix& e, const CorrespondenceSet& corrs,
                                   int i);

struct VerificationResult {
    std::vector<double> distances;
    std::vector<uint8_t> inlier_mask;  // residual < threshold (strict)
};

/// Epipolar distances of the FULL set under an estimate; classification by
/// strict threshold so that pruned-away inliers can be retrieved.
VerificationResult full_size_verification(const EssentialMatrix& e_hat,
                                          const CorrespondenceSet& corrs, double threshold);

struct DecomposeResult {
    Pose pose;
    bool ambiguous = false;  // no candidate had a positive-depth majority
};

/// SVD decomposition into the four (R, t) candidates, disambiguated by
/// cheirality over the masked correspondences.
DecomposeResult decompose_essential(const EssentialMatrix& e_hat, const CorrespondenceSet& corrs,
                                    const std::vector<uint8_t>& inlier_mask);

struct PoseError {
    double rotation_deg = 0.0;
    double translation_deg = 0.0;
};

PoseError pose_error(const Pose& estimated, const Pose& truth);

struct RansacResult {
    EssentialMatrix e;
    std::vector<uint8_t> inlier_mask;
    bool low_confidence = false;  // no hypothesis reached 8 inliers
    int inlier_count = 0;
};

RansacResult ransac_eight_point(const CorrespondenceSet& corrs, int iterations,
                                double inlier_threshold, uint64_t seed);

// ---- differentiable path ----

/// Weighted eight-point as an autodiff op: coords (n x 4), weights (n) or
/// (n x 1) -> unit-norm 9-vector (row-major E). Gradients flow to both
/// inputs through the normal-equation eigenvector.
ad::Tensor weighted_eight_point_diff(const ad::Tensor& coords, const ad::Tensor& weights);

/// Per-correspondence symmetric epipolar residuals (n x 1) of the estimate
/// `e9` (unit-norm 9-vector) over fixed correspondences; differentiable
/// w.r.t. e9.
ad::Tensor epipolar_residuals_diff(const ad::Tensor& e9, const CorrespondenceSet& corrs);

}  // namespace gct::geo
