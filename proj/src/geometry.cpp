#include "gct/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>

#include "gct/rng.hpp"

namespace gct::geo {

namespace {

constexpr double kDenomFloor = 1e-15;

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d s;
    s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return s;
}

/// Epipolar design row for x'^T E x with E flattened row-major.
void design_row(const double* q, double* a) {
    const double x = q[0], y = q[1], xp = q[2], yp = q[3];
    a[0] = xp * x;
    a[1] = xp * y;
    a[2] = xp;
    a[3] = yp * x;
    a[4] = yp * y;
    a[5] = yp;
    a[6] = x;
    a[7] = y;
    a[8] = 1.0;
}

/// Deterministic sign convention: the entry of largest magnitude is positive.
bool fix_sign(Eigen::Matrix<double, 9, 1>& v) {
    int idx = 0;
    double best = std::abs(v[0]);
    for (int i = 1; i < 9; ++i) {
        if (std::abs(v[i]) > best) {
            best = std::abs(v[i]);
            idx = i;
        }
    }
    if (v[idx] < 0) {
        v = -v;
        return true;
    }
    return false;
}

struct EightPointCore {
    Eigen::Matrix<double, 9, 1> e;         // unit norm, sign-fixed
    Eigen::Matrix<double, 9, 9> eigvecs;   // ascending eigenvalues
    Eigen::Matrix<double, 9, 1> eigvals;
    bool flipped = false;
};

EightPointCore solve_normal_equations(const Eigen::Matrix<double, 9, 9>& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> solver(m);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("eight-point eigendecomposition failed");
    }
    EightPointCore core;
    core.eigvecs = solver.eigenvectors();
    core.eigvals = solver.eigenvalues();
    core.e = core.eigvecs.col(0);
    core.e.normalize();
    core.flipped = fix_sign(core.e);
    return core;
}

Eigen::Matrix3d reshape3(const Eigen::Matrix<double, 9, 1>& v) {
    Eigen::Matrix3d m;
    m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
    return m;
}

}  // namespace

EssentialMatrix essential_from_pose(const Pose& pose) {
    EssentialMatrix e;
    e.m = skew(pose.translation.normalized()) * pose.rotation;
    e.m /= e.m.norm();
    return e;
}

EssentialMatrix project_to_essential(const EssentialMatrix& e) {
    // Fixed point: an already-projected, unit-norm matrix passes through
    // untouched, which makes the projection bitwise idempotent.
    {
        Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m);
        const auto& s = svd.singularValues();
        if (std::abs(s[0] - s[1]) < 1e-12 && s[2] < 1e-12 && std::abs(e.m.norm() - 1.0) < 1e-12) {
            return e;
        }
    }
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d projected =
        svd.matrixU() * Eigen::Vector3d(1, 1, 0).asDiagonal() * svd.matrixV().transpose();
    EssentialMatrix out;
    out.m = projected / projected.norm();
    return out;
}

EightPointResult weighted_eight_point(const CorrespondenceSet& corrs,
                                      const std::vector<double>& weights) {
    const int n = corrs.size();
    if (static_cast<int>(weights.size()) != n) {
        throw std::invalid_argument("weighted_eight_point: " + std::to_string(weights.size()) +
                                    " weights for " + std::to_string(n) + " correspondences");
    }
    int effective = 0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("weighted_eight_point: negative weight");
        if (w > 0.0) ++effective;
    }
    if (effective < 8) {
        throw std::invalid_argument("weighted_eight_point: rank error, only " +
                                    std::to_string(effective) +
                                    " correspondences with positive weight (need 8)");
    }
    Eigen::Matrix<double, 9, 9> m = Eigen::Matrix<double, 9, 9>::Zero();
    double a[9];
    for (int i = 0; i < n; ++i) {
        if (weights[i] == 0.0) continue;
        design_row(corrs.row(i), a);
        const double w2 = weights[i] * weights[i];
        Eigen::Map<Eigen::Matrix<double, 9, 1>> av(a);
        m.noalias() += w2 * av * av.transpose();
    }
    EightPointCore core = solve_normal_equations(m);
    EightPointResult result;
    result.e.m = reshape3(core.e);
    // Singular values of the weighted design matrix are the square roots of
    // the normal-matrix eigenvalues.
    const double s0 = std::sqrt(std::max(core.eigvals[0], 0.0));
    const double s1 = std::sqrt(std::max(core.eigvals[1], 0.0));
    result.degenerate = (s1 - s0) < 1e-9;
    result.e_projected = project_to_essential(result.e);
    return result;
}

double symmetric_epipolar_residual(const EssentialMatrix& e, double x, double y, double xp,
                                   double yp) {
    const Eigen::Vector3d p(x, y, 1.0);
    const Eigen::Vector3d pp(xp, yp, 1.0);
    const Eigen::Vector3d ep = e.m * p;
    const Eigen::Vector3d etp = e.m.transpose() * pp;
    const double num = pp.dot(ep);
    double den = ep[0] * ep[0] + ep[1] * ep[1] + etp[0] * etp[0] + etp[1] * etp[1];
    den = std::max(den, kDenomFloor);
    return num * num / den;
}

double symmetric_epipolar_residual(const EssentialMatrix& e, const CorrespondenceSet& corrs,
                                   int i) {
    const double* q = corrs.row(i);
    return symmetric_epipolar_residual(e, q[0], q[1], q[2], q[3]);
}

VerificationResult full_size_verification(const EssentialMatrix& e_hat,
                                          const CorrespondenceSet& corrs, double threshold) {
    const int n = corrs.size();
    if (n == 0) throw std::invalid_argument("full_size_verification: empty correspondence set");
    VerificationResult out;
    out.distances.resize(n);
    out.inlier_mask.resize(n);
    for (int i = 0; i < n; ++i) {
        out.distances[i] = symmetric_epipolar_residual(e_hat, corrs, i);
        out.inlier_mask[i] = out.distances[i] < threshold ? 1 : 0;
    }
    return out;
}

DecomposeResult decompose_essential(const EssentialMatrix& e_hat, const CorrespondenceSet& corrs,
                                    const std::vector<uint8_t>& inlier_mask) {
    const int n = corrs.size();
    if (static_cast<int>(inlier_mask.size()) != n) {
        throw std::invalid_argument("decompose_essential: mask size mismatch");
    }
    int masked = 0;
    for (uint8_t m : inlier_mask) masked += m ? 1 : 0;
    if (masked < 1) throw std::invalid_argument("decompose_essential: needs at least one inlier");

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(e_hat.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU();
    Eigen::Matrix3d v = svd.matrixV();
    if (u.determinant() < 0) u = -u;
    if (v.determinant() < 0) v = -v;
    Eigen::Matrix3d w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Eigen::Matrix3d r1 = u * w * v.transpose();
    const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
    const Eigen::Vector3d t = u.col(2);

    const Eigen::Matrix3d rots[2] = {r1, r2};
    const Eigen::Vector3d trans[2] = {t, -t};
    int best_count = -1;
    Pose best;
    for (const auto& r : rots) {
        for (const auto& tc : trans) {
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (!inlier_mask[i]) continue;
                const double* q = corrs.row(i);
                const Eigen::Vector3d x1(q[0], q[1], 1.0);
                const Eigen::Vector3d x2(q[2], q[3], 1.0);
                // Depth along each ray from x2 x z2 = R x1 z1 + t.
                const Eigen::Vector3d rx1 = r * x1;
                const Eigen::Vector3d c = x2.cross(rx1);
                const double c2 = c.squaredNorm();
                if (c2 < 1e-18) continue;
                const double z1 = -x2.cross(tc).dot(c) / c2;
                const double z2 = (rx1 * z1 + tc).z();
                if (z1 > 0 && z2 > 0) ++count;
            }
            if (count > best_count) {
                best_count = count;
                best.rotation = r;
                best.translation = tc;
            }
        }
    }
    DecomposeResult out;
    out.pose = best;
    out.pose.translation.normalize();
    out.ambiguous = best_count * 2 <= masked;
    return out;
}

PoseError pose_error(const Pose& estimated, const Pose& truth) {
    const double tr = (estimated.rotation.transpose() * truth.rotation).trace();
    const double cr = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    const double dt = std::clamp(
        std::abs(estimated.translation.normalized().dot(truth.translation.normalized())), 0.0,
        1.0);
    PoseError err;
    err.rotation_deg = std::acos(cr) * 180.0 / M_PI;
    err.translation_deg = std::acos(dt) * 180.0 / M_PI;
    return err;
}

RansacResult ransac_eight_point(const CorrespondenceSet& corrs, int iterations,
                                double inlier_threshold, uint64_t seed) {
    const int n = corrs.size();
    if (n < 8) throw std::invalid_argument("ransac_eight_point: need at least 8 correspondences");
    Rng rng(seed);

    RansacResult best;
    best.inlier_count = -1;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<double> sample_w(8, 1.0);
    CorrespondenceSet sample;
    sample.coords.resize(8 * 4);
    for (int it = 0; it < iterations; ++it) {
        const std::vector<int> picks = rng.sample_distinct(8, n);
        for (int j = 0; j < 8; ++j) {
            const double* q = corrs.row(picks[j]);
            std::copy(q, q + 4, sample.coords.begin() + 4 * j);
        }
        EightPointResult hyp;
        try {
            hyp = weighted_eight_point(sample, sample_w);
        } catch (const std::exception&) {
            continue;  // degenerate sample
        }
        VerificationResult ver = full_size_verification(hyp.e, corrs, inlier_threshold);
        // Truncated-residual score; a plain inlier count cannot separate the
        // exact solution from near-misses that also cover the inlier band.
        double score = 0.0;
        int count = 0;
        for (int i = 0; i < n; ++i) {
            score += std::min(ver.distances[i], inlier_threshold);
            count += ver.inlier_mask[i] ? 1 : 0;
        }
        if (score < best_score) {
            best_score = score;
            best.inlier_count = count;
            best.e = hyp.e;
            best.inlier_mask = std::move(ver.inlier_mask);
        }
    }
    if (best.inlier_count >= 8) {
        // Least-squares refit on the consensus set, then rescore.
        std::vector<double> w(n, 0.0);
        for (int i = 0; i < n; ++i) w[i] = best.inlier_mask[i] ? 1.0 : 0.0;
        EightPointResult refit = weighted_eight_point(corrs, w);
        VerificationResult ver = full_size_verification(refit.e, corrs, inlier_threshold);
        best.e = refit.e;
        best.inlier_mask = std::move(ver.inlier_mask);
        best.inlier_count = 0;
        for (uint8_t m : best.inlier_mask) best.inlier_count += m ? 1 : 0;
    } else {
        best.low_confidence = true;
    }
    return best;
}

// ---- differentiable path ----

ad::Tensor weighted_eight_point_diff(const ad::Tensor& coords, const ad::Tensor& weights) {
    if (coords.rank() != 2 || coords.dim(1) != 4) {
        throw std::invalid_argument("weighted_eight_point_diff: coords must be (n,4), got " +
                                    ad::shape_str(coords.shape()));
    }
    const int n = coords.dim(0);
    if (weights.numel() != n) {
        throw std::invalid_argument("weighted_eight_point_diff: weights " +
                                    ad::shape_str(weights.shape()) + " for n=" + std::to_string(n));
    }
    const auto& cd = coords.data();
    const auto& wd = weights.data();
    int effective = 0;
    for (double w : wd) {
        if (w > 0.0) ++effective;
    }
    if (effective < 8) {
        throw std::invalid_argument(
            "weighted_eight_point_diff: rank error, fewer than 8 positive weights");
    }

    Eigen::Matrix<double, 9, 9> m = Eigen::Matrix<double, 9, 9>::Zero();
    Eigen::Matrix<double, Eigen::Dynamic, 9> rows(n, 9);
    for (int i = 0; i < n; ++i) {
        double a[9];
        design_row(cd.data() + 4 * static_cast<size_t>(i), a);
        for (int j = 0; j < 9; ++j) rows(i, j) = a[j];
        m.noalias() += (wd[i] * wd[i]) * rows.row(i).transpose() * rows.row(i);
    }
    EightPointCore core = solve_normal_equations(m);
    std::vector<double> out(core.e.data(), core.e.data() + 9);

    return ad::make_op(
        "weighted_eight_point", {9}, std::move(out), {coords, weights},
        [coords, weights, core, rows, n](const std::vector<double>& g) {
            Eigen::Matrix<double, 9, 1> gv;
            for (int i = 0; i < 9; ++i) gv[i] = g[i];
            if (core.flipped) gv = -gv;
            // dL/dM = h v^T with h from eigenvector perturbation of the
            // symmetric normal matrix; near-degenerate directions are skipped.
            Eigen::Matrix<double, 9, 1> h = Eigen::Matrix<double, 9, 1>::Zero();
            for (int j = 1; j < 9; ++j) {
                const double gap = core.eigvals[0] - core.eigvals[j];
                if (std::abs(gap) < 1e-12) continue;
                const double coef = core.eigvecs.col(j).dot(gv) / gap;
                h += coef * core.eigvecs.col(j);
            }
            Eigen::Matrix<double, 9, 9> gm = h * core.eigvecs.col(0).transpose();
            const Eigen::Matrix<double, 9, 9> gsym = gm + gm.transpose();

            const auto& wd = weights.data();
            const auto& cd = coords.data();
            if (weights.requires_grad()) {
                auto& gw = const_cast<ad::Tensor&>(weights).grad();
                for (int i = 0; i < n; ++i) {
                    const auto a = rows.row(i).transpose();
                    // dM/dw_i = 2 w_i a a^T
                    gw[i] += wd[i] * a.dot(gsym * a);
                }
            }
            if (coords.requires_grad()) {
                auto& gc = const_cast<ad::Tensor&>(coords).grad();
                for (int i = 0; i < n; ++i) {
                    const double w2 = wd[i] * wd[i];
                    if (w2 == 0.0) continue;
                    const Eigen::Matrix<double, 9, 1> ha = gsym * rows.row(i).transpose();
                    const double* q = cd.data() + 4 * static_cast<size_t>(i);
                    const double x = q[0], y = q[1], xp = q[2], yp = q[3];
                    gc[4 * i + 0] += w2 * (xp * ha[0] + yp * ha[3] + ha[6]);
                    gc[4 * i + 1] += w2 * (xp * ha[1] + yp * ha[4] + ha[7]);
                    gc[4 * i + 2] += w2 * (x * ha[0] + y * ha[1] + ha[2]);
                    gc[4 * i + 3] += w2 * (x * ha[3] + y * ha[4] + ha[5]);
                }
            }
        });
}

ad::Tensor epipolar_residuals_diff(const ad::Tensor& e9, const CorrespondenceSet& corrs) {
    if (e9.numel() != 9) {
        throw std::invalid_argument("epipolar_residuals_diff: expected 9-vector, got " +
                                    ad::shape_str(e9.shape()));
    }
    const int n = corrs.size();
    std::vector<double> p1(n * 3), p2(n * 3);
    for (int i = 0; i < n; ++i) {
        const double* q = corrs.row(i);
        p1[3 * i + 0] = q[0];
        p1[3 * i + 1] = q[1];
        p1[3 * i + 2] = 1.0;
        p2[3 * i + 0] = q[2];
        p2[3 * i + 1] = q[3];
        p2[3 * i + 2] = 1.0;
    }
    ad::Tensor pts1 = ad::Tensor::from_data({n, 3}, std::move(p1));
    ad::Tensor pts2 = ad::Tensor::from_data({n, 3}, std::move(p2));
    ad::Tensor e = ad::reshape(e9, {3, 3});
    ad::Tensor ep = ad::matmul(pts1, ad::transpose(e));   // row i = (E p_i)^T
    ad::Tensor etp = ad::matmul(pts2, e);                 // row i = (E^T p'_i)^T
    ad::Tensor num_dot = ad::reduce_sum(ad::mul(pts2, ep), 1, true);  // (n,1)
    ad::Tensor num = ad::mul(num_dot, num_dot);
    auto sq = [](const ad::Tensor& t) { return ad::mul(t, t); };
    ad::Tensor den = ad::add(
        ad::add(sq(ad::slice_cols(ep, 0, 1)), sq(ad::slice_cols(ep, 1, 1))),
        ad::add(sq(ad::slice_cols(etp, 0, 1)), sq(ad::slice_cols(etp, 1, 1))));
    return ad::div(num, ad::clamp_min(den, kDenomFloor));
}

}  // namespace gct::geo
