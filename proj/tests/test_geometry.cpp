#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>

#include "gct/geometry.hpp"
#include "gct/rng.hpp"
#include "testing.hpp"

using namespace gct;

namespace {

geo::CorrespondenceSet with_outliers(const geo::CorrespondenceSet& inliers, int n_outliers,
                                     Rng& rng) {
    geo::CorrespondenceSet out = inliers;
    const int n = inliers.size();
    for (int i = 0; i < n_outliers; ++i) {
        const double x = rng.uniform(-0.5, 0.5);
        const double y = rng.uniform(-0.5, 0.5);
        out.coords.push_back(x);
        out.coords.push_back(y);
        out.coords.push_back(rng.uniform(-0.5, 0.5));
        out.coords.push_back(rng.uniform(-0.5, 0.5));
        out.labels.push_back(0);
    }
    (void)n;
    return out;
}

}  // namespace

TEST_CASE("essential_from_pose: canonical translation produces the skew form") {
    geo::Pose pose;  // identity rotation, t = (0,0,1)
    geo::EssentialMatrix e = geo::essential_from_pose(pose);
    Eigen::Matrix3d expected;
    expected << 0, -1, 0, 1, 0, 0, 0, 0, 0;
    expected /= expected.norm();
    CHECK((e.m - expected).norm() < 1e-15);
}

TEST_CASE("essential matrices have singular values (s, s, 0)") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        geo::EssentialMatrix e = geo::essential_from_pose(test::random_pose(rng));
        Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m);
        const auto& s = svd.singularValues();
        CHECK(std::abs(s[0] - s[1]) < 1e-12);
        CHECK(s[2] < 1e-12);
        CHECK(std::abs(e.m.determinant()) < 1e-9);
        CHECK(e.m.norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("epipolar constraint holds on exact projections across 1000 poses") {
    Rng rng(22);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        geo::Pose pose = test::random_pose(rng);
        geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 4);
        geo::EssentialMatrix e = geo::essential_from_pose(pose);
        for (int i = 0; i < corrs.size(); ++i) {
            const double* q = corrs.row(i);
            const Eigen::Vector3d p(q[0], q[1], 1.0), pp(q[2], q[3], 1.0);
            worst = std::max(worst, std::abs(pp.dot(e.m * p)));
        }
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("weighted_eight_point recovers the true essential matrix") {
    Rng rng(23);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 20);
    geo::EightPointResult res = geo::weighted_eight_point(corrs, std::vector<double>(20, 1.0));
    geo::EssentialMatrix truth = geo::essential_from_pose(pose);
    CHECK(test::frobenius_distance_up_to_sign(res.e.m, truth.m) < 1e-6);
    CHECK_FALSE(res.degenerate);
}

TEST_CASE("zero-weight rows are dropped exactly") {
    Rng rng(24);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet inliers = test::exact_correspondences(rng, pose, 20);
    geo::EightPointResult clean = geo::weighted_eight_point(inliers, std::vector<double>(20, 1.0));

    geo::CorrespondenceSet mixed = with_outliers(inliers, 20, rng);
    std::vector<double> weights(40, 0.0);
    std::fill(weights.begin(), weights.begin() + 20, 1.0);
    geo::EightPointResult masked = geo::weighted_eight_point(mixed, weights);
    CHECK((clean.e.m - masked.e.m).norm() < 1e-10);
}

TEST_CASE("eight-point with seven correspondences is a rank error") {
    Rng rng(25);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, test::random_pose(rng), 7);
    CHECK_THROWS_AS(geo::weighted_eight_point(corrs, std::vector<double>(7, 1.0)),
                    std::invalid_argument);
    // 20 rows but only 7 carry positive weight is equally under-determined.
    geo::CorrespondenceSet more = test::exact_correspondences(rng, test::random_pose(rng), 20);
    std::vector<double> w(20, 0.0);
    std::fill(w.begin(), w.begin() + 7, 1.0);
    CHECK_THROWS_AS(geo::weighted_eight_point(more, w), std::invalid_argument);
}

TEST_CASE("weighted_eight_point is equivariant to joint row/weight permutation") {
    Rng rng(26);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 30);
    for (int i = 0; i < 30; ++i) {  // perturb so weights are non-uniform
        corrs.coords[4 * i + 2] += rng.normal(0.0, 1e-4);
    }
    std::vector<double> weights(30);
    for (auto& w : weights) w = rng.uniform(0.2, 1.0);
    geo::EightPointResult base = geo::weighted_eight_point(corrs, weights);

    std::vector<int> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    geo::CorrespondenceSet shuffled;
    std::vector<double> shuffled_w(30);
    for (int i = 0; i < 30; ++i) {
        const double* q = corrs.row(perm[i]);
        shuffled.coords.insert(shuffled.coords.end(), q, q + 4);
        shuffled_w[i] = weights[perm[i]];
    }
    geo::EightPointResult permuted = geo::weighted_eight_point(shuffled, shuffled_w);
    CHECK(test::frobenius_distance_up_to_sign(base.e.m, permuted.e.m) < 1e-9);
}

TEST_CASE("symmetric epipolar residual: zero on exact points, scale invariant, matches formula") {
    Rng rng(27);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 10);
    geo::EssentialMatrix e = geo::essential_from_pose(pose);
    for (int i = 0; i < corrs.size(); ++i) {
        CHECK(geo::symmetric_epipolar_residual(e, corrs, i) < 1e-12);
    }

    // Scale invariance of the ratio, including the spec's lambda values.
    geo::CorrespondenceSet random_pts = test::exact_correspondences(rng, test::random_pose(rng), 5);
    for (double lambda : {7.3, 1e-3, 1.0, 1e3}) {
        for (int i = 0; i < random_pts.size(); ++i) {
            const double base = geo::symmetric_epipolar_residual(e, random_pts, i);
            geo::EssentialMatrix scaled;
            scaled.m = lambda * e.m;
            const double s = geo::symmetric_epipolar_residual(scaled, random_pts, i);
            CHECK(s == doctest::Approx(base).epsilon(1e-12));
        }
    }

    // Independent re-implementation from the raw formula.
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::Matrix3d m;
        for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = rng.normal();
        geo::EssentialMatrix em;
        em.m = m;
        const double x = rng.uniform(-1, 1), y = rng.uniform(-1, 1);
        const double xp = rng.uniform(-1, 1), yp = rng.uniform(-1, 1);
        const Eigen::Vector3d p(x, y, 1), pp(xp, yp, 1);
        const Eigen::Vector3d ep = m * p;
        const Eigen::Vector3d etp = m.transpose() * pp;
        const double num = pp.dot(ep) * pp.dot(ep);
        const double den =
            std::max(ep[0] * ep[0] + ep[1] * ep[1] + etp[0] * etp[0] + etp[1] * etp[1], 1e-15);
        CHECK(geo::symmetric_epipolar_residual(em, x, y, xp, yp) ==
              doctest::Approx(num / den).epsilon(1e-12));
    }
}

TEST_CASE("full-size verification: exact mask, strict threshold, loop oracle") {
    Rng rng(28);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 30);
    corrs = with_outliers(corrs, 20, rng);
    geo::EssentialMatrix e = geo::essential_from_pose(pose);

    geo::VerificationResult noiseless = geo::full_size_verification(e, corrs, 1e-4);
    // Relabel honestly: an outlier can land on the epipolar constraint.
    for (int i = 0; i < corrs.size(); ++i) {
        corrs.labels[i] = geo::symmetric_epipolar_residual(e, corrs, i) < 1e-4 ? 1 : 0;
    }
    CHECK(noiseless.inlier_mask == corrs.labels);

    // Threshold 0 excludes everything on a noisy estimate.
    geo::CorrespondenceSet noisy = corrs;
    for (size_t i = 0; i < noisy.coords.size(); ++i) noisy.coords[i] += 1e-6 * ((i % 7) + 1);
    CHECK(geo::full_size_verification(e, noisy, 0.0).inlier_mask ==
          std::vector<uint8_t>(noisy.size(), 0));

    // Brute per-point comparison.
    geo::VerificationResult ver = geo::full_size_verification(e, corrs, 3e-3);
    for (int i = 0; i < corrs.size(); ++i) {
        const double r = geo::symmetric_epipolar_residual(e, corrs, i);
        CHECK(ver.distances[i] == r);
        CHECK(ver.inlier_mask[i] == (r < 3e-3 ? 1 : 0));
    }
}

TEST_CASE("decompose_essential round trips known poses") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        geo::Pose pose = test::random_pose(rng);
        geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 40);
        geo::EssentialMatrix e = geo::essential_from_pose(pose);
        geo::DecomposeResult dec =
            geo::decompose_essential(geo::project_to_essential(e), corrs,
                                     std::vector<uint8_t>(40, 1));
        geo::PoseError err = geo::pose_error(dec.pose, pose);
        CHECK(err.rotation_deg < 1e-5);
        CHECK(err.translation_deg < 1e-5);
        CHECK_FALSE(dec.ambiguous);
    }
}

TEST_CASE("decompose handles pure translation and a single-point mask") {
    Rng rng(30);
    geo::Pose pose;  // R = I
    pose.translation = Eigen::Vector3d(1, 0, 0);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 30);
    geo::EssentialMatrix e = geo::essential_from_pose(pose);
    geo::DecomposeResult dec =
        geo::decompose_essential(e, corrs, std::vector<uint8_t>(30, 1));
    geo::PoseError err = geo::pose_error(dec.pose, pose);
    CHECK(err.rotation_deg < 1e-6);
    CHECK(err.translation_deg < 1e-6);

    std::vector<uint8_t> single(30, 0);
    single[4] = 1;
    geo::DecomposeResult one = geo::decompose_essential(e, corrs, single);
    CHECK(std::abs(one.pose.rotation.determinant() - 1.0) < 1e-9);
    CHECK(one.pose.translation.norm() == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(geo::decompose_essential(e, corrs, std::vector<uint8_t>(30, 0)),
                    std::invalid_argument);
}

TEST_CASE("pose_error: identity, constructed rotation, antipodal translation") {
    Rng rng(31);
    geo::Pose pose = test::random_pose(rng);
    geo::PoseError zero = geo::pose_error(pose, pose);
    CHECK(zero.rotation_deg < 1e-9);
    CHECK(zero.translation_deg < 1e-9);

    geo::Pose rotated = pose;
    rotated.rotation =
        pose.rotation * Eigen::AngleAxisd(10.0 * M_PI / 180.0, Eigen::Vector3d::UnitZ());
    CHECK(geo::pose_error(rotated, pose).rotation_deg == doctest::Approx(10.0).epsilon(1e-9));

    geo::Pose flipped = pose;
    flipped.translation = -pose.translation;
    CHECK(geo::pose_error(flipped, pose).translation_deg < 1e-6);
}

TEST_CASE("essential projection is idempotent bitwise") {
    Rng rng(32);
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::Matrix3d m;
        for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = rng.normal();
        geo::EssentialMatrix raw;
        raw.m = m;
        geo::EssentialMatrix once = geo::project_to_essential(raw);
        geo::EssentialMatrix twice = geo::project_to_essential(once);
        CHECK(once.m == twice.m);  // bitwise
    }
}

TEST_CASE("decompose then compose recovers E up to sign") {
    Rng rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        geo::Pose pose = test::random_pose(rng);
        geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 30);
        geo::EssentialMatrix e = geo::essential_from_pose(pose);
        geo::DecomposeResult dec =
            geo::decompose_essential(e, corrs, std::vector<uint8_t>(30, 1));
        geo::EssentialMatrix recomposed = geo::essential_from_pose(dec.pose);
        CHECK(test::frobenius_distance_up_to_sign(recomposed.m, e.m) < 1e-6);
    }
}

TEST_CASE("ransac: noiseless recovery at 50% outliers, clean mask, determinism") {
    Rng rng(34);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet inliers = test::exact_correspondences(rng, pose, 50);
    geo::CorrespondenceSet mixed = with_outliers(inliers, 50, rng);
    geo::EssentialMatrix truth = geo::essential_from_pose(pose);

    // Noiseless data justifies a tight threshold.
    geo::RansacResult res = geo::ransac_eight_point(mixed, 1000, 1e-8, 77);
    CHECK(test::frobenius_distance_up_to_sign(res.e.m, truth.m) < 1e-6);
    CHECK_FALSE(res.low_confidence);

    geo::RansacResult clean = geo::ransac_eight_point(inliers, 200, 1e-4, 78);
    CHECK(clean.inlier_mask == std::vector<uint8_t>(50, 1));

    geo::RansacResult again = geo::ransac_eight_point(mixed, 1000, 1e-8, 77);
    CHECK(res.e.m == again.e.m);  // bit-identical under the same seed
    CHECK(res.inlier_mask == again.inlier_mask);
}

TEST_CASE("differentiable eight-point agrees with the plain solver") {
    Rng rng(35);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 24);
    for (int i = 0; i < 24; ++i) corrs.coords[4 * i + 2] += rng.normal(0.0, 1e-3);
    std::vector<double> weights(24);
    for (auto& w : weights) w = rng.uniform(0.1, 1.0);

    geo::EightPointResult plain = geo::weighted_eight_point(corrs, weights);
    ad::Tensor coords = net::coords_tensor(corrs);
    ad::Tensor w = ad::Tensor::from_data({24, 1}, weights);
    ad::Tensor e9 = geo::weighted_eight_point_diff(coords, w);
    for (int i = 0; i < 9; ++i) {
        CHECK(e9.data()[i] == doctest::Approx(plain.e.m(i / 3, i % 3)).epsilon(1e-12));
    }
}

TEST_CASE("differentiable eight-point passes finite differences on weights and coords") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        CAPTURE(seed);
        Rng rng(400 + seed);
        geo::Pose pose = test::random_pose(rng);
        geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 16);
        for (int i = 0; i < 16; ++i) corrs.coords[4 * i + 2] += rng.normal(0.0, 2e-3);
        ad::Tensor coords = net::coords_tensor(corrs);
        coords = ad::Tensor::from_data(coords.shape(), coords.data(), true);
        std::vector<double> wd(16);
        for (auto& v : wd) v = rng.uniform(0.2, 1.0);
        ad::Tensor w = ad::Tensor::from_data({16, 1}, wd, true);

        auto loss = [&] {
            return test::weighted_probe(geo::weighted_eight_point_diff(coords, w), 900 + seed);
        };
        auto res = test::check_gradients(loss, {{"weights", w}, {"coords", coords}}, 10,
                                         1000 + seed, 1e-5);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("differentiable residuals match the scalar implementation and pass FD") {
    Rng rng(36);
    geo::Pose pose = test::random_pose(rng);
    geo::CorrespondenceSet corrs = test::exact_correspondences(rng, pose, 12);
    for (int i = 0; i < 12; ++i) corrs.coords[4 * i + 3] += rng.normal(0.0, 1e-3);
    geo::EssentialMatrix e = geo::essential_from_pose(pose);
    std::vector<double> e_flat(e.m.data(), e.m.data() + 9);
    // Eigen stores column-major; transpose into row-major order.
    std::vector<double> e_rm = {e_flat[0], e_flat[3], e_flat[6], e_flat[1], e_flat[4],
                                e_flat[7], e_flat[2], e_flat[5], e_flat[8]};
    ad::Tensor e9 = ad::Tensor::from_data({9}, e_rm, true);
    ad::Tensor res = geo::epipolar_residuals_diff(e9, corrs);
    for (int i = 0; i < 12; ++i) {
        CHECK(res.at(i, 0) ==
              doctest::Approx(geo::symmetric_epipolar_residual(e, corrs, i)).epsilon(1e-12));
    }
    auto fd = test::check_gradients(
        [&] { return ad::mean_all(geo::epipolar_residuals_diff(e9, corrs)); }, {{"e9", e9}}, 9,
        501, 1e-6);
    CHECK(fd.max_rel_err < 1e-4);
}
