#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <set>

#include "gct/synthetic_scene.hpp"
#include "testing.hpp"

using namespace gct;

TEST_CASE("clean configuration yields all-inlier labels") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 64;
    cfg.outlier_ratio = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.seed = 5;
    scene::Scene sc = scene::generate_scene(cfg);
    CHECK(sc.corrs.labels == std::vector<uint8_t>(64, 1));
}

TEST_CASE("exact projections satisfy the epipolar constraint") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 128;
    cfg.outlier_ratio = 0.0;
    cfg.noise_sigma = 0.0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        cfg.seed = seed;
        scene::Scene sc = scene::generate_scene(cfg);
        for (int i = 0; i < sc.corrs.size(); ++i) {
            const double* q = sc.corrs.row(i);
            const Eigen::Vector3d p(q[0], q[1], 1.0), pp(q[2], q[3], 1.0);
            CHECK(std::abs(pp.dot(sc.e_true.m * p)) < 1e-10);
        }
    }
}

TEST_CASE("same seed produces a bit-identical scene") {
    scene::SceneConfig cfg;
    cfg.seed = 99;
    scene::Scene a = scene::generate_scene(cfg);
    scene::Scene b = scene::generate_scene(cfg);
    CHECK(a.corrs.coords == b.corrs.coords);
    CHECK(a.corrs.labels == b.corrs.labels);
    CHECK(a.shuffle == b.shuffle);
    CHECK(a.e_true.m == b.e_true.m);
    CHECK(a.corrs.pose->rotation == b.corrs.pose->rotation);
}

TEST_CASE("stored labels equal brute recomputation from residuals") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 200;
    cfg.seed = 7;
    scene::Scene sc = scene::generate_scene(cfg);
    for (int i = 0; i < sc.corrs.size(); ++i) {
        const bool inlier =
            geo::symmetric_epipolar_residual(sc.e_true, sc.corrs, i) < scene::kLabelThreshold;
        CHECK(sc.corrs.labels[i] == (inlier ? 1 : 0));
    }
}

TEST_CASE("shuffle bookkeeping is label consistent") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 100;
    cfg.seed = 11;
    scene::Scene sc = scene::generate_scene(cfg);
    const int n = sc.corrs.size();
    // Undo the stored permutation and recompute labels on the unshuffled
    // coordinates; they must match the unshuffled stored labels.
    std::vector<double> pre_coords(4 * n);
    std::vector<uint8_t> pre_labels(n);
    for (int i = 0; i < n; ++i) {
        std::copy(sc.corrs.row(i), sc.corrs.row(i) + 4, pre_coords.begin() + 4 * sc.shuffle[i]);
        pre_labels[sc.shuffle[i]] = sc.corrs.labels[i];
    }
    geo::CorrespondenceSet unshuffled;
    unshuffled.coords = pre_coords;
    for (int i = 0; i < n; ++i) {
        const bool inlier = geo::symmetric_epipolar_residual(sc.e_true, unshuffled, i) <
                            scene::kLabelThreshold;
        CHECK(pre_labels[i] == (inlier ? 1 : 0));
    }
    // The trailing block of the unshuffled order is the outlier block.
    const int n_outliers = static_cast<int>(std::llround(cfg.outlier_ratio * n));
    int mislabeled_tail = 0;
    for (int i = n - n_outliers; i < n; ++i) mislabeled_tail += pre_labels[i] ? 1 : 0;
    CHECK(mislabeled_tail < n_outliers / 4);  // only chance epipolar hits
}

TEST_CASE("split scenes have distinct poses and disjoint seeds") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 32;
    auto split = scene::generate_split(cfg, 3, 100);
    CHECK(split.size() == 3);
    for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
            CHECK((split[i].corrs.pose->rotation - split[j].corrs.pose->rotation).norm() > 1e-6);
        }
    }
    auto train = scene::generate_split(cfg, 10, 0);
    auto test_split = scene::generate_split(cfg, 10, 1000);
    std::set<uint64_t> train_seeds, test_seeds;
    for (const auto& s : train) train_seeds.insert(s.config.seed);
    for (const auto& s : test_split) test_seeds.insert(s.config.seed);
    for (uint64_t s : train_seeds) CHECK(test_seeds.count(s) == 0);
}

TEST_CASE("empirical outlier fraction tracks the configured ratio") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 200;
    cfg.outlier_ratio = 0.7;
    auto split = scene::generate_split(cfg, 100, 31337);
    long long outliers = 0, total = 0;
    for (const auto& sc : split) {
        for (uint8_t label : sc.corrs.labels) outliers += label ? 0 : 1;
        total += sc.corrs.size();
    }
    const double fraction = static_cast<double>(outliers) / static_cast<double>(total);
    CHECK(fraction == doctest::Approx(0.7).epsilon(0.03));
    CHECK(std::abs(fraction - 0.7) < 0.02);
}

TEST_CASE("invalid configurations are rejected") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 8;
    CHECK_THROWS_AS(scene::generate_scene(cfg), std::invalid_argument);
    cfg.n_correspondences = 100;
    cfg.outlier_ratio = 1.0;
    CHECK_THROWS_AS(scene::generate_scene(cfg), std::invalid_argument);
    cfg.outlier_ratio = 0.5;
    cfg.noise_sigma = -1.0;
    CHECK_THROWS_AS(scene::generate_scene(cfg), std::invalid_argument);
}

TEST_CASE("scene serialization round trips bit exactly") {
    scene::SceneConfig cfg;
    cfg.n_correspondences = 48;
    cfg.seed = 21;
    auto scenes = scene::generate_split(cfg, 4, 500);
    const std::string path = "test_scenes.bin";
    scene::write_scenes(path, scenes);
    auto loaded = scene::read_scenes(path);
    REQUIRE(loaded.size() == scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) {
        CHECK(loaded[i].corrs.coords == scenes[i].corrs.coords);
        CHECK(loaded[i].corrs.labels == scenes[i].corrs.labels);
        CHECK(loaded[i].shuffle == scenes[i].shuffle);
        CHECK(loaded[i].e_true.m == scenes[i].e_true.m);
        CHECK(loaded[i].corrs.pose->rotation == scenes[i].corrs.pose->rotation);
        CHECK(loaded[i].corrs.pose->translation == scenes[i].corrs.pose->translation);
        CHECK(loaded[i].config.seed == scenes[i].config.seed);
    }
    std::remove(path.c_str());
}
