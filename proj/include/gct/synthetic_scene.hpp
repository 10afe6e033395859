#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gct/geometry.hpp"

namespace gct::scene {

/// Residual threshold that defines ground-truth inlier labels.
constexpr double kLabelThreshold = 1e-4;

struct SceneConfig {
    int n_correspondences = 500;
    double outlier_ratio = 0.7;
    double noise_sigma = 5e-4;
    double depth_min = 4.0;
    double depth_max = 8.0;
    double rotation_max_deg = 30.0;
    double baseline_max = 2.0;
    uint64_t seed = 1;

    void validate() const;
};

struct Scene {
    SceneConfig config;
    geo::CorrespondenceSet corrs;  // labels and pose populated
    geo::EssentialMatrix e_true;
    std::vector<int> shuffle;  // row i of corrs came from pre-shuffle row shuffle[i]
};

/// Deterministic two-view scene: sampled pose, projected 3-D points, Gaussian
/// noise on second-view inlier coordinates, a fixed fraction of uniformly
/// resampled outliers, shuffled order. Labels are recomputed from the final
/// coordinates by thresholding the symmetric epipolar residual under the true
/// essential matrix, so noise-corrupted points are labeled honestly.
Scene generate_scene(const SceneConfig& config);

/// Scenes seeded base_seed + i. Splits with different base seeds are disjoint.
std::vector<Scene> generate_split(const SceneConfig& base, int n_scenes, uint64_t base_seed);

// One record per scene: u32 JSON-header length, JSON header (config, pose,
// essential matrix, labels, shuffle), then n*4 little-endian float64
// coordinates. The file starts with magic "GCTSCN1\n" and a u32 scene count.
void write_scenes(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes(const std::string& path);

}  // namespace gct::scene
