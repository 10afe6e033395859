#include "gct/synthetic_scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "gct/rng.hpp"
#include "json.hpp"

namespace gct::scene {

namespace {

using json = nlohmann::json;

Eigen::Vector3d random_unit_vector(Rng& rng) {
    Eigen::Vector3d v;
    do {
        v = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    } while (v.norm() < 1e-9);
    return v.normalized();
}

}  // namespace

void SceneConfig::validate() const {
    if (n_correspondences < 16) throw std::invalid_argument("SceneConfig: n must be >= 16");
    if (outlier_ratio < 0.0 || outlier_ratio >= 1.0) {
        throw std::invalid_argument("SceneConfig: outlier_ratio must be in [0,1)");
    }
    if (noise_sigma < 0.0) throw std::invalid_argument("SceneConfig: noise_sigma must be >= 0");
    if (depth_min <= 0.0 || depth_max < depth_min) {
        throw std::invalid_argument("SceneConfig: depth range must be positive and ordered");
    }
    if (baseline_max <= 0.0) throw std::invalid_argument("SceneConfig: baseline_max must be > 0");
}

Scene generate_scene(const SceneConfig& config) {
    config.validate();
    Rng rng(config.seed);
    const int n = config.n_correspondences;

    geo::Pose pose;
    const double angle = rng.uniform(0.0, config.rotation_max_deg) * M_PI / 180.0;
    pose.rotation = Eigen::AngleAxisd(angle, random_unit_vector(rng)).toRotationMatrix();
    const Eigen::Vector3d t_dir = random_unit_vector(rng);
    const double baseline = rng.uniform(0.5, 1.0) * config.baseline_max;
    const Eigen::Vector3d t_metric = baseline * t_dir;
    pose.translation = t_dir;

    // Project points visible in both views; second-view field of view is
    // tracked for outlier resampling.
    std::vector<double> coords(4 * static_cast<size_t>(n));
    double fov_lo_x = 1e30, fov_hi_x = -1e30, fov_lo_y = 1e30, fov_hi_y = -1e30;
    for (int i = 0; i < n; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 1000) {
                throw std::runtime_error("generate_scene: could not place a visible point");
            }
            const double x = rng.uniform(-0.5, 0.5);
            const double y = rng.uniform(-0.5, 0.5);
            const double z = rng.uniform(config.depth_min, config.depth_max);
            const Eigen::Vector3d p1(x * z, y * z, z);
            const Eigen::Vector3d p2 = pose.rotation * p1 + t_metric;
            if (p2.z() < 0.5) continue;
            coords[4 * i + 0] = x;
            coords[4 * i + 1] = y;
            coords[4 * i + 2] = p2.x() / p2.z();
            coords[4 * i + 3] = p2.y() / p2.z();
            fov_lo_x = std::min(fov_lo_x, coords[4 * i + 2]);
            fov_hi_x = std::max(fov_hi_x, coords[4 * i + 2]);
            fov_lo_y = std::min(fov_lo_y, coords[4 * i + 3]);
            fov_hi_y = std::max(fov_hi_y, coords[4 * i + 3]);
            break;
        }
    }
    if (fov_hi_x - fov_lo_x < 0.1) {
        fov_lo_x -= 0.05;
        fov_hi_x += 0.05;
    }
    if (fov_hi_y - fov_lo_y < 0.1) {
        fov_lo_y -= 0.05;
        fov_hi_y += 0.05;
    }

    const int n_outliers = static_cast<int>(std::llround(config.outlier_ratio * n));
    // Inliers get second-view noise; the trailing block becomes outliers with
    // uniformly resampled second-view points.
    for (int i = 0; i < n - n_outliers; ++i) {
        coords[4 * i + 2] += rng.normal(0.0, config.noise_sigma);
        coords[4 * i + 3] += rng.normal(0.0, config.noise_sigma);
    }
    for (int i = n - n_outliers; i < n; ++i) {
        coords[4 * i + 2] = rng.uniform(fov_lo_x, fov_hi_x);
        coords[4 * i + 3] = rng.uniform(fov_lo_y, fov_hi_y);
    }

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);

    Scene scene;
    scene.config = config;
    scene.shuffle = perm;
    scene.e_true = geo::essential_from_pose(pose);
    scene.corrs.pose = pose;
    scene.corrs.coords.resize(coords.size());
    for (int i = 0; i < n; ++i) {
        std::memcpy(scene.corrs.coords.data() + 4 * static_cast<size_t>(i),
                    coords.data() + 4 * static_cast<size_t>(perm[i]), 4 * sizeof(double));
    }
    scene.corrs.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        scene.corrs.labels[i] =
            geo::symmetric_epipolar_residual(scene.e_true, scene.corrs, i) < kLabelThreshold ? 1
                                                                                             : 0;
    }
    return scene;
}

std::vector<Scene> generate_split(const SceneConfig& base, int n_scenes, uint64_t base_seed) {
    if (n_scenes < 1) throw std::invalid_argument("generate_split: n_scenes must be >= 1");
    std::vector<Scene> scenes;
    scenes.reserve(n_scenes);
    for (int i = 0; i < n_scenes; ++i) {
        SceneConfig cfg = base;
        cfg.seed = base_seed + static_cast<uint64_t>(i);
        scenes.push_back(generate_scene(cfg));
    }
    return scenes;
}

namespace {

json config_to_json(const SceneConfig& c) {
    return json{{"n_correspondences", c.n_correspondences},
                {"outlier_ratio", c.outlier_ratio},
                {"noise_sigma", c.noise_sigma},
                {"depth_min", c.depth_min},
                {"depth_max", c.depth_max},
                {"rotation_max_deg", c.rotation_max_deg},
                {"baseline_max", c.baseline_max},
                {"seed", c.seed}};
}

SceneConfig config_from_json(const json& j) {
    SceneConfig c;
    c.n_correspondences = j.at("n_correspondences").get<int>();
    c.outlier_ratio = j.at("outlier_ratio").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.depth_min = j.at("depth_min").get<double>();
    c.depth_max = j.at("depth_max").get<double>();
    c.rotation_max_deg = j.at("rotation_max_deg").get<double>();
    c.baseline_max = j.at("baseline_max").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

constexpr char kSceneMagic[9] = "GCTSCN1\n";

}  // namespace

void write_scenes(const std::string& path, const std::vector<Scene>& scenes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open scene file for writing: " + path);
    os.write(kSceneMagic, 8);
    const uint32_t count = static_cast<uint32_t>(scenes.size());
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (const Scene& s : scenes) {
        json header;
        header["config"] = config_to_json(s.config);
        std::vector<double> r(s.corrs.pose->rotation.data(),
                              s.corrs.pose->rotation.data() + 9);  // column-major
        header["rotation_colmajor"] = r;
        header["translation"] = std::vector<double>{s.corrs.pose->translation.x(),
                                                    s.corrs.pose->translation.y(),
                                                    s.corrs.pose->translation.z()};
        std::vector<double> e(s.e_true.m.data(), s.e_true.m.data() + 9);
        header["e_true_colmajor"] = e;
        header["labels"] = s.corrs.labels;
        header["shuffle"] = s.shuffle;
        const std::string text = header.dump();
        const uint32_t len = static_cast<uint32_t>(text.size());
        os.write(reinterpret_cast<const char*>(&len), 4);
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        os.write(reinterpret_cast<const char*>(s.corrs.coords.data()),
                 static_cast<std::streamsize>(s.corrs.coords.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("scene file write failed: " + path);
}

std::vector<Scene> read_scenes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open scene file: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kSceneMagic, 8) != 0) {
        throw std::runtime_error("bad scene file magic in " + path);
    }
    uint32_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 4);
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), 4);
        std::string text(len, '\0');
        is.read(text.data(), len);
        if (!is) throw std::runtime_error("truncated scene file: " + path);
        json header = json::parse(text);
        Scene s;
        s.config = config_from_json(header.at("config"));
        geo::Pose pose;
        const auto r = header.at("rotation_colmajor").get<std::vector<double>>();
        std::memcpy(pose.rotation.data(), r.data(), 9 * sizeof(double));
        const auto t = header.at("translation").get<std::vector<double>>();
        pose.translation = Eigen::Vector3d(t[0], t[1], t[2]);
        const auto e = header.at("e_true_colmajor").get<std::vector<double>>();
        std::memcpy(s.e_true.m.data(), e.data(), 9 * sizeof(double));
        s.corrs.pose = pose;
        s.corrs.labels = header.at("labels").get<std::vector<uint8_t>>();
        s.shuffle = header.at("shuffle").get<std::vector<int>>();
        const int n = s.config.n_correspondences;
        s.corrs.coords.resize(4 * static_cast<size_t>(n));
        is.read(reinterpret_cast<char*>(s.corrs.coords.data()),
                static_cast<std::streamsize>(s.corrs.coords.size() * sizeof(double)));
        if (!is) throw std::runtime_error("truncated scene file: " + path);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

}  // namespace gct::scene
