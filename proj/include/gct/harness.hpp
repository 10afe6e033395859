#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "gct/network.hpp"
#include "gct/synthetic_scene.hpp"
#include "json.hpp"

namespace gct::harness {

struct ClassificationMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f_score = 0.0;
};

/// P = TP/(TP+FP), R = TP/(TP+FN), F = 2PR/(P+R); zero denominators yield 0.
ClassificationMetrics evaluate_classification(const std::vector<uint8_t>& predicted,
                                              const std::vector<uint8_t>& truth);

/// Mean accuracy over 5-degree bins up to the cap. Scene error is the max of
/// rotation and translation angular error; accuracy uses a strict threshold.
/// cap=5 reduces to the single 5-degree accuracy.
double evaluate_pose_map(const std::vector<std::pair<double, double>>& errors, int cap_deg);

struct SceneEval {
    double err_rotation = 0.0;
    double err_translation = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f_score = 0.0;
};

struct EvalReport {
    double precision = 0.0;
    double recall = 0.0;
    double f_score = 0.0;  // recomputed from aggregate precision/recall
    double map5 = 0.0;
    double map20 = 0.0;
    std::vector<SceneEval> per_scene;
    nlohmann::json config_snapshot;
    double wall_time_s = 0.0;

    nlohmann::json to_json(bool include_wall_time = true) const;
};

struct RunConfig {
    net::NetConfig net;
    scene::SceneConfig scene;
    int steps = 5000;
    int batch_size = 32;
    uint64_t seed = 7;
    int train_scenes = 2000;
    int test_scenes = 200;
    int val_scenes = 20;
    int val_every = 500;
    int ransac_iterations = 1000;
    std::string out_dir = "out";

    uint64_t train_base_seed() const { return scene.seed; }
    uint64_t val_base_seed() const { return scene.seed + 1000000; }
    uint64_t test_base_seed() const { return scene.seed + 2000000; }
};

/// Applies one `key=value` override; throws on unknown keys. Keys mirror the
/// flat config fields (see README).
void apply_override(RunConfig& run, const std::string& key, const std::string& value);
/// key=value lines; '#' starts a comment.
void load_config_file(RunConfig& run, const std::string& path);
nlohmann::json run_config_json(const RunConfig& run);

struct TrainProgress {
    int step = 0;
    double loss = 0.0;
    double val_f = -1.0;  // negative when no validation ran at this step
};

struct TrainResult {
    net::NetParams params;
    std::vector<TrainProgress> curve;
};

/// Adam over synthetic scenes with the delta warm-up schedule. Deterministic
/// for a fixed (config, seed). Aborts with a diagnostic if the loss goes
/// non-finite.
TrainResult train(const RunConfig& run, std::ostream* log = nullptr);

EvalReport evaluate_model(const net::NetParams& params, const net::NetConfig& config,
                          const std::vector<scene::Scene>& scenes);
EvalReport evaluate_model(const net::NetParams& params, const RunConfig& run);

/// Optional pre-RANSAC outlier filter (stand-in for a descriptor ratio test,
/// which synthetic scenes cannot express). Rows where the returned mask is 0
/// are excluded from estimation and scored as outliers.
using PrefilterHook = std::function<std::vector<uint8_t>(const scene::Scene&)>;

EvalReport evaluate_ransac_baseline(const RunConfig& run, const PrefilterHook& prefilter = {});

struct AblationRow {
    std::string name;
    bool gcet = false;
    net::GcgtMode gcgt = net::GcgtMode::kOff;
    double map5 = 0.0;
    double map20 = 0.0;
    double f_score = 0.0;
};

/// The five-variant grid: pruning backbone alone, +GCET, +partial GCGT,
/// +full GCGT, and the combined model, trained under one seed protocol.
std::vector<AblationRow> run_ablation(const RunConfig& run, std::ostream* log = nullptr);

struct SweepPoint {
    double rate = 0.0;
    double map5 = 0.0;
    double map20 = 0.0;
    double f_score = 0.0;
};

std::vector<SweepPoint> sweep_sampling_rate(const RunConfig& run, const std::vector<double>& rates,
                                            std::ostream* log = nullptr);

void write_curve_csv(const std::string& path, const std::vector<TrainProgress>& curve);
void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points);
void write_sweep_svg(const std::string& path, const std::vector<SweepPoint>& points);

}  // namespace gct::harness
