#include "gct/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace gct::harness {

namespace {

using nlohmann::json;

double zero_guarded_f(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

json net_config_json(const net::NetConfig& c) {
    return json{{"d", c.d},
                {"k", c.k},
                {"p", c.p},
                {"heads", c.heads},
                {"reduction", c.reduction},
                {"sample_rate", c.sample_rate},
                {"cluster_count", c.cluster_count},
                {"prune_rate", c.prune_rate},
                {"n_modules", c.n_modules},
                {"delta", c.delta},
                {"warmup_fraction", c.warmup_fraction},
                {"label_threshold", c.label_threshold},
                {"verify_threshold", c.verify_threshold},
                {"use_gcet", c.use_gcet},
                {"gcgt", c.gcgt == net::GcgtMode::kOff      ? "off"
                         : c.gcgt == net::GcgtMode::kPartial ? "partial"
                                                             : "full"},
                {"expected_n", c.expected_n}};
}

json scene_config_json(const scene::SceneConfig& c) {
    return json{{"n_correspondences", c.n_correspondences},
                {"outlier_ratio", c.outlier_ratio},
                {"noise_sigma", c.noise_sigma},
                {"depth_min", c.depth_min},
                {"depth_max", c.depth_max},
                {"rotation_max_deg", c.rotation_max_deg},
                {"baseline_max", c.baseline_max},
                {"seed", c.seed}};
}

SceneEval evaluate_scene(const net::PipelineOutput& out, const scene::Scene& sc) {
    SceneEval ev;
    ClassificationMetrics m = evaluate_classification(out.final_mask, sc.corrs.labels);
    ev.precision = m.precision;
    ev.recall = m.recall;
    ev.f_score = m.f_score;
    int inliers = 0;
    for (uint8_t v : out.final_mask) inliers += v ? 1 : 0;
    if (inliers >= 1) {
        geo::DecomposeResult dec =
            geo::decompose_essential(out.essential_projected(), sc.corrs, out.final_mask);
        geo::PoseError err = geo::pose_error(dec.pose, *sc.corrs.pose);
        ev.err_rotation = err.rotation_deg;
        ev.err_translation = err.translation_deg;
    } else {
        ev.err_rotation = 180.0;
        ev.err_translation = 90.0;
    }
    return ev;
}

EvalReport aggregate(std::vector<SceneEval> per_scene) {
    EvalReport report;
    double p = 0.0, r = 0.0;
    std::vector<std::pair<double, double>> errors;
    errors.reserve(per_scene.size());
    for (const auto& ev : per_scene) {
        p += ev.precision;
        r += ev.recall;
        errors.emplace_back(ev.err_rotation, ev.err_translation);
    }
    const double n = static_cast<double>(per_scene.size());
    report.precision = p / n;
    report.recall = r / n;
    report.f_score = zero_guarded_f(report.precision, report.recall);
    report.map5 = evaluate_pose_map(errors, 5);
    report.map20 = evaluate_pose_map(errors, 20);
    report.per_scene = std::move(per_scene);
    return report;
}

}  // namespace

ClassificationMetrics evaluate_classification(const std::vector<uint8_t>& predicted,
                                              const std::vector<uint8_t>& truth) {
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("evaluate_classification: " + std::to_string(predicted.size()) +
                                    " predictions for " + std::to_string(truth.size()) + " labels");
    }
    long long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < predicted.size(); ++i) {
        const bool pred = predicted[i] != 0;
        const bool pos = truth[i] != 0;
        if (pred && pos) ++tp;
        if (pred && !pos) ++fp;
        if (!pred && pos) ++fn;
    }
    ClassificationMetrics m;
    m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f_score = zero_guarded_f(m.precision, m.recall);
    return m;
}

double evaluate_pose_map(const std::vector<std::pair<double, double>>& errors, int cap_deg) {
    if (errors.empty()) throw std::invalid_argument("evaluate_pose_map: empty error list");
    if (cap_deg < 5 || cap_deg % 5 != 0) {
        throw std::invalid_argument("evaluate_pose_map: cap must be a positive multiple of 5");
    }
    double acc_sum = 0.0;
    int bins = 0;
    for (int threshold = 5; threshold <= cap_deg; threshold += 5, ++bins) {
        int hits = 0;
        for (const auto& [er, et] : errors) {
            if (std::max(er, et) < static_cast<double>(threshold)) ++hits;
        }
        acc_sum += static_cast<double>(hits) / static_cast<double>(errors.size());
    }
    return acc_sum / static_cast<double>(bins);
}

json EvalReport::to_json(bool include_wall_time) const {
    json per;
    for (const auto& ev : per_scene) {
        per.push_back(json{{"err_rotation_deg", ev.err_rotation},
                           {"err_translation_deg", ev.err_translation},
                           {"precision", ev.precision},
                           {"recall", ev.recall},
                           {"f_score", ev.f_score}});
    }
    json out{{"precision", precision}, {"recall", recall},          {"f_score", f_score},
             {"map5", map5},           {"map20", map20},            {"per_scene", per},
             {"config", config_snapshot}};
    if (include_wall_time) out["wall_time_s"] = wall_time_s;
    return out;
}

void apply_override(RunConfig& run, const std::string& key, const std::string& value) {
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
    auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw std::invalid_argument("expected a boolean for '" + key + "', got '" + value + "'");
    };

    if (key == "d") run.net.d = as_int();
    else if (key == "k") run.net.k = as_int();
    else if (key == "p") run.net.p = as_int();
    else if (key == "heads") run.net.heads = as_int();
    else if (key == "reduction") run.net.reduction = as_int();
    else if (key == "sample_rate" || key == "sr") run.net.sample_rate = as_double();
    else if (key == "cluster_count" || key == "m") run.net.cluster_count = as_int();
    else if (key == "prune_rate") run.net.prune_rate = as_double();
    else if (key == "delta") run.net.delta = as_double();
    else if (key == "warmup_fraction") run.net.warmup_fraction = as_double();
    else if (key == "label_threshold") run.net.label_threshold = as_double();
    else if (key == "verify_threshold") run.net.verify_threshold = as_double();
    else if (key == "use_gcet") run.net.use_gcet = as_bool();
    else if (key == "gcgt") {
        if (value == "off") run.net.gcgt = net::GcgtMode::kOff;
        else if (value == "partial") run.net.gcgt = net::GcgtMode::kPartial;
        else if (value == "full") run.net.gcgt = net::GcgtMode::kFull;
        else throw std::invalid_argument("gcgt must be off|partial|full, got '" + value + "'");
    }
    else if (key == "n") {
        run.scene.n_correspondences = as_int();
        run.net.expected_n = run.scene.n_correspondences;
    }
    else if (key == "outlier_ratio") run.scene.outlier_ratio = as_double();
    else if (key == "noise_sigma") run.scene.noise_sigma = as_double();
    else if (key == "depth_min") run.scene.depth_min = as_double();
    else if (key == "depth_max") run.scene.depth_max = as_double();
    else if (key == "rotation_max_deg") run.scene.rotation_max_deg = as_double();
    else if (key == "baseline_max") run.scene.baseline_max = as_double();
    else if (key == "scene_seed") run.scene.seed = as_u64();
    else if (key == "steps") run.steps = as_int();
    else if (key == "batch_size") run.batch_size = as_int();
    else if (key == "seed") run.seed = as_u64();
    else if (key == "train_scenes") run.train_scenes = as_int();
    else if (key == "test_scenes") run.test_scenes = as_int();
    else if (key == "val_scenes") run.val_scenes = as_int();
    else if (key == "val_every") run.val_every = as_int();
    else if (key == "ransac_iterations") run.ransac_iterations = as_int();
    else if (key == "out_dir") run.out_dir = value;
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& run, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": expected key=value");
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        apply_override(run, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

json run_config_json(const RunConfig& run) {
    return json{{"net", net_config_json(run.net)},
                {"scene", scene_config_json(run.scene)},
                {"steps", run.steps},
                {"batch_size", run.batch_size},
                {"seed", run.seed},
                {"train_scenes", run.train_scenes},
                {"test_scenes", run.test_scenes},
                {"val_scenes", run.val_scenes},
                {"val_every", run.val_every},
                {"ransac_iterations", run.ransac_iterations}};
}

TrainResult train(const RunConfig& run, std::ostream* log) {
    if (run.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    run.net.validate();
    TrainResult result;
    result.params = net::NetParams::init(run.net, run.seed);
    ad::Adam optimizer(result.params.named_tensors());

    const int warmup = static_cast<int>(std::ceil(run.net.warmup_fraction * run.steps));
    std::vector<scene::Scene> val_split;

    for (int step = 0; step < run.steps; ++step) {
        const double delta = step < warmup ? 0.0 : run.net.delta;
        double step_loss = 0.0;
        for (int b = 0; b < run.batch_size; ++b) {
            const int idx = (step * run.batch_size + b) % run.train_scenes;
            scene::SceneConfig cfg = run.scene;
            cfg.seed = run.train_base_seed() + static_cast<uint64_t>(idx);
            scene::Scene sc = scene::generate_scene(cfg);
            net::PipelineOutput out = net::forward_pipeline(sc.corrs, result.params, run.net);
            ad::Tensor loss = net::hybrid_loss(out, sc, delta, run.net);
            const double value = loss.value();
            if (!std::isfinite(value)) {
                throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                         " (scene seed " + std::to_string(cfg.seed) + ")");
            }
            step_loss += value;
            ad::backward(ad::mul_scalar(loss, 1.0 / run.batch_size));
        }
        optimizer.step();
        optimizer.zero_grad();

        TrainProgress progress;
        progress.step = step;
        progress.loss = step_loss / run.batch_size;
        if (run.val_every > 0 && ((step + 1) % run.val_every == 0 || step + 1 == run.steps)) {
            if (val_split.empty()) {
                val_split = scene::generate_split(run.scene, run.val_scenes, run.val_base_seed());
            }
            progress.val_f = evaluate_model(result.params, run.net, val_split).f_score;
            if (log) {
                *log << "step " << step + 1 << "  loss " << progress.loss << "  val_f "
                     << progress.val_f << "\n";
            }
        }
        result.curve.push_back(progress);
    }
    return result;
}

EvalReport evaluate_model(const net::NetParams& params, const net::NetConfig& config,
                          const std::vector<scene::Scene>& scenes) {
    if (scenes.empty()) throw std::invalid_argument("evaluate_model: no scenes");
    std::vector<SceneEval> per_scene(scenes.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < static_cast<int>(scenes.size()); ++i) {
        ad::NoGradGuard no_grad;
        net::PipelineOutput out = net::forward_pipeline(scenes[i].corrs, params, config);
        per_scene[i] = evaluate_scene(out, scenes[i]);
    }
    return aggregate(std::move(per_scene));
}

EvalReport evaluate_model(const net::NetParams& params, const RunConfig& run) {
    std::vector<scene::Scene> scenes =
        scene::generate_split(run.scene, run.test_scenes, run.test_base_seed());
    EvalReport report = evaluate_model(params, run.net, scenes);
    report.config_snapshot = run_config_json(run);
    return report;
}

EvalReport evaluate_ransac_baseline(const RunConfig& run, const PrefilterHook& prefilter) {
    std::vector<scene::Scene> scenes =
        scene::generate_split(run.scene, run.test_scenes, run.test_base_seed());
    std::vector<SceneEval> per_scene(scenes.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < static_cast<int>(scenes.size()); ++i) {
        const scene::Scene& sc = scenes[i];
        const int n = sc.corrs.size();
        std::vector<int> active(n);
        std::iota(active.begin(), active.end(), 0);
        if (prefilter) {
            const std::vector<uint8_t> keep = prefilter(sc);
            active.clear();
            for (int j = 0; j < n; ++j) {
                if (keep[j]) active.push_back(j);
            }
        }
        std::vector<uint8_t> mask(n, 0);
        geo::EssentialMatrix estimate;
        if (static_cast<int>(active.size()) >= 8) {
            geo::CorrespondenceSet subset;
            for (int j : active) {
                const double* q = sc.corrs.row(j);
                subset.coords.insert(subset.coords.end(), q, q + 4);
            }
            geo::RansacResult res =
                geo::ransac_eight_point(subset, run.ransac_iterations, run.net.verify_threshold,
                                        sc.config.seed);
            estimate = res.e;
            for (size_t j = 0; j < active.size(); ++j) mask[active[j]] = res.inlier_mask[j];
        }

        SceneEval ev;
        ClassificationMetrics m = evaluate_classification(mask, sc.corrs.labels);
        ev.precision = m.precision;
        ev.recall = m.recall;
        ev.f_score = m.f_score;
        int inliers = 0;
        for (uint8_t v : mask) inliers += v ? 1 : 0;
        if (inliers >= 1) {
            geo::DecomposeResult dec =
                geo::decompose_essential(geo::project_to_essential(estimate), sc.corrs, mask);
            geo::PoseError err = geo::pose_error(dec.pose, *sc.corrs.pose);
            ev.err_rotation = err.rotation_deg;
            ev.err_translation = err.translation_deg;
        } else {
            ev.err_rotation = 180.0;
            ev.err_translation = 90.0;
        }
        per_scene[i] = ev;
    }
    EvalReport report = aggregate(std::move(per_scene));
    report.config_snapshot = run_config_json(run);
    return report;
}

std::vector<AblationRow> run_ablation(const RunConfig& run, std::ostream* log) {
    const std::vector<AblationRow> grid = {
        {"ips", false, net::GcgtMode::kOff, 0, 0, 0},
        {"ips+gcet", true, net::GcgtMode::kOff, 0, 0, 0},
        {"ips+gcgt_p", false, net::GcgtMode::kPartial, 0, 0, 0},
        {"ips+gcgt_w", false, net::GcgtMode::kFull, 0, 0, 0},
        {"ips+gcet+gcgt_w", true, net::GcgtMode::kFull, 0, 0, 0},
    };
    std::vector<AblationRow> rows;
    for (AblationRow row : grid) {
        RunConfig variant = run;
        variant.net.use_gcet = row.gcet;
        variant.net.gcgt = row.gcgt;
        if (log) *log << "ablation variant " << row.name << "\n";
        TrainResult trained = train(variant, log);
        EvalReport report = evaluate_model(trained.params, variant);
        row.map5 = report.map5;
        row.map20 = report.map20;
        row.f_score = report.f_score;
        rows.push_back(row);
    }
    return rows;
}

std::vector<SweepPoint> sweep_sampling_rate(const RunConfig& run, const std::vector<double>& rates,
                                            std::ostream* log) {
    if (rates.empty()) throw std::invalid_argument("sweep_sampling_rate: no rates");
    std::vector<SweepPoint> points;
    for (double rate : rates) {
        if (rate <= 0.0 || rate > 0.5) {
            throw std::invalid_argument("sweep_sampling_rate: rates must lie in (0, 0.5]");
        }
        RunConfig variant = run;
        variant.net.sample_rate = rate;
        if (log) *log << "sweep rate " << rate << "\n";
        TrainResult trained = train(variant, log);
        EvalReport report = evaluate_model(trained.params, variant);
        points.push_back({rate, report.map5, report.map20, report.f_score});
    }
    return points;
}

void write_curve_csv(const std::string& path, const std::vector<TrainProgress>& curve) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "step,loss,val_f\n";
    for (const auto& p : curve) {
        os << p.step << "," << p.loss << ",";
        if (p.val_f >= 0.0) os << p.val_f;
        os << "\n";
    }
}

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "sr,map5,map20,f_score\n";
    for (const auto& p : points) {
        os << p.rate << "," << p.map5 << "," << p.map20 << "," << p.f_score << "\n";
    }
}

void write_sweep_svg(const std::string& path, const std::vector<SweepPoint>& points) {
    const int w = 480, h = 320, margin = 48;
    double max_rate = 0.0;
    for (const auto& p : points) max_rate = std::max(max_rate, p.rate);
    auto px = [&](double rate) { return margin + (w - 2 * margin) * rate / max_rate; };
    auto py = [&](double v) { return h - margin - (h - 2 * margin) * v; };

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<line x1='" << margin << "' y1='" << h - margin << "' x2='" << w - margin << "' y2='"
       << h - margin << "' stroke='black'/>\n";
    os << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
       << h - margin << "' stroke='black'/>\n";
    const char* colors[2] = {"#1f77b4", "#d62728"};
    for (int series = 0; series < 2; ++series) {
        os << "<polyline fill='none' stroke='" << colors[series] << "' points='";
        for (const auto& p : points) {
            os << px(p.rate) << "," << py(series == 0 ? p.map5 : p.map20) << " ";
        }
        os << "'/>\n";
    }
    os << "<text x='" << w / 2 << "' y='" << h - 12 << "' font-size='12'>sampling rate</text>\n";
    os << "<text x='" << margin << "' y='" << margin - 12
       << "' font-size='12'>mAP5 (blue), mAP20 (red)</text>\n";
    os << "</svg>\n";
}

}  // namespace gct::harness
