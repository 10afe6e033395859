#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gct/harness.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using gct::harness::RunConfig;
using nlohmann::json;

struct CommonArgs {
    std::vector<std::string> overrides;
    std::string config_file;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--set", args.overrides, "key=value override (repeatable); see README")
        ->type_name("KEY=VALUE");
    cmd->add_option("--config", args.config_file, "flat key=value config file");
    cmd->add_option("--out", args.out_dir, "output directory");
}

RunConfig build_config(const CommonArgs& args) {
    RunConfig run;
    if (!args.config_file.empty()) gct::harness::load_config_file(run, args.config_file);
    for (const std::string& o : args.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("--set expects key=value, got '" + o + "'");
        }
        gct::harness::apply_override(run, o.substr(0, eq), o.substr(eq + 1));
    }
    if (!args.out_dir.empty()) run.out_dir = args.out_dir;
    if (const char* env = std::getenv("GCT_OUT_DIR")) run.out_dir = env;
    fs::create_directories(run.out_dir);
    return run;
}

void write_report(const RunConfig& run, const gct::harness::EvalReport& report,
                  const std::string& name) {
    const fs::path path = fs::path(run.out_dir) / name;
    std::ofstream os(path);
    os << report.to_json().dump(2) << "\n";
    std::cout << "wrote " << path.string() << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-context transformer pipeline for two-view correspondence pruning"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, ablate_args, sweep_args, baseline_args, gen_args;

    auto* cmd_train = app.add_subcommand("train", "train a model and write a checkpoint");
    add_common(cmd_train, train_args);

    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    std::string eval_checkpoint, eval_data;
    add_common(cmd_eval, eval_args);
    cmd_eval->add_option("--checkpoint", eval_checkpoint, "checkpoint to load (untrained if absent)");
    cmd_eval->add_option("--data", eval_data, "evaluate on a serialized scene file instead");

    auto* cmd_ablate = app.add_subcommand("ablate", "train and score the component grid");
    add_common(cmd_ablate, ablate_args);

    auto* cmd_sweep = app.add_subcommand("sweep-sr", "sampling-rate sweep");
    std::vector<double> sweep_rates{0.05, 0.1, 0.2, 0.35, 0.5};
    bool sweep_plot = false;
    add_common(cmd_sweep, sweep_args);
    cmd_sweep->add_option("--rates", sweep_rates, "sampling rates to sweep");
    cmd_sweep->add_flag("--plot", sweep_plot, "also emit plot.svg");

    auto* cmd_baseline = app.add_subcommand("baseline", "RANSAC on the identical test split");
    add_common(cmd_baseline, baseline_args);

    auto* cmd_gen = app.add_subcommand("gen-data", "write a serialized scene split");
    int gen_count = 100;
    std::string gen_split = "test";
    add_common(cmd_gen, gen_args);
    cmd_gen->add_option("--count", gen_count, "number of scenes");
    cmd_gen->add_option("--split", gen_split, "train|val|test (selects the seed block)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_train->parsed()) {
            RunConfig run = build_config(train_args);
            const auto t0 = std::chrono::steady_clock::now();
            gct::harness::TrainResult result = gct::harness::train(run, &std::cout);
            gct::harness::write_curve_csv((fs::path(run.out_dir) / "curve.csv").string(),
                                          result.curve);
            gct::ad::save_checkpoint((fs::path(run.out_dir) / "checkpoint.bin").string(),
                                     result.params.named_tensors());
            gct::harness::EvalReport report = gct::harness::evaluate_model(result.params, run);
            report.wall_time_s = seconds_since(t0);
            write_report(run, report, "report.json");
        } else if (cmd_eval->parsed()) {
            RunConfig run = build_config(eval_args);
            const auto t0 = std::chrono::steady_clock::now();
            gct::net::NetParams params = gct::net::NetParams::init(run.net, run.seed);
            if (!eval_checkpoint.empty()) {
                auto tensors = params.named_tensors();
                gct::ad::load_checkpoint(eval_checkpoint, tensors);
            }
            gct::harness::EvalReport report;
            if (!eval_data.empty()) {
                report = gct::harness::evaluate_model(params, run.net,
                                                      gct::scene::read_scenes(eval_data));
                report.config_snapshot = gct::harness::run_config_json(run);
            } else {
                report = gct::harness::evaluate_model(params, run);
            }
            report.wall_time_s = seconds_since(t0);
            write_report(run, report, "report.json");
        } else if (cmd_ablate->parsed()) {
            RunConfig run = build_config(ablate_args);
            const auto t0 = std::chrono::steady_clock::now();
            auto rows = gct::harness::run_ablation(run, &std::cout);
            json out = json::array();
            for (const auto& row : rows) {
                out.push_back(json{{"variant", row.name},
                                   {"map5", row.map5},
                                   {"map20", row.map20},
                                   {"f_score", row.f_score}});
            }
            json doc{{"rows", out},
                     {"config", gct::harness::run_config_json(run)},
                     {"wall_time_s", seconds_since(t0)}};
            std::ofstream os(fs::path(run.out_dir) / "ablation.json");
            os << doc.dump(2) << "\n";
            std::cout << doc["rows"].dump(2) << "\n";
        } else if (cmd_sweep->parsed()) {
            RunConfig run = build_config(sweep_args);
            auto points = gct::harness::sweep_sampling_rate(run, sweep_rates, &std::cout);
            gct::harness::write_sweep_csv((fs::path(run.out_dir) / "curve.csv").string(), points);
            if (sweep_plot) {
                gct::harness::write_sweep_svg((fs::path(run.out_dir) / "plot.svg").string(),
                                              points);
            }
            std::cout << "rates:";
            for (const auto& p : points) std::cout << " " << p.rate;
            std::cout << "\n";
        } else if (cmd_baseline->parsed()) {
            RunConfig run = build_config(baseline_args);
            const auto t0 = std::chrono::steady_clock::now();
            gct::harness::EvalReport report = gct::harness::evaluate_ransac_baseline(run);
            report.wall_time_s = seconds_since(t0);
            write_report(run, report, "report.json");
        } else if (cmd_gen->parsed()) {
            RunConfig run = build_config(gen_args);
            uint64_t base = run.train_base_seed();
            if (gen_split == "val") base = run.val_base_seed();
            else if (gen_split == "test") base = run.test_base_seed();
            else if (gen_split != "train") throw std::runtime_error("unknown split " + gen_split);
            auto scenes = gct::scene::generate_split(run.scene, gen_count, base);
            const fs::path path = fs::path(run.out_dir) / (gen_split + "_scenes.bin");
            gct::scene::write_scenes(path.string(), scenes);
            std::cout << "wrote " << path.string() << " (" << scenes.size() << " scenes)\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
