// Command-line driver: training, evaluation, the ablation grid, the
// patch-size sweep, gradient checking, and descriptor matching on synthetic
// scenes.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "cstf/harness/gradcheck.hpp"
#include "cstf/harness/runner.hpp"

namespace {

using namespace cstf;
using namespace cstf::harness;

struct CliOverrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> iou;
    std::optional<std::string> interp;
    std::optional<std::string> out;
    std::optional<int> precision;
    bool include_sequential = false;
};

RunConfig resolve_config(const CliOverrides& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.iou) cfg.metric.iou = *o.iou;
    if (o.interp) cfg.metric.interp = *o.interp;
    if (o.out) cfg.output_dir = *o.out;
    if (o.precision) cfg.precision = *o.precision;
    if (o.include_sequential) cfg.ablation.include_sequential = true;
    return cfg;
}

void add_common_options(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--iou", o.iou, "IoU threshold")->check(CLI::IsMember({0.5, 0.7}));
    cmd->add_option("--interp", o.interp, "AP interpolation")->check(CLI::IsMember({"11pt", "all"}));
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--precision", o.precision, "float width")->check(CLI::IsMember({32, 64}));
}

void print_model_stats(std::size_t params, double fps) {
    std::cout << "params=" << params << " forward_fps=" << fps
              << " (desk-scale single-thread; not comparable to published "
                 "full-scale throughput)\n";
}

template <typename T>
int do_train(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    CstfModel<T> model(cfg.model, cfg.seed);
    std::cout << "task=" << cfg.task << " seed=" << cfg.seed << " params=" << model.param_count()
              << "\n";

    TrainResult result;
    if (cfg.task == "matching") {
        auto scenes = gen_synthetic<T>(cfg.seed, 1, cfg.model.input_height, cfg.data.density);
        auto view_b = rephotograph(scenes[0], cfg.seed + 101);
        OptimConfig optim;
        optim.learning_rate = cfg.match.learning_rate;
        optim.momentum = cfg.match.momentum;
        optim.steps = cfg.match.steps;
        optim.target_loss = cfg.match.target_loss;
        result = train_matching(model, scenes[0].image, view_b.image, static_cast<T>(cfg.match.tau),
                                optim);
    } else if (cfg.task == "detection") {
        auto scenes =
            gen_synthetic<T>(cfg.seed, cfg.data.train_images, cfg.model.input_height, cfg.data.density);
        result = train_detection(model, scenes, cfg.optimizer);
    } else {
        throw ConfigError("unknown task '" + cfg.task + "' (expected detection or matching)");
    }

    write_loss_csv(cfg.output_dir + "/loss.csv", result.loss_log);
    save_checkpoint(model.params(), cfg.output_dir + "/checkpoint.json");
    std::vector<std::pair<double, double>> curve;
    for (const auto& [step, loss] : result.loss_log)
        curve.emplace_back(static_cast<double>(step), loss);
    write_svg_chart(cfg.output_dir + "/loss.svg", "training loss", "step", "loss", curve);

    std::cout << "steps_run=" << result.steps_run << " final_loss=" << result.final_loss << "\n";
    std::cout << "wrote " << cfg.output_dir << "/loss.csv, checkpoint.json, loss.svg\n";
    return 0;
}

template <typename T>
int do_eval(const RunConfig& cfg, const std::string& checkpoint) {
    std::filesystem::create_directories(cfg.output_dir);
    CstfModel<T> model(cfg.model, cfg.seed);
    if (!checkpoint.empty()) load_checkpoint(model.params(), checkpoint);

    auto scenes =
        gen_synthetic<T>(cfg.seed + 1, cfg.data.eval_images, cfg.model.input_height, cfg.data.density);
    auto result = evaluate_detection(model, scenes, cfg.metric);

    write_metrics_csv(cfg.output_dir + "/metrics.csv",
                      {{fusion_mode_name(cfg.model.fusion), result.map, result.recall}}, cfg.metric,
                      cfg.seed);
    std::vector<std::pair<double, double>> curve;
    for (const auto& p : result.pr_points) curve.emplace_back(p.recall, p.precision);
    write_svg_chart(cfg.output_dir + "/pr.svg", "precision-recall", "recall", "precision", curve);

    std::cout << "map=" << result.map << " recall=" << result.recall << " iou=" << cfg.metric.iou
              << " interp=" << cfg.metric.interp << "\n";
    print_model_stats(model.param_count(), measure_forward_fps(model, scenes[0].image));
    std::cout << "wrote " << cfg.output_dir << "/metrics.csv, pr.svg\n";
    return 0;
}

template <typename T>
int do_ablate(const RunConfig& cfg) {
    run_ablation<T>(cfg, cfg.output_dir);
    std::cout << "wrote " << cfg.output_dir << "/metrics.csv\n";
    return 0;
}

template <typename T>
int do_sweep(const RunConfig& cfg) {
    patch_size_sweep<T>(cfg, cfg.output_dir);
    std::cout << "wrote " << cfg.output_dir << "/sweep.csv, sweep.svg\n";
    return 0;
}

template <typename T>
int do_gradcheck(const RunConfig& cfg) {
    const double tol = cfg.precision == 32 ? 1e-3 : 1e-6;
    const auto results = run_gradient_checks<T>(cfg.seed, 5, tol);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << " " << r.name
                  << " max_rel_err=" << r.max_rel_err << " tol=" << tol << "\n";
        all_pass = all_pass && r.pass;
    }
    std::cout << (all_pass ? "gradcheck passed" : "gradcheck FAILED") << " (" << cfg.precision
              << "-bit)\n";
    return all_pass ? 0 : 1;
}

template <typename T>
int do_match(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    CstfModel<T> model(cfg.model, cfg.seed);
    auto scenes = gen_synthetic<T>(cfg.seed, 1, cfg.model.input_height, cfg.data.density);
    auto view_b = rephotograph(scenes[0], cfg.seed + 101);

    OptimConfig optim;
    optim.learning_rate = cfg.match.learning_rate;
    optim.momentum = cfg.match.momentum;
    optim.steps = cfg.match.steps;
    optim.target_loss = cfg.match.target_loss;
    auto result =
        train_matching(model, scenes[0].image, view_b.image, static_cast<T>(cfg.match.tau), optim);
    write_loss_csv(cfg.output_dir + "/loss.csv", result.loss_log);

    NoGradGuard off;
    auto da = model.descriptors(scenes[0].image);
    auto db = model.descriptors(view_b.image);
    auto conf = dual_softmax(similarity_matrix(da, db, static_cast<T>(cfg.match.tau)));
    auto matches = mutual_nn(conf, cfg.match.theta);

    std::ofstream out(cfg.output_dir + "/matches.csv");
    write_matches(out, matches, conf.shape()[0], conf.shape()[1], cfg.match.theta, cfg.match.tau);

    std::size_t correct = 0;
    for (const auto& m : matches)
        if (m.index_a == m.index_b) ++correct;
    std::cout << "final_loss=" << result.final_loss << " matches=" << matches.size()
              << " planted_recovered=" << correct << "/" << conf.shape()[0] << "\n";
    std::cout << "wrote " << cfg.output_dir << "/matches.csv, loss.csv\n";
    return 0;
}

template <typename F>
int dispatch_precision(int precision, F&& run) {
    if (precision == 32) return run(float{});
    if (precision == 64) return run(double{});
    throw ConfigError("precision must be 32 or 64");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross spatial temporal fusion: desk-scale training and evaluation harness"};
    app.require_subcommand(1);

    CliOverrides train_o, eval_o, ablate_o, sweep_o, grad_o, match_o;
    std::string task = "detection";
    std::string checkpoint;

    auto* train_cmd = app.add_subcommand("train", "train on synthetic scenes");
    add_common_options(train_cmd, train_o);
    train_cmd->add_option("--task", task, "detection or matching")
        ->check(CLI::IsMember({"detection", "matching"}));

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint with VOC-style metrics");
    add_common_options(eval_cmd, eval_o);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint to load")
        ->check(CLI::ExistingFile);

    auto* ablate_cmd = app.add_subcommand("ablate", "fusion/embedding ablation grid");
    add_common_options(ablate_cmd, ablate_o);
    ablate_cmd->add_flag("--include-sequential", ablate_o.include_sequential,
                         "add the sequential-fusion variant row");

    auto* sweep_cmd = app.add_subcommand("sweep", "patch-size sweep");
    add_common_options(sweep_cmd, sweep_o);

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common_options(grad_cmd, grad_o);

    auto* match_cmd = app.add_subcommand("match", "dual-softmax matching on a synthetic pair");
    add_common_options(match_cmd, match_o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) {
            auto cfg = resolve_config(train_o);
            if (train_cmd->count("--task")) cfg.task = task;
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_train<decltype(tag)>(cfg);
            });
        }
        if (eval_cmd->parsed()) {
            auto cfg = resolve_config(eval_o);
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_eval<decltype(tag)>(cfg, checkpoint);
            });
        }
        if (ablate_cmd->parsed()) {
            auto cfg = resolve_config(ablate_o);
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_ablate<decltype(tag)>(cfg);
            });
        }
        if (sweep_cmd->parsed()) {
            auto cfg = resolve_config(sweep_o);
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_sweep<decltype(tag)>(cfg);
            });
        }
        if (grad_cmd->parsed()) {
            auto cfg = resolve_config(grad_o);
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_gradcheck<decltype(tag)>(cfg);
            });
        }
        if (match_cmd->parsed()) {
            auto cfg = resolve_config(match_o);
            return dispatch_precision(cfg.precision, [&](auto tag) {
                return do_match<decltype(tag)>(cfg);
            });
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
