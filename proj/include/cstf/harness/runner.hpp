#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cstf/codec.hpp"
#include "cstf/harness/metrics.hpp"
#include "cstf/harness/plot.hpp"
#include "cstf/harness/synthetic.hpp"
#include "cstf/harness/train.hpp"
#include "cstf/matching.hpp"

namespace cstf::harness {

// ---------------------------------------------------------------------------
// Run configuration, mirrored 1:1 by the JSON config file.
// ---------------------------------------------------------------------------

struct MetricConfig {
    double iou = 0.5;
    std::string interp = "all";  // "11pt" or "all"
    double score_thresh = 0.5;
};

struct DataConfig {
    std::size_t train_images = 8;
    std::size_t eval_images = 8;
    double density = 2.0;
};

// the saturated dual-softmax landscape tolerates far less momentum than the
// detection objective, hence the separate optimizer settings
struct MatchRunConfig {
    double tau = 0.1;
    double theta = 0.2;
    std::size_t steps = 2000;
    double learning_rate = 0.02;
    double momentum = 0.5;
    double target_loss = 0.05;
};

struct AblationConfig {
    std::size_t steps = 300;
    bool include_sequential = false;
};

struct SweepSetting {
    std::size_t patch_size = 13;  // reference patch edge at benchmark scale
    std::size_t token_grid = 4;   // desk-scale grid realizing it
};

struct SweepConfig {
    std::size_t steps = 300;
    std::vector<SweepSetting> settings = {{9, 8}, {13, 4}, {17, 2}, {21, 1}};
};

struct RunConfig {
    std::uint64_t seed = 7;
    int precision = 64;  // 32 or 64
    std::string task = "detection";
    ModelConfig model;
    OptimConfig optimizer;
    MetricConfig metric;
    DataConfig data;
    MatchRunConfig match;
    AblationConfig ablation;
    SweepConfig sweep;
    std::string output_dir = "out";
};

inline void overlay_json(RunConfig& cfg, const nlohmann::json& j) {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.precision = j.value("precision", cfg.precision);
    cfg.task = j.value("task", cfg.task);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.stages = m.value("stages", cfg.model.stages);
        cfg.model.channels = m.value("channels", cfg.model.channels);
        cfg.model.input_height = m.value("input_height", cfg.model.input_height);
        cfg.model.input_width = m.value("input_width", cfg.model.input_width);
        cfg.model.in_channels = m.value("in_channels", cfg.model.in_channels);
        cfg.model.classes = m.value("classes", cfg.model.classes);
        cfg.model.attn_dim = m.value("attn_dim", cfg.model.attn_dim);
        if (m.contains("fusion")) cfg.model.fusion = fusion_mode_from_name(m.at("fusion"));
        if (m.contains("patch")) {
            const auto& p = m.at("patch");
            cfg.model.patch.base_patch_size =
                p.value("base_patch_size", cfg.model.patch.base_patch_size);
            cfg.model.patch.token_grid = p.value("token_grid", cfg.model.patch.token_grid);
            cfg.model.patch.embed_dim = p.value("embed_dim", cfg.model.patch.embed_dim);
            if (p.contains("mode")) {
                const std::string mode = p.at("mode");
                if (mode == "average_pool") cfg.model.patch.mode = EmbedMode::average_pool;
                else if (mode == "convolutional") cfg.model.patch.mode = EmbedMode::convolutional;
                else throw ConfigError("unknown patch mode '" + mode + "'");
            }
        }
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        cfg.optimizer.learning_rate = o.value("learning_rate", cfg.optimizer.learning_rate);
        cfg.optimizer.momentum = o.value("momentum", cfg.optimizer.momentum);
        cfg.optimizer.steps = o.value("steps", cfg.optimizer.steps);
        cfg.optimizer.target_loss = o.value("target_loss", cfg.optimizer.target_loss);
    }
    if (j.contains("metric")) {
        const auto& m = j.at("metric");
        cfg.metric.iou = m.value("iou", cfg.metric.iou);
        cfg.metric.interp = m.value("interp", cfg.metric.interp);
        cfg.metric.score_thresh = m.value("score_thresh", cfg.metric.score_thresh);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        cfg.data.train_images = d.value("train_images", cfg.data.train_images);
        cfg.data.eval_images = d.value("eval_images", cfg.data.eval_images);
        cfg.data.density = d.value("density", cfg.data.density);
    }
    if (j.contains("match")) {
        const auto& m = j.at("match");
        cfg.match.tau = m.value("tau", cfg.match.tau);
        cfg.match.theta = m.value("theta", cfg.match.theta);
        cfg.match.steps = m.value("steps", cfg.match.steps);
        cfg.match.learning_rate = m.value("learning_rate", cfg.match.learning_rate);
        cfg.match.momentum = m.value("momentum", cfg.match.momentum);
        cfg.match.target_loss = m.value("target_loss", cfg.match.target_loss);
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        cfg.ablation.steps = a.value("steps", cfg.ablation.steps);
        cfg.ablation.include_sequential =
            a.value("include_sequential", cfg.ablation.include_sequential);
    }
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        cfg.sweep.steps = s.value("steps", cfg.sweep.steps);
        if (s.contains("settings")) {
            cfg.sweep.settings.clear();
            for (const auto& e : s.at("settings")) {
                cfg.sweep.settings.push_back(
                    {e.value("patch_size", std::size_t(0)), e.at("token_grid").get<std::size_t>()});
            }
        }
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path + "'");
    nlohmann::json j;
    in >> j;
    RunConfig cfg;
    overlay_json(cfg, j);
    return cfg;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double map = 0.0;
    double recall = 0.0;
    std::vector<PrPoint> pr_points;
};

template <typename T>
EvalResult evaluate_detection(const CstfModel<T>& model,
                              const std::vector<SyntheticScene<T>>& scenes,
                              const MetricConfig& metric) {
    NoGradGuard off;
    DetectionSet dets;
    GroundTruthSet gts;
    for (const auto& scene : scenes) {
        dets.push_back(extract_detections(model.forward(scene.image).probs, metric.score_thresh));
        gts.push_back(scene.objects);
    }
    EvalResult r;
    const Interp interp = interp_from_name(metric.interp);
    r.map = voc_average_precision(dets, gts, metric.iou, interp);
    r.recall = recall_at(dets, gts, metric.iou);
    r.pr_points = pr_points_for_class(dets, gts, 1, metric.iou);
    return r;
}

/// Wall-clock forward throughput. Desk-scale and single-threaded; not
/// comparable with published full-scale benchmark numbers.
template <typename T>
double measure_forward_fps(const CstfModel<T>& model, const Tensor<T>& image,
                           std::size_t repeats = 10) {
    NoGradGuard off;
    model.forward(image);  // warm-up
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < repeats; ++i) model.forward(image);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    return static_cast<double>(repeats) / elapsed.count();
}

// ---------------------------------------------------------------------------
// CSV and loss-log output
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::string variant;
    double map = 0.0;
    double recall = 0.0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                              const MetricConfig& metric, std::uint64_t seed) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << "variant,map,recall,iou,interp,seed\n";
    for (const auto& r : rows) {
        out << r.variant << "," << r.map << "," << r.recall << "," << metric.iou << ","
            << metric.interp << "," << seed << "\n";
    }
}

inline void write_loss_csv(const std::string& path,
                           const std::vector<std::pair<std::size_t, double>>& log) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << "step,loss\n";
    for (const auto& [step, loss] : log) out << step << "," << loss << "\n";
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    FusionMode fusion;
    EmbedMode embed;
    double reference_hrsc2016;  // published full-scale results, annotation only
    double reference_dota;
};

/// The six ablation rows. The embedding rows run under the concatenation
/// fusion (the strongest combined mode); the source study does not pin the
/// fusion used for its embedding comparison.
inline std::vector<AblationVariant> ablation_variants(bool include_sequential) {
    std::vector<AblationVariant> v = {
        {"CSTF-(CA)", FusionMode::ca_only, EmbedMode::average_pool, 89.32, 89.64},
        {"CSTF-(SCA)", FusionMode::sca_only, EmbedMode::average_pool, 89.86, 90.01},
        {"CSTF-CA+SCA", FusionMode::sum, EmbedMode::average_pool, 91.33, 91.02},
        {"CSTF-CA||SCA", FusionMode::concat, EmbedMode::average_pool, 92.42, 92.16},
        {"CSTF-Conv", FusionMode::concat, EmbedMode::convolutional, 89.31, 89.25},
        {"CSTF-AP", FusionMode::concat, EmbedMode::average_pool, 89.42, 89.31},
    };
    if (include_sequential) {
        v.push_back({"CSTF-CA-SCA", FusionMode::sequential, EmbedMode::average_pool, 0.0, 0.0});
    }
    return v;
}

/// Trains and evaluates every variant on one shared split, fixed step budget
/// (no early stop, for comparability). Returns the metric rows in variant
/// order and writes metrics.csv plus a reference-annotated table to stdout.
template <typename T>
std::vector<MetricsRow> run_ablation(const RunConfig& cfg, const std::string& out_dir) {
    auto train_scenes = gen_synthetic<T>(cfg.seed, cfg.data.train_images,
                                         cfg.model.input_height, cfg.data.density);
    auto eval_scenes = gen_synthetic<T>(cfg.seed + 1, cfg.data.eval_images,
                                        cfg.model.input_height, cfg.data.density);
    std::cout << "ablation split hash: train=" << dataset_hash(train_scenes)
              << " eval=" << dataset_hash(eval_scenes) << "\n";

    OptimConfig optim = cfg.optimizer;
    optim.steps = cfg.ablation.steps;
    optim.target_loss = 0.0;  // fixed budget keeps the comparison controlled

    std::vector<MetricsRow> rows;
    for (const auto& variant : ablation_variants(cfg.ablation.include_sequential)) {
        ModelConfig mc = cfg.model;
        mc.fusion = variant.fusion;
        mc.patch.mode = variant.embed;
        CstfModel<T> model(mc, cfg.seed);
        train_detection(model, train_scenes, optim);
        const auto eval = evaluate_detection(model, eval_scenes, cfg.metric);
        rows.push_back({variant.name, eval.map, eval.recall});
    }

    std::filesystem::create_directories(out_dir);
    write_metrics_csv(out_dir + "/metrics.csv", rows, cfg.metric, cfg.seed);

    std::cout << "variant,map,recall,reference_hrsc2016_map,reference_dota_map\n";
    const auto variants = ablation_variants(cfg.ablation.include_sequential);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::cout << rows[i].variant << "," << rows[i].map << "," << rows[i].recall << ",";
        if (variants[i].reference_hrsc2016 > 0) {
            std::cout << variants[i].reference_hrsc2016 << "," << variants[i].reference_dota;
        } else {
            std::cout << "-,-";
        }
        std::cout << "\n";
    }
    std::cout << "(reference columns are published full-scale results; desk-scale numbers "
                 "are not comparable)\n";
    return rows;
}

// ---------------------------------------------------------------------------
// Patch-size sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::size_t patch_size = 0;
    std::size_t token_grid = 0;
    double map = 0.0;
    double recall = 0.0;
    double reference_hrsc2016 = 0.0;
};

inline double sweep_reference_map(std::size_t patch_size) {
    switch (patch_size) {
        case 9: return 88.12;
        case 13: return 89.38;
        case 17: return 90.12;
        case 21: return 90.99;
        default: return 0.0;
    }
}

/// Trains and evaluates the model across token-grid settings. Each setting
/// carries the benchmark-scale patch edge it stands for; settings the model
/// cannot realize are skipped with a warning.
template <typename T>
std::vector<SweepRow> patch_size_sweep(const RunConfig& cfg, const std::string& out_dir) {
    auto train_scenes = gen_synthetic<T>(cfg.seed, cfg.data.train_images,
                                         cfg.model.input_height, cfg.data.density);
    auto eval_scenes = gen_synthetic<T>(cfg.seed + 1, cfg.data.eval_images,
                                        cfg.model.input_height, cfg.data.density);

    OptimConfig optim = cfg.optimizer;
    optim.steps = cfg.sweep.steps;
    optim.target_loss = 0.0;

    std::vector<SweepRow> rows;
    for (const auto& setting : cfg.sweep.settings) {
        ModelConfig mc = cfg.model;
        mc.patch.token_grid = setting.token_grid;
        mc.patch.base_patch_size = setting.patch_size;
        try {
            mc.validate();
        } catch (const ConfigError& e) {
            std::cerr << "sweep: skipping token_grid=" << setting.token_grid << ": " << e.what()
                      << "\n";
            continue;
        }
        CstfModel<T> model(mc, cfg.seed);
        train_detection(model, train_scenes, optim);
        const auto eval = evaluate_detection(model, eval_scenes, cfg.metric);
        rows.push_back({setting.patch_size, setting.token_grid, eval.map, eval.recall,
                        sweep_reference_map(setting.patch_size)});
    }

    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir + "/sweep.csv");
    if (!csv) throw ConfigError("cannot write sweep.csv");
    csv << "patch_size,token_grid,map,recall,reference_hrsc2016_map,seed\n";
    std::vector<std::pair<double, double>> curve;
    for (const auto& r : rows) {
        csv << r.patch_size << "," << r.token_grid << "," << r.map << "," << r.recall << ",";
        if (r.reference_hrsc2016 > 0) csv << r.reference_hrsc2016;
        else csv << "-";
        csv << "," << cfg.seed << "\n";
        curve.emplace_back(static_cast<double>(r.patch_size), r.map);
    }
    write_svg_chart(out_dir + "/sweep.svg", "patch size sweep (desk scale)", "patch size", "mAP",
                    curve);

    std::cout << "patch_size,token_grid,map,recall,reference_hrsc2016_map\n";
    for (const auto& r : rows) {
        std::cout << r.patch_size << "," << r.token_grid << "," << r.map << "," << r.recall << ",";
        if (r.reference_hrsc2016 > 0) std::cout << r.reference_hrsc2016;
        else std::cout << "-";
        std::cout << "\n";
    }
    std::cout << "(reference column is the published full-scale result for that patch size; "
                 "desk-scale numbers are not comparable)\n";
    return rows;
}

}  // namespace cstf::harness
