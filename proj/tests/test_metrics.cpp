#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "cstf/harness/metrics.hpp"
#include "oracles.hpp"

using cstf::harness::Box;
using cstf::harness::Detection;
using cstf::harness::DetectionSet;
using cstf::harness::GroundTruth;
using cstf::harness::GroundTruthSet;
using cstf::harness::Interp;

namespace {

// Independent AP oracle: enumerate every distinct score as a threshold, run a
// fresh greedy assignment on the detections clearing it, and collect one PR
// point per threshold. Interpolation mirrors the definitions directly.
double ap_oracle(const DetectionSet& dets, const GroundTruthSet& gts, int label,
                 double iou_thresh, Interp interp) {
    struct Entry {
        std::size_t image;
        Box box;
        double score;
    };
    std::vector<Entry> all;
    std::size_t total_gt = 0;
    for (std::size_t im = 0; im < gts.size(); ++im)
        for (const auto& g : gts[im])
            if (g.label == label) ++total_gt;
    for (std::size_t im = 0; im < dets.size(); ++im)
        for (const auto& d : dets[im])
            if (d.label == label) all.push_back({im, d.box, d.score});
    if (total_gt == 0) return 0.0;

    std::stable_sort(all.begin(), all.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });
    std::vector<double> thresholds;
    for (const auto& e : all)
        if (thresholds.empty() || e.score != thresholds.back()) thresholds.push_back(e.score);

    std::vector<cstf::harness::PrPoint> points;
    for (double thresh : thresholds) {
        std::vector<std::vector<bool>> used(gts.size());
        for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), false);
        std::size_t tp = 0, fp = 0;
        for (const auto& e : all) {
            if (e.score < thresh) break;
            double best = 0.0;
            std::size_t best_g = std::size_t(-1);
            std::size_t gi = 0;
            for (std::size_t g = 0; g < gts[e.image].size(); ++g) {
                if (gts[e.image][g].label != label) continue;
                const double v = cstf::harness::iou(e.box, gts[e.image][g].box);
                if (v > best) {
                    best = v;
                    best_g = g;
                }
                (void)gi;
            }
            if (best_g != std::size_t(-1) && best >= iou_thresh && !used[e.image][best_g]) {
                used[e.image][best_g] = true;
                ++tp;
            } else {
                ++fp;
            }
        }
        points.push_back({static_cast<double>(tp) / static_cast<double>(total_gt),
                          static_cast<double>(tp) / static_cast<double>(tp + fp)});
    }

    if (interp == Interp::eleven_point) {
        double acc = 0.0;
        for (int t = 0; t <= 10; ++t) {
            double best = 0.0;
            for (const auto& p : points)
                if (p.recall >= t / 10.0) best = std::max(best, p.precision);
            acc += best;
        }
        return acc / 11.0;
    }
    std::vector<double> env(points.size());
    double best = 0.0;
    for (std::size_t i = points.size(); i-- > 0;) {
        best = std::max(best, points[i].precision);
        env[i] = best;
    }
    double acc = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        acc += (points[i].recall - prev) * env[i];
        prev = points[i].recall;
    }
    return acc;
}

Box unit_box(double x, double y, double side = 1.0) { return {x, y, x + side, y + side}; }

}  // namespace

TEST(Iou, FixedCases) {
    const Box a{0, 0, 2, 2};
    EXPECT_DOUBLE_EQ(cstf::harness::iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(cstf::harness::iou(a, Box{5, 5, 7, 7}), 0.0);
    EXPECT_DOUBLE_EQ(cstf::harness::iou(a, Box{1, 1, 3, 3}), 1.0 / 7.0);
    // sharing only an edge is disjoint under half-open boxes
    EXPECT_DOUBLE_EQ(cstf::harness::iou(a, Box{2, 0, 4, 2}), 0.0);
}

TEST(AveragePrecision, SingleDetectionOnSingleTruth) {
    DetectionSet dets{{{unit_box(3, 3, 2), 1, 0.9}}};
    GroundTruthSet gts{{{unit_box(3, 3, 2), 1}}};
    EXPECT_DOUBLE_EQ(cstf::harness::voc_average_precision(dets, gts, 0.5, Interp::all_points), 1.0);
    EXPECT_DOUBLE_EQ(cstf::harness::voc_average_precision(dets, gts, 0.5, Interp::eleven_point),
                     1.0);
}

TEST(AveragePrecision, DisjointDetectionsScoreZero) {
    DetectionSet dets{{{unit_box(0, 0), 1, 0.9}, {unit_box(1, 0), 1, 0.8}}};
    GroundTruthSet gts{{{unit_box(10, 10, 3), 1}}};
    EXPECT_DOUBLE_EQ(cstf::harness::voc_average_precision(dets, gts, 0.5, Interp::all_points), 0.0);
    EXPECT_DOUBLE_EQ(cstf::harness::recall_at(dets, gts, 0.5), 0.0);
}

TEST(AveragePrecision, HandWalkedCurve) {
    // two truths; detections: hit at 0.9, miss at 0.8, hit at 0.7
    GroundTruthSet gts{{{unit_box(0, 0, 2), 1}, {unit_box(10, 10, 2), 1}}};
    DetectionSet dets{{{unit_box(0, 0, 2), 1, 0.9},
                       {unit_box(5, 5, 2), 1, 0.8},
                       {unit_box(10, 10, 2), 1, 0.7}}};
    const double ap = cstf::harness::voc_average_precision(dets, gts, 0.5, Interp::all_points);
    EXPECT_NEAR(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-9);
}

TEST(AveragePrecision, EmptyGroundTruthRejected) {
    DetectionSet dets{{{unit_box(0, 0), 1, 0.5}}};
    GroundTruthSet gts{{}};
    EXPECT_THROW(cstf::harness::voc_average_precision(dets, gts, 0.5, Interp::all_points),
                 cstf::ContractError);
    EXPECT_THROW(cstf::harness::recall_at(dets, gts, 0.5), cstf::ContractError);
}

TEST(AveragePrecision, MatchesThresholdEnumerationOracle) {
    cstf::Rng rng(29);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n_images = 1 + rng.uniform_int(2);
        GroundTruthSet gts(n_images);
        DetectionSet dets(n_images);
        std::size_t total_gt = 0;
        for (std::size_t im = 0; im < n_images; ++im) {
            const std::size_t n_gt = rng.uniform_int(4) + (im == 0 ? 1 : 0);
            for (std::size_t g = 0; g < n_gt && total_gt < 4; ++g, ++total_gt) {
                gts[im].push_back({unit_box(rng.uniform(0, 8), rng.uniform(0, 8), 2.0), 1});
            }
            const std::size_t n_det = rng.uniform_int(4);
            for (std::size_t d = 0; d < n_det && dets[im].size() < 6; ++d) {
                dets[im].push_back(
                    {unit_box(rng.uniform(0, 8), rng.uniform(0, 8), 2.0), 1, rng.uniform(0.01, 1.0)});
            }
        }
        for (auto thresh : {0.5, 0.7}) {
            for (auto interp : {Interp::all_points, Interp::eleven_point}) {
                const double got = cstf::harness::voc_average_precision(dets, gts, thresh, interp);
                const double want = ap_oracle(dets, gts, 1, thresh, interp);
                EXPECT_EQ(got, want) << "rep " << rep;
            }
        }
    }
}

TEST(AveragePrecision, InvariantUnderMonotoneScoreTransforms) {
    cstf::Rng rng(31);
    GroundTruthSet gts{{{unit_box(0, 0, 2), 1}, {unit_box(4, 4, 2), 1}, {unit_box(8, 0, 2), 1}}};
    DetectionSet dets{{{unit_box(0, 0, 2), 1, 0.31},
                       {unit_box(4.4, 4, 2), 1, 0.77},
                       {unit_box(2, 7, 2), 1, 0.52},
                       {unit_box(8, 0.6, 2), 1, 0.11}}};
    DetectionSet transformed = dets;
    for (auto& d : transformed[0]) d.score = 3.0 * d.score * d.score + 1.0;  // order preserving

    for (auto interp : {Interp::all_points, Interp::eleven_point}) {
        EXPECT_DOUBLE_EQ(cstf::harness::voc_average_precision(dets, gts, 0.5, interp),
                         cstf::harness::voc_average_precision(transformed, gts, 0.5, interp));
    }
    EXPECT_DOUBLE_EQ(cstf::harness::recall_at(dets, gts, 0.5),
                     cstf::harness::recall_at(transformed, gts, 0.5));
}

TEST(Recall, CountsMatchedTruths) {
    GroundTruthSet gts{{{unit_box(0, 0, 2), 1}, {unit_box(4, 4, 2), 1}, {unit_box(8, 8, 2), 1}}};
    DetectionSet dets{{{unit_box(0, 0, 2), 1, 0.9}, {unit_box(4, 4, 2), 1, 0.8}}};
    EXPECT_NEAR(cstf::harness::recall_at(dets, gts, 0.5), 2.0 / 3.0, 1e-12);

    DetectionSet all{{{unit_box(0, 0, 2), 1, 0.9},
                      {unit_box(4, 4, 2), 1, 0.8},
                      {unit_box(8, 8, 2), 1, 0.7}}};
    EXPECT_DOUBLE_EQ(cstf::harness::recall_at(all, gts, 0.5), 1.0);
}

TEST(ExtractDetections, UniformBackgroundGivesNothing) {
    auto probs = cstf::Tensor<double>({2, 6, 6});
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
            probs.at(0, y, x) = 0.9;
            probs.at(1, y, x) = 0.1;
        }
    EXPECT_TRUE(cstf::harness::extract_detections(probs, 0.5).empty());
}

TEST(ExtractDetections, SolidSquareGivesTightBoxWithFullScore) {
    auto probs = cstf::Tensor<double>({2, 8, 8});
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            const bool inside = y >= 2 && y < 5 && x >= 3 && x < 6;
            probs.at(0, y, x) = inside ? 0.0 : 1.0;
            probs.at(1, y, x) = inside ? 1.0 : 0.0;
        }
    auto dets = cstf::harness::extract_detections(probs, 0.5);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_DOUBLE_EQ(dets[0].box.x0, 3.0);
    EXPECT_DOUBLE_EQ(dets[0].box.y0, 2.0);
    EXPECT_DOUBLE_EQ(dets[0].box.x1, 6.0);
    EXPECT_DOUBLE_EQ(dets[0].box.y1, 5.0);
    EXPECT_DOUBLE_EQ(dets[0].score, 1.0);
    EXPECT_EQ(dets[0].label, 1);
}

TEST(ExtractDetections, SeparatedBlobsMatchBruteForceLabeling) {
    cstf::Rng rng(37);
    for (int rep = 0; rep < 25; ++rep) {
        const std::size_t h = 10, w = 10;
        auto probs = cstf::Tensor<double>({2, h, w});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double fg = rng.uniform() < 0.3 ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4);
                probs.at(1, y, x) = fg;
                probs.at(0, y, x) = 1.0 - fg;
            }
        auto dets = cstf::harness::extract_detections(probs, 0.5);

        // brute force: flood fill over the same mask
        std::vector<int> comp(h * w, -1);
        int n_comp = 0;
        auto fg_at = [&](std::size_t y, std::size_t x) { return probs.at(1, y, x) > 0.5; };
        for (std::size_t start = 0; start < h * w; ++start) {
            if (comp[start] >= 0 || !fg_at(start / w, start % w)) continue;
            std::vector<std::size_t> stack{start};
            comp[start] = n_comp;
            while (!stack.empty()) {
                const std::size_t px = stack.back();
                stack.pop_back();
                const std::size_t y = px / w, x = px % w;
                const long moves[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
                for (const auto& m : moves) {
                    const long ny = static_cast<long>(y) + m[0], nx = static_cast<long>(x) + m[1];
                    if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w))
                        continue;
                    const std::size_t idx = ny * w + nx;
                    if (comp[idx] < 0 && fg_at(ny, nx)) {
                        comp[idx] = n_comp;
                        stack.push_back(idx);
                    }
                }
            }
            ++n_comp;
        }
        ASSERT_EQ(dets.size(), static_cast<std::size_t>(n_comp));
        for (const auto& d : dets) {
            EXPECT_GE(d.box.x0, 0.0);
            EXPECT_GE(d.box.y0, 0.0);
            EXPECT_LE(d.box.x1, static_cast<double>(w));
            EXPECT_LE(d.box.y1, static_cast<double>(h));
            EXPECT_LT(d.box.x0, d.box.x1);
            EXPECT_LT(d.box.y0, d.box.y1);
        }
    }
}
