#pragma once

#include <algorithm>
#include <cstddef>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "cstf/tensor.hpp"

namespace cstf::harness {

// ---------------------------------------------------------------------------
// Boxes and detections. Boxes are half-open pixel rectangles
// [x0, x1) x [y0, y1), so a single pixel at (x, y) is (x, y, x+1, y+1).
// ---------------------------------------------------------------------------

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct Detection {
    Box box;
    int label = 1;
    double score = 0;
};

struct GroundTruth {
    Box box;
    int label = 1;
};

using DetectionSet = std::vector<std::vector<Detection>>;      // per image
using GroundTruthSet = std::vector<std::vector<GroundTruth>>;  // per image

inline double box_area(const Box& b) {
    return std::max(0.0, b.x1 - b.x0) * std::max(0.0, b.y1 - b.y0);
}

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = ix * iy;
    const double uni = box_area(a) + box_area(b) - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

enum class Interp { eleven_point, all_points };

inline Interp interp_from_name(const std::string& s) {
    if (s == "11pt") return Interp::eleven_point;
    if (s == "all") return Interp::all_points;
    throw ConfigError("unknown interpolation '" + s + "' (expected 11pt or all)");
}

inline std::string interp_name(Interp i) {
    return i == Interp::eleven_point ? "11pt" : "all";
}

struct PrPoint {
    double recall = 0, precision = 0;
};

namespace detail {

struct FlatDet {
    std::size_t image;
    Box box;
    double score;
};

// Greedy score-descending assignment for one class: each detection takes the
// highest-IoU unmatched ground truth in its image (lowest index on ties) and
// counts as a true positive iff that IoU clears the threshold.
// Returns one PR point per detection, in processing order.
inline std::vector<PrPoint> pr_curve(std::vector<FlatDet> dets,
                                     const std::vector<std::vector<Box>>& gts, std::size_t total_gt,
                                     double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const FlatDet& a, const FlatDet& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);

    std::vector<PrPoint> points;
    points.reserve(dets.size());
    std::size_t tp = 0, fp = 0;
    for (const auto& det : dets) {
        const auto& candidates = gts[det.image];
        double best = 0.0;
        std::size_t best_idx = candidates.size();
        for (std::size_t g = 0; g < candidates.size(); ++g) {
            const double v = iou(det.box, candidates[g]);
            if (v > best) {
                best = v;
                best_idx = g;
            }
        }
        if (best_idx < candidates.size() && best >= iou_thresh && !taken[det.image][best_idx]) {
            taken[det.image][best_idx] = true;
            ++tp;
        } else {
            ++fp;
        }
        points.push_back({static_cast<double>(tp) / static_cast<double>(total_gt),
                          static_cast<double>(tp) / static_cast<double>(tp + fp)});
    }
    return points;
}

inline double area_under_pr(const std::vector<PrPoint>& points, Interp interp) {
    if (interp == Interp::eleven_point) {
        double acc = 0.0;
        for (int t = 0; t <= 10; ++t) {
            const double r = t / 10.0;
            double best = 0.0;
            for (const auto& p : points)
                if (p.recall >= r) best = std::max(best, p.precision);
            acc += best;
        }
        return acc / 11.0;
    }
    // all-points: precision envelope from the right, summed over recall steps
    std::vector<double> envelope(points.size());
    double best = 0.0;
    for (std::size_t i = points.size(); i-- > 0;) {
        best = std::max(best, points[i].precision);
        envelope[i] = best;
    }
    double acc = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        acc += (points[i].recall - prev_recall) * envelope[i];
        prev_recall = points[i].recall;
    }
    return acc;
}

}  // namespace detail

/// PR points of one class across the dataset (for plotting and the AP).
inline std::vector<PrPoint> pr_points_for_class(const DetectionSet& dets, const GroundTruthSet& gts,
                                                int label, double iou_thresh) {
    std::vector<detail::FlatDet> flat;
    std::vector<std::vector<Box>> gt_boxes(gts.size());
    std::size_t total_gt = 0;
    for (std::size_t im = 0; im < gts.size(); ++im) {
        for (const auto& g : gts[im]) {
            if (g.label == label) {
                gt_boxes[im].push_back(g.box);
                ++total_gt;
            }
        }
    }
    for (std::size_t im = 0; im < dets.size() && im < gts.size(); ++im) {
        for (const auto& d : dets[im]) {
            if (d.label == label) flat.push_back({im, d.box, d.score});
        }
    }
    if (total_gt == 0) return {};
    return detail::pr_curve(std::move(flat), gt_boxes, total_gt, iou_thresh);
}

/// Mean AP over the classes present in the ground truth, greedy VOC-style
/// matching at the given IoU threshold and interpolation scheme.
inline double voc_average_precision(const DetectionSet& dets, const GroundTruthSet& gts,
                                    double iou_thresh, Interp interp) {
    std::set<int> labels;
    for (const auto& im : gts)
        for (const auto& g : im) labels.insert(g.label);
    if (labels.empty()) throw ContractError("voc_average_precision: no ground-truth objects");

    double acc = 0.0;
    for (int label : labels) {
        acc += detail::area_under_pr(pr_points_for_class(dets, gts, label, iou_thresh), interp);
    }
    return acc / static_cast<double>(labels.size());
}

/// Matched ground truths over total ground truths under the same greedy
/// assignment, all detections considered.
inline double recall_at(const DetectionSet& dets, const GroundTruthSet& gts, double iou_thresh) {
    std::set<int> labels;
    std::size_t total_gt = 0;
    for (const auto& im : gts)
        for (const auto& g : im) {
            labels.insert(g.label);
            ++total_gt;
        }
    if (total_gt == 0) throw ContractError("recall_at: no ground-truth objects");

    double matched = 0.0;
    for (int label : labels) {
        const auto points = pr_points_for_class(dets, gts, label, iou_thresh);
        double class_best = 0.0;
        for (const auto& p : points) class_best = std::max(class_best, p.recall);
        // recall of the final point is tp / total for that class; rescale
        std::size_t class_gt = 0;
        for (const auto& im : gts)
            for (const auto& g : im)
                if (g.label == label) ++class_gt;
        matched += class_best * static_cast<double>(class_gt);
    }
    return matched / static_cast<double>(total_gt);
}

/// Thresholds the foreground probability mass of a [classes x h x w] map,
/// groups pixels into 4-connected components, and emits one tight box per
/// component scored by its mean foreground probability.
template <typename T>
std::vector<Detection> extract_detections(const Tensor<T>& probs, double score_thresh) {
    if (probs.ndim() != 3) throw ShapeError("extract_detections: expected [classes x h x w]");
    const std::size_t k = probs.shape()[0], h = probs.shape()[1], w = probs.shape()[2];

    std::vector<double> fg(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            fg[y * w + x] = 1.0 - static_cast<double>(probs.at(0, y, x));

    std::vector<int> comp(h * w, -1);
    std::vector<Detection> out;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (comp[start] >= 0 || fg[start] <= score_thresh) continue;
        const int id = static_cast<int>(out.size());
        std::queue<std::size_t> frontier;
        frontier.push(start);
        comp[start] = id;

        std::size_t min_x = w, min_y = h, max_x = 0, max_y = 0;
        double score_sum = 0.0;
        std::size_t count = 0;
        std::vector<double> class_mass(k, 0.0);
        while (!frontier.empty()) {
            const std::size_t px = frontier.front();
            frontier.pop();
            const std::size_t y = px / w, x = px % w;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
            score_sum += fg[px];
            ++count;
            for (std::size_t c = 1; c < k; ++c) class_mass[c] += static_cast<double>(probs.at(c, y, x));

            const std::size_t neighbors[4][2] = {{y, x + 1}, {y, x - 1}, {y + 1, x}, {y - 1, x}};
            for (const auto& n : neighbors) {
                if (n[0] >= h || n[1] >= w) continue;  // unsigned wrap covers the -1 edges
                const std::size_t idx = n[0] * w + n[1];
                if (comp[idx] < 0 && fg[idx] > score_thresh) {
                    comp[idx] = id;
                    frontier.push(idx);
                }
            }
        }

        int label = 1;
        double best_mass = class_mass.size() > 1 ? class_mass[1] : 0.0;
        for (std::size_t c = 2; c < k; ++c) {
            if (class_mass[c] > best_mass) {
                best_mass = class_mass[c];
                label = static_cast<int>(c);
            }
        }
        out.push_back({Box{static_cast<double>(min_x), static_cast<double>(min_y),
                           static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)},
                       label, score_sum / static_cast<double>(count)});
    }
    return out;
}

}  // namespace cstf::harness
