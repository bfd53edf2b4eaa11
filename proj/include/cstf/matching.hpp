#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cstf/tensor.hpp"

namespace cstf {

/// Descriptor similarities S[a,b] = <desc_a[a], desc_b[b]> / tau.
template <typename T>
struct ScoreMatrix {
    Tensor<T> scores;  // [A x B]
    T tau;
};

struct Match {
    std::size_t index_a;
    std::size_t index_b;
    double confidence;
};

using MatchSet = std::vector<Match>;

template <typename T>
ScoreMatrix<T> similarity_matrix(const Tensor<T>& desc_a, const Tensor<T>& desc_b, T tau) {
    if (tau <= T(0)) throw ConfigError("similarity_matrix: tau must be positive");
    if (desc_a.ndim() != 2 || desc_b.ndim() != 2 || desc_a.shape()[1] != desc_b.shape()[1]) {
        throw ShapeError("similarity_matrix: " + shape_str(desc_a.shape()) + " vs " +
                         shape_str(desc_b.shape()));
    }
    return ScoreMatrix<T>{scale(matmul(desc_a, transpose(desc_b)), T(1) / tau), tau};
}

/// Matching confidences: elementwise product of the row-wise and column-wise
/// softmax of the score matrix. Entries lie in (0, 1].
template <typename T>
Tensor<T> dual_softmax(const ScoreMatrix<T>& s) {
    return mul(softmax(s.scores, 1), softmax(s.scores, 0));
}

/// Mean negative log confidence over the ground-truth cells. Pairs must be
/// in bounds and form a partial matching (each index at most once per side).
template <typename T>
Tensor<T> matching_loss(const Tensor<T>& confidences,
                        const std::vector<std::pair<std::size_t, std::size_t>>& gt_pairs) {
    if (confidences.ndim() != 2) throw ShapeError("matching_loss: expected [a x b] confidences");
    if (gt_pairs.empty()) throw ContractError("matching_loss: empty ground-truth set");
    const std::size_t rows = confidences.shape()[0], cols = confidences.shape()[1];
    std::vector<bool> row_used(rows, false), col_used(cols, false);
    std::vector<std::size_t> cells;
    cells.reserve(gt_pairs.size());
    for (const auto& [a, b] : gt_pairs) {
        if (a >= rows || b >= cols) throw ContractError("matching_loss: pair out of bounds");
        if (row_used[a] || col_used[b]) {
            throw ContractError("matching_loss: index used twice on one side");
        }
        row_used[a] = true;
        col_used[b] = true;
        cells.push_back(a * cols + b);
    }
    return mean_neg_log_cells(confidences, cells);
}

/// Mutual-nearest-neighbor extraction: keep (a, b) iff b is row a's argmax,
/// a is column b's argmax, and the confidence clears the threshold. Argmax
/// ties break toward the lowest index.
template <typename T>
MatchSet mutual_nn(const Tensor<T>& confidences, double threshold) {
    if (threshold < 0.0 || threshold >= 1.0) {
        throw ConfigError("mutual_nn: threshold must lie in [0, 1)");
    }
    if (confidences.ndim() != 2) throw ShapeError("mutual_nn: expected [a x b] confidences");
    const std::size_t rows = confidences.shape()[0], cols = confidences.shape()[1];

    std::vector<std::size_t> best_col(rows, 0), best_row(cols, 0);
    for (std::size_t a = 0; a < rows; ++a) {
        for (std::size_t b = 1; b < cols; ++b) {
            if (confidences.at(a, b) > confidences.at(a, best_col[a])) best_col[a] = b;
        }
    }
    for (std::size_t b = 0; b < cols; ++b) {
        for (std::size_t a = 1; a < rows; ++a) {
            if (confidences.at(a, b) > confidences.at(best_row[b], b)) best_row[b] = a;
        }
    }

    MatchSet matches;
    for (std::size_t a = 0; a < rows; ++a) {
        const std::size_t b = best_col[a];
        if (best_row[b] == a && static_cast<double>(confidences.at(a, b)) > threshold) {
            matches.push_back({a, b, static_cast<double>(confidences.at(a, b))});
        }
    }
    return matches;
}

/// Match list export: one "index_a,index_b,confidence" line per match after
/// a header carrying the matrix extents and thresholds.
inline void write_matches(std::ostream& out, const MatchSet& matches, std::size_t rows,
                          std::size_t cols, double theta, double tau) {
    out << "# A=" << rows << " B=" << cols << " theta=" << theta << " tau=" << tau << "\n";
    for (const auto& m : matches) {
        out << m.index_a << "," << m.index_b << "," << m.confidence << "\n";
    }
}

}  // namespace cstf
