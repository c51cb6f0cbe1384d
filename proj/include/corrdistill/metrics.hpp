#ifndef CORRDISTILL_METRICS_HPP
#define CORRDISTILL_METRICS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "corrdistill/error.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

// N x N pixel counts; entry (p, g) counts pixels predicted p with ground truth g.
struct ConfusionMatrix {
    std::size_t n = 0;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t classes) : n(classes), counts(classes * classes, 0) {}

    std::uint64_t& at(std::size_t pred, std::size_t gt) { return counts[pred * n + gt]; }
    std::uint64_t at(std::size_t pred, std::size_t gt) const { return counts[pred * n + gt]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.n != n) throw ShapeError("ConfusionMatrix: class counts differ");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;
};

// Adds one count per pixel whose ground truth is not the ignore sentinel.
template <typename Pred>
void accumulate(ConfusionMatrix& conf, std::span<const Pred> pred, std::span<const std::uint8_t> gt,
                std::uint8_t ignore = 255) {
    if (pred.size() != gt.size()) throw ShapeError("accumulate: prediction and label sizes differ");
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] == ignore) continue;
        bool negative = false;
        if constexpr (std::is_signed_v<Pred>) negative = pred[i] < 0;
        const auto p = static_cast<std::size_t>(pred[i]);
        if (negative || p >= conf.n) {
            throw ContractError("accumulate: prediction " + std::to_string(static_cast<long long>(pred[i])) +
                                " out of range");
        }
        if (gt[i] >= conf.n) {
            throw ContractError("accumulate: label " + std::to_string(gt[i]) + " out of range");
        }
        ++conf.at(p, gt[i]);
    }
}

inline double accuracy(const ConfusionMatrix& conf) {
    const auto total = conf.total();
    if (total == 0) throw EmptyEvaluationError("accuracy: empty confusion matrix");
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < conf.n; ++c) diag += conf.at(c, c);
    return static_cast<double>(diag) / static_cast<double>(total);
}

// Mean IoU over classes with non-zero union.
inline double miou(const ConfusionMatrix& conf) {
    std::vector<std::uint64_t> row(conf.n, 0), col(conf.n, 0);
    for (std::size_t p = 0; p < conf.n; ++p) {
        for (std::size_t g = 0; g < conf.n; ++g) {
            row[p] += conf.at(p, g);
            col[g] += conf.at(p, g);
        }
    }
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < conf.n; ++c) {
        const std::uint64_t tp = conf.at(c, c);
        const std::uint64_t uni = row[c] + col[c] - tp;
        if (uni == 0) continue;
        sum += static_cast<double>(tp) / static_cast<double>(uni);
        ++present;
    }
    if (present == 0) throw EmptyEvaluationError("miou: every class has zero union");
    return sum / static_cast<double>(present);
}

namespace detail {

// Minimum-cost assignment (potentials / shortest augmenting path), O(n^3).
// Returns col_of_row.
inline std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<bool> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> col_of_row(n);
    for (std::size_t j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
    return col_of_row;
}

inline double best_profit(const Matrix& profit, const std::vector<std::size_t>& rows,
                          const std::vector<std::size_t>& cols) {
    const std::size_t n = rows.size();
    if (n == 0) return 0.0;
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            cost[i * n + j] = -profit(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(cols[j]));
        }
    }
    const auto a = min_cost_assignment(cost, n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += profit(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(cols[a[i]]));
    }
    return total;
}

}  // namespace detail

struct Assignment {
    std::vector<std::size_t> col_of_row;
    double total = 0.0;  // sum of profit[k, col_of_row[k]] in row order
};

// Permutation maximizing total profit. Among optimal permutations the
// lexicographically smallest is returned.
inline Assignment hungarian(const Matrix& profit) {
    if (profit.rows() != profit.cols()) throw ShapeError("hungarian: profit matrix must be square");
    if (!profit.allFinite()) throw ContractError("hungarian: non-finite profit");
    const auto n = static_cast<std::size_t>(profit.rows());
    Assignment out;
    if (n == 0) return out;
    const double tol = 1e-12 * (1.0 + profit.cwiseAbs().sum());

    std::vector<std::size_t> free_cols(n);
    for (std::size_t j = 0; j < n; ++j) free_cols[j] = j;
    std::vector<std::size_t> rest_rows;
    for (std::size_t i = 1; i < n; ++i) rest_rows.push_back(i);
    double target = detail::best_profit(profit, [&] {
        std::vector<std::size_t> r(n);
        for (std::size_t i = 0; i < n; ++i) r[i] = i;
        return r;
    }(), free_cols);

    for (std::size_t row = 0; row < n; ++row) {
        bool fixed = false;
        for (std::size_t ci = 0; ci < free_cols.size() && !fixed; ++ci) {
            const std::size_t col = free_cols[ci];
            std::vector<std::size_t> cols_left = free_cols;
            cols_left.erase(cols_left.begin() + static_cast<std::ptrdiff_t>(ci));
            const double head = profit(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col));
            const double rest = detail::best_profit(profit, rest_rows, cols_left);
            if (head + rest >= target - tol) {
                out.col_of_row.push_back(col);
                free_cols = std::move(cols_left);
                target = rest;
                fixed = true;
            }
        }
        if (!fixed) throw NumericError("hungarian: failed to reconstruct an optimal permutation");
        if (!rest_rows.empty()) rest_rows.erase(rest_rows.begin());
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.total += profit(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(out.col_of_row[i]));
    }
    return out;
}

// Row k of the result is row of `conf` whose Hungarian match is class k, i.e.
// predictions are relabeled so matched clusters land on the diagonal.
inline ConfusionMatrix remap_rows(const ConfusionMatrix& conf, const std::vector<std::size_t>& class_of_cluster) {
    if (class_of_cluster.size() != conf.n) throw ShapeError("remap_rows: permutation size mismatch");
    ConfusionMatrix out(conf.n);
    for (std::size_t p = 0; p < conf.n; ++p) {
        for (std::size_t g = 0; g < conf.n; ++g) out.at(class_of_cluster[p], g) += conf.at(p, g);
    }
    return out;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_METRICS_HPP
