#ifndef CORRDISTILL_NUMERICS_HPP
#define CORRDISTILL_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "corrdistill/error.hpp"

namespace corrdistill {

// Dense row-major real64 matrix. Stored features are 32-bit, everything is
// computed in 64-bit.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kNormEps = 1e-12;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Entry (n, m) = <A_n, B_m> / (max(|A_n|, eps) * max(|B_m|, eps)), clamped to [-1, 1].
inline Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b, double eps = kNormEps) {
    if (a.cols() != b.cols()) {
        throw DimensionError("cosine_similarity_matrix: feature dims differ (" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
    }
    if (a.cols() < 1) throw DimensionError("cosine_similarity_matrix: D must be >= 1");
    if (!(eps > 0.0)) throw ContractError("cosine_similarity_matrix: eps must be positive");
    Vector inv_a = a.rowwise().norm().cwiseMax(eps).cwiseInverse();
    Vector inv_b = b.rowwise().norm().cwiseMax(eps).cwiseInverse();
    Matrix out = inv_a.asDiagonal() * (a * b.transpose()) * inv_b.asDiagonal();
    return out.cwiseMax(-1.0).cwiseMin(1.0);
}

struct NormalizedRows {
    Matrix rows;
    // true where the input row had norm < eps and was zeroed
    std::vector<bool> degenerate;
    Vector norms;
};

inline NormalizedRows l2_normalize_rows(const Matrix& x, double eps = kNormEps) {
    NormalizedRows out{Matrix(x.rows(), x.cols()), std::vector<bool>(static_cast<std::size_t>(x.rows()), false),
                       x.rowwise().norm()};
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double n = out.norms(r);
        if (n < eps) {
            out.rows.row(r).setZero();
            out.degenerate[static_cast<std::size_t>(r)] = true;
        } else {
            out.rows.row(r) = x.row(r) / n;
        }
    }
    return out;
}

struct EigenDecomposition {
    Vector values;   // descending
    Matrix vectors;  // column k pairs with values(k)
};

// Symmetric eigendecomposition. Eigenvalues descending; each eigenvector is
// signed so that its largest-magnitude component is positive.
inline EigenDecomposition sym_eig(const Matrix& s) {
    if (s.rows() != s.cols()) throw ShapeError("sym_eig: matrix is not square");
    const Eigen::Index d = s.rows();
    if (d == 0) return {Vector(0), Matrix(0, 0)};
    if (!s.allFinite()) throw NumericError("sym_eig: non-finite input");
    const double scale = s.cwiseAbs().maxCoeff();
    const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-9 * scale) {
        throw ContractError("sym_eig: input is not symmetric (max |S - S^T| = " + std::to_string(asym) + ")");
    }
    Eigen::MatrixXd sym = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym, Eigen::ComputeEigenvectors);
    if (solver.info() != Eigen::Success) throw NumericError("sym_eig: eigensolver did not converge");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
    for (Eigen::Index i = 0; i < d; ++i) order[static_cast<std::size_t>(i)] = i;
    const auto& ev = solver.eigenvalues();
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index l, Eigen::Index r) { return ev(l) > ev(r); });

    EigenDecomposition out{Vector(d), Matrix(d, d)};
    for (Eigen::Index k = 0; k < d; ++k) {
        const Eigen::Index src = order[static_cast<std::size_t>(k)];
        out.values(k) = ev(src);
        Vector col = solver.eigenvectors().col(src);
        Eigen::Index arg = 0;
        col.cwiseAbs().maxCoeff(&arg);
        if (col(arg) < 0) col = -col;
        out.vectors.col(k) = col;
    }
    return out;
}

// Modified Gram-Schmidt with one re-orthogonalization pass. A column whose
// residual falls below 1e-12 of its original norm is treated as dependent.
inline Matrix orthonormalize_columns(const Matrix& m) {
    if (m.cols() > m.rows()) {
        throw DimensionError("orthonormalize_columns: more columns (" + std::to_string(m.cols()) +
                             ") than rows (" + std::to_string(m.rows()) + ")");
    }
    Matrix q = m;
    for (Eigen::Index k = 0; k < q.cols(); ++k) {
        const double original = q.col(k).norm();
        for (int pass = 0; pass < 2; ++pass) {
            for (Eigen::Index j = 0; j < k; ++j) {
                q.col(k) -= q.col(j).dot(q.col(k)) * q.col(j);
            }
        }
        const double residual = q.col(k).norm();
        if (!(original > 0.0) || residual < 1e-12 * original) {
            throw RankError("orthonormalize_columns: column " + std::to_string(k) + " is linearly dependent");
        }
        q.col(k) /= residual;
    }
    return q;
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long long t = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState zeros(std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8) {
        AdamState s;
        s.m.assign(size, 0.0);
        s.v.assign(size, 0.0);
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        return s;
    }
};

// One bias-corrected Adam update, in place. Gradients are checked before
// anything is mutated.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      std::string_view block = "params") {
    if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: shape mismatch in block '" + std::string(block) + "'");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw NumericError("adam_step: non-finite gradient in block '" + std::string(block) + "' at index " +
                               std::to_string(i));
        }
    }
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

inline std::span<double> as_span(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> as_span(const Matrix& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> as_span(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace corrdistill

#endif  // CORRDISTILL_NUMERICS_HPP
