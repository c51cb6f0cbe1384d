#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "corrdistill/numerics.hpp"
#include "test_util.hpp"

using namespace corrdistill;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : rows) {
        Eigen::Index c = 0;
        for (double v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

}  // namespace

TEST(Cosine, OrthogonalIdenticalAndArithmetic) {
    EXPECT_DOUBLE_EQ(cosine_similarity_matrix(mat({{1, 0}}), mat({{0, 1}}))(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(cosine_similarity_matrix(mat({{1, 1}}), mat({{1, 1}}))(0, 0), 1.0);
    EXPECT_NEAR(cosine_similarity_matrix(mat({{3, 4}}), mat({{4, 3}}))(0, 0), 24.0 / 25.0, 1e-15);
}

TEST(Cosine, DimensionMismatchThrows) {
    EXPECT_THROW(cosine_similarity_matrix(mat({{1, 0}}), mat({{1, 0, 0}})), DimensionError);
}

TEST(Cosine, ZeroRowGivesZeroSimilarity) {
    const Matrix c = cosine_similarity_matrix(mat({{0, 0}, {1, 0}}), mat({{1, 0}}));
    EXPECT_EQ(c(0, 0), 0.0);
    EXPECT_EQ(c(1, 0), 1.0);
}

TEST(Cosine, UnitDiagonalAndClamped) {
    std::mt19937_64 rng(3);
    const Matrix a = testutil::gaussian(40, 9, rng);
    const Matrix c = cosine_similarity_matrix(a, a);
    for (Eigen::Index i = 0; i < c.rows(); ++i) EXPECT_NEAR(c(i, i), 1.0, 1e-14);
    EXPECT_LE(c.maxCoeff(), 1.0);
    EXPECT_GE(c.minCoeff(), -1.0);
}

TEST(Cosine, InvariantToPositiveRowScaling) {
    std::mt19937_64 rng(4);
    const Matrix a = testutil::gaussian(12, 5, rng);
    const Matrix b = testutil::gaussian(7, 5, rng);
    std::uniform_real_distribution<double> s(0.1, 10.0);
    Vector sa(12), sb(7);
    for (auto& v : sa) v = s(rng);
    for (auto& v : sb) v = s(rng);
    const Matrix as = sa.asDiagonal() * a;
    const Matrix bs = sb.asDiagonal() * b;
    EXPECT_LT((cosine_similarity_matrix(a, b) - cosine_similarity_matrix(as, bs)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Normalize, Examples) {
    auto n = l2_normalize_rows(mat({{3, 4}, {1, 0}, {0, 0}}));
    EXPECT_NEAR(n.rows(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(n.rows(0, 1), 0.8, 1e-15);
    EXPECT_EQ(n.rows(1, 0), 1.0);
    EXPECT_EQ(n.rows(1, 1), 0.0);
    EXPECT_EQ(n.rows.row(2).norm(), 0.0);
    EXPECT_FALSE(n.degenerate[0]);
    EXPECT_FALSE(n.degenerate[1]);
    EXPECT_TRUE(n.degenerate[2]);
}

TEST(SymEig, Identity) {
    const auto e = sym_eig(Matrix::Identity(3, 3));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(e.values(i), 1.0, 1e-14);
}

TEST(SymEig, Diagonal) {
    const auto e = sym_eig(mat({{3, 0}, {0, 1}}));
    EXPECT_NEAR(e.values(0), 3.0, 1e-14);
    EXPECT_NEAR(e.values(1), 1.0, 1e-14);
    EXPECT_NEAR(e.vectors(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(e.vectors(1, 1), 1.0, 1e-14);
}

TEST(SymEig, TwoByTwoCharacteristicPolynomial) {
    const auto e = sym_eig(mat({{2, 1}, {1, 2}}));
    EXPECT_NEAR(e.values(0), 3.0, 1e-13);
    EXPECT_NEAR(e.values(1), 1.0, 1e-13);
    const double r = 1.0 / std::sqrt(2.0);
    // Largest-magnitude component positive; ties resolve to the first.
    EXPECT_NEAR(std::abs(e.vectors(0, 0)), r, 1e-13);
    EXPECT_NEAR(e.vectors(0, 0) * e.vectors(1, 0), 0.5, 1e-13);
    EXPECT_NEAR(e.vectors(0, 1) * e.vectors(1, 1), -0.5, 1e-13);
}

TEST(SymEig, ContractOnRandomSymmetric) {
    std::mt19937_64 rng(5);
    const Matrix g = testutil::gaussian(30, 30, rng);
    const Matrix s = (g + g.transpose()) / 2.0;
    const auto e = sym_eig(s);
    const double scale = e.values.cwiseAbs().maxCoeff();
    for (Eigen::Index k = 0; k < 30; ++k) {
        const Vector v = e.vectors.col(k);
        EXPECT_LT((s * v - e.values(k) * v).cwiseAbs().maxCoeff(), 1e-8 * scale);
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(v(arg), 0.0);
        if (k > 0) {
            EXPECT_GE(e.values(k - 1), e.values(k));
        }
    }
    EXPECT_LT((e.vectors.transpose() * e.vectors - Matrix::Identity(30, 30)).cwiseAbs().maxCoeff(), 1e-8);
    const Matrix rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    EXPECT_LT((rec - s).cwiseAbs().maxCoeff(), 1e-7 * s.cwiseAbs().maxCoeff());
}

TEST(SymEig, AsymmetricThrows) {
    EXPECT_THROW(sym_eig(mat({{1, 2}, {0, 1}})), ContractError);
}

TEST(Orthonormalize, IdentityUnchanged) {
    const Matrix q = orthonormalize_columns(Matrix::Identity(4, 3));
    EXPECT_LT((q - Matrix::Identity(4, 3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Orthonormalize, DuplicateColumnsRankError) {
    EXPECT_THROW(orthonormalize_columns(mat({{1, 1}, {2, 2}, {3, 3}})), RankError);
}

TEST(Orthonormalize, TooManyColumnsThrows) {
    EXPECT_THROW(orthonormalize_columns(Matrix::Ones(2, 3)), DimensionError);
}

TEST(Orthonormalize, Gaussian768x64) {
    std::mt19937_64 rng(6);
    const Matrix m = testutil::gaussian(768, 64, rng);
    const Matrix q = orthonormalize_columns(m);
    EXPECT_LT((q.transpose() * q - Matrix::Identity(64, 64)).cwiseAbs().maxCoeff(), 1e-10);
    // Same span: projecting the input onto span(Q) reproduces it.
    EXPECT_LT((q * (q.transpose() * m) - m).cwiseAbs().maxCoeff(), 1e-9 * m.cwiseAbs().maxCoeff());
}

TEST(Adam, ZeroGradientAndZeroLr) {
    std::vector<double> p{1.0, -2.0, 3.0};
    const std::vector<double> zero(3, 0.0), g{0.1, 0.2, -0.3};
    auto s = AdamState::zeros(3, 0.01);
    adam_step(p, zero, s);
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
    EXPECT_EQ(s.t, 1);
    auto s0 = AdamState::zeros(3, 0.0);
    adam_step(p, g, s0);
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepClosedForm) {
    std::vector<double> p{0.0};
    const std::vector<double> g{0.5};
    auto s = AdamState::zeros(1, 0.01);
    adam_step(p, g, s);
    EXPECT_NEAR(p[0], -0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
}

TEST(Adam, MatchesReferenceOverSeveralSteps) {
    std::vector<double> p{0.3, -0.7};
    auto s = AdamState::zeros(2, 0.05, 0.8, 0.99, 1e-6);
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {0.3, -0.7};
    for (int t = 1; t <= 5; ++t) {
        const std::vector<double> g{std::sin(t), std::cos(3.0 * t)};
        adam_step(p, g, s);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.8 * m[i] + 0.2 * g[i];
            v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.8, t)), vh = v[i] / (1 - std::pow(0.99, t));
            ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-6);
        }
    }
    EXPECT_NEAR(p[0], ref[0], 1e-14);
    EXPECT_NEAR(p[1], ref[1], 1e-14);
    for (double x : s.v) EXPECT_GE(x, 0.0);
}

TEST(Adam, NonFiniteGradientNamesBlock) {
    std::vector<double> p{1.0};
    const std::vector<double> g{std::nan("")};
    auto s = AdamState::zeros(1, 0.1);
    try {
        adam_step(p, g, s, "W1");
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("W1"), std::string::npos);
    }
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(s.t, 0);
}

TEST(Adam, Deterministic) {
    std::mt19937_64 rng(9);
    const Matrix g = testutil::gaussian(1, 50, rng);
    std::vector<double> a(50, 0.5), b(50, 0.5);
    auto sa = AdamState::zeros(50, 0.01), sb = AdamState::zeros(50, 0.01);
    for (int i = 0; i < 3; ++i) {
        adam_step(a, as_span(g), sa);
        adam_step(b, as_span(g), sb);
    }
    EXPECT_EQ(a, b);
}

TEST(Adam, ShapeMismatchThrows) {
    std::vector<double> p(2, 0.0);
    const std::vector<double> g(3, 0.0);
    auto s = AdamState::zeros(2, 0.1);
    EXPECT_THROW(adam_step(p, g, s), ShapeError);
}
