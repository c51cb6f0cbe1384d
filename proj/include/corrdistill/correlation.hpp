#ifndef CORRDISTILL_CORRELATION_HPP
#define CORRDISTILL_CORRELATION_HPP

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "corrdistill/error.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

// All-pairs cosine similarities between two token grids, stored as a
// (h*w) x (h'*w') matrix. Index (h, w, i, j) lives at row h*w_a + w, column i*w_b + j.
struct CorrespondenceTensor {
    std::uint32_t h = 0, w = 0, h2 = 0, w2 = 0;
    Matrix values;

    double operator()(std::uint32_t a, std::uint32_t b, std::uint32_t i, std::uint32_t j) const {
        return values(static_cast<Eigen::Index>(a) * w + b, static_cast<Eigen::Index>(i) * w2 + j);
    }
};

struct PairLossConfig {
    double b_self = 0.0;
    double b_knn = 0.0;
    double b_rand = 0.0;
    double lambda_self = 0.0;
    double lambda_knn = 0.0;
    double lambda_rand = 0.0;
    bool zero_clamp = false;
    bool pointwise_center = false;
    int feature_samples = 11;
    int negative_samples = 5;

    void validate() const {
        if (lambda_self < 0 || lambda_knn < 0 || lambda_rand < 0) {
            throw ContractError("PairLossConfig: loss weights must be non-negative");
        }
        if (feature_samples < 1) throw ContractError("PairLossConfig: feature_samples must be >= 1");
        if (negative_samples < 1) throw ContractError("PairLossConfig: negative_samples must be >= 1");
    }
};

// Cosine correspondences; tokens with norm below eps contribute similarity 0.
inline Matrix token_correlation(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("correspondence_tensor: feature dims differ (" + std::to_string(a.cols()) + " vs " +
                             std::to_string(b.cols()) + ")");
    }
    const auto na = l2_normalize_rows(a);
    const auto nb = l2_normalize_rows(b);
    Matrix c = na.rows * nb.rows.transpose();
    return c.cwiseMax(-1.0).cwiseMin(1.0);
}

inline CorrespondenceTensor correspondence_tensor(const Matrix& f, std::uint32_t h, std::uint32_t w,
                                                  const Matrix& f2, std::uint32_t h2, std::uint32_t w2) {
    if (static_cast<std::size_t>(f.rows()) != static_cast<std::size_t>(h) * w ||
        static_cast<std::size_t>(f2.rows()) != static_cast<std::size_t>(h2) * w2) {
        throw ShapeError("correspondence_tensor: token count does not match grid");
    }
    return {h, w, h2, w2, token_correlation(f, f2)};
}

// For each anchor location subtract the mean over partner locations, then
// restore the global mean.
inline Matrix spatial_center(const Matrix& c, bool pointwise = true) {
    if (!pointwise || c.size() == 0) return c;
    const double global = c.mean();
    Matrix out = c;
    out.colwise() -= c.rowwise().mean();
    out.array() += global;
    return out;
}

inline CorrespondenceTensor spatial_center(const CorrespondenceTensor& c, bool pointwise = true) {
    return {c.h, c.w, c.h2, c.w2, spatial_center(c.values, pointwise)};
}

struct CorrLoss {
    double loss = 0.0;
    Matrix grad;  // dLoss / dC_stego
};

// loss = -mean_{hwij} (C_vit - b) * g(C_stego), g = max(., 0) when clamped.
inline CorrLoss corr_loss(const Matrix& c_vit, const Matrix& c_stego, double b, bool zero_clamp) {
    if (c_vit.rows() != c_stego.rows() || c_vit.cols() != c_stego.cols()) {
        throw ShapeError("corr_loss: correspondence tensors differ in shape");
    }
    const double n = static_cast<double>(c_vit.size());
    if (n == 0) return {0.0, Matrix::Zero(c_vit.rows(), c_vit.cols())};
    CorrLoss out;
    Matrix pressure = (c_vit.array() - b).matrix();
    if (zero_clamp) {
        Matrix active = (c_stego.array() > 0.0).cast<double>().matrix();
        out.loss = -(pressure.cwiseProduct(c_stego.cwiseMax(0.0))).sum() / n;
        out.grad = -pressure.cwiseProduct(active) / n;
    } else {
        out.loss = -(pressure.cwiseProduct(c_stego)).sum() / n;
        out.grad = -pressure / n;
    }
    return out;
}

inline CorrLoss corr_loss(const CorrespondenceTensor& c_vit, const CorrespondenceTensor& c_stego, double b,
                          bool zero_clamp) {
    return corr_loss(c_vit.values, c_stego.values, b, zero_clamp);
}

struct TokenCoord {
    std::uint32_t row;
    std::uint32_t col;
    bool operator==(const TokenCoord&) const = default;
};

// S*S coordinates drawn uniformly with replacement; read as an S x S grid.
template <typename Rng>
std::vector<TokenCoord> sample_coords(std::uint32_t h, std::uint32_t w, int samples, Rng& rng) {
    if (samples < 1) throw ContractError("sample_coords: S must be >= 1");
    if (h == 0 || w == 0) throw ShapeError("sample_coords: empty grid");
    std::uniform_int_distribution<std::uint32_t> rows(0, h - 1);
    std::uniform_int_distribution<std::uint32_t> cols(0, w - 1);
    std::vector<TokenCoord> out(static_cast<std::size_t>(samples) * static_cast<std::size_t>(samples));
    for (auto& c : out) {
        c.row = rows(rng);
        c.col = cols(rng);
    }
    return out;
}

// Nearest-token lookup of sampled coordinates from an (h*w) x D token matrix.
inline Matrix gather_tokens(const Matrix& tokens, std::uint32_t w, std::span<const TokenCoord> coords) {
    Matrix out(static_cast<Eigen::Index>(coords.size()), tokens.cols());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) =
            tokens.row(static_cast<Eigen::Index>(coords[i].row) * w + coords[i].col);
    }
    return out;
}

// Raw backbone tokens and the matching head outputs for one sampled set.
struct TokenSet {
    const Matrix* raw = nullptr;
    const Matrix* out = nullptr;
};

struct PairLoss {
    double loss = 0.0;
    Matrix grad_a;  // dLoss / d out_a
    Matrix grad_b;  // dLoss / d out_b
};

namespace detail {

// Gradient of a loss through row normalization: dL/dx_i from dL/dx_hat_i.
inline Matrix backprop_row_normalize(const NormalizedRows& n, const Matrix& grad_hat) {
    Matrix g(grad_hat.rows(), grad_hat.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        if (n.degenerate[static_cast<std::size_t>(r)]) {
            g.row(r).setZero();
            continue;
        }
        const double radial = grad_hat.row(r).dot(n.rows.row(r));
        g.row(r) = (grad_hat.row(r) - radial * n.rows.row(r)) / n.norms(r);
    }
    return g;
}

}  // namespace detail

// One correlation term L_corr(x, x', b) on sampled token sets, with gradients
// into both sets of head outputs.
inline PairLoss pair_loss(const TokenSet& a, const TokenSet& b, double shift, const PairLossConfig& cfg) {
    if (!a.raw || !a.out || !b.raw || !b.out) throw ContractError("pair_loss: missing token set");
    if (a.raw->rows() != a.out->rows() || b.raw->rows() != b.out->rows()) {
        throw ShapeError("pair_loss: raw/output token counts differ");
    }
    if (a.out->cols() != b.out->cols()) throw DimensionError("pair_loss: head output dims differ");
    const Matrix c_vit = spatial_center(token_correlation(*a.raw, *b.raw), cfg.pointwise_center);
    const auto na = l2_normalize_rows(*a.out);
    const auto nb = l2_normalize_rows(*b.out);
    const Matrix c_stego = (na.rows * nb.rows.transpose()).cwiseMax(-1.0).cwiseMin(1.0);
    const auto cl = corr_loss(c_vit, c_stego, shift, cfg.zero_clamp);
    PairLoss out;
    out.loss = cl.loss;
    out.grad_a = detail::backprop_row_normalize(na, cl.grad * nb.rows);
    out.grad_b = detail::backprop_row_normalize(nb, cl.grad.transpose() * na.rows);
    return out;
}

// Sampled sets for one anchor image: the anchor itself, a second sample of
// the same image, one kNN partner and negative_samples random partners.
struct AnchorPairs {
    TokenSet anchor;
    TokenSet self_partner;
    TokenSet knn;
    std::vector<TokenSet> rand;
};

struct CombinedLoss {
    double loss = 0.0;
    double self_term = 0.0;
    double knn_term = 0.0;
    double rand_term = 0.0;  // mean over random partners, before weighting
    Matrix grad_anchor;
    Matrix grad_self;
    Matrix grad_knn;
    std::vector<Matrix> grad_rand;
};

// Weighted sum of the three pair terms; rand_mean is already averaged over partners.
inline double combine_terms(double self_term, double knn_term, double rand_mean, const PairLossConfig& cfg) {
    return cfg.lambda_self * self_term + cfg.lambda_knn * knn_term + cfg.lambda_rand * rand_mean;
}

inline CombinedLoss combined_loss(const AnchorPairs& p, const PairLossConfig& cfg) {
    cfg.validate();
    if (!p.anchor.out || !p.self_partner.out || !p.knn.out) throw ContractError("combined_loss: missing partner set");
    if (p.rand.size() != static_cast<std::size_t>(cfg.negative_samples)) {
        throw ContractError("combined_loss: expected " + std::to_string(cfg.negative_samples) +
                            " random partners, got " + std::to_string(p.rand.size()));
    }
    CombinedLoss out;
    out.grad_anchor = Matrix::Zero(p.anchor.out->rows(), p.anchor.out->cols());

    const auto self = pair_loss(p.anchor, p.self_partner, cfg.b_self, cfg);
    out.self_term = self.loss;
    out.grad_anchor += cfg.lambda_self * self.grad_a;
    out.grad_self = cfg.lambda_self * self.grad_b;

    const auto knn = pair_loss(p.anchor, p.knn, cfg.b_knn, cfg);
    out.knn_term = knn.loss;
    out.grad_anchor += cfg.lambda_knn * knn.grad_a;
    out.grad_knn = cfg.lambda_knn * knn.grad_b;

    const double rand_weight = cfg.lambda_rand / static_cast<double>(p.rand.size());
    for (const auto& partner : p.rand) {
        const auto r = pair_loss(p.anchor, partner, cfg.b_rand, cfg);
        out.rand_term += r.loss;
        out.grad_anchor += rand_weight * r.grad_a;
        out.grad_rand.push_back(rand_weight * r.grad_b);
    }
    out.rand_term /= static_cast<double>(p.rand.size());

    out.loss = combine_terms(out.self_term, out.knn_term, out.rand_term, cfg);
    return out;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_CORRELATION_HPP
