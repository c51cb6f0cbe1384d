#ifndef CORRDISTILL_DIMRED_HPP
#define CORRDISTILL_DIMRED_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "corrdistill/binary_io.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/feature_store.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
    Vector mean;                      // D_in
    Matrix components;                // D_in x D_out, orthonormal columns
    Vector eigenvalues;               // D_in, descending
    Vector explained_variance_ratio;  // D_in, sums to 1

    Eigen::Index in_dim() const { return components.rows(); }
    Eigen::Index out_dim() const { return components.cols(); }
};

inline PcaModel pca_fit(const Matrix& tokens, Eigen::Index d_out) {
    const Eigen::Index n = tokens.rows();
    const Eigen::Index d_in = tokens.cols();
    if (n < 2) throw SizeError("pca_fit: need at least 2 tokens");
    if (d_out < 1 || d_out > d_in) {
        throw DimensionError("pca_fit: D_out " + std::to_string(d_out) + " not in [1, " + std::to_string(d_in) + "]");
    }
    PcaModel m;
    m.mean = tokens.colwise().mean().transpose();
    // Second pass over centered data.
    const Matrix centered = tokens.rowwise() - m.mean.transpose();
    Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    cov = 0.5 * (cov + cov.transpose()).eval();

    const double scale = std::max(1.0, tokens.rowwise().squaredNorm().mean());
    if (!(cov.trace() > 1e-12 * scale)) throw DegenerateError("pca_fit: data has zero variance");

    auto eig = sym_eig(cov);
    m.eigenvalues = eig.values;
    Vector clipped = eig.values.cwiseMax(0.0);
    m.explained_variance_ratio = clipped / clipped.sum();
    m.components = eig.vectors.leftCols(d_out);
    return m;
}

inline Matrix pca_transform(const Matrix& tokens, const PcaModel& m) {
    if (tokens.cols() != m.in_dim()) {
        throw DimensionError("pca_transform: token dim " + std::to_string(tokens.cols()) + " != " +
                             std::to_string(m.in_dim()));
    }
    return (tokens.rowwise() - m.mean.transpose()) * m.components;
}

struct PcaSampling {
    std::size_t max_images = 5000;
    std::size_t max_tokens = 3000000;
};

// Uniformly samples images up to the image cap, takes all of their tokens,
// then uniformly subsamples tokens down to the token cap.
inline Matrix sample_pca_tokens(std::span<const Sample> images, const PcaSampling& caps, std::uint64_t seed) {
    if (images.empty()) throw SizeError("sample_pca_tokens: no images");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> pick(images.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    if (pick.size() > caps.max_images) {
        std::shuffle(pick.begin(), pick.end(), rng);
        pick.resize(caps.max_images);
        std::sort(pick.begin(), pick.end());
    }
    std::size_t total = 0;
    const auto dim = images[pick.front()].features.dim;
    for (std::size_t i : pick) {
        if (images[i].features.dim != dim) throw DimensionError("sample_pca_tokens: feature dims differ");
        total += images[i].features.tokens();
    }
    std::vector<std::size_t> rows(total);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    if (total > caps.max_tokens) {
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(caps.max_tokens);
        std::sort(rows.begin(), rows.end());
    }
    Matrix out(static_cast<Eigen::Index>(rows.size()), dim);
    std::size_t base = 0, next = 0;
    for (std::size_t i : pick) {
        const auto& f = images[i].features;
        const std::size_t count = f.tokens();
        while (next < rows.size() && rows[next] < base + count) {
            const std::size_t t = rows[next] - base;
            for (std::uint32_t k = 0; k < dim; ++k) {
                out(static_cast<Eigen::Index>(next), k) = static_cast<double>(f.data[t * dim + k]);
            }
            ++next;
        }
        base += count;
    }
    return out;
}

// Rows: component_index, ratio, cumulative_ratio (1-based index).
inline void write_variance_csv(const fs::path& path, const PcaModel& m) {
    auto os = binio::open_out(path);
    os << "component_index,ratio,cumulative_ratio\n";
    double cum = 0.0;
    char buf[96];
    for (Eigen::Index k = 0; k < m.explained_variance_ratio.size(); ++k) {
        cum += m.explained_variance_ratio(k);
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(k + 1),
                      m.explained_variance_ratio(k), cum);
        os << buf;
    }
    binio::finish(os, path);
}

// ---------------------------------------------------------------------------
// Gaussian random projection with orthonormal columns (no rescaling)

struct RpModel {
    Matrix matrix;  // D_in x D_out
    std::uint64_t seed = 0;
    bool rescaled = false;

    Eigen::Index in_dim() const { return matrix.rows(); }
    Eigen::Index out_dim() const { return matrix.cols(); }
};

inline RpModel rp_fit(Eigen::Index d_in, Eigen::Index d_out, std::uint64_t seed) {
    if (d_out < 1 || d_in < 1 || d_out > d_in) {
        throw DimensionError("rp_fit: need 1 <= D_out <= D_in, got D_in=" + std::to_string(d_in) +
                             " D_out=" + std::to_string(d_out));
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix g(d_in, d_out);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    return {orthonormalize_columns(g), seed, false};
}

inline Matrix rp_transform(const Matrix& tokens, const RpModel& m) {
    if (tokens.cols() != m.in_dim()) {
        throw DimensionError("rp_transform: token dim " + std::to_string(tokens.cols()) + " != " +
                             std::to_string(m.in_dim()));
    }
    return tokens * m.matrix;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kDimredFileVersion = 1;

// "CDPC", version, D_in, D_out, mean, components, eigenvalues, ratios.
inline void write_pca(const fs::path& path, const PcaModel& m) {
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDPC", kDimredFileVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.in_dim()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.out_dim()));
    binio::write_le_array<double>(os, as_span(m.mean));
    binio::write_le_array<double>(os, as_span(m.components));
    binio::write_le_array<double>(os, as_span(m.eigenvalues));
    binio::write_le_array<double>(os, as_span(m.explained_variance_ratio));
    binio::finish(os, path);
}

inline PcaModel read_pca(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "PCA model '" + path.string() + "'";
    binio::expect_magic(is, "CDPC", kDimredFileVersion, what);
    const auto d_in = binio::read_le<std::uint32_t>(is, what);
    const auto d_out = binio::read_le<std::uint32_t>(is, what);
    if (d_in == 0 || d_out == 0 || d_out > d_in) throw FormatError(FormatErrorKind::invalid_header, what);
    PcaModel m{Vector(d_in), Matrix(d_in, d_out), Vector(d_in), Vector(d_in)};
    binio::read_le_array<double>(is, as_span(m.mean), what);
    binio::read_le_array<double>(is, as_span(m.components), what);
    binio::read_le_array<double>(is, as_span(m.eigenvalues), what);
    binio::read_le_array<double>(is, as_span(m.explained_variance_ratio), what);
    return m;
}

// "CDRP", version, D_in, D_out, seed (u64), rescaled flag (u32), matrix.
inline void write_rp(const fs::path& path, const RpModel& m) {
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDRP", kDimredFileVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.in_dim()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.out_dim()));
    binio::write_le<std::uint64_t>(os, m.seed);
    binio::write_le<std::uint32_t>(os, m.rescaled ? 1u : 0u);
    binio::write_le_array<double>(os, as_span(m.matrix));
    binio::finish(os, path);
}

inline RpModel read_rp(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "RP model '" + path.string() + "'";
    binio::expect_magic(is, "CDRP", kDimredFileVersion, what);
    const auto d_in = binio::read_le<std::uint32_t>(is, what);
    const auto d_out = binio::read_le<std::uint32_t>(is, what);
    if (d_in == 0 || d_out == 0 || d_out > d_in) throw FormatError(FormatErrorKind::invalid_header, what);
    RpModel m;
    m.seed = binio::read_le<std::uint64_t>(is, what);
    m.rescaled = binio::read_le<std::uint32_t>(is, what) != 0;
    m.matrix.resize(d_in, d_out);
    binio::read_le_array<double>(is, as_span(m.matrix), what);
    return m;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_DIMRED_HPP
