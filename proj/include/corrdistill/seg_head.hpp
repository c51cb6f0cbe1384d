#ifndef CORRDISTILL_SEG_HEAD_HPP
#define CORRDISTILL_SEG_HEAD_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corrdistill/binary_io.hpp"
#include "corrdistill/correlation.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/feature_store.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

// Per-token projection D_vit -> D_stego: a linear skip branch plus a
// two-layer ReLU branch, summed.
//   out = (W0 t + b0) + (W2 relu(W1 t + b1) + b2)
struct HeadParams {
    Matrix w0;  // D_stego x D_vit
    Vector b0;  // D_stego
    Matrix w1;  // D_vit x D_vit
    Vector b1;  // D_vit
    Matrix w2;  // D_stego x D_vit
    Vector b2;  // D_stego
    double dropout_p = 0.0;

    Eigen::Index in_dim() const { return w1.cols(); }
    Eigen::Index out_dim() const { return w0.rows(); }

    static HeadParams zeros(Eigen::Index d_vit, Eigen::Index d_stego, double dropout_p = 0.0) {
        return {Matrix::Zero(d_stego, d_vit), Vector::Zero(d_stego), Matrix::Zero(d_vit, d_vit),
                Vector::Zero(d_vit),          Matrix::Zero(d_stego, d_vit), Vector::Zero(d_stego),
                dropout_p};
    }

    // Weights uniform in +-1/sqrt(fan_in), biases zero.
    template <typename Rng>
    static HeadParams init(Eigen::Index d_vit, Eigen::Index d_stego, double dropout_p, Rng& rng) {
        if (d_vit < 1 || d_stego < 1) throw DimensionError("HeadParams::init: dims must be >= 1");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ContractError("HeadParams: dropout_p must be in [0, 1)");
        HeadParams p = zeros(d_vit, d_stego, dropout_p);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_vit));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Matrix* m : {&p.w0, &p.w1, &p.w2}) {
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
        }
        return p;
    }

    void validate() const {
        const auto dv = w1.cols();
        const auto ds = w0.rows();
        if (w1.rows() != dv || w0.cols() != dv || w2.cols() != dv || w2.rows() != ds || b0.size() != ds ||
            b1.size() != dv || b2.size() != ds) {
            throw ShapeError("HeadParams: inconsistent parameter shapes");
        }
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ContractError("HeadParams: dropout_p must be in [0, 1)");
    }

    bool operator==(const HeadParams& o) const {
        return dropout_p == o.dropout_p && w0 == o.w0 && b0 == o.b0 && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 &&
               b2 == o.b2;
    }
};

// Gradient blocks, same layout as HeadParams.
struct HeadGrads {
    Matrix w0;
    Vector b0;
    Matrix w1;
    Vector b1;
    Matrix w2;
    Vector b2;

    static HeadGrads zeros_like(const HeadParams& p) {
        return {Matrix::Zero(p.w0.rows(), p.w0.cols()), Vector::Zero(p.b0.size()),
                Matrix::Zero(p.w1.rows(), p.w1.cols()), Vector::Zero(p.b1.size()),
                Matrix::Zero(p.w2.rows(), p.w2.cols()), Vector::Zero(p.b2.size())};
    }

    HeadGrads& operator+=(const HeadGrads& o) {
        w0 += o.w0;
        b0 += o.b0;
        w1 += o.w1;
        b1 += o.b1;
        w2 += o.w2;
        b2 += o.b2;
        return *this;
    }
};

inline constexpr std::array<std::string_view, 6> kHeadBlockNames{"W0", "b0", "W1", "b1", "W2", "b2"};

inline std::array<std::span<double>, 6> blocks(HeadParams& p) {
    return {as_span(p.w0), as_span(p.b0), as_span(p.w1), as_span(p.b1), as_span(p.w2), as_span(p.b2)};
}
inline std::array<std::span<const double>, 6> blocks(const HeadGrads& g) {
    return {as_span(g.w0), as_span(g.b0), as_span(g.w1), as_span(g.b1), as_span(g.w2), as_span(g.b2)};
}

enum class Mode { train, eval };

struct HeadCache {
    Matrix input;   // tokens after dropout
    Matrix hidden;  // W1 t + b1, pre-activation
    std::optional<Matrix> mask;  // inverted-dropout scale per input element
};

struct HeadOutput {
    Matrix out;
    HeadCache cache;
};

// Inverted dropout mask: kept entries are 1/(1-p), dropped entries 0.
template <typename Rng>
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    std::bernoulli_distribution keep(1.0 - p);
    const double scale = 1.0 / (1.0 - p);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : 0.0;
    return m;
}

// Forward with an explicit (optional) dropout mask.
inline HeadOutput head_forward_masked(const HeadParams& p, const Matrix& tokens, const Matrix* mask) {
    if (tokens.cols() != p.in_dim()) {
        throw DimensionError("head_forward: token dim " + std::to_string(tokens.cols()) + " != D_vit " +
                             std::to_string(p.in_dim()));
    }
    HeadOutput r;
    if (mask) {
        if (mask->rows() != tokens.rows() || mask->cols() != tokens.cols()) {
            throw ShapeError("head_forward: dropout mask shape mismatch");
        }
        r.cache.mask = *mask;
        r.cache.input = tokens.cwiseProduct(*mask);
    } else {
        r.cache.input = tokens;
    }
    r.cache.hidden = (r.cache.input * p.w1.transpose()).rowwise() + p.b1.transpose();
    const Matrix act = r.cache.hidden.cwiseMax(0.0);
    r.out = (r.cache.input * p.w0.transpose() + act * p.w2.transpose()).rowwise() + (p.b0 + p.b2).transpose();
    return r;
}

template <typename Rng>
HeadOutput head_forward(const HeadParams& p, const Matrix& tokens, Mode mode, Rng& rng) {
    if (mode == Mode::train && p.dropout_p > 0.0) {
        const Matrix mask = dropout_mask(tokens.rows(), tokens.cols(), p.dropout_p, rng);
        return head_forward_masked(p, tokens, &mask);
    }
    return head_forward_masked(p, tokens, nullptr);
}

// Deterministic inference pass.
inline Matrix head_apply(const HeadParams& p, const Matrix& tokens) {
    return head_forward_masked(p, tokens, nullptr).out;
}

struct HeadBackward {
    HeadGrads params;
    Matrix tokens;  // dLoss / d tokens (before dropout); empty unless requested
};

inline HeadBackward head_backward(const HeadParams& p, const HeadCache& cache, const Matrix& upstream,
                                  bool want_token_grad = false) {
    if (cache.input.size() == 0 || cache.hidden.rows() != cache.input.rows()) {
        throw ContractError("head_backward: missing forward cache");
    }
    if (upstream.rows() != cache.input.rows() || upstream.cols() != p.out_dim()) {
        throw ShapeError("head_backward: upstream gradient shape mismatch");
    }
    HeadBackward r;
    const Matrix act = cache.hidden.cwiseMax(0.0);
    const Vector g_bias = upstream.colwise().sum().transpose();
    r.params.w0 = upstream.transpose() * cache.input;
    r.params.b0 = g_bias;
    r.params.w2 = upstream.transpose() * act;
    r.params.b2 = g_bias;
    const Matrix d_hidden = (upstream * p.w2).cwiseProduct((cache.hidden.array() > 0.0).cast<double>().matrix());
    r.params.w1 = d_hidden.transpose() * cache.input;
    r.params.b1 = d_hidden.colwise().sum().transpose();
    if (want_token_grad) {
        r.tokens = upstream * p.w0 + d_hidden * p.w1;
        if (cache.mask) r.tokens = r.tokens.cwiseProduct(*cache.mask);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CDHD", version, D_vit, D_stego, W0 b0 W1 b1 W2 b2, dropout_p (all f64 LE).

inline constexpr std::uint32_t kHeadFileVersion = 1;

inline void write_head(const fs::path& path, const HeadParams& p) {
    p.validate();
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDHD", kHeadFileVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.in_dim()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.out_dim()));
    HeadParams copy = p;
    for (auto block : blocks(copy)) binio::write_le_array<double>(os, block);
    binio::write_le<double>(os, p.dropout_p);
    binio::finish(os, path);
}

inline HeadParams read_head(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "head checkpoint '" + path.string() + "'";
    binio::expect_magic(is, "CDHD", kHeadFileVersion, what);
    const auto dv = binio::read_le<std::uint32_t>(is, what);
    const auto ds = binio::read_le<std::uint32_t>(is, what);
    if (dv == 0 || ds == 0) throw FormatError(FormatErrorKind::invalid_header, what + ": zero dimension");
    HeadParams p = HeadParams::zeros(dv, ds);
    for (auto block : blocks(p)) binio::read_le_array<double>(is, block, what);
    p.dropout_p = binio::read_le<double>(is, what);
    for (auto block : blocks(p)) {
        for (double v : block) {
            if (!std::isfinite(v)) throw FormatError(FormatErrorKind::non_finite, what);
        }
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int d_stego = 90;
    int steps = 7000;
    int batch_size = 32;
    double head_lr = 0.0005;
    double dropout_p = 0.1;
    PairLossConfig pairs;
    std::uint64_t seed = 0;
    // Checkpoint selection cadence when a validator is supplied (0 = final step only).
    int select_every = 0;

    void validate() const {
        if (steps < 1) throw ContractError("TrainConfig: steps must be >= 1");
        if (batch_size < 2) throw ContractError("TrainConfig: batch_size must be >= 2");
        if (d_stego < 1) throw ContractError("TrainConfig: D_stego must be >= 1");
        if (!(head_lr >= 0.0)) throw ContractError("TrainConfig: head_lr must be >= 0");
        pairs.validate();
    }
};

// All sampled raw token sets for one optimization step. Random partners of
// anchor i are indices into `second` (the second sample of another anchor).
struct StepBatch {
    std::vector<Matrix> anchor;
    std::vector<Matrix> second;
    std::vector<Matrix> knn;
    std::vector<std::vector<std::size_t>> rand_partners;
    // Optional dropout masks, laid out as [anchor..., second..., knn...].
    std::vector<Matrix> masks;

    std::size_t size() const { return anchor.size(); }
};

struct StepResult {
    double loss = 0.0;  // mean of per-anchor combined losses
    HeadGrads grads;
};

// Full batch loss through the head and its exact gradient.
inline StepResult step_loss(const HeadParams& p, const StepBatch& batch, const PairLossConfig& cfg,
                            bool want_grad = true) {
    const std::size_t n = batch.size();
    if (n == 0 || batch.second.size() != n || batch.knn.size() != n || batch.rand_partners.size() != n) {
        throw ContractError("step_loss: incomplete batch");
    }
    if (!batch.masks.empty() && batch.masks.size() != 3 * n) throw ContractError("step_loss: mask count mismatch");
    const auto mask_of = [&](std::size_t k) -> const Matrix* { return batch.masks.empty() ? nullptr : &batch.masks[k]; };

    std::vector<HeadOutput> fa, fs2, fk;
    fa.reserve(n);
    fs2.reserve(n);
    fk.reserve(n);
    for (std::size_t i = 0; i < n; ++i) fa.push_back(head_forward_masked(p, batch.anchor[i], mask_of(i)));
    for (std::size_t i = 0; i < n; ++i) fs2.push_back(head_forward_masked(p, batch.second[i], mask_of(n + i)));
    for (std::size_t i = 0; i < n; ++i) fk.push_back(head_forward_masked(p, batch.knn[i], mask_of(2 * n + i)));

    std::vector<Matrix> ga(n), gs(n), gk(n);
    for (std::size_t i = 0; i < n; ++i) {
        ga[i] = Matrix::Zero(fa[i].out.rows(), fa[i].out.cols());
        gs[i] = Matrix::Zero(fs2[i].out.rows(), fs2[i].out.cols());
        gk[i] = Matrix::Zero(fk[i].out.rows(), fk[i].out.cols());
    }

    StepResult r;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        AnchorPairs pairs{{&batch.anchor[i], &fa[i].out}, {&batch.second[i], &fs2[i].out}, {&batch.knn[i], &fk[i].out}, {}};
        for (std::size_t j : batch.rand_partners[i]) {
            if (j >= n) throw ContractError("step_loss: random partner index out of range");
            pairs.rand.push_back({&batch.second[j], &fs2[j].out});
        }
        const auto c = combined_loss(pairs, cfg);
        r.loss += c.loss * inv_n;
        if (!want_grad) continue;
        ga[i] += inv_n * c.grad_anchor;
        gs[i] += inv_n * c.grad_self;
        gk[i] += inv_n * c.grad_knn;
        for (std::size_t k = 0; k < batch.rand_partners[i].size(); ++k) {
            gs[batch.rand_partners[i][k]] += inv_n * c.grad_rand[k];
        }
    }
    if (!want_grad) return r;

    r.grads = HeadGrads::zeros_like(p);
    for (std::size_t i = 0; i < n; ++i) r.grads += head_backward(p, fa[i].cache, ga[i]).params;
    for (std::size_t i = 0; i < n; ++i) r.grads += head_backward(p, fs2[i].cache, gs[i]).params;
    for (std::size_t i = 0; i < n; ++i) r.grads += head_backward(p, fk[i].cache, gk[i]).params;
    return r;
}

struct TrainResult {
    HeadParams params;
    std::vector<double> losses;
    int selected_step = 0;
    std::optional<double> selected_score;
};

// Scores a head on held-out data (higher is better); used for checkpoint selection.
using HeadValidator = std::function<double(const HeadParams&)>;

namespace detail {

struct PreparedImage {
    std::uint32_t h = 0, w = 0;
    Matrix tokens;
};

// Draws `count` partner positions from [0, n) avoiding `anchor` and repeats;
// each draw is retried up to 10 times before a collision is accepted.
template <typename Rng>
std::vector<std::size_t> draw_rand_partners(std::size_t anchor, std::size_t n, int count, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> out;
    for (int k = 0; k < count; ++k) {
        std::size_t j = pick(rng);
        for (int retry = 0; retry < 10; ++retry) {
            const bool collides = j == anchor || std::find(out.begin(), out.end(), j) != out.end();
            if (!collides) break;
            j = pick(rng);
        }
        out.push_back(j);
    }
    return out;
}

}  // namespace detail

// Trains the head with Adam on the combined correlation loss. Labels are
// never read. Deterministic given cfg.seed.
inline TrainResult train_head(std::span<const Sample> train, const KnnIndex& knn, const TrainConfig& cfg,
                              const HeadValidator& validator = {}) {
    cfg.validate();
    if (train.empty()) throw SizeError("train_head: empty training split");
    if (static_cast<std::size_t>(cfg.batch_size) > train.size()) {
        throw SizeError("train_head: batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                        std::to_string(train.size()));
    }
    std::map<std::string, std::size_t> by_id;
    std::vector<detail::PreparedImage> images;
    images.reserve(train.size());
    const auto d_vit = train.front().features.dim;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (train[i].features.dim != d_vit) throw DimensionError("train_head: feature dims differ across images");
        by_id[train[i].id] = i;
        images.push_back({train[i].features.height, train[i].features.width, train[i].features.token_matrix()});
    }
    std::vector<std::vector<std::size_t>> neighbors(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        for (const auto& nid : knn.of(train[i].id)) {
            auto it = by_id.find(nid);
            if (it == by_id.end()) throw ContractError("train_head: knn neighbor '" + nid + "' not in train split");
            neighbors[i].push_back(it->second);
        }
        if (neighbors[i].empty()) throw ContractError("train_head: empty neighbor list for '" + train[i].id + "'");
    }

    std::mt19937_64 rng(cfg.seed);
    TrainResult result;
    result.params = HeadParams::init(d_vit, cfg.d_stego, cfg.dropout_p, rng);
    std::array<AdamState, 6> adam;
    {
        auto b = blocks(result.params);
        for (std::size_t k = 0; k < b.size(); ++k) adam[k] = AdamState::zeros(b[k].size(), cfg.head_lr);
    }

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    HeadParams best = result.params;
    const int select_every = cfg.select_every > 0 ? cfg.select_every : cfg.steps;

    for (int step = 1; step <= cfg.steps; ++step) {
        if (cursor + static_cast<std::size_t>(cfg.batch_size) > order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::span<const std::size_t> members(order.data() + cursor, static_cast<std::size_t>(cfg.batch_size));
        cursor += members.size();

        StepBatch batch;
        const int s = cfg.pairs.feature_samples;
        for (std::size_t i : members) {
            const auto& img = images[i];
            const auto c1 = sample_coords(img.h, img.w, s, rng);
            const auto c2 = sample_coords(img.h, img.w, s, rng);
            std::uniform_int_distribution<std::size_t> pick(0, neighbors[i].size() - 1);
            const auto& partner = images[neighbors[i][pick(rng)]];
            const auto c3 = sample_coords(partner.h, partner.w, s, rng);
            batch.anchor.push_back(gather_tokens(img.tokens, img.w, c1));
            batch.second.push_back(gather_tokens(img.tokens, img.w, c2));
            batch.knn.push_back(gather_tokens(partner.tokens, partner.w, c3));
        }
        for (std::size_t i = 0; i < members.size(); ++i) {
            batch.rand_partners.push_back(
                detail::draw_rand_partners(i, members.size(), cfg.pairs.negative_samples, rng));
        }
        if (cfg.dropout_p > 0.0) {
            for (const auto* group : {&batch.anchor, &batch.second, &batch.knn}) {
                for (const auto& m : *group) batch.masks.push_back(dropout_mask(m.rows(), m.cols(), cfg.dropout_p, rng));
            }
        }

        auto sr = step_loss(result.params, batch, cfg.pairs);
        if (!std::isfinite(sr.loss)) throw NumericError("train_head: non-finite loss at step " + std::to_string(step));
        result.losses.push_back(sr.loss);
        auto pb = blocks(result.params);
        const auto gb = blocks(sr.grads);
        for (std::size_t k = 0; k < pb.size(); ++k) adam_step(pb[k], gb[k], adam[k], kHeadBlockNames[k]);

        if (validator && (step % select_every == 0 || step == cfg.steps)) {
            const double score = validator(result.params);
            if (!result.selected_score || score > *result.selected_score) {
                result.selected_score = score;
                result.selected_step = step;
                best = result.params;
            }
        }
    }
    if (validator) {
        result.params = best;
    } else {
        result.selected_step = cfg.steps;
    }
    return result;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_SEG_HEAD_HPP
