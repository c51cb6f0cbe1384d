#ifndef CORRDISTILL_PROBES_HPP
#define CORRDISTILL_PROBES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "corrdistill/binary_io.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/feature_store.hpp"
#include "corrdistill/metrics.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

struct ProbeMetrics {
    ConfusionMatrix confusion;
    double accuracy = 0.0;
    double miou = 0.0;
};

// ---------------------------------------------------------------------------
// Cluster probe: cosine mini-batch k-means + Hungarian matching

struct ClusterModel {
    Matrix centroids;  // N_C x D, unit rows
    std::vector<std::uint64_t> counts;

    std::size_t clusters() const { return static_cast<std::size_t>(centroids.rows()); }
};

struct KMeansConfig {
    int minibatch = 1024;
    int steps = 200;
    std::uint64_t seed = 0;
    // Independent seeded runs; the one with the highest objective is kept.
    int restarts = 5;
};

// Argmax cosine similarity; ties go to the lowest centroid id.
inline std::vector<int> kmeans_assign(const Matrix& tokens, const ClusterModel& model) {
    if (tokens.cols() != model.centroids.cols()) {
        throw DimensionError("kmeans_assign: token dim " + std::to_string(tokens.cols()) + " != centroid dim " +
                             std::to_string(model.centroids.cols()));
    }
    const Matrix sims = cosine_similarity_matrix(tokens, model.centroids);
    std::vector<int> out(static_cast<std::size_t>(tokens.rows()));
    for (Eigen::Index r = 0; r < sims.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < sims.cols(); ++c) {
            if (sims(r, c) > sims(r, best)) best = c;
        }
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

// Mean over tokens of the best cosine similarity to any centroid.
inline double kmeans_objective(const Matrix& tokens, const ClusterModel& model) {
    const Matrix sims = cosine_similarity_matrix(tokens, model.centroids);
    return sims.rowwise().maxCoeff().mean();
}

namespace detail {

inline ClusterModel kmeans_run(const Matrix& x, const std::vector<Eigen::Index>& usable, std::size_t n_clusters,
                               const KMeansConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);

    // k-means++ seeding on cosine distance: each further centroid is a data
    // token drawn with probability proportional to 1 - max cosine to the
    // centroids so far. Tokens equal to a centroid have weight 0.
    ClusterModel model{Matrix(static_cast<Eigen::Index>(n_clusters), x.cols()),
                       std::vector<std::uint64_t>(n_clusters, 0)};
    if (usable.empty()) throw DegenerateError("kmeans_fit: all tokens have zero norm");
    {
        std::uniform_int_distribution<std::size_t> first(0, usable.size() - 1);
        model.centroids.row(0) = x.row(usable[first(rng)]);
        std::vector<double> dist(usable.size());
        for (std::size_t i = 0; i < usable.size(); ++i) dist[i] = 1.0 - x.row(usable[i]).dot(model.centroids.row(0));
        for (std::size_t c = 1; c < n_clusters; ++c) {
            double total = 0.0;
            for (double& d : dist) total += (d = std::max(d, 0.0));
            if (!(total > 1e-12)) {
                throw DegenerateError("kmeans_fit: only " + std::to_string(c) + " distinct tokens for " +
                                      std::to_string(n_clusters) + " clusters");
            }
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng);
            std::size_t pick = usable.size();
            for (std::size_t i = 0; i < usable.size(); ++i) {
                if (dist[i] <= 0.0) continue;
                pick = i;
                if ((target -= dist[i]) < 0.0) break;
            }
            const auto row = x.row(usable[pick]);
            model.centroids.row(static_cast<Eigen::Index>(c)) = row;
            for (std::size_t i = 0; i < usable.size(); ++i) dist[i] = std::min(dist[i], 1.0 - x.row(usable[i]).dot(row));
        }
    }

    const std::size_t n = usable.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.minibatch), n);
    std::vector<Eigen::Index> perm = usable;
    std::size_t cursor = n;
    std::vector<std::uint64_t> epoch_hits(n_clusters, 0);
    Matrix xb(static_cast<Eigen::Index>(batch), x.cols());

    for (int step = 0; step < cfg.steps; ++step) {
        if (cursor >= n) {
            std::shuffle(perm.begin(), perm.end(), rng);
            cursor = 0;
        }
        const std::size_t take = std::min(batch, n - cursor);
        xb.resize(static_cast<Eigen::Index>(take), x.cols());
        for (std::size_t i = 0; i < take; ++i) xb.row(static_cast<Eigen::Index>(i)) = x.row(perm[cursor + i]);
        cursor += take;

        const auto assign = kmeans_assign(xb, model);
        // A full-batch step restarts the running means, i.e. a spherical Lloyd update.
        if (take == n) std::fill(model.counts.begin(), model.counts.end(), 0);
        std::vector<bool> touched(n_clusters, false);
        for (std::size_t i = 0; i < take; ++i) {
            const auto c = static_cast<std::size_t>(assign[i]);
            const double lr = 1.0 / static_cast<double>(++model.counts[c]);
            auto row = model.centroids.row(static_cast<Eigen::Index>(c));
            row += lr * (xb.row(static_cast<Eigen::Index>(i)) - row);
            touched[c] = true;
            ++epoch_hits[c];
        }
        for (std::size_t c = 0; c < n_clusters; ++c) {
            if (!touched[c]) continue;
            auto row = model.centroids.row(static_cast<Eigen::Index>(c));
            const double len = row.norm();
            if (len >= kNormEps) row /= len;
        }

        if (cursor >= n) {
            // End of epoch: reseed centroids that attracted nothing from the
            // tokens farthest from their own centroid.
            std::vector<std::size_t> empty;
            for (std::size_t c = 0; c < n_clusters; ++c) {
                if (epoch_hits[c] == 0) empty.push_back(c);
            }
            if (!empty.empty()) {
                const Matrix sims = x * model.centroids.transpose();
                std::vector<std::pair<double, Eigen::Index>> far;
                for (Eigen::Index idx : usable) far.emplace_back(sims.row(idx).maxCoeff(), idx);
                std::stable_sort(far.begin(), far.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
                for (std::size_t k = 0; k < empty.size() && k < far.size(); ++k) {
                    model.centroids.row(static_cast<Eigen::Index>(empty[k])) = x.row(far[k].second);
                    model.counts[empty[k]] = 1;
                }
            }
            std::fill(epoch_hits.begin(), epoch_hits.end(), 0);
        }
    }
    return model;
}

}  // namespace detail

inline ClusterModel kmeans_fit(const Matrix& tokens, std::size_t n_clusters, const KMeansConfig& cfg) {
    if (n_clusters < 1) throw ContractError("kmeans_fit: need at least one cluster");
    if (cfg.minibatch < 1 || cfg.steps < 1) throw ContractError("kmeans_fit: minibatch and steps must be >= 1");
    if (cfg.restarts < 1) throw ContractError("kmeans_fit: restarts must be >= 1");
    const auto norm = l2_normalize_rows(tokens);
    std::vector<Eigen::Index> usable;
    for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
        if (!norm.degenerate[static_cast<std::size_t>(r)]) usable.push_back(r);
    }
    std::optional<ClusterModel> best;
    double best_score = 0.0;
    std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(n_clusters)};
    std::vector<std::uint32_t> seeds(2 * static_cast<std::size_t>(cfg.restarts));
    seq.generate(seeds.begin(), seeds.end());
    for (int r = 0; r < cfg.restarts; ++r) {
        const std::uint64_t seed = (static_cast<std::uint64_t>(seeds[2 * r]) << 32) | seeds[2 * r + 1];
        auto model = detail::kmeans_run(norm.rows, usable, n_clusters, cfg, seed);
        const double score = kmeans_objective(tokens, model);
        if (!best || score > best_score) {
            best = std::move(model);
            best_score = score;
        }
    }
    return *best;
}

inline ConfusionMatrix raw_confusion(std::span<const int> pred, std::span<const std::uint8_t> labels,
                                     std::size_t n_classes) {
    ConfusionMatrix conf(n_classes);
    accumulate<int>(conf, pred, labels, kIgnoreLabel);
    return conf;
}

// Hungarian-matches clusters to classes on a cluster x class count matrix.
inline ProbeMetrics hungarian_metrics(const ConfusionMatrix& raw) {
    if (raw.total() == 0) throw EmptyEvaluationError("cluster probe: every pixel is ignored");
    Matrix profit(static_cast<Eigen::Index>(raw.n), static_cast<Eigen::Index>(raw.n));
    for (std::size_t p = 0; p < raw.n; ++p) {
        for (std::size_t g = 0; g < raw.n; ++g) {
            profit(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(g)) = static_cast<double>(raw.at(p, g));
        }
    }
    const auto match = hungarian(profit);
    ProbeMetrics m;
    m.confusion = remap_rows(raw, match.col_of_row);
    m.accuracy = accuracy(m.confusion);
    m.miou = miou(m.confusion);
    return m;
}

inline ProbeMetrics plain_metrics(const ConfusionMatrix& conf) {
    if (conf.total() == 0) throw EmptyEvaluationError("probe evaluation: every pixel is ignored");
    return {conf, accuracy(conf), miou(conf)};
}

// features[i] rows align with labels[i].labels (same pixel grid).
inline ProbeMetrics cluster_probe_eval(std::span<const Matrix> features, std::span<const LabelMap> labels,
                                       const ClusterModel& model, std::size_t n_classes) {
    if (features.size() != labels.size()) throw ShapeError("cluster_probe_eval: features/labels count mismatch");
    if (model.clusters() != n_classes) throw ContractError("cluster_probe_eval: cluster count must equal N_C");
    ConfusionMatrix raw(n_classes);
    for (std::size_t i = 0; i < features.size(); ++i) {
        const auto pred = kmeans_assign(features[i], model);
        raw += raw_confusion(pred, labels[i].labels, n_classes);
    }
    return hungarian_metrics(raw);
}

// ---------------------------------------------------------------------------
// Linear probe: softmax regression trained with Adam

struct LinearProbe {
    Matrix w;  // N_C x D
    Vector b;  // N_C

    static LinearProbe zeros(Eigen::Index n_classes, Eigen::Index dim) {
        return {Matrix::Zero(n_classes, dim), Vector::Zero(n_classes)};
    }
    Matrix logits(const Matrix& tokens) const {
        if (tokens.cols() != w.cols()) throw DimensionError("linear probe: token dim mismatch");
        return (tokens * w.transpose()).rowwise() + b.transpose();
    }
};

struct LinearProbeConfig {
    double lr = 0.005;
    int steps = 500;
    int batch = 1024;
    std::uint64_t seed = 0;
};

struct LinearProbeGrad {
    double loss = 0.0;  // mean cross-entropy over labeled tokens
    Matrix w;
    Vector b;
    std::size_t labeled = 0;
};

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
    p = p.array().exp().matrix();
    return p.array().colwise() / p.rowwise().sum().array();
}

// Cross-entropy and gradient; tokens labeled with the ignore sentinel are skipped.
inline LinearProbeGrad linear_probe_gradient(const LinearProbe& probe, const Matrix& tokens,
                                             std::span<const std::uint8_t> labels) {
    if (static_cast<std::size_t>(tokens.rows()) != labels.size()) {
        throw ShapeError("linear probe: token/label count mismatch");
    }
    const auto n_classes = probe.w.rows();
    LinearProbeGrad g{0.0, Matrix::Zero(probe.w.rows(), probe.w.cols()), Vector::Zero(probe.b.size()), 0};
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kIgnoreLabel) continue;
        if (labels[i] >= n_classes) throw ContractError("linear probe: label " + std::to_string(labels[i]) + " >= N_C");
        keep.push_back(static_cast<Eigen::Index>(i));
    }
    g.labeled = keep.size();
    if (keep.empty()) return g;
    Matrix x(static_cast<Eigen::Index>(keep.size()), tokens.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = tokens.row(keep[i]);
    const Matrix logits = probe.logits(x);
    Matrix p = softmax_rows(logits);
    const double inv = 1.0 / static_cast<double>(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(keep[i])]);
        const double m = logits.row(r).maxCoeff();
        const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
        g.loss += (lse - logits(r, y)) * inv;
        p(r, y) -= 1.0;
    }
    p *= inv;
    g.w = p.transpose() * x;
    g.b = p.colwise().sum().transpose();
    return g;
}

inline LinearProbe linear_probe_train(const Matrix& tokens, std::span<const std::uint8_t> labels,
                                      std::size_t n_classes, const LinearProbeConfig& cfg,
                                      std::vector<double>* loss_curve = nullptr) {
    if (static_cast<std::size_t>(tokens.rows()) != labels.size()) {
        throw ShapeError("linear_probe_train: token/label count mismatch");
    }
    if (cfg.steps < 1 || cfg.batch < 1) throw ContractError("linear_probe_train: steps and batch must be >= 1");
    std::vector<Eigen::Index> labeled;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != kIgnoreLabel) labeled.push_back(static_cast<Eigen::Index>(i));
    }
    if (labeled.empty()) throw EmptyEvaluationError("linear_probe_train: no labeled tokens");

    auto probe = LinearProbe::zeros(static_cast<Eigen::Index>(n_classes), tokens.cols());
    auto adam_w = AdamState::zeros(static_cast<std::size_t>(probe.w.size()), cfg.lr);
    auto adam_b = AdamState::zeros(static_cast<std::size_t>(probe.b.size()), cfg.lr);
    std::mt19937_64 rng(cfg.seed);
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), labeled.size());
    std::size_t cursor = labeled.size();
    Matrix xb;
    std::vector<std::uint8_t> yb;
    for (int step = 0; step < cfg.steps; ++step) {
        if (cursor + batch > labeled.size()) {
            std::shuffle(labeled.begin(), labeled.end(), rng);
            cursor = 0;
        }
        xb.resize(static_cast<Eigen::Index>(batch), tokens.cols());
        yb.resize(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            xb.row(static_cast<Eigen::Index>(i)) = tokens.row(labeled[cursor + i]);
            yb[i] = labels[static_cast<std::size_t>(labeled[cursor + i])];
        }
        cursor += batch;
        const auto g = linear_probe_gradient(probe, xb, yb);
        if (loss_curve) loss_curve->push_back(g.loss);
        adam_step(as_span(probe.w), as_span(g.w), adam_w, "linear_probe.W");
        adam_step(as_span(probe.b), as_span(g.b), adam_b, "linear_probe.b");
    }
    return probe;
}

// Argmax class per token; ties go to the lowest class id.
inline std::vector<int> linear_probe_predict(const LinearProbe& probe, const Matrix& tokens) {
    const Matrix logits = probe.logits(tokens);
    std::vector<int> out(static_cast<std::size_t>(tokens.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, best)) best = c;
        }
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

inline ProbeMetrics linear_probe_eval(std::span<const Matrix> features, std::span<const LabelMap> labels,
                                      const LinearProbe& probe) {
    if (features.size() != labels.size()) throw ShapeError("linear_probe_eval: features/labels count mismatch");
    ConfusionMatrix conf(static_cast<std::size_t>(probe.w.rows()));
    for (std::size_t i = 0; i < features.size(); ++i) {
        conf += raw_confusion(linear_probe_predict(probe, features[i]), labels[i].labels, conf.n);
    }
    return plain_metrics(conf);
}

// ---------------------------------------------------------------------------
// Checkpoints: "CDCP" / "CDLP", version, N_C, D, little-endian 64-bit payload.

inline constexpr std::uint32_t kProbeFileVersion = 1;

inline void write_cluster_model(const fs::path& path, const ClusterModel& m) {
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDCP", kProbeFileVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.centroids.rows()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.centroids.cols()));
    binio::write_le_array<double>(os, as_span(m.centroids));
    binio::write_le_array<std::uint64_t>(os, m.counts);
    binio::finish(os, path);
}

inline ClusterModel read_cluster_model(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "cluster probe '" + path.string() + "'";
    binio::expect_magic(is, "CDCP", kProbeFileVersion, what);
    const auto k = binio::read_le<std::uint32_t>(is, what);
    const auto d = binio::read_le<std::uint32_t>(is, what);
    if (k == 0 || d == 0) throw FormatError(FormatErrorKind::invalid_header, what + ": zero dimension");
    ClusterModel m{Matrix(k, d), std::vector<std::uint64_t>(k)};
    binio::read_le_array<double>(is, as_span(m.centroids), what);
    binio::read_le_array<std::uint64_t>(is, m.counts, what);
    return m;
}

inline void write_linear_probe(const fs::path& path, const LinearProbe& p) {
    auto os = binio::open_out(path);
    binio::write_magic(os, "CDLP", kProbeFileVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.w.rows()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.w.cols()));
    binio::write_le_array<double>(os, as_span(p.w));
    binio::write_le_array<double>(os, as_span(p.b));
    binio::finish(os, path);
}

inline LinearProbe read_linear_probe(const fs::path& path) {
    auto is = binio::open_in(path);
    const std::string what = "linear probe '" + path.string() + "'";
    binio::expect_magic(is, "CDLP", kProbeFileVersion, what);
    const auto k = binio::read_le<std::uint32_t>(is, what);
    const auto d = binio::read_le<std::uint32_t>(is, what);
    if (k == 0 || d == 0) throw FormatError(FormatErrorKind::invalid_header, what + ": zero dimension");
    auto p = LinearProbe::zeros(k, d);
    binio::read_le_array<double>(is, as_span(p.w), what);
    binio::read_le_array<double>(is, as_span(p.b), what);
    return p;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_PROBES_HPP
