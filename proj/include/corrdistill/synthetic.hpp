#ifndef CORRDISTILL_SYNTHETIC_HPP
#define CORRDISTILL_SYNTHETIC_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "corrdistill/feature_store.hpp"
#include "corrdistill/numerics.hpp"

namespace corrdistill {

// Token grids built from unit-norm class prototypes plus isotropic Gaussian
// noise, with spatially coherent (Voronoi) label regions.
struct SyntheticConfig {
    int images = 200;
    std::uint32_t height = 28;
    std::uint32_t width = 28;
    std::uint32_t dim = 64;
    int classes = 6;
    double noise = 0.3;  // expected noise norm; each coordinate has sd noise / sqrt(dim)
    std::uint32_t label_factor = 8;  // label pixels per token side
    int regions = 4;  // Voronoi sites per image
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct SyntheticData {
    Matrix prototypes;  // classes x dim
    std::vector<Sample> train;
    std::vector<Sample> val;
};

// Labels and prototypes depend only on the seed, never on `noise`, so a
// noiseless twin of a dataset shares its ground truth.
inline SyntheticData make_synthetic(const SyntheticConfig& cfg) {
    std::mt19937_64 proto_rng(cfg.seed * 3 + 1);
    std::mt19937_64 label_rng(cfg.seed * 3 + 2);
    std::mt19937_64 noise_rng(cfg.seed * 3 + 3);
    std::normal_distribution<double> normal(0.0, 1.0);

    SyntheticData out;
    out.prototypes.resize(cfg.classes, cfg.dim);
    for (Eigen::Index i = 0; i < out.prototypes.size(); ++i) out.prototypes.data()[i] = normal(proto_rng);
    out.prototypes.rowwise().normalize();

    const int n_val = static_cast<int>(cfg.images * cfg.val_fraction + 0.5);
    const double sd = cfg.noise / std::sqrt(static_cast<double>(cfg.dim));
    std::uniform_int_distribution<int> cls(0, cfg.classes - 1);
    std::uniform_int_distribution<std::uint32_t> row(0, cfg.height - 1), col(0, cfg.width - 1);
    for (int img = 0; img < cfg.images; ++img) {
        std::vector<std::uint32_t> sr(static_cast<std::size_t>(cfg.regions)), sc(sr.size());
        std::vector<int> sk(sr.size());
        for (std::size_t s = 0; s < sr.size(); ++s) {
            sr[s] = row(label_rng);
            sc[s] = col(label_rng);
            sk[s] = cls(label_rng);
        }
        FeatureMap f(cfg.height, cfg.width, cfg.dim);
        LabelMap token_labels(cfg.height, cfg.width);
        for (std::uint32_t r = 0; r < cfg.height; ++r) {
            for (std::uint32_t c = 0; c < cfg.width; ++c) {
                std::size_t best = 0;
                long best_d = -1;
                for (std::size_t s = 0; s < sr.size(); ++s) {
                    const long dr = static_cast<long>(r) - sr[s], dc = static_cast<long>(c) - sc[s];
                    const long d = dr * dr + dc * dc;
                    if (best_d < 0 || d < best_d) {
                        best_d = d;
                        best = s;
                    }
                }
                const int k = sk[best];
                token_labels.at(r, c) = static_cast<std::uint8_t>(k);
                for (std::uint32_t d = 0; d < cfg.dim; ++d) {
                    const double noise = normal(noise_rng);
                    f.at(r, c, d) = static_cast<float>(out.prototypes(k, d) + sd * noise);
                }
            }
        }
        const std::uint32_t lf = cfg.label_factor;
        LabelMap labels(cfg.height * lf, cfg.width * lf);
        for (std::uint32_t r = 0; r < labels.height; ++r) {
            for (std::uint32_t c = 0; c < labels.width; ++c) labels.at(r, c) = token_labels.at(r / lf, c / lf);
        }
        char id[32];
        std::snprintf(id, sizeof id, "img%05d", img);
        Sample s{id, std::move(f), std::move(labels)};
        (img < cfg.images - n_val ? out.train : out.val).push_back(std::move(s));
    }
    return out;
}

// Writes <dir>/features/<id>.cdfm, <dir>/labels/<id>.cdlm and <dir>/manifest.jsonl.
inline fs::path write_synthetic(const fs::path& dir, const SyntheticData& data) {
    Manifest m;
    const auto emit = [&](const std::vector<Sample>& samples, Split split) {
        for (const auto& s : samples) {
            const fs::path fp = fs::path("features") / (s.id + ".cdfm");
            write_feature_file(dir / fp, s.features);
            ManifestRecord r{s.id, fp, std::nullopt, split};
            if (s.labels) {
                const fs::path lp = fs::path("labels") / (s.id + ".cdlm");
                write_label_file(dir / lp, *s.labels);
                r.label_path = lp;
            }
            m.records.push_back(std::move(r));
        }
    };
    emit(data.train, Split::train);
    emit(data.val, Split::val);
    const fs::path manifest = dir / "manifest.jsonl";
    write_manifest(manifest, m);
    return manifest;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_SYNTHETIC_HPP
