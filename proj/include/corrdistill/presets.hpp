#ifndef CORRDISTILL_PRESETS_HPP
#define CORRDISTILL_PRESETS_HPP

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "corrdistill/correlation.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/seg_head.hpp"

namespace corrdistill {

// Per-dataset training configuration of the released pre-trained models.
struct Preset {
    std::string_view name;
    int train_steps;
    int batch_size;
    std::string_view crop_type;
    std::string_view backbone;
    int d_vit;
    bool zero_clamp;
    bool pointwise;
    int d_stego;
    double lambda_rand;
    double lambda_knn;
    double lambda_self;
    double b_rand;
    double b_knn;
    double b_self;
    int n_classes;
};

// Settings shared by every dataset.
struct SharedSettings {
    std::string_view loader_crop_type = "Center";
    int extra_clusters = 0;
    std::string_view optimizer = "Adam";
    double probe_lr = 0.005;
    double head_lr = 0.0005;
    double head_dropout = 0.1;
    int feature_samples = 11;
    int negative_samples = 5;
};

inline constexpr SharedSettings kShared{};

// Zero-clamp is unreported ("-") for Cocostuff and Cityscapes and defaults to off.
inline constexpr std::array<Preset, 3> kPresets{{
    {"cocostuff", 7000, 32, "5-crop", "ViT-B", 768, false, true, 90, 0.15, 1.00, 0.10, 1.00, 0.20, 0.12, 27},
    {"cityscapes", 7000, 32, "5-crop", "ViT-B", 768, false, false, 100, 0.91, 0.58, 1.00, 0.31, 0.18, 0.46, 27},
    {"potsdam", 5000, 16, "No crop", "ViT-S", 384, true, true, 70, 0.63, 0.25, 0.67, 0.76, 0.02, 0.08, 3},
}};

inline const Preset& preset(std::string_view name) {
    for (const auto& p : kPresets) {
        if (p.name == name) return p;
    }
    throw UsageError("unknown preset '" + std::string(name) + "' (expected cocostuff, cityscapes or potsdam)");
}

inline PairLossConfig pair_config(const Preset& p) {
    PairLossConfig c;
    c.b_self = p.b_self;
    c.b_knn = p.b_knn;
    c.b_rand = p.b_rand;
    c.lambda_self = p.lambda_self;
    c.lambda_knn = p.lambda_knn;
    c.lambda_rand = p.lambda_rand;
    c.zero_clamp = p.zero_clamp;
    c.pointwise_center = p.pointwise;
    c.feature_samples = kShared.feature_samples;
    c.negative_samples = kShared.negative_samples;
    return c;
}

inline TrainConfig train_config(const Preset& p, std::uint64_t seed = 0) {
    TrainConfig t;
    t.d_stego = p.d_stego;
    t.steps = p.train_steps;
    t.batch_size = p.batch_size;
    t.head_lr = kShared.head_lr;
    t.dropout_p = kShared.head_dropout;
    t.pairs = pair_config(p);
    t.seed = seed;
    return t;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_PRESETS_HPP
