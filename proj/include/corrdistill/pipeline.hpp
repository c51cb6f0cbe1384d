#ifndef CORRDISTILL_PIPELINE_HPP
#define CORRDISTILL_PIPELINE_HPP

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "corrdistill/dimred.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/feature_store.hpp"
#include "corrdistill/log.hpp"
#include "corrdistill/metrics.hpp"
#include "corrdistill/parallel.hpp"
#include "corrdistill/presets.hpp"
#include "corrdistill/probes.hpp"
#include "corrdistill/seg_head.hpp"

namespace corrdistill {

enum class RepKind { raw, head, pca, rp };

inline const char* to_string(RepKind k) {
    switch (k) {
    case RepKind::raw: return "raw";
    case RepKind::head: return "head";
    case RepKind::pca: return "pca";
    case RepKind::rp: return "rp";
    }
    return "?";
}

inline RepKind parse_rep_kind(const std::string& s) {
    if (s == "raw") return RepKind::raw;
    if (s == "head") return RepKind::head;
    if (s == "pca") return RepKind::pca;
    if (s == "rp") return RepKind::rp;
    throw UsageError("unknown representation '" + s + "' (expected raw, head, pca or rp)");
}

// A token-wise map from stored features to the space the probes see.
class Representation {
public:
    static Representation raw(Eigen::Index dim) { return Representation(RepKind::raw, std::monostate{}, dim, dim); }
    static Representation head(HeadParams p) {
        p.validate();
        const auto in = p.in_dim(), out = p.out_dim();
        return Representation(RepKind::head, std::move(p), in, out);
    }
    static Representation pca(PcaModel m) {
        const auto in = m.in_dim(), out = m.out_dim();
        return Representation(RepKind::pca, std::move(m), in, out);
    }
    static Representation rp(RpModel m) {
        const auto in = m.in_dim(), out = m.out_dim();
        return Representation(RepKind::rp, std::move(m), in, out);
    }

    RepKind kind() const { return kind_; }
    Eigen::Index input_dim() const { return in_; }
    Eigen::Index output_dim() const { return out_; }

    Matrix apply(const Matrix& tokens) const {
        if (tokens.cols() != in_) {
            throw DimensionError(std::string("representation '") + to_string(kind_) + "': token dim " +
                                 std::to_string(tokens.cols()) + " != " + std::to_string(in_));
        }
        switch (kind_) {
        case RepKind::raw: return tokens;
        case RepKind::head: return head_apply(std::get<HeadParams>(model_), tokens);
        case RepKind::pca: return pca_transform(tokens, std::get<PcaModel>(model_));
        case RepKind::rp: return rp_transform(tokens, std::get<RpModel>(model_));
        }
        return tokens;
    }

private:
    using Model = std::variant<std::monostate, HeadParams, PcaModel, RpModel>;
    Representation(RepKind k, Model m, Eigen::Index in, Eigen::Index out)
        : kind_(k), model_(std::move(m)), in_(in), out_(out) {}

    RepKind kind_;
    Model model_;
    Eigen::Index in_;
    Eigen::Index out_;
};

struct ProbeSettings {
    KMeansConfig kmeans{};
    LinearProbeConfig linear{kShared.probe_lr, 500, 1024, 0};
    std::uint32_t eval_upsample = 8;
    bool cluster = true;
    bool linear_probe = true;
    int threads = 1;
};

struct MetricsRow {
    std::string method;
    long long representation_dim = 0;
    std::string probe;
    double accuracy = 0.0;
    double miou = 0.0;
    std::string split = "val";
    std::uint64_t seed = 0;

    bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "method,representation_dim,probe,accuracy,miou,split,seed";

inline std::string to_csv_line(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%lld,%s,%.10f,%.10f,%s,%llu", r.method.c_str(), r.representation_dim,
                  r.probe.c_str(), r.accuracy, r.miou, r.split.c_str(), static_cast<unsigned long long>(r.seed));
    return buf;
}

inline void write_metrics_csv(const fs::path& path, std::span<const MetricsRow> rows) {
    auto os = binio::open_out(path);
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) os << to_csv_line(r) << '\n';
    binio::finish(os, path);
}

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open metrics CSV '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line) || line.rfind("method,", 0) != 0) {
        throw FormatError(FormatErrorKind::parse, "metrics CSV '" + path.string() + "': missing header");
    }
    std::vector<MetricsRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            f.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (f.size() != 7) throw FormatError(FormatErrorKind::parse, "metrics CSV: expected 7 fields in '" + line + "'");
        try {
            rows.push_back({f[0], std::stoll(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), f[5], std::stoull(f[6])});
        } catch (const std::exception&) {
            throw FormatError(FormatErrorKind::parse, "metrics CSV: bad number in '" + line + "'");
        }
    }
    return rows;
}

// How label maps were aligned with the features that produced a metric.
struct AlignmentReport {
    std::uint32_t train_label_pool = 1;  // labels pooled down to the token grid
    std::uint32_t eval_upsample = 1;     // features upsampled for validation
    std::uint32_t eval_label_pool = 1;   // extra label pooling to meet the upsampled grid
};

struct Evaluation {
    std::vector<MetricsRow> rows;
    std::optional<ProbeMetrics> cluster;
    std::optional<ProbeMetrics> linear;
    std::optional<ClusterModel> cluster_model;
    std::optional<LinearProbe> linear_model;
    AlignmentReport alignment;
};

namespace detail {

inline std::uint32_t integer_ratio(std::uint32_t big, std::uint32_t small, const char* what) {
    if (small == 0 || big % small != 0) {
        throw ShapeError(std::string(what) + ": label size " + std::to_string(big) +
                         " is not a multiple of feature size " + std::to_string(small));
    }
    return big / small;
}

}  // namespace detail

// Fits both probes on the train split (token resolution, labels pooled) and
// scores them on the val split (features upsampled, then transformed).
inline Evaluation evaluate_representation(const Representation& rep, std::span<const Sample> train,
                                          std::span<const Sample> val, std::size_t n_classes,
                                          const ProbeSettings& settings, std::uint64_t seed,
                                          const std::string& method) {
    if (n_classes < 2) throw ContractError("evaluate_representation: N_C must be >= 2");
    if (train.empty()) throw SizeError("evaluate_representation: empty train split");
    if (val.empty()) throw SizeError("evaluate_representation: empty val split");
    if (settings.eval_upsample == 0) throw ContractError("evaluate_representation: upsample factor must be >= 1");

    Evaluation ev;
    ev.alignment.eval_upsample = settings.eval_upsample;

    // Train tokens through the representation.
    std::vector<Matrix> train_out(train.size());
    parallel_for(train.size(), settings.threads,
                 [&](std::size_t i) { train_out[i] = rep.apply(train[i].features.token_matrix()); });
    Eigen::Index total = 0;
    for (const auto& m : train_out) total += m.rows();
    Matrix train_tokens(total, rep.output_dim());
    std::vector<std::uint8_t> train_labels(static_cast<std::size_t>(total), kIgnoreLabel);
    {
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < train.size(); ++i) {
            train_tokens.middleRows(at, train_out[i].rows()) = train_out[i];
            if (train[i].labels) {
                const auto& f = train[i].features;
                const auto& l = *train[i].labels;
                const auto fy = detail::integer_ratio(l.height, f.height, "train labels");
                const auto fx = detail::integer_ratio(l.width, f.width, "train labels");
                if (fy != fx) throw ShapeError("train labels: anisotropic label/feature ratio");
                ev.alignment.train_label_pool = fy;
                const auto pooled = pool_labels(l, fy);
                std::copy(pooled.labels.begin(), pooled.labels.end(), train_labels.begin() + at);
            }
            at += train_out[i].rows();
        }
    }
    train_out.clear();

    if (settings.cluster) {
        auto km = settings.kmeans;
        km.seed = seed;
        ev.cluster_model = kmeans_fit(train_tokens, n_classes, km);
    }
    if (settings.linear_probe) {
        auto lp = settings.linear;
        lp.seed = seed + 0x9e3779b97f4a7c15ULL;
        ev.linear_model = linear_probe_train(train_tokens, train_labels, n_classes, lp);
    }
    train_tokens.resize(0, 0);

    // Validation: per-image confusion matrices, summed in image order.
    std::vector<ConfusionMatrix> cluster_conf(val.size(), ConfusionMatrix(n_classes));
    std::vector<ConfusionMatrix> linear_conf(val.size(), ConfusionMatrix(n_classes));
    std::vector<std::uint32_t> label_pool(val.size(), 1);
    parallel_for(val.size(), settings.threads, [&](std::size_t i) {
        const auto& s = val[i];
        if (!s.labels) throw ContractError("evaluate_representation: val image '" + s.id + "' has no labels");
        const auto& f = s.features;
        const std::uint32_t up = settings.eval_upsample;
        const auto ly = detail::integer_ratio(s.labels->height, f.height * up, "val labels");
        const auto lx = detail::integer_ratio(s.labels->width, f.width * up, "val labels");
        if (ly != lx) throw ShapeError("val labels: anisotropic label/feature ratio");
        label_pool[i] = ly;
        const LabelMap labels = pool_labels(*s.labels, ly);
        const Matrix feats = rep.apply(upsample_tokens(f.token_matrix(), f.height, f.width, up));
        if (ev.cluster_model) cluster_conf[i] = raw_confusion(kmeans_assign(feats, *ev.cluster_model), labels.labels, n_classes);
        if (ev.linear_model) {
            linear_conf[i] = raw_confusion(linear_probe_predict(*ev.linear_model, feats), labels.labels, n_classes);
        }
    });
    ev.alignment.eval_label_pool = label_pool.empty() ? 1 : label_pool.front();

    const auto dim = static_cast<long long>(rep.output_dim());
    if (ev.cluster_model) {
        ConfusionMatrix sum(n_classes);
        for (const auto& c : cluster_conf) sum += c;
        ev.cluster = hungarian_metrics(sum);
        ev.rows.push_back({method, dim, "cluster", ev.cluster->accuracy, ev.cluster->miou, "val", seed});
    }
    if (ev.linear_model) {
        ConfusionMatrix sum(n_classes);
        for (const auto& c : linear_conf) sum += c;
        ev.linear = plain_metrics(sum);
        ev.rows.push_back({method, dim, "linear", ev.linear->accuracy, ev.linear->miou, "val", seed});
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Experiment configuration and dimension sweeps

struct HeadOverrides {
    std::optional<int> steps;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<double> dropout;
    std::optional<double> lambda_self, lambda_knn, lambda_rand;
    std::optional<double> b_self, b_knn, b_rand;
    std::optional<bool> zero_clamp, pointwise;
    int select_every = 0;
};

struct ExperimentConfig {
    std::string dataset = "custom";
    std::string preset = "cocostuff";
    std::optional<std::size_t> n_classes;  // defaults to the preset's N_C
    RepKind kind = RepKind::raw;
    std::optional<fs::path> model;  // fixed model for `eval`; sweeps refit per dim
    std::vector<int> dims;
    std::vector<std::uint64_t> seeds{0};
    ProbeSettings probes;
    HeadOverrides head;
    PcaSampling pca_sampling;
    std::optional<fs::path> manifest;

    std::size_t classes() const { return n_classes.value_or(static_cast<std::size_t>(corrdistill::preset(preset).n_classes)); }
};

inline TrainConfig head_train_config(const ExperimentConfig& cfg, int d_stego, std::uint64_t seed) {
    auto t = train_config(preset(cfg.preset), seed);
    const auto& o = cfg.head;
    t.d_stego = d_stego;
    if (o.steps) t.steps = *o.steps;
    if (o.batch_size) t.batch_size = *o.batch_size;
    if (o.lr) t.head_lr = *o.lr;
    if (o.dropout) t.dropout_p = *o.dropout;
    if (o.lambda_self) t.pairs.lambda_self = *o.lambda_self;
    if (o.lambda_knn) t.pairs.lambda_knn = *o.lambda_knn;
    if (o.lambda_rand) t.pairs.lambda_rand = *o.lambda_rand;
    if (o.b_self) t.pairs.b_self = *o.b_self;
    if (o.b_knn) t.pairs.b_knn = *o.b_knn;
    if (o.b_rand) t.pairs.b_rand = *o.b_rand;
    if (o.zero_clamp) t.pairs.zero_clamp = *o.zero_clamp;
    if (o.pointwise) t.pairs.pointwise_center = *o.pointwise;
    t.select_every = o.select_every;
    return t;
}

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        c.dataset = j.value("dataset", c.dataset);
        c.preset = j.value("preset", c.preset);
        (void)preset(c.preset);
        detail::read_opt(j, "n_classes", c.n_classes);
        if (j.contains("representation")) {
            const auto& r = j.at("representation");
            if (r.is_string()) {
                c.kind = parse_rep_kind(r.get<std::string>());
            } else {
                c.kind = parse_rep_kind(r.at("kind").get<std::string>());
                if (r.contains("model") && !r.at("model").is_null()) c.model = r.at("model").get<std::string>();
            }
        }
        c.dims = j.value("dims", c.dims);
        c.seeds = j.value("seeds", c.seeds);
        c.probes.eval_upsample = j.value("eval_upsample", c.probes.eval_upsample);
        c.probes.threads = j.value("threads", c.probes.threads);
        if (j.contains("cluster_probe")) {
            const auto& k = j.at("cluster_probe");
            c.probes.kmeans.minibatch = k.value("minibatch", c.probes.kmeans.minibatch);
            c.probes.kmeans.steps = k.value("steps", c.probes.kmeans.steps);
            c.probes.cluster = k.value("enabled", true);
        }
        if (j.contains("linear_probe")) {
            const auto& l = j.at("linear_probe");
            c.probes.linear.lr = l.value("lr", c.probes.linear.lr);
            c.probes.linear.steps = l.value("steps", c.probes.linear.steps);
            c.probes.linear.batch = l.value("batch", c.probes.linear.batch);
            c.probes.linear_probe = l.value("enabled", true);
        }
        if (j.contains("head")) {
            const auto& h = j.at("head");
            detail::read_opt(h, "steps", c.head.steps);
            detail::read_opt(h, "batch_size", c.head.batch_size);
            detail::read_opt(h, "lr", c.head.lr);
            detail::read_opt(h, "dropout", c.head.dropout);
            detail::read_opt(h, "lambda_self", c.head.lambda_self);
            detail::read_opt(h, "lambda_knn", c.head.lambda_knn);
            detail::read_opt(h, "lambda_rand", c.head.lambda_rand);
            detail::read_opt(h, "b_self", c.head.b_self);
            detail::read_opt(h, "b_knn", c.head.b_knn);
            detail::read_opt(h, "b_rand", c.head.b_rand);
            detail::read_opt(h, "zero_clamp", c.head.zero_clamp);
            detail::read_opt(h, "pointwise", c.head.pointwise);
            c.head.select_every = h.value("select_every", 0);
        }
        if (j.contains("pca_sampling")) {
            const auto& p = j.at("pca_sampling");
            c.pca_sampling.max_images = p.value("max_images", c.pca_sampling.max_images);
            c.pca_sampling.max_tokens = p.value("max_tokens", c.pca_sampling.max_tokens);
        }
        if (j.contains("manifest") && !j.at("manifest").is_null()) c.manifest = j.at("manifest").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::parse, std::string("experiment config: ") + e.what());
    }
    if (c.classes() < 2) throw ContractError("experiment config: n_classes must be >= 2");
    if (c.seeds.empty()) throw ContractError("experiment config: seeds must be non-empty");
    return c;
}

inline ExperimentConfig read_experiment_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open experiment config '" + path.string() + "'");
    try {
        auto c = parse_experiment_config(nlohmann::json::parse(is));
        if (c.manifest && c.manifest->is_relative()) c.manifest = path.parent_path() / *c.manifest;
        if (c.model && c.model->is_relative()) c.model = path.parent_path() / *c.model;
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::parse, "experiment config '" + path.string() + "': " + e.what());
    }
}

// Cluster-probe validation mIoU; drives checkpoint selection during head sweeps.
inline HeadValidator cluster_miou_validator(std::span<const Sample> train, std::span<const Sample> val,
                                            std::size_t n_classes, ProbeSettings settings, std::uint64_t seed) {
    settings.linear_probe = false;
    settings.cluster = true;
    return [=](const HeadParams& p) {
        return evaluate_representation(Representation::head(p), train, val, n_classes, settings, seed, "head")
            .cluster->miou;
    };
}

struct SweepResult {
    std::vector<MetricsRow> rows;
    nlohmann::ordered_json run_manifest;
};

inline nlohmann::ordered_json preset_json(const Preset& p) {
    nlohmann::ordered_json j;
    j["name"] = p.name;
    j["train_steps"] = p.train_steps;
    j["batch_size"] = p.batch_size;
    j["crop_type"] = p.crop_type;
    j["backbone"] = p.backbone;
    j["zero_clamp"] = p.zero_clamp;
    j["pointwise"] = p.pointwise;
    j["d_stego"] = p.d_stego;
    j["lambda_rand"] = p.lambda_rand;
    j["lambda_knn"] = p.lambda_knn;
    j["lambda_self"] = p.lambda_self;
    j["b_rand"] = p.b_rand;
    j["b_knn"] = p.b_knn;
    j["b_self"] = p.b_self;
    j["n_classes"] = p.n_classes;
    j["probe_lr"] = kShared.probe_lr;
    j["head_lr"] = kShared.head_lr;
    j["head_dropout"] = kShared.head_dropout;
    j["feature_samples"] = kShared.feature_samples;
    j["negative_samples"] = kShared.negative_samples;
    j["extra_clusters"] = kShared.extra_clusters;
    return j;
}

inline nlohmann::ordered_json alignment_json(const AlignmentReport& a) {
    return {{"train_label_pool", a.train_label_pool},
            {"eval_upsample", a.eval_upsample},
            {"eval_label_pool", a.eval_label_pool}};
}

// For every seed and dim: build the representation (train a head, fit PCA/RP,
// or take raw features), refit both probes, evaluate. Each (seed, dim) entry
// is independent of every other one.
inline SweepResult run_dim_sweep(const ExperimentConfig& cfg, std::span<const Sample> train,
                                 std::span<const Sample> val,
                                 const std::optional<fs::path>& checkpoint_dir = std::nullopt) {
    if (cfg.dims.empty()) throw ContractError("run_dim_sweep: dim list is empty");
    if (train.empty()) throw SizeError("run_dim_sweep: empty train split");
    const auto d_vit = static_cast<int>(train.front().features.dim);
    for (int d : cfg.dims) {
        if (d < 1 || d > d_vit) {
            throw DimensionError("run_dim_sweep: dim " + std::to_string(d) + " outside [1, " + std::to_string(d_vit) + "]");
        }
        if (cfg.kind == RepKind::raw && d != d_vit) {
            throw DimensionError("run_dim_sweep: raw representation only has dim " + std::to_string(d_vit));
        }
    }
    const std::size_t n_classes = cfg.classes();

    SweepResult out;
    auto& rm = out.run_manifest;
    rm["dataset"] = cfg.dataset;
    rm["representation"] = to_string(cfg.kind);
    rm["preset"] = preset_json(preset(cfg.preset));
    rm["n_classes"] = n_classes;
    rm["dims"] = cfg.dims;
    rm["seeds"] = cfg.seeds;
    rm["shuffling"] = "per-epoch uniform permutation from seeded mt19937_64, identical for all representations";
    rm["entries"] = nlohmann::ordered_json::array();

    std::optional<KnnIndex> knn;
    if (cfg.kind == RepKind::head) knn = build_knn_index(train);

    for (std::uint64_t seed : cfg.seeds) {
        std::optional<PcaModel> full_pca;
        for (int d : cfg.dims) {
            nlohmann::ordered_json entry{{"seed", seed}, {"dim", d}};
            std::optional<Representation> rep;
            std::optional<fs::path> ckpt;
            const std::string tag = std::string(to_string(cfg.kind)) + "_d" + std::to_string(d) + "_s" + std::to_string(seed);
            switch (cfg.kind) {
            case RepKind::raw:
                rep = Representation::raw(d_vit);
                break;
            case RepKind::pca: {
                if (!full_pca) {
                    const Matrix sample = sample_pca_tokens(train, cfg.pca_sampling, seed);
                    full_pca = pca_fit(sample, d_vit);
                }
                PcaModel m = *full_pca;
                m.components = full_pca->components.leftCols(d);
                if (checkpoint_dir) write_pca(*(ckpt = *checkpoint_dir / (tag + ".cdpc")), m);
                rep = Representation::pca(std::move(m));
                break;
            }
            case RepKind::rp: {
                auto m = rp_fit(d_vit, d, seed);
                if (checkpoint_dir) write_rp(*(ckpt = *checkpoint_dir / (tag + ".cdrp")), m);
                rep = Representation::rp(std::move(m));
                break;
            }
            case RepKind::head: {
                const auto tc = head_train_config(cfg, d, seed);
                HeadValidator validator;
                if (tc.select_every > 0) validator = cluster_miou_validator(train, val, n_classes, cfg.probes, seed);
                log::info("training head D=" + std::to_string(d) + " seed=" + std::to_string(seed));
                auto tr = train_head(train, *knn, tc, validator);
                entry["selected_step"] = tr.selected_step;
                entry["final_loss"] = tr.losses.back();
                if (checkpoint_dir) write_head(*(ckpt = *checkpoint_dir / (tag + ".cdhd")), tr.params);
                rep = Representation::head(std::move(tr.params));
                break;
            }
            }
            auto ev = evaluate_representation(*rep, train, val, n_classes, cfg.probes, seed, to_string(cfg.kind));
            entry["checkpoint"] = ckpt ? nlohmann::ordered_json(ckpt->generic_string()) : nlohmann::ordered_json(nullptr);
            entry["alignment"] = alignment_json(ev.alignment);
            rm["entries"].push_back(entry);
            for (auto& r : ev.rows) out.rows.push_back(std::move(r));
        }
    }
    return out;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_PIPELINE_HPP
