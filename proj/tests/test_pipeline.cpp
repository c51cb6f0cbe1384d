#include <gtest/gtest.h>

#include <random>

#include "corrdistill/pipeline.hpp"
#include "corrdistill/synthetic.hpp"
#include "test_util.hpp"

using namespace corrdistill;
using testutil::TempDir;

namespace {

SyntheticData data(double noise = 0.3, std::uint64_t seed = 0) {
    SyntheticConfig s;
    s.images = 20;
    s.height = s.width = 6;
    s.dim = 8;
    s.classes = 3;
    s.noise = noise;
    s.label_factor = 4;
    s.val_fraction = 0.25;
    s.seed = seed;
    return make_synthetic(s);
}

ProbeSettings quick_probes() {
    ProbeSettings p;
    p.kmeans.minibatch = 256;
    p.kmeans.steps = 40;
    p.linear.steps = 100;
    p.linear.batch = 256;
    p.eval_upsample = 2;
    return p;
}

ExperimentConfig sweep_cfg(RepKind kind, std::vector<int> dims) {
    ExperimentConfig c;
    c.kind = kind;
    c.dims = std::move(dims);
    c.n_classes = 3;
    c.probes = quick_probes();
    c.head.steps = 3;
    c.head.batch_size = 4;
    return c;
}

}  // namespace

TEST(RepKind, RoundTripAndUnknown) {
    for (auto k : {RepKind::raw, RepKind::head, RepKind::pca, RepKind::rp}) EXPECT_EQ(parse_rep_kind(to_string(k)), k);
    EXPECT_THROW(parse_rep_kind("umap"), UsageError);
}

TEST(Representation, RawIsIdentity) {
    std::mt19937_64 rng(1);
    const Matrix t = testutil::gaussian(5, 8, rng);
    const auto r = Representation::raw(8);
    EXPECT_EQ(r.apply(t), t);
    EXPECT_EQ(r.output_dim(), 8);
    EXPECT_THROW(r.apply(Matrix::Zero(1, 7)), DimensionError);
}

TEST(Representation, WrapsModels) {
    std::mt19937_64 rng(2);
    const Matrix t = testutil::gaussian(30, 8, rng);
    const auto pca = pca_fit(t, 3);
    const auto rp = rp_fit(8, 4, 5);
    const auto head = HeadParams::init(8, 2, 0.3, rng);
    EXPECT_EQ(Representation::pca(pca).apply(t), pca_transform(t, pca));
    EXPECT_EQ(Representation::rp(rp).apply(t), rp_transform(t, rp));
    EXPECT_EQ(Representation::head(head).apply(t), head_apply(head, t));
    EXPECT_EQ(Representation::pca(pca).output_dim(), 3);
    EXPECT_EQ(Representation::rp(rp).output_dim(), 4);
    EXPECT_EQ(Representation::head(head).output_dim(), 2);
}

TEST(MetricsCsv, HeaderAndRoundTrip) {
    TempDir dir;
    const std::vector<MetricsRow> rows{{"head", 90, "cluster", 0.5, 0.25, "val", 3}, {"pca", 8, "linear", 1.0, 0.125, "val", 0}};
    write_metrics_csv(dir / "m.csv", rows);
    const auto text = testutil::slurp(dir / "m.csv");
    EXPECT_EQ(text, "method,representation_dim,probe,accuracy,miou,split,seed\n"
                    "head,90,cluster,0.5000000000,0.2500000000,val,3\n"
                    "pca,8,linear,1.0000000000,0.1250000000,val,0\n");
    EXPECT_EQ(read_metrics_csv(dir / "m.csv"), rows);
}

TEST(Evaluate, SeparableDataScoresHighAndRecordsAlignment) {
    const auto d = data(0.3);
    const auto ev = evaluate_representation(Representation::raw(8), d.train, d.val, 3, quick_probes(), 0, "raw");
    ASSERT_EQ(ev.rows.size(), 2u);
    EXPECT_EQ(ev.rows[0].probe, "cluster");
    EXPECT_EQ(ev.rows[1].probe, "linear");
    EXPECT_GE(ev.cluster->miou, 0.9);
    EXPECT_GE(ev.linear->miou, 0.9);
    EXPECT_EQ(ev.alignment.train_label_pool, 4u);
    EXPECT_EQ(ev.alignment.eval_upsample, 2u);
    EXPECT_EQ(ev.alignment.eval_label_pool, 2u);
    // Every validation pixel of the pooled grid is counted once.
    EXPECT_EQ(ev.cluster->confusion.total(), d.val.size() * 12 * 12);
}

TEST(Evaluate, DeterministicAcrossRunsAndThreadCounts) {
    const auto d = data(1.0, 1);
    auto p = quick_probes();
    const auto a = evaluate_representation(Representation::raw(8), d.train, d.val, 3, p, 7, "raw");
    const auto b = evaluate_representation(Representation::raw(8), d.train, d.val, 3, p, 7, "raw");
    p.threads = 4;
    const auto c = evaluate_representation(Representation::raw(8), d.train, d.val, 3, p, 7, "raw");
    EXPECT_EQ(a.rows, b.rows);
    EXPECT_EQ(a.rows, c.rows);
    EXPECT_EQ(a.cluster->confusion, c.cluster->confusion);
}

TEST(Evaluate, ProbeToggles) {
    const auto d = data();
    auto p = quick_probes();
    p.linear_probe = false;
    const auto ev = evaluate_representation(Representation::raw(8), d.train, d.val, 3, p, 0, "raw");
    ASSERT_EQ(ev.rows.size(), 1u);
    EXPECT_FALSE(ev.linear);
}

TEST(Evaluate, Errors) {
    auto d = data();
    EXPECT_THROW(evaluate_representation(Representation::raw(8), d.train, d.val, 1, quick_probes(), 0, "raw"), ContractError);
    EXPECT_THROW(evaluate_representation(Representation::raw(8), d.train, {}, 3, quick_probes(), 0, "raw"), SizeError);
    EXPECT_THROW(evaluate_representation(Representation::raw(7), d.train, d.val, 3, quick_probes(), 0, "raw"), DimensionError);
    auto p = quick_probes();
    p.eval_upsample = 3;  // 6 * 3 does not divide 24
    EXPECT_THROW(evaluate_representation(Representation::raw(8), d.train, d.val, 3, p, 0, "raw"), ShapeError);
    d.val[0].labels.reset();
    EXPECT_THROW(evaluate_representation(Representation::raw(8), d.train, d.val, 3, quick_probes(), 0, "raw"), ContractError);
}

TEST(Sweep, RawEqualsSingleEvaluation) {
    const auto d = data();
    const auto s = run_dim_sweep(sweep_cfg(RepKind::raw, {8}), d.train, d.val);
    const auto ev = evaluate_representation(Representation::raw(8), d.train, d.val, 3, quick_probes(), 0, "raw");
    EXPECT_EQ(s.rows, ev.rows);
}

TEST(Sweep, CardinalityAndManifest) {
    TempDir dir;
    const auto d = data();
    auto cfg = sweep_cfg(RepKind::pca, {2, 4, 8});
    cfg.seeds = {0, 1};
    const auto s = run_dim_sweep(cfg, d.train, d.val, dir.path());
    EXPECT_EQ(s.rows.size(), 3u * 2u * 2u);
    EXPECT_EQ(s.run_manifest.at("entries").size(), 6u);
    EXPECT_TRUE(s.run_manifest.contains("shuffling"));
    EXPECT_EQ(s.run_manifest.at("preset").at("d_stego"), 90);
    EXPECT_TRUE(fs::exists(dir / "pca_d4_s1.cdpc"));
    EXPECT_EQ(read_pca(dir / "pca_d4_s1.cdpc").out_dim(), 4);
    cfg.probes.linear_probe = false;
    EXPECT_EQ(run_dim_sweep(cfg, d.train, d.val).rows.size(), 3u * 2u);
}

TEST(Sweep, DimsAreIndependent) {
    const auto d = data(1.0, 2);
    for (auto kind : {RepKind::pca, RepKind::rp, RepKind::head}) {
        const auto all = run_dim_sweep(sweep_cfg(kind, {2, 5}), d.train, d.val).rows;
        auto one = run_dim_sweep(sweep_cfg(kind, {2}), d.train, d.val).rows;
        const auto two = run_dim_sweep(sweep_cfg(kind, {5}), d.train, d.val).rows;
        one.insert(one.end(), two.begin(), two.end());
        EXPECT_EQ(all, one) << to_string(kind);
    }
}

TEST(Sweep, HeadSweepWritesCheckpointsAndSelectsOnValidation) {
    TempDir dir;
    const auto d = data();
    auto cfg = sweep_cfg(RepKind::head, {3});
    cfg.head.steps = 4;
    cfg.head.select_every = 2;
    const auto s = run_dim_sweep(cfg, d.train, d.val, dir.path());
    const auto& e = s.run_manifest.at("entries").at(0);
    EXPECT_TRUE(e.at("selected_step") == 2 || e.at("selected_step") == 4);
    EXPECT_EQ(read_head(dir / "head_d3_s0.cdhd").out_dim(), 3);
}

TEST(Sweep, InvalidDims) {
    const auto d = data();
    EXPECT_THROW(run_dim_sweep(sweep_cfg(RepKind::raw, {4}), d.train, d.val), DimensionError);
    EXPECT_THROW(run_dim_sweep(sweep_cfg(RepKind::pca, {9}), d.train, d.val), DimensionError);
    EXPECT_THROW(run_dim_sweep(sweep_cfg(RepKind::rp, {0}), d.train, d.val), DimensionError);
    EXPECT_THROW(run_dim_sweep(sweep_cfg(RepKind::rp, {}), d.train, d.val), ContractError);
}

TEST(Sweep, RawWritesNoCheckpoints) {
    TempDir dir;
    const auto d = data();
    run_dim_sweep(sweep_cfg(RepKind::raw, {8}), d.train, d.val, dir.path());
    EXPECT_TRUE(fs::is_empty(dir.path()));
}

TEST(ExperimentConfigJson, ParsesAllSections) {
    const auto j = nlohmann::json::parse(R"({
        "dataset": "toy", "preset": "potsdam", "n_classes": 4,
        "representation": {"kind": "head", "model": null},
        "dims": [4, 8], "seeds": [0, 2], "eval_upsample": 1, "threads": 2,
        "cluster_probe": {"minibatch": 64, "steps": 10},
        "linear_probe": {"lr": 0.01, "steps": 20, "batch": 32, "enabled": false},
        "head": {"steps": 5, "batch_size": 4, "lambda_knn": 0.5, "zero_clamp": false, "select_every": 2},
        "pca_sampling": {"max_images": 10, "max_tokens": 100},
        "manifest": "m.jsonl"})");
    const auto c = parse_experiment_config(j);
    EXPECT_EQ(c.dataset, "toy");
    EXPECT_EQ(c.classes(), 4u);
    EXPECT_EQ(c.kind, RepKind::head);
    EXPECT_EQ(c.dims, (std::vector<int>{4, 8}));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 2}));
    EXPECT_EQ(c.probes.kmeans.minibatch, 64);
    EXPECT_FALSE(c.probes.linear_probe);
    EXPECT_EQ(c.pca_sampling.max_tokens, 100u);
    const auto t = head_train_config(c, 6, 9);
    EXPECT_EQ(t.d_stego, 6);
    EXPECT_EQ(t.steps, 5);
    EXPECT_EQ(t.batch_size, 4);
    EXPECT_EQ(t.seed, 9u);
    EXPECT_DOUBLE_EQ(t.pairs.lambda_knn, 0.5);
    EXPECT_DOUBLE_EQ(t.pairs.lambda_self, 0.67);
    EXPECT_FALSE(t.pairs.zero_clamp);
    EXPECT_EQ(t.select_every, 2);
}

TEST(ExperimentConfigJson, DefaultsAndErrors) {
    const auto c = parse_experiment_config(nlohmann::json::object());
    EXPECT_EQ(c.classes(), 27u);
    EXPECT_EQ(c.probes.eval_upsample, 8u);
    EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"preset": "ade20k"})")), UsageError);
    EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"dims": "all"})")), FormatError);
    EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"n_classes": 1})")), ContractError);
}

TEST(ExperimentConfigJson, RelativePathsResolveAgainstConfigFile) {
    TempDir dir;
    {
        std::ofstream os(dir / "cfg.json");
        os << R"({"representation": {"kind": "pca", "model": "models/p.cdpc"}, "manifest": "data/m.jsonl"})";
    }
    const auto c = read_experiment_config(dir / "cfg.json");
    EXPECT_EQ(*c.manifest, dir.path() / "data/m.jsonl");
    EXPECT_EQ(*c.model, dir.path() / "models/p.cdpc");
}

TEST(Presets, ReportedTrainingConfigurations) {
    const auto& c = preset("cocostuff");
    EXPECT_EQ(c.train_steps, 7000);
    EXPECT_EQ(c.batch_size, 32);
    EXPECT_EQ(c.d_stego, 90);
    EXPECT_DOUBLE_EQ(c.lambda_knn, 1.00);
    EXPECT_DOUBLE_EQ(c.b_self, 0.12);
    EXPECT_TRUE(c.pointwise);
    const auto& y = preset("cityscapes");
    EXPECT_EQ(y.d_stego, 100);
    EXPECT_FALSE(y.pointwise);
    EXPECT_DOUBLE_EQ(y.lambda_rand, 0.91);
    const auto& p = preset("potsdam");
    EXPECT_EQ(p.train_steps, 5000);
    EXPECT_EQ(p.batch_size, 16);
    EXPECT_TRUE(p.zero_clamp);
    EXPECT_DOUBLE_EQ(p.b_knn, 0.02);
    const auto t = train_config(c);
    EXPECT_DOUBLE_EQ(t.head_lr, 0.0005);
    EXPECT_DOUBLE_EQ(t.dropout_p, 0.1);
    EXPECT_EQ(t.pairs.feature_samples, 11);
    EXPECT_EQ(t.pairs.negative_samples, 5);
    EXPECT_THROW(preset("voc"), UsageError);
}
