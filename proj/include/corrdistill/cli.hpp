#ifndef CORRDISTILL_CLI_HPP
#define CORRDISTILL_CLI_HPP

#include <algorithm>
#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "corrdistill/dimred.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/feature_store.hpp"
#include "corrdistill/log.hpp"
#include "corrdistill/pipeline.hpp"
#include "corrdistill/presets.hpp"
#include "corrdistill/report.hpp"
#include "corrdistill/seg_head.hpp"
#include "corrdistill/synthetic.hpp"

namespace corrdistill::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Globals {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string preset = "cocostuff";
};

namespace detail {

inline fs::path relative_to(const fs::path& p, const fs::path& base) {
    const auto abs_p = fs::absolute(p).lexically_normal();
    const auto abs_b = fs::absolute(base).lexically_normal();
    auto rel = abs_p.lexically_relative(abs_b);
    return rel.empty() ? abs_p : rel;
}

inline std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw FormatError(FormatErrorKind::io, "not a directory: '" + dir.string() + "'");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
    auto os = binio::open_out(path);
    os << text;
    binio::finish(os, path);
}

inline std::vector<Sample> require_split(const Manifest& m, Split s) {
    auto out = load_split(m, s);
    if (out.empty()) throw SizeError(std::string("manifest has no ") + to_string(s) + " records");
    return out;
}

inline std::uint32_t feature_dim(const std::vector<Sample>& s) { return s.front().features.dim; }

}  // namespace detail

// ---------------------------------------------------------------------------
// ingest

struct IngestOptions {
    fs::path features;
    std::optional<fs::path> labels;
    std::string split = "train";
    fs::path out;
    bool append = false;
};

inline void run_ingest(const IngestOptions& o) {
    const Split split = parse_split(o.split);
    Manifest m;
    if (o.append && fs::exists(o.out)) m = read_manifest(o.out);
    const fs::path base = o.out.parent_path().empty() ? fs::path(".") : o.out.parent_path();
    for (auto& r : m.records) {
        r.feature_path = detail::relative_to(r.feature_path, base);
        if (r.label_path) r.label_path = detail::relative_to(*r.label_path, base);
    }
    std::size_t added = 0, labeled = 0;
    for (const auto& fp : detail::sorted_files(o.features, ".cdfm")) {
        const auto f = read_feature_file(fp);
        ManifestRecord r{fp.stem().string(), detail::relative_to(fp, base), std::nullopt, split};
        if (o.labels) {
            const fs::path lp = *o.labels / (r.id + ".cdlm");
            if (fs::exists(lp)) {
                const auto l = read_label_file(lp);
                if (l.height % f.height != 0 || l.width % f.width != 0 || l.height / f.height != l.width / f.width) {
                    throw ShapeError("ingest: label map of '" + r.id + "' (" + std::to_string(l.height) + "x" +
                                     std::to_string(l.width) + ") is not an integer multiple of its " +
                                     std::to_string(f.height) + "x" + std::to_string(f.width) + " feature grid");
                }
                r.label_path = detail::relative_to(lp, base);
                ++labeled;
            }
        }
        m.records.push_back(std::move(r));
        ++added;
    }
    if (added == 0) throw SizeError("ingest: no .cdfm files in '" + o.features.string() + "'");
    write_manifest(o.out, m);
    log::info("ingest: " + std::to_string(added) + " images (" + std::to_string(labeled) + " labeled) -> " + o.out.string());
}

// ---------------------------------------------------------------------------
// knn

inline void run_knn(const fs::path& manifest, const fs::path& out, std::size_t k) {
    const auto train = detail::require_split(read_manifest(manifest), Split::train);
    write_knn_index(out, build_knn_index(train, k));
}

// ---------------------------------------------------------------------------
// train-head

struct TrainHeadOptions {
    fs::path manifest;
    std::optional<fs::path> knn;
    fs::path out;
    std::optional<fs::path> losses;
    ExperimentConfig exp;
    std::optional<int> dim;
};

inline void run_train_head(const TrainHeadOptions& o, const Globals& g) {
    const auto m = read_manifest(o.manifest);
    const auto train = detail::require_split(m, Split::train);
    const auto knn = o.knn ? read_knn_index(*o.knn) : build_knn_index(train);
    auto tc = head_train_config(o.exp, o.dim.value_or(preset(o.exp.preset).d_stego), g.seed);
    HeadValidator validator;
    std::vector<Sample> val;
    if (tc.select_every > 0) {
        val = detail::require_split(m, Split::val);
        validator = cluster_miou_validator(train, val, o.exp.classes(), o.exp.probes, g.seed);
    }
    const auto tr = train_head(train, knn, tc, validator);
    write_head(o.out, tr.params);
    if (o.losses) {
        std::string text = "step,loss\n";
        char buf[64];
        for (std::size_t i = 0; i < tr.losses.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, tr.losses[i]);
            text += buf;
        }
        detail::write_text(*o.losses, text);
    }
    log::info("train-head: final loss " + std::to_string(tr.losses.back()) + ", selected step " +
              std::to_string(tr.selected_step));
}

// ---------------------------------------------------------------------------
// fit-pca / fit-rp

inline void run_fit_pca(const fs::path& manifest, int dim, const fs::path& out, const std::optional<fs::path>& variance,
                        const PcaSampling& caps, const Globals& g) {
    const auto train = detail::require_split(read_manifest(manifest), Split::train);
    const auto model = pca_fit(sample_pca_tokens(train, caps, g.seed), dim);
    write_pca(out, model);
    if (variance) write_variance_csv(*variance, model);
}

inline void run_fit_rp(std::optional<fs::path> manifest, std::optional<int> d_in, int dim, const fs::path& out,
                       const Globals& g) {
    if (!d_in) {
        if (!manifest) throw UsageError("fit-rp: need --manifest or --in-dim");
        const auto m = read_manifest(*manifest);
        const auto recs = m.of_split(Split::train);
        if (recs.empty()) throw SizeError("manifest has no train records");
        d_in = static_cast<int>(read_feature_file(recs.front()->feature_path).dim);
    }
    write_rp(out, rp_fit(*d_in, dim, g.seed));
}

// ---------------------------------------------------------------------------
// eval / sweep

inline Representation load_representation(RepKind kind, const std::optional<fs::path>& model, Eigen::Index d_vit) {
    if (kind != RepKind::raw && !model) throw UsageError(std::string("representation '") + to_string(kind) + "' needs --model");
    switch (kind) {
    case RepKind::raw: return Representation::raw(d_vit);
    case RepKind::head: return Representation::head(read_head(*model));
    case RepKind::pca: return Representation::pca(read_pca(*model));
    case RepKind::rp: return Representation::rp(read_rp(*model));
    }
    throw UsageError("unknown representation");
}

inline void run_eval(const ExperimentConfig& cfg, const fs::path& manifest, const fs::path& out,
                     const std::optional<fs::path>& run_manifest, const Globals& g) {
    const auto m = read_manifest(manifest);
    const auto train = detail::require_split(m, Split::train);
    const auto val = detail::require_split(m, Split::val);
    const auto rep = load_representation(cfg.kind, cfg.model, detail::feature_dim(train));
    auto probes = cfg.probes;
    probes.threads = g.threads;
    const auto ev = evaluate_representation(rep, train, val, cfg.classes(), probes, g.seed, to_string(cfg.kind));
    write_metrics_csv(out, ev.rows);
    if (run_manifest) {
        nlohmann::ordered_json j;
        j["dataset"] = cfg.dataset;
        j["representation"] = to_string(cfg.kind);
        j["model"] = cfg.model ? nlohmann::ordered_json(cfg.model->generic_string()) : nlohmann::ordered_json(nullptr);
        j["preset"] = preset_json(preset(cfg.preset));
        j["n_classes"] = cfg.classes();
        j["seed"] = g.seed;
        j["alignment"] = alignment_json(ev.alignment);
        detail::write_text(*run_manifest, j.dump(2) + "\n");
    }
    for (const auto& r : ev.rows) log::info(to_csv_line(r));
}

inline void run_sweep(const ExperimentConfig& cfg, const fs::path& manifest, const fs::path& out,
                      const std::optional<fs::path>& run_manifest, const std::optional<fs::path>& checkpoints) {
    const auto m = read_manifest(manifest);
    const auto train = detail::require_split(m, Split::train);
    const auto val = detail::require_split(m, Split::val);
    auto res = run_dim_sweep(cfg, train, val, checkpoints);
    write_metrics_csv(out, res.rows);
    if (run_manifest) {
        res.run_manifest["manifest"] = manifest.generic_string();
        detail::write_text(*run_manifest, res.run_manifest.dump(2) + "\n");
    }
}

// ---------------------------------------------------------------------------
// report

inline void run_report(const std::vector<fs::path>& csvs, const std::vector<fs::path>& variances, const fs::path& out_dir) {
    if (csvs.empty() && variances.empty()) throw UsageError("report: give at least one --csv or --variance file");
    if (!csvs.empty()) {
        const auto rows = merge_metrics(csvs);
        write_metrics_csv(out_dir / "merged.csv", rows);
        for (const auto& p : write_sweep_plots(out_dir, rows)) log::info("report: wrote " + p.string());
    }
    if (!variances.empty()) {
        std::vector<VarianceCurve> curves;
        for (const auto& v : variances) curves.push_back(read_variance_csv(v));
        write_variance_plot(out_dir / "explained_variance.svg", curves);
    }
}

// ---------------------------------------------------------------------------

// Parses argv and runs exactly one subcommand. Returns the process exit code.
inline int dispatch(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    CLI::App app{"Correlation distillation of ViT patch features and probe-based evaluation", "corrdistill"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    Globals g;
    std::optional<std::string> preset_flag;
    app.add_option("--seed", g.seed, "RNG seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--preset", preset_flag, "named preset")->check(CLI::IsMember({"cocostuff", "cityscapes", "potsdam"}));

    // Options shared by commands that train or evaluate.
    ExperimentConfig exp;
    std::optional<std::size_t> n_classes;
    const auto add_probe_opts = [&](CLI::App* sub) {
        sub->add_option("--n-classes", n_classes, "number of classes N_C (default: preset)")->check(CLI::Range(2, 255));
        sub->add_option("--upsample", exp.probes.eval_upsample, "validation feature upsample factor (1 = off)")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--kmeans-steps", exp.probes.kmeans.steps, "cluster probe minibatch steps")->capture_default_str();
        sub->add_option("--kmeans-batch", exp.probes.kmeans.minibatch, "cluster probe minibatch size")->capture_default_str();
        sub->add_option("--probe-steps", exp.probes.linear.steps, "linear probe steps")->capture_default_str();
        sub->add_option("--probe-batch", exp.probes.linear.batch, "linear probe batch size")->capture_default_str();
        sub->add_option("--probe-lr", exp.probes.linear.lr, "linear probe learning rate")->capture_default_str();
        sub->add_flag("!--no-cluster", exp.probes.cluster, "skip the cluster probe");
        sub->add_flag("!--no-linear", exp.probes.linear_probe, "skip the linear probe");
    };
    std::optional<int> h_steps, h_batch;
    std::optional<double> h_lr, h_dropout;
    const auto add_head_opts = [&](CLI::App* sub) {
        sub->add_option("--steps", h_steps, "training steps (default: preset)");
        sub->add_option("--batch", h_batch, "batch size (default: preset)");
        sub->add_option("--lr", h_lr, "head learning rate");
        sub->add_option("--dropout", h_dropout, "head input dropout");
        sub->add_option("--lambda-self", exp.head.lambda_self);
        sub->add_option("--lambda-knn", exp.head.lambda_knn);
        sub->add_option("--lambda-rand", exp.head.lambda_rand);
        sub->add_option("--b-self", exp.head.b_self);
        sub->add_option("--b-knn", exp.head.b_knn);
        sub->add_option("--b-rand", exp.head.b_rand);
        sub->add_option("--zero-clamp", exp.head.zero_clamp, "true|false");
        sub->add_option("--pointwise", exp.head.pointwise, "true|false");
        sub->add_option("--select-every", exp.head.select_every, "validate every N steps and keep the best checkpoint");
    };

    IngestOptions ingest;
    auto* c_ingest = app.add_subcommand("ingest", "validate feature/label files and write a manifest");
    c_ingest->add_option("--features", ingest.features, "directory of .cdfm files")->required()->check(CLI::ExistingDirectory);
    c_ingest->add_option("--labels", ingest.labels, "directory of .cdlm files named like the features")->check(CLI::ExistingDirectory);
    c_ingest->add_option("--split", ingest.split, "train or val")->check(CLI::IsMember({"train", "val"}))->capture_default_str();
    c_ingest->add_option("--out", ingest.out, "manifest path")->required();
    c_ingest->add_flag("--append", ingest.append, "add records to an existing manifest");

    fs::path manifest, out;
    std::optional<fs::path> knn_path, losses_path, variance_path, run_manifest, checkpoints, config_path, model_path;
    std::size_t k = kDefaultNeighbors;
    auto* c_knn = app.add_subcommand("knn", "build the image kNN index over the train split");
    c_knn->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c_knn->add_option("--out", out)->required();
    c_knn->add_option("-k", k, "neighbors per image")->check(CLI::PositiveNumber)->capture_default_str();

    std::optional<int> dim;
    auto* c_train = app.add_subcommand("train-head", "train the segmentation head");
    c_train->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c_train->add_option("--knn", knn_path, "precomputed kNN index (default: build one)")->check(CLI::ExistingFile);
    c_train->add_option("--out", out, "head checkpoint")->required();
    c_train->add_option("--dim", dim, "D_STEGO (default: preset)")->check(CLI::PositiveNumber);
    c_train->add_option("--losses", losses_path, "write per-step loss CSV");
    add_head_opts(c_train);
    add_probe_opts(c_train);

    PcaSampling caps;
    int fit_dim = 0;
    auto* c_pca = app.add_subcommand("fit-pca", "fit PCA on train tokens");
    c_pca->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c_pca->add_option("--dim", fit_dim)->required()->check(CLI::PositiveNumber);
    c_pca->add_option("--out", out)->required();
    c_pca->add_option("--variance", variance_path, "write explained-variance CSV");
    c_pca->add_option("--max-images", caps.max_images)->capture_default_str();
    c_pca->add_option("--max-tokens", caps.max_tokens)->capture_default_str();

    std::optional<fs::path> rp_manifest;
    std::optional<int> rp_in;
    auto* c_rp = app.add_subcommand("fit-rp", "sample an orthonormal random projection");
    c_rp->add_option("--manifest", rp_manifest, "manifest to read D_in from")->check(CLI::ExistingFile);
    c_rp->add_option("--in-dim", rp_in, "input dimension")->check(CLI::PositiveNumber);
    c_rp->add_option("--dim", fit_dim)->required()->check(CLI::PositiveNumber);
    c_rp->add_option("--out", out)->required();

    std::string rep = "raw";
    auto* c_eval = app.add_subcommand("eval", "evaluate a representation with both probes");
    c_eval->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--rep", rep)->check(CLI::IsMember({"raw", "head", "pca", "rp"}))->capture_default_str();
    c_eval->add_option("--model", model_path, "head/PCA/RP checkpoint")->check(CLI::ExistingFile);
    c_eval->add_option("--out", out, "metrics CSV")->required();
    c_eval->add_option("--run-manifest", run_manifest);
    add_probe_opts(c_eval);

    std::optional<fs::path> sweep_manifest;
    std::vector<int> dims;
    std::vector<std::uint64_t> seeds;
    auto* c_sweep = app.add_subcommand("sweep", "dimension sweep of one representation kind");
    c_sweep->add_option("--config", config_path, "experiment config JSON")->check(CLI::ExistingFile);
    c_sweep->add_option("--manifest", sweep_manifest)->check(CLI::ExistingFile);
    c_sweep->add_option("--rep", rep)->check(CLI::IsMember({"raw", "head", "pca", "rp"}));
    c_sweep->add_option("--dims", dims)->delimiter(',');
    c_sweep->add_option("--seeds", seeds)->delimiter(',');
    c_sweep->add_option("--out", out, "metrics CSV")->required();
    c_sweep->add_option("--run-manifest", run_manifest);
    c_sweep->add_option("--checkpoints", checkpoints, "directory for per-entry checkpoints");
    add_head_opts(c_sweep);
    add_probe_opts(c_sweep);

    std::vector<fs::path> csvs, variances;
    fs::path out_dir;
    auto* c_report = app.add_subcommand("report", "merge metric CSVs and draw SVG plots");
    c_report->add_option("--csv", csvs, "metrics CSV (repeatable)")->check(CLI::ExistingFile);
    c_report->add_option("--variance", variances, "explained-variance CSV (repeatable)")->check(CLI::ExistingFile);
    c_report->add_option("--out-dir", out_dir)->required();

    SyntheticConfig syn;
    auto* c_synth = app.add_subcommand("synth", "write a synthetic prototype dataset");
    c_synth->add_option("--out", out_dir)->required();
    c_synth->add_option("--images", syn.images)->capture_default_str();
    c_synth->add_option("--size", syn.height, "token grid side")->capture_default_str();
    c_synth->add_option("--dim", syn.dim)->capture_default_str();
    c_synth->add_option("--classes", syn.classes)->capture_default_str();
    c_synth->add_option("--noise", syn.noise)->capture_default_str();
    c_synth->add_option("--label-factor", syn.label_factor)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (preset_flag) exp.preset = *preset_flag;
        exp.n_classes = n_classes;
        exp.head.steps = h_steps;
        exp.head.batch_size = h_batch;
        exp.head.lr = h_lr;
        exp.head.dropout = h_dropout;
        exp.probes.threads = g.threads;
        g.preset = exp.preset;

        if (*c_ingest) {
            run_ingest(ingest);
        } else if (*c_knn) {
            run_knn(manifest, out, k);
        } else if (*c_train) {
            run_train_head({manifest, knn_path, out, losses_path, exp, dim}, g);
        } else if (*c_pca) {
            run_fit_pca(manifest, fit_dim, out, variance_path, caps, g);
        } else if (*c_rp) {
            run_fit_rp(rp_manifest, rp_in, fit_dim, out, g);
        } else if (*c_eval) {
            exp.kind = parse_rep_kind(rep);
            exp.model = model_path;
            run_eval(exp, manifest, out, run_manifest, g);
        } else if (*c_sweep) {
            ExperimentConfig cfg = exp;
            if (config_path) {
                cfg = read_experiment_config(*config_path);
                // Command-line flags win over the file.
                if (preset_flag) cfg.preset = *preset_flag;
                if (n_classes) cfg.n_classes = n_classes;
                if (c_sweep->count("--rep")) cfg.kind = parse_rep_kind(rep);
                for (const auto* name : {"--upsample", "--kmeans-steps", "--kmeans-batch", "--probe-steps", "--probe-batch",
                                         "--probe-lr", "--no-cluster", "--no-linear"}) {
                    if (c_sweep->count(name)) {
                        cfg.probes = exp.probes;
                        break;
                    }
                }
                const auto& o = exp.head;
                auto& h = cfg.head;
                for (auto [src, dst] : {std::pair{&o.steps, &h.steps}, {&o.batch_size, &h.batch_size}}) {
                    if (*src) *dst = *src;
                }
                for (auto [src, dst] : {std::pair{&o.lr, &h.lr}, {&o.dropout, &h.dropout}, {&o.lambda_self, &h.lambda_self},
                                        {&o.lambda_knn, &h.lambda_knn}, {&o.lambda_rand, &h.lambda_rand},
                                        {&o.b_self, &h.b_self}, {&o.b_knn, &h.b_knn}, {&o.b_rand, &h.b_rand}}) {
                    if (*src) *dst = *src;
                }
                if (o.zero_clamp) h.zero_clamp = o.zero_clamp;
                if (o.pointwise) h.pointwise = o.pointwise;
                if (c_sweep->count("--select-every")) h.select_every = o.select_every;
            } else {
                cfg.kind = parse_rep_kind(rep);
            }
            if (!dims.empty()) cfg.dims = dims;
            if (!seeds.empty()) cfg.seeds = seeds;
            else if (!config_path) cfg.seeds = {g.seed};
            cfg.probes.threads = g.threads;
            if (sweep_manifest) cfg.manifest = sweep_manifest;
            if (!cfg.manifest) throw UsageError("sweep: no manifest (pass --manifest or set it in --config)");
            if (!fs::exists(*cfg.manifest)) throw UsageError("sweep: manifest '" + cfg.manifest->string() + "' does not exist");
            if (cfg.dims.empty()) throw UsageError("sweep: no dims (pass --dims or set them in --config)");
            run_sweep(cfg, *cfg.manifest, out, run_manifest, checkpoints);
        } else if (*c_report) {
            run_report(csvs, variances, out_dir);
        } else if (*c_synth) {
            syn.width = syn.height;
            syn.seed = g.seed;
            write_synthetic(out_dir, make_synthetic(syn));
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    } catch (const std::exception& e) {
        log::error(e.what());
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace corrdistill::cli

#endif  // CORRDISTILL_CLI_HPP
