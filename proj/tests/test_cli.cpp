#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <map>
#include <sstream>

#include "corrdistill/cli.hpp"
#include "test_util.hpp"

using namespace corrdistill;
using testutil::TempDir;

namespace {

struct Run {
    int code;
    std::string err;
};

Run run_cli(const std::string& args) {
    TempDir tmp;
    const std::string cmd = std::string(CORRDISTILL_CLI_PATH) + " " + args + " >" + (tmp / "out").string() + " 2>" +
                            (tmp / "err").string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, testutil::slurp(tmp / "err")};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = testutil::slurp(e.path());
    }
    return out;
}

// One small synthetic dataset shared by every test in this file.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir;
        const auto r = run_cli("synth --out " + q(data()) + " --images 16 --size 4 --dim 6 --classes 3 --noise 0.5 --label-factor 2");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static fs::path data() { return dir_->path() / "data"; }
    static fs::path manifest() { return data() / "manifest.jsonl"; }

    static inline const std::string fast =
        " --upsample 1 --kmeans-steps 20 --kmeans-batch 64 --probe-steps 30 --probe-batch 64";

    TempDir work;

private:
    static inline TempDir* dir_ = nullptr;
};

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
    EXPECT_EQ(run_cli("eval --out " + q(work / "m.csv")).code, 2);
    const auto missing = run_cli("eval --manifest " + q(work / "nope.jsonl") + " --out " + q(work / "m.csv"));
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("nope.jsonl"), std::string::npos);
    EXPECT_EQ(run_cli("eval --manifest " + q(manifest()) + " --rep pca --out " + q(work / "m.csv")).code, 2);
    EXPECT_EQ(run_cli("eval --manifest " + q(manifest()) + " --rep umap --out " + q(work / "m.csv")).code, 2);
    EXPECT_EQ(run_cli("sweep --rep pca --out " + q(work / "m.csv")).code, 2);
    EXPECT_EQ(run_cli("--preset voc synth --out " + q(work / "d")).code, 2);
    EXPECT_EQ(run_cli("report --out-dir " + q(work.path())).code, 2);
    EXPECT_FALSE(fs::exists(work / "m.csv"));
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
    {
        std::ofstream os(work / "bad.jsonl");
        os << "{\"id\": 1}\n";
    }
    EXPECT_EQ(run_cli("eval --manifest " + q(work / "bad.jsonl") + " --out " + q(work / "m.csv")).code, 1);
    // Dimension larger than D_vit.
    EXPECT_EQ(run_cli("fit-pca --manifest " + q(manifest()) + " --dim 7 --out " + q(work / "p.cdpc")).code, 1);
}

TEST_F(CliTest, HelpExitsZero) {
    EXPECT_EQ(run_cli("--help").code, 0);
    EXPECT_EQ(run_cli("sweep --help").code, 0);
}

TEST_F(CliTest, EvalRawWritesMetricsCsv) {
    const auto r = run_cli("eval --manifest " + q(manifest()) + " --rep raw --out " + q(work / "m.csv") + " --run-manifest " +
                       q(work / "run.json") + fast);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_metrics_csv(work / "m.csv");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].method, "raw");
    EXPECT_EQ(rows[0].representation_dim, 6);
    EXPECT_EQ(rows[0].probe, "cluster");
    EXPECT_EQ(rows[1].probe, "linear");
    EXPECT_EQ(rows[0].split, "val");
    const auto run = nlohmann::json::parse(testutil::slurp(work / "run.json"));
    EXPECT_TRUE(run.contains("alignment"));
}

TEST_F(CliTest, FitAndEvaluateEachModelKind) {
    ASSERT_EQ(run_cli("fit-pca --manifest " + q(manifest()) + " --dim 3 --out " + q(work / "p.cdpc") + " --variance " +
                  q(work / "v.csv"))
                  .code,
              0);
    EXPECT_EQ(read_pca(work / "p.cdpc").out_dim(), 3);
    const auto variance = testutil::slurp(work / "v.csv");
    EXPECT_EQ(std::count(variance.begin(), variance.end(), '\n'), 7);
    ASSERT_EQ(run_cli("fit-rp --in-dim 6 --dim 2 --out " + q(work / "r.cdrp")).code, 0);
    ASSERT_EQ(run_cli("--seed 1 fit-rp --manifest " + q(manifest()) + " --dim 2 --out " + q(work / "r1.cdrp")).code, 0);
    EXPECT_EQ(read_rp(work / "r.cdrp").matrix.rows(), 6);
    EXPECT_NE(read_rp(work / "r.cdrp").matrix, read_rp(work / "r1.cdrp").matrix);
    ASSERT_EQ(run_cli("knn --manifest " + q(manifest()) + " -k 3 --out " + q(work / "k.cdkn")).code, 0);
    const auto tr = run_cli("train-head --manifest " + q(manifest()) + " --knn " + q(work / "k.cdkn") +
                        " --dim 2 --steps 3 --batch 4 --out " + q(work / "h.cdhd") + " --losses " + q(work / "loss.csv"));
    ASSERT_EQ(tr.code, 0) << tr.err;
    EXPECT_EQ(read_head(work / "h.cdhd").out_dim(), 2);
    const auto losses = testutil::slurp(work / "loss.csv");
    EXPECT_EQ(std::count(losses.begin(), losses.end(), '\n'), 4);

    for (const auto& [rep, model] : std::vector<std::pair<std::string, std::string>>{{"pca", "p.cdpc"}, {"rp", "r.cdrp"}, {"head", "h.cdhd"}}) {
        const auto r = run_cli("eval --manifest " + q(manifest()) + " --rep " + rep + " --model " + q(work / model) + " --out " +
                           q(work / (rep + ".csv")) + fast);
        ASSERT_EQ(r.code, 0) << rep << r.err;
        const auto rows = read_metrics_csv(work / (rep + ".csv"));
        EXPECT_EQ(rows.front().method, rep);
        EXPECT_EQ(rows.front().representation_dim, rep == "pca" ? 3 : 2);
    }
    // Model kind must match --rep.
    EXPECT_EQ(run_cli("eval --manifest " + q(manifest()) + " --rep pca --model " + q(work / "r.cdrp") + " --out " +
                  q(work / "x.csv"))
                  .code,
              1);
}

TEST_F(CliTest, IngestWritesRelativeManifest) {
    const auto r = run_cli("ingest --features " + q(data() / "features") + " --labels " + q(data() / "labels") + " --out " +
                       q(data() / "ingested.jsonl"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_manifest(data() / "ingested.jsonl");
    EXPECT_EQ(m.records.size(), 16u);
    for (const auto& rec : m.records) {
        EXPECT_TRUE(rec.label_path);
        EXPECT_EQ(rec.split, Split::train);
        EXPECT_TRUE(fs::exists(rec.feature_path));
    }
    // Stored paths are relative to the manifest.
    const auto text = testutil::slurp(data() / "ingested.jsonl");
    EXPECT_EQ(text.find(data().string()), std::string::npos);
    fs::remove(data() / "ingested.jsonl");
}

TEST_F(CliTest, SweepAndReport) {
    const auto s = run_cli("sweep --manifest " + q(manifest()) + " --rep pca --dims 2,4 --seeds 0,1 --out " + q(work / "pca.csv") +
                       " --run-manifest " + q(work / "run.json") + fast);
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(read_metrics_csv(work / "pca.csv").size(), 2u * 2u * 2u);
    ASSERT_EQ(run_cli("fit-pca --manifest " + q(manifest()) + " --dim 6 --out " + q(work / "p.cdpc") + " --variance " +
                  q(work / "v.csv"))
                  .code,
              0);
    const auto r = run_cli("report --csv " + q(work / "pca.csv") + " --variance " + q(work / "v.csv") + " --out-dir " +
                       q(work / "report"));
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"merged.csv", "cluster_accuracy.svg", "cluster_miou.svg", "linear_accuracy.svg",
                          "linear_miou.svg", "explained_variance.svg"}) {
        EXPECT_TRUE(fs::exists(work / "report" / f)) << f;
    }
    EXPECT_EQ(testutil::slurp(work / "report" / "cluster_miou.svg").rfind("<svg", 0), 0u);
}

TEST_F(CliTest, SweepConfigWithOverrides) {
    {
        std::ofstream os(work / "cfg.json");
        os << R"({"representation": "rp", "dims": [2, 3], "seeds": [5], "eval_upsample": 1, "n_classes": 3,
                  "cluster_probe": {"steps": 20, "minibatch": 64}, "linear_probe": {"enabled": false},
                  "manifest": ")"
           << manifest().string() << R"("})";
    }
    ASSERT_EQ(run_cli("sweep --config " + q(work / "cfg.json") + " --out " + q(work / "a.csv")).code, 0);
    const auto a = read_metrics_csv(work / "a.csv");
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0].seed, 5u);
    ASSERT_EQ(run_cli("sweep --config " + q(work / "cfg.json") + " --dims 3 --out " + q(work / "b.csv")).code, 0);
    const auto b = read_metrics_csv(work / "b.csv");
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b[0], a[1]);
}

TEST_F(CliTest, RerunsAreByteIdenticalAndInputsUntouched) {
    const auto before = snapshot(data());
    const std::string args = "sweep --manifest " + q(manifest()) + " --rep head --dims 2 --steps 3 --batch 4" + fast;
    ASSERT_EQ(run_cli("--seed 3 " + args + " --out " + q(work / "a.csv") + " --checkpoints " + q(work / "ca")).code, 0);
    ASSERT_EQ(run_cli("--seed 3 " + args + " --out " + q(work / "b.csv") + " --checkpoints " + q(work / "cb")).code, 0);
    ASSERT_EQ(run_cli("--seed 3 --threads 4 " + args + " --out " + q(work / "c.csv")).code, 0);
    EXPECT_EQ(testutil::slurp(work / "a.csv"), testutil::slurp(work / "b.csv"));
    EXPECT_EQ(testutil::slurp(work / "a.csv"), testutil::slurp(work / "c.csv"));
    EXPECT_EQ(snapshot(work / "ca"), snapshot(work / "cb"));
    EXPECT_FALSE(snapshot(work / "ca").empty());
    ASSERT_EQ(run_cli("--seed 4 " + args + " --out " + q(work / "d.csv")).code, 0);
    EXPECT_NE(testutil::slurp(work / "a.csv"), testutil::slurp(work / "d.csv"));
    EXPECT_EQ(snapshot(data()), before);
}

TEST(CliDispatch, InProcessUsageError) {
    std::ostringstream err;
    const char* argv[] = {"corrdistill", "nonsense"};
    EXPECT_EQ(cli::dispatch(2, const_cast<char**>(argv), err), cli::kExitUsage);
    EXPECT_NE(err.str().find("error"), std::string::npos);
}
