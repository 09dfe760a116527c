#include "doctest.h"

#include "memecap/config.hpp"
#include "memecap/error.hpp"
#include "memecap/io.hpp"
#include "memecap/pipeline.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>

using namespace memecap;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
    const fs::path p = fs::temp_directory_path() / ("memecap_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Small enough to run every stage in a few seconds.
const char *kTiny = R"(
[run]
synth_size = 12
seed = 3
[stage.align]
d = 8
d_k = 4
epochs = 2
batch = 4
[stage.sft]
epochs = 3
width = 16
layers = 1
[stage.reward]
steps = 20
[stage.rl]
steps = 4
samples = 4
)";

PipelineConfig tiny(const fs::path &dir) {
    PipelineConfig c = parse_config(kTiny);
    c.data_dir = dir;
    return c;
}

int run_cli(const std::string &args, const fs::path &data_dir) {
    const std::string cmd = "MEMECAP_DATA_DIR=" + data_dir.string() + " " + MEMECAP_CLI + " " + args +
                            " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST_CASE("an empty config reproduces the reference settings") {
    const PipelineConfig c = parse_config("");
    CHECK(c.d == 64);
    CHECK(c.d_k == 32);
    CHECK(c.grid == 4);
    CHECK(c.tau == 0.07);
    CHECK(c.lambda.ori == 0.4);
    CHECK(c.lambda.g == 0.2);
    CHECK(c.lambda.t == 0.4);
    CHECK(c.w.w1 == 0.4);
    CHECK(c.w.w2 == 0.6);
    CHECK(c.sft_epochs == 20);
    CHECK(c.max_length == 1024);
    CHECK(c.k == 4);
    CHECK(c.annotate_fraction == 0.01);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("the shipped example config spells out the defaults") {
    const PipelineConfig c = load_config(fs::path(MEMECAP_SOURCE_DIR) / "configs" / "example.ini");
    CHECK(c.canonical() == PipelineConfig{}.canonical());
    CHECK(c.grid_lambda.size() == 3);
    CHECK(c.grid_w.size() == 3);
    CHECK(c.grid_objective == "Average");
}

TEST_CASE("config values are parsed and checked") {
    const PipelineConfig c = parse_config("# comment\n[run]\nseed = 11\n[stage.align]\nscope = captions\n"
                                          "[stage.candidates]\ntemperatures = 0.5, 1.5\n"
                                          "[stage.annotate]\nannotators = x,y   # two people\n");
    CHECK(c.seed == 11);
    CHECK(c.align_caption_scope);
    CHECK(c.temperatures == std::vector<double>{0.5, 1.5});
    CHECK(c.annotators == std::vector<std::string>{"x", "y"});

    CHECK_THROWS_WITH_AS(parse_config("[run]\nnot_a_key = 1\n"), doctest::Contains("not_a_key"), ValidationError);
    CHECK_THROWS_AS(parse_config("[nowhere]\nseed = 1\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("seed = 1\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[run]\nseed = many\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[stage.align]\nscope = pixels\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[stage.align]\ntau = 0\n").validate(), ValidationError);
    CHECK_THROWS_AS(parse_config("[stage.sft]\nmax_length = 10\n").validate(), ValidationError);
    CHECK_THROWS_AS(load_config("/nonexistent/memecap.ini"), ValidationError);
}

TEST_CASE("grid tuples are written in (ori, t, g) order") {
    const PipelineConfig c = parse_config("[grid]\nlambda = 0.5,0.3,0.2; 0.6,0.2,0.2\nw = 0.5,0.5\n");
    REQUIRE(c.grid_lambda.size() == 2);
    CHECK(c.grid_lambda[0].ori == 0.5);
    CHECK(c.grid_lambda[0].t == 0.3);
    CHECK(c.grid_lambda[0].g == 0.2);
    REQUIRE(c.grid_w.size() == 1);
    CHECK(c.grid_w[0].w2 == 0.5);
    CHECK_THROWS_AS(parse_config("[grid]\nlambda = 0.5,0.5\n"), ValidationError);

    const auto l = default_lambda_grid();
    REQUIRE(l.size() == 3);
    CHECK(l[0].ori == 0.4);
    CHECK(l[0].t == 0.4);
    CHECK(l[0].g == 0.2);
    CHECK(l[2].ori == 0.6);
    CHECK(l[2].t == 0.2);
    const auto w = default_w_grid();
    REQUIRE(w.size() == 3);
    CHECK(w[1].w1 == 0.4);
    CHECK(w[1].w2 == 0.6);
}

TEST_CASE("the config hash ignores paths and worker count") {
    PipelineConfig a = parse_config("");
    PipelineConfig b = a;
    b.data_dir = "/elsewhere";
    b.workers = 8;
    b.port = 9999;
    CHECK(a.hash() == b.hash());
    b.seed = a.seed + 1;
    CHECK(a.hash() != b.hash());
    PipelineConfig c = a;
    c.lambda.g = 0.3;
    CHECK(a.hash() != c.hash());
    CHECK(a.canonical().find("stage.sft.lambda_g=") != std::string::npos);
}

TEST_CASE("stage names round-trip") {
    std::set<std::string> names;
    for (Stage s : all_stages()) {
        CHECK(parse_stage(to_string(s)) == s);
        names.insert(std::string(to_string(s)));
    }
    CHECK(names.size() == 11);
    CHECK(names.count("train-reward") == 1);
    CHECK(names.count("annotate-serve") == 1);
    CHECK_THROWS_AS(parse_stage("train_reward"), ValidationError);
}

TEST_CASE("run manifests round-trip") {
    RunManifest m;
    m.stage = "sft";
    m.config_hash = "abc";
    m.seed = 42;
    m.inputs["align/run.json"] = "00";
    m.outputs["final.bin"] = "ff";
    const RunManifest back = RunManifest::parse(m.to_json());
    CHECK(back.stage == "sft");
    CHECK(back.seed == 42);
    CHECK(back.inputs == m.inputs);
    CHECK(back.outputs == m.outputs);
    CHECK_THROWS(RunManifest::parse("{}"));
}

TEST_CASE("a stage without its upstream artifacts names the missing stage") {
    const PipelineConfig c = tiny(scratch("deps"));
    try {
        run_stage(Stage::rl, c);
        FAIL("expected a DependencyError");
    } catch (const DependencyError &e) {
        CHECK(e.missing_stage() == "train-reward");
        CHECK(std::string(e.what()).find("train-reward") != std::string::npos);
    }
    CHECK_THROWS_AS(run_stage(Stage::segment, c), DependencyError);
    CHECK_THROWS_AS(read_run_manifest(c, Stage::ingest), DependencyError);
}

TEST_CASE("parallel_for visits every index once and rethrows") {
    for (int workers : {1, 3}) {
        std::vector<std::atomic<int>> hits(50);
        parallel_for(hits.size(), workers, [&](std::size_t i) { ++hits[i]; });
        for (const auto &h : hits) {
            CHECK(h == 1);
        }
        CHECK_THROWS_WITH(parallel_for(10, workers,
                                       [](std::size_t i) {
                                           if (i == 4) {
                                               throw std::runtime_error("boom");
                                           }
                                       }),
                          "boom");
    }
}

TEST_CASE("grid search picks the best combination, ties to the earlier row") {
    PipelineConfig base = parse_config("");
    base.data_dir = "/tmp/memecap_grid_unused";
    std::vector<fs::path> dirs;
    // Planted optimum at lambda (ori 0.4, t 0.4, g 0.2); w does not affect it, so the tie goes to row 0.
    auto runner = [&](const PipelineConfig &c) {
        dirs.push_back(c.data_dir);
        const double score = -std::abs(c.lambda.ori - 0.4) - std::abs(c.lambda.t - 0.4) - std::abs(c.lambda.g - 0.2);
        return std::map<std::string, double>{{"Average", score}, {"BLEU", c.w.w1}};
    };
    const GridResult r = grid_search(base, default_lambda_grid(), default_w_grid(), "Average", runner);
    REQUIRE(r.rows.size() == 9);
    CHECK(r.best == 0);
    CHECK(r.rows[r.best].lambda.ori == 0.4);
    CHECK(r.rows[r.best].lambda.t == 0.4);
    CHECK(r.rows[r.best].w.w1 == 0.5);
    CHECK(r.rows[3].lambda.ori == 0.5); // lambda is the outer loop
    CHECK(dirs[3] == base.data_dir / "grid" / "run_03");
    const std::string table = r.table();
    CHECK(std::count(table.begin(), table.end(), '\n') == 9);

    const GridResult by_bleu = grid_search(base, default_lambda_grid(), default_w_grid(), "BLEU", runner);
    CHECK(by_bleu.best == 2); // w1 = 0.6 first appears in row 2

    const GridResult one = grid_search(base, {SftWeights{}}, {RlWeights{}}, "Average", runner);
    CHECK(one.rows.size() == 1);
    CHECK(one.best == 0);

    CHECK_THROWS_AS(grid_search(base, default_lambda_grid(), default_w_grid(), "Humor", runner), ValidationError);
    CHECK_THROWS_AS(grid_search(base, {}, default_w_grid(), "Average", runner), ValidationError);
}

TEST_CASE("a full run is deterministic and independent of the worker count") {
    PipelineConfig a = tiny(scratch("det_a"));
    PipelineConfig b = tiny(scratch("det_b"));
    b.workers = 2;
    const auto ra = run_all(a);
    const auto rb = run_all(b);
    REQUIRE(ra.size() == all_stages().size());
    REQUIRE(rb.size() == ra.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        INFO(ra[i].manifest.stage);
        CHECK(ra[i].manifest.outputs == rb[i].manifest.outputs);
        CHECK(ra[i].manifest.inputs == rb[i].manifest.inputs);
        CHECK(!ra[i].manifest.outputs.empty());
    }
    CHECK(fs::exists(a.data_dir / "evaluate" / "summary.json"));

    SUBCASE("evaluate refuses artifacts from another config unless forced") {
        PipelineConfig other = a;
        other.rl_steps = 5;
        CHECK_THROWS_WITH_AS(run_stage(Stage::evaluate, other), doctest::Contains("--force"), ValidationError);
        other.force = true;
        CHECK_NOTHROW(run_stage(Stage::evaluate, other));
    }
    SUBCASE("a different seed changes the artifacts") {
        PipelineConfig c = tiny(scratch("det_c"));
        c.seed = 4;
        const auto rc = run_stage(Stage::ingest, c);
        CHECK(rc.manifest.outputs != ra[0].manifest.outputs);
    }
}

TEST_CASE("the command line maps failures to exit codes") {
    const fs::path dir = scratch("cli");
    const fs::path ini = dir / "tiny.ini";
    write_file(ini, kTiny);
    const fs::path bad = dir / "bad.ini";
    write_file(bad, "[run]\nbogus = 1\n");
    const fs::path data = dir / "data";

    CHECK(run_cli("rl --config " + ini.string(), data) == 2);
    CHECK(run_cli("ingest --config " + bad.string(), data) == 1);
    CHECK(run_cli("ingest --config " + ini.string() + " --seed 5", data) == 0);
    CHECK(read_run_manifest(PipelineConfig{.data_dir = data}, Stage::ingest).seed == 5);
    CHECK(run_cli("segment --config " + ini.string() + " --workers 2", data) == 0);
    CHECK(run_cli("segment --config " + ini.string() + " --workers 0", data) != 0);
    CHECK(run_cli("no-such-stage", data) != 0);
    CHECK(run_cli("synth " + (dir / "corpus").string() + " --size 4", data) == 0);
    CHECK(fs::exists(dir / "corpus"));
}
