// memecap <stage> --config path [--seed N] [--workers K]
// Exit codes: 0 ok, 1 validation or runtime error, 2 missing upstream stage.

#include "memecap/config.hpp"
#include "memecap/corpus.hpp"
#include "memecap/error.hpp"
#include "memecap/io.hpp"
#include "memecap/pipeline.hpp"
#include "memecap/synth.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>

namespace {

memecap::PipelineConfig effective_config(const std::string &path, std::optional<std::uint64_t> seed,
                                         std::optional<int> workers, bool force) {
    memecap::PipelineConfig cfg = path.empty() ? memecap::PipelineConfig{} : memecap::load_config(path);
    if (seed) {
        cfg.seed = *seed;
    }
    if (workers) {
        cfg.workers = *workers;
    }
    if (force) {
        cfg.force = true;
    }
    if (const char *dir = std::getenv("MEMECAP_DATA_DIR"); dir != nullptr && *dir != '\0') {
        cfg.data_dir = dir;
    }
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"memecap: meme caption pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    bool force = false;
    auto common = [&](CLI::App *sub) {
        sub->add_option("--config", config_path, "INI config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override [run] seed");
        sub->add_option("--workers", workers, "threads for per-meme work")->check(CLI::PositiveNumber);
    };

    std::vector<CLI::App *> stage_cmds;
    for (memecap::Stage s : memecap::all_stages()) {
        CLI::App *sub = app.add_subcommand(std::string(memecap::to_string(s)), "run the " +
                                                                                  std::string(memecap::to_string(s)) +
                                                                                  " stage");
        common(sub);
        if (s == memecap::Stage::evaluate) {
            sub->add_flag("--force", force, "compare artifacts produced under different config hashes");
        }
        stage_cmds.push_back(sub);
    }
    CLI::App *all = app.add_subcommand("all", "run every stage in order (annotation queue not served)");
    common(all);
    CLI::App *grid = app.add_subcommand("grid", "sweep the [grid] lambda and w combinations");
    common(grid);
    CLI::App *stats = app.add_subcommand("stats", "corpus statistics of a manifest");
    std::string stats_manifest;
    stats->add_option("manifest", stats_manifest)->required()->check(CLI::ExistingFile);
    CLI::App *synth = app.add_subcommand("synth", "write a synthetic corpus");
    std::string synth_dir;
    int synth_size = 32;
    std::uint64_t synth_seed = 7;
    synth->add_option("dir", synth_dir)->required();
    synth->add_option("--size", synth_size);
    synth->add_option("--seed", synth_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (stats->parsed()) {
            const auto st = memecap::compute_stats(memecap::load_manifest(stats_manifest));
            std::printf("count %zu\nsingle %.4f\nmulti %.4f\n", st.count_total, st.fraction_single,
                        st.fraction_multi);
            for (std::size_t i = 0; i < 4; ++i) {
                std::printf("%s %.4f\n", std::string(memecap::to_string(memecap::kSentiments[i])).c_str(),
                            st.fraction_per_sentiment[i]);
            }
            std::printf("tokens avg %.2f max %d min %d\n", st.tokens.avg, st.tokens.max, st.tokens.min);
            return 0;
        }
        if (synth->parsed()) {
            const auto records = memecap::generate_synthetic_corpus(synth_dir, synth_size, synth_seed);
            std::printf("wrote %zu records to %s\n", records.size(), synth_dir.c_str());
            return 0;
        }
        const memecap::PipelineConfig cfg = effective_config(config_path, seed, workers, force);
        if (all->parsed()) {
            for (const auto &r : memecap::run_all(cfg)) {
                std::printf("%-15s %s\n", r.manifest.stage.c_str(), r.summary.c_str());
            }
            return 0;
        }
        if (grid->parsed()) {
            const auto lambdas = cfg.grid_lambda.empty() ? memecap::default_lambda_grid() : cfg.grid_lambda;
            const auto ws = cfg.grid_w.empty() ? memecap::default_w_grid() : cfg.grid_w;
            const auto result = memecap::grid_search(cfg, lambdas, ws, cfg.grid_objective);
            memecap::write_file(cfg.data_dir / "grid" / "results.jsonl", result.table());
            std::fputs(result.table().c_str(), stdout);
            const auto &b = result.rows[result.best];
            std::printf("best: lambda (ori %.2f, t %.2f, g %.2f), w (%.2f, %.2f), %s %.4f\n", b.lambda.ori, b.lambda.t,
                        b.lambda.g, b.w.w1, b.w.w2, cfg.grid_objective.c_str(), b.objective);
            return 0;
        }
        for (CLI::App *sub : stage_cmds) {
            if (sub->parsed()) {
                const auto r = memecap::run_stage(memecap::parse_stage(sub->get_name()), cfg);
                std::printf("%-15s %s\n", r.manifest.stage.c_str(), r.summary.c_str());
            }
        }
        return 0;
    } catch (const memecap::DependencyError &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
