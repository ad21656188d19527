#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kgrl/harness.hpp"

namespace {

void print_metrics(const kgrl::EvalMetrics& m) {
    std::printf("episodes:     %zu\n", m.episodes);
    std::printf("mean_return:  %.6f\n", m.mean_return);
    std::printf("min_return:   %.6f\n", m.min_return);
    std::printf("success_rate: %.6f\n", m.success_rate);
}

void print_run_summary(const kgrl::RunRecord& rec) {
    std::printf("run: %s (%s)\n", rec.config.name.c_str(), rec.git_describe.c_str());
    std::printf("out: %s\n", rec.config.out_dir.c_str());
    for (const auto& s : rec.seeds) {
        std::printf(
            "seed %llu: final mean_return=%.4f min_return=%.4f success=%.3f  pack=%s\n",
            static_cast<unsigned long long>(s.seed), s.final_eval.mean_return,
            s.final_eval.min_return, s.final_eval.success_rate, s.pack_manifest.c_str());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kgrl: knowledge-grounded reinforcement learning lab"};
    app.require_subcommand(1);

    struct {
        std::string config, out;
        std::uint64_t seed = 0;
        bool freeze = false;
    } ta;
    struct {
        std::string run, variant, out_csv;
        std::uint64_t seed = 0;
        std::size_t episodes = 100;
        std::uint64_t eval_seed = 424242;
        std::uint64_t episode_seed = 7;
        double goal_range = 1.0;
        std::vector<std::string> drop;
        std::vector<double> scales;
    } ea;

    auto add_train_options = [&](CLI::App* sub) {
        sub->add_option("--config", ta.config, "experiment config JSON")->required();
        CLI::Option* seed = sub->add_option("--seed", ta.seed, "train only this configured seed");
        sub->add_option("--out", ta.out, "override the config's output directory");
        sub->add_flag("--freeze-keys", ta.freeze,
                      "freeze the knowledge key table during training");
        return seed;
    };
    auto run_train = [&](CLI::Option* seed_opt) {
        kgrl::ExperimentConfig cfg = kgrl::load_experiment_config(ta.config);
        kgrl::TrainOptions opts;
        if (seed_opt->count() > 0) opts.only_seed = ta.seed;
        opts.out_override = ta.out;
        opts.freeze_keys = ta.freeze;
        print_run_summary(kgrl::run_training(cfg, opts));
    };

    CLI::App* train =
        app.add_subcommand("train", "train per the config; writes run.json, curves, packs");
    CLI::Option* train_seed = add_train_options(train);
    train->callback([&] { run_train(train_seed); });

    CLI::App* compose = app.add_subcommand(
        "compose", "train with a knowledge set composed from packs and scripted rules "
                   "(same contract as train; composition lives in the config's knowledge list)");
    CLI::Option* compose_seed = add_train_options(compose);
    compose->callback([&] { run_train(compose_seed); });

    auto add_eval_options = [&](CLI::App* sub) {
        sub->add_option("--run", ea.run, "training output directory (holds run.json)")
            ->required();
        CLI::Option* seed = sub->add_option("--seed", ea.seed, "which trained seed to load");
        sub->add_option("--episodes", ea.episodes, "evaluation episodes");
        sub->add_option("--eval-seed", ea.eval_seed, "env seed stream for evaluation");
        return seed;
    };
    auto eval_options = [&](CLI::Option* seed_opt) {
        kgrl::EvalOptions opts;
        if (seed_opt->count() > 0) opts.trained_seed = ea.seed;
        opts.episodes = ea.episodes;
        opts.eval_seed = ea.eval_seed;
        opts.drop = ea.drop;
        return opts;
    };

    CLI::App* eval = app.add_subcommand("eval", "greedy evaluation of a trained run");
    CLI::Option* eval_seed_opt = add_eval_options(eval);
    eval->add_option("--drop", ea.drop, "components to drop (knowledge names or \"inner\")")
        ->take_all();
    eval->callback([&] {
        kgrl::EvalReport rep = kgrl::run_evaluation(ea.run, eval_options(eval_seed_opt));
        std::printf("env: %s (trained seed %llu)\n", rep.env_desc.c_str(),
                    static_cast<unsigned long long>(rep.trained_seed));
        print_metrics(rep.metrics);
    });

    CLI::App* transfer = app.add_subcommand(
        "transfer", "zero-shot evaluation on an overridden environment");
    CLI::Option* transfer_seed_opt = add_eval_options(transfer);
    transfer->add_option("--drop", ea.drop, "components to drop")->take_all();
    CLI::Option* variant_opt =
        transfer->add_option("--variant", ea.variant, "target env variant");
    CLI::Option* goal_opt = transfer->add_option("--goal-range", ea.goal_range,
                                                 "target goal_range_scale (point task)");
    transfer->callback([&] {
        kgrl::EvalOptions opts = eval_options(transfer_seed_opt);
        if (variant_opt->count() > 0) opts.variant_override = ea.variant;
        if (goal_opt->count() > 0) opts.goal_range_override = ea.goal_range;
        kgrl::EvalReport rep = kgrl::run_evaluation(ea.run, opts);
        std::printf("env: %s (trained seed %llu)\n", rep.env_desc.c_str(),
                    static_cast<unsigned long long>(rep.trained_seed));
        print_metrics(rep.metrics);
    });

    CLI::App* trace =
        app.add_subcommand("trace", "dump one greedy episode's attention weights (CSV + SVG)");
    trace->add_option("--run", ea.run, "training output directory")->required();
    CLI::Option* trace_seed_opt =
        trace->add_option("--seed", ea.seed, "which trained seed to load");
    trace->add_option("--episode-seed", ea.episode_seed, "episode layout seed");
    trace->add_option("--out", ea.out_csv, "trace CSV path (default <run>/trace.csv)");
    trace->callback([&] {
        kgrl::TraceOptions opts;
        if (trace_seed_opt->count() > 0) opts.trained_seed = ea.seed;
        opts.episode_seed = ea.episode_seed;
        opts.out_csv = ea.out_csv;
        kgrl::TraceResult res = kgrl::run_trace(ea.run, opts);
        std::printf("trace: %s\nplot:  %s\n", res.csv_path.c_str(), res.svg_path.c_str());
        std::printf("steps=%zu return=%.4f dominant_switches=%zu\n", res.steps.size(),
                    res.episode_return, res.dominant_switches);
        for (std::size_t i = 0; i < res.steps.size(); ++i) {
            if (res.events[i] != "none") {
                std::printf("step %zu: %s (dominant: %s)\n", res.steps[i],
                            res.events[i].c_str(),
                            res.component_names.at(static_cast<std::size_t>(res.chosen[i]))
                                .c_str());
            }
        }
    });

    CLI::App* sweep = app.add_subcommand(
        "sweep", "evaluate a point-task run across goal-range scales (CSV + SVG)");
    sweep->add_option("--run", ea.run, "training output directory")->required();
    CLI::Option* sweep_seed_opt =
        sweep->add_option("--seed", ea.seed, "which trained seed to load");
    sweep->add_option("--scales", ea.scales, "test scales (default 0.1..1.0)")->take_all();
    sweep->add_option("--episodes", ea.episodes, "episodes per scale");
    sweep->add_option("--eval-seed", ea.eval_seed, "env seed stream for evaluation");
    sweep->callback([&] {
        kgrl::SweepOptions opts;
        if (sweep_seed_opt->count() > 0) opts.trained_seed = ea.seed;
        opts.scales = ea.scales;
        opts.episodes = ea.episodes;
        opts.eval_seed = ea.eval_seed;
        std::vector<kgrl::SweepRow> rows = kgrl::run_goal_range_sweep(ea.run, opts);
        std::printf("%-8s %-12s %-12s %-12s\n", "scale", "mean_ret", "min_ret", "success");
        for (const auto& r : rows)
            std::printf("%-8.3g %-12.4f %-12.4f %-12.4f\n", r.scale, r.metrics.mean_return,
                        r.metrics.min_return, r.metrics.success_rate);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
