#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgrl/errors.hpp"
#include "kgrl/grid_env.hpp"
#include "kgrl/harness.hpp"
#include "kgrl/knowledge.hpp"
#include "kgrl/nn.hpp"
#include "kgrl/point_env.hpp"

using namespace kgrl;
using nlohmann::json;

namespace {

std::string test_root() {
    return "/tmp/kgrl_test_harness_" + std::to_string(::getpid());
}

// Removes every artifact the suite wrote once the binary exits.
struct RootCleaner {
    ~RootCleaner() {
        std::error_code ec;
        std::filesystem::remove_all(test_root(), ec);
    }
} cleaner;

std::string fresh_dir(const std::string& stem) {
    std::string dir = test_root() + "/" + stem;
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

json tiny_grid_config(const std::string& out_dir) {
    return json{
        {"name", "t-grid"},
        {"env", {{"task", "grid"}, {"variant", "doorkey"}, {"width", 5}, {"height", 5}}},
        {"actor",
         {{"kind", "kgrl"},
          {"d_k", 4},
          {"channels", {2, 3, 4}},
          {"kernel", 2},
          {"stride", 1},
          {"head_width", 8},
          {"trunk_width", 8}}},
        {"knowledge",
         {{{"scripted", "grid_kg1_pickup_key"}},
          {{"scripted", "grid_kg2_open_door"}},
          {{"scripted", "grid_kg3_reach_goal"}}}},
        {"algo",
         {{"name", "ppo"}, {"n_envs", 2}, {"n_steps", 16}, {"epochs", 2}, {"minibatch", 32}}},
        {"seeds", {0}},
        {"total_steps", 64},
        {"eval_every", 32},
        {"eval_episodes", 2},
        {"final_eval_episodes", 3},
        {"out_dir", out_dir},
    };
}

json tiny_point_config(const std::string& out_dir) {
    return json{
        {"name", "t-point"},
        {"env", {{"task", "point"}, {"variant", "reach"}, {"goal_range_scale", 1.0}}},
        {"actor",
         {{"kind", "kgrl"}, {"d_k", 4}, {"hidden", {8, 8}}, {"key_query_hidden", {8}}}},
        {"knowledge", {{{"scripted", "cont_kg1_to_goal"}, {"epsilon", "inf"}}}},
        {"algo",
         {{"name", "sac"},
          {"batch", 16},
          {"start_steps", 50},
          {"update_every", 8},
          {"critic_hidden", {8, 8}}}},
        {"seeds", {0}},
        {"total_steps", 200},
        {"eval_every", 100},
        {"eval_episodes", 2},
        {"final_eval_episodes", 3},
        {"out_dir", out_dir},
    };
}

std::string parse_error(const json& j) {
    try {
        parse_experiment_config(j.dump());
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

bool mentions(const std::string& message, const std::string& needle) {
    return message.find(needle) != std::string::npos;
}

// Trains the tiny grid run once; every reader shares the artifacts.
const std::string& grid_run_dir() {
    static const std::string dir = [] {
        std::string out = fresh_dir("grid-run");
        run_training(parse_experiment_config(tiny_grid_config(out).dump()));
        return out;
    }();
    return dir;
}

const std::string& point_run_dir() {
    static const std::string dir = [] {
        std::string out = fresh_dir("point-run");
        run_training(parse_experiment_config(tiny_point_config(out).dump()));
        return out;
    }();
    return dir;
}

std::vector<double> softmax(const std::vector<double>& raw) {
    double mx = *std::max_element(raw.begin(), raw.end());
    std::vector<double> e(raw.size());
    double total = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) total += e[i] = std::exp(raw[i] - mx);
    for (double& v : e) v /= total;
    return e;
}

}  // namespace

TEST_CASE("config errors carry precise field paths") {
    const std::string out = test_root() + "/unused";

    json j = tiny_grid_config(out);
    j["surprise"] = 1;
    CHECK(mentions(parse_error(j), "config.surprise: unknown field"));

    j = tiny_grid_config(out);
    j.erase("name");
    CHECK(mentions(parse_error(j), "config.name: missing required field"));

    j = tiny_grid_config(out);
    j["env"]["bogus"] = true;
    CHECK(mentions(parse_error(j), "config.env.bogus: unknown field"));

    j = tiny_grid_config(out);
    j["seeds"] = "zero";
    CHECK(mentions(parse_error(j), "config.seeds"));

    j = tiny_grid_config(out);
    j["seeds"] = json::array();
    CHECK(mentions(parse_error(j), "config.seeds: at least one seed"));

    j = tiny_grid_config(out);
    j["seeds"] = {3, 3};
    CHECK(mentions(parse_error(j), "duplicate seed 3"));

    j = tiny_grid_config(out);
    j["actor"] = {{"kind", "baseline"},
                  {"channels", {2, 3, 4}},
                  {"kernel", 2},
                  {"stride", 1},
                  {"head_width", 8},
                  {"trunk_width", 8}};
    CHECK(mentions(parse_error(j), "baseline actor takes no knowledge"));

    j = tiny_grid_config(out);
    j["knowledge"] = json::array();
    CHECK(mentions(parse_error(j), "at least one entry"));

    j = tiny_grid_config(out);
    j["knowledge"][0]["scripted"] = "grid_kg9_levitate";
    CHECK(mentions(parse_error(j), "config.knowledge[0].scripted: unknown grid rule"));

    j = tiny_grid_config(out);
    j["knowledge"][1]["epsilon"] = 0.5;
    CHECK(mentions(parse_error(j), "config.knowledge[1].epsilon: grid rules take no epsilon"));

    j = tiny_point_config(out);
    j["knowledge"][0].erase("epsilon");
    CHECK(mentions(parse_error(j), "config.knowledge[0].epsilon: missing required field"));

    j = tiny_point_config(out);
    j["knowledge"][0]["epsilon"] = 0.0;
    CHECK(mentions(parse_error(j), "config.knowledge[0].epsilon: must be positive"));

    j = tiny_grid_config(out);
    j["knowledge"][0] = {{"pack", "x.json"}, {"epsilon", 1.0}};
    CHECK(mentions(parse_error(j), "packs take no epsilon"));

    j = tiny_grid_config(out);
    j["knowledge"][0] = {{"scripted", "grid_kg1_pickup_key"}, {"pack", "x.json"}};
    CHECK(mentions(parse_error(j), "exactly one of \"scripted\" or \"pack\""));

    j = tiny_grid_config(out);
    j["knowledge"][0]["name"] = "inner";
    CHECK(mentions(parse_error(j), "\"inner\" is reserved"));

    j = tiny_grid_config(out);
    j["knowledge"][1]["name"] = "grid_kg1_pickup_key";
    CHECK(mentions(parse_error(j), "duplicate component name"));

    j = tiny_grid_config(out);
    j["algo"] = {{"name", "sac"}};
    CHECK(mentions(parse_error(j), "the grid task trains with \"ppo\""));

    j = tiny_point_config(out);
    j["algo"] = {{"name", "ppo"}};
    CHECK(mentions(parse_error(j), "the point task trains with \"sac\""));

    j = tiny_grid_config(out);
    j["eval_every"] = 65;
    CHECK(mentions(parse_error(j), "config.eval_every: must lie in [1, total_steps]"));

    j = tiny_grid_config(out);
    j["name"] = "spaced out";
    CHECK(mentions(parse_error(j), "config.name"));

    j = tiny_grid_config(out);
    j["algo"]["horizon"] = 10;
    CHECK(mentions(parse_error(j), "config.algo.horizon: unknown field"));

    CHECK_THROWS_AS(parse_experiment_config("not json"), ConfigError);
    CHECK_THROWS_AS(load_experiment_config(test_root() + "/no_such.json"), IoError);
}

TEST_CASE("config snapshots round-trip canonically") {
    for (const json& j : {tiny_grid_config("/tmp/x"), tiny_point_config("/tmp/x")}) {
        ExperimentConfig cfg = parse_experiment_config(j.dump());
        const std::string text = experiment_config_text(cfg);
        ExperimentConfig again = parse_experiment_config(text);
        CHECK(experiment_config_text(again) == text);
        CHECK(again.name == cfg.name);
        CHECK(again.task == cfg.task);
        CHECK(again.seeds == cfg.seeds);
        CHECK(again.knowledge.size() == cfg.knowledge.size());
    }

    ExperimentConfig cfg = parse_experiment_config(tiny_point_config("/tmp/x").dump());
    CHECK(cfg.knowledge[0].epsilon == std::numeric_limits<double>::infinity());
    CHECK(mentions(experiment_config_text(cfg), "\"inf\""));
}

TEST_CASE("grid training is deterministic and writes the documented artifacts") {
    const std::string& dir = grid_run_dir();
    for (const char* rel : {"/run.json", "/curves.csv", "/curves.svg", "/seed0/actor.blob",
                            "/seed0/pack.json", "/seed0/pack.blob", "/seed0/stats.jsonl"}) {
        CHECK_MESSAGE(std::filesystem::exists(dir + rel), rel);
    }

    RunRecord rec = read_run_record(dir + "/run.json");
    REQUIRE(rec.seeds.size() == 1);
    const SeedRunResult& sr = rec.seeds[0];
    CHECK(sr.seed == 0);
    REQUIRE(sr.evals.size() >= 2);
    CHECK(sr.evals.front().step == 0);
    for (std::size_t i = 1; i < sr.evals.size(); ++i)
        CHECK(sr.evals[i].step > sr.evals[i - 1].step);
    CHECK(sr.evals.back().step >= 64);
    CHECK(sr.final_eval.episodes == 3);
    CHECK(sr.evals.back().metrics.episodes == sr.final_eval.episodes);
    CHECK(sr.actor_blob == "seed0/actor.blob");
    CHECK(sr.pack_manifest == "seed0/pack.json");

    const std::string curves = slurp_file(dir + "/curves.csv");
    CHECK(curves.rfind(kCurvesCsvHeader + "\n", 0) == 0);

    // Identical config + seed => bitwise identical checkpoints and metrics.
    std::string dir2 = fresh_dir("grid-run-again");
    TrainOptions opts;
    opts.out_override = dir2;
    RunRecord rec2 = run_training(parse_experiment_config(tiny_grid_config(dir).dump()), opts);
    CHECK(slurp_file(dir + "/seed0/actor.blob") == slurp_file(dir2 + "/seed0/actor.blob"));
    CHECK(slurp_file(dir + "/curves.csv") == slurp_file(dir2 + "/curves.csv"));
    REQUIRE(rec2.seeds.size() == 1);
    for (std::size_t i = 0; i < sr.evals.size(); ++i) {
        CHECK(rec2.seeds[0].evals[i].step == sr.evals[i].step);
        CHECK(rec2.seeds[0].evals[i].metrics.mean_return == sr.evals[i].metrics.mean_return);
    }
    CHECK(rec2.config.out_dir == dir2);  // the override is recorded honestly

    // The exported pack loads and carries a key sized to the actor's d_k.
    LoadedPack pack = load_pack(dir + "/seed0/pack.json");
    CHECK(pack.name == "t-grid");
    CHECK(pack.key.size() == 4);
}

TEST_CASE("freeze keys holds the key table at its initial values") {
    ExperimentConfig cfg = parse_experiment_config(tiny_grid_config(fresh_dir("frozen")).dump());
    TrainOptions opts;
    opts.freeze_keys = true;
    run_training(cfg, opts);

    GridBundle init = make_grid_bundle(cfg, 0, false);
    GridBundle frozen = make_grid_bundle(cfg, 0, false);
    load_actor_checkpoint(*frozen.store, cfg.out_dir + "/seed0/actor.blob");

    const std::vector<double>& want = init.store->get("actor.keys")->value;
    const std::vector<double>& got = frozen.store->get("actor.keys")->value;
    REQUIRE(init.store->get("actor.keys")->shape == frozen.store->get("actor.keys")->shape);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(static_cast<float>(want[i]) == static_cast<float>(got[i]));

    // The rest of the actor still trains: at least one parameter moved.
    bool moved = false;
    for (const auto& name : frozen.store->names()) {
        const std::vector<double>& a = init.store->get(name)->value;
        const std::vector<double>& b = frozen.store->get(name)->value;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (static_cast<float>(a[i]) != static_cast<float>(b[i])) moved = true;
    }
    CHECK(moved);

    // Without the freeze the same run moves the keys.
    GridBundle trained = make_grid_bundle(cfg, 0, false);
    load_actor_checkpoint(*trained.store, grid_run_dir() + "/seed0/actor.blob");
    const std::vector<double>& free_keys = trained.store->get("actor.keys")->value;
    bool keys_moved = false;
    for (std::size_t i = 0; i < want.size(); ++i)
        if (static_cast<float>(want[i]) != static_cast<float>(free_keys[i])) keys_moved = true;
    CHECK(keys_moved);

    ExperimentConfig base = cfg;
    base.actor_kind = "baseline";
    base.knowledge.clear();
    CHECK_THROWS_AS(run_training(base, opts), ConfigError);
}

TEST_CASE("evaluation reads but never mutates run artifacts") {
    const std::string& dir = grid_run_dir();
    const std::vector<std::string> tracked = {dir + "/seed0/actor.blob", dir + "/seed0/pack.json",
                                              dir + "/seed0/pack.blob"};
    std::vector<std::uint64_t> before;
    for (const auto& p : tracked) before.push_back(fnv1a_file(p));

    EvalOptions opts;
    opts.episodes = 3;
    EvalReport rep = run_evaluation(dir, opts);
    CHECK(rep.metrics.episodes == 3);
    CHECK(rep.trained_seed == 0);
    CHECK(mentions(rep.env_desc, "doorkey"));

    opts.drop = {"grid_kg1_pickup_key", "inner"};
    run_evaluation(dir, opts);

    opts.drop.clear();
    opts.variant_override = "empty";
    rep = run_evaluation(dir, opts);
    CHECK(mentions(rep.env_desc, "empty"));

    for (std::size_t i = 0; i < tracked.size(); ++i)
        CHECK(fnv1a_file(tracked[i]) == before[i]);

    EvalOptions bad;
    bad.trained_seed = 99;
    CHECK_THROWS_AS(run_evaluation(dir, bad), ConfigError);
    bad = EvalOptions{};
    bad.drop = {"no_such_component"};
    CHECK_THROWS_AS(run_evaluation(dir, bad), UsageError);
    bad = EvalOptions{};
    bad.goal_range_override = 0.5;  // grid runs have no goal range
    CHECK_THROWS_AS(run_evaluation(dir, bad), ConfigError);
}

TEST_CASE("greedy evaluation equals a manual greedy rollout") {
    ExperimentConfig cfg = parse_experiment_config(tiny_grid_config("/tmp/x").dump());
    GridBundle b = make_grid_bundle(cfg, 0, false);
    const AblationMask mask = full_mask(b.actor->knowledge());

    const std::uint64_t env_seed = 91;
    EvalMetrics m = evaluate_grid_policy(*b.actor, cfg.grid, mask, 2, env_seed);

    GridEnv env(cfg.grid, env_seed);
    double total = 0.0, worst = std::numeric_limits<double>::infinity();
    std::size_t wins = 0;
    for (int ep = 0; ep < 2; ++ep) {
        GridObservation obs = env.reset();
        double ret = 0.0;
        while (true) {
            GridStepResult r = env.step_state(greedy_grid_action(*b.actor, obs, mask));
            ret += r.reward;
            if (r.done) {
                if (r.reward > 0.0) ++wins;
                break;
            }
            obs = encode_observation(r.state);
        }
        total += ret;
        worst = std::min(worst, ret);
    }
    CHECK(m.mean_return == doctest::Approx(total / 2.0).epsilon(1e-12));
    CHECK(m.min_return == doctest::Approx(worst).epsilon(1e-12));
    CHECK(m.success_rate == doctest::Approx(wins / 2.0).epsilon(1e-12));

    // Greedy readout is deterministic: identical calls, identical actions.
    GridEnv env2(cfg.grid, 17);
    GridObservation obs = env2.reset();
    CHECK(greedy_grid_action(*b.actor, obs, mask) == greedy_grid_action(*b.actor, obs, mask));
}

TEST_CASE("trace artifacts round-trip through the CSV") {
    TraceOptions opts;
    opts.episode_seed = 3;
    TraceResult tr = run_trace(grid_run_dir(), opts);

    REQUIRE(tr.component_names.size() == 4);
    CHECK(tr.component_names[0] == "inner");
    REQUIRE(!tr.steps.empty());
    REQUIRE(tr.raw.size() == tr.steps.size());
    REQUIRE(tr.normalized.size() == tr.steps.size());
    REQUIRE(tr.chosen.size() == tr.steps.size());
    REQUIRE(tr.events.size() == tr.steps.size());

    const std::string text = slurp_file(tr.csv_path);
    std::istringstream in(text);
    std::string line;
    REQUIRE(std::getline(in, line));
    std::string want_header = "step,chosen,event";
    for (const auto& n : tr.component_names) want_header += ",raw_" + n;
    for (const auto& n : tr.component_names) want_header += ",norm_" + n;
    CHECK(line == want_header);

    std::size_t row = 0;
    std::size_t switches = 0;
    int prev = -1;
    while (std::getline(in, line)) {
        REQUIRE(row < tr.steps.size());
        std::vector<std::string> cells;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                cells.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        cells.push_back(cur);
        REQUIRE(cells.size() == 3 + 2 * tr.component_names.size());
        CHECK(std::stoul(cells[0]) == tr.steps[row]);
        const int chosen = std::stoi(cells[1]);
        CHECK(chosen == tr.chosen[row]);

        std::vector<double> raw(tr.component_names.size());
        std::vector<double> norm(tr.component_names.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            raw[i] = std::stod(cells[3 + i]);
            norm[i] = std::stod(cells[3 + raw.size() + i]);
        }
        const std::vector<double> want = softmax(raw);
        double sum = 0.0;
        for (std::size_t i = 0; i < norm.size(); ++i) {
            CHECK(norm[i] == doctest::Approx(want[i]).epsilon(1e-9));
            sum += norm[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        const auto mx = std::max_element(norm.begin(), norm.end());
        CHECK(chosen == static_cast<int>(mx - norm.begin()));

        static const std::set<std::string> kAllowed{"none", "key_pickup", "door_open", "grasp",
                                                    "success"};
        CHECK(kAllowed.count(cells[2]) == 1);
        if (prev >= 0 && chosen != prev) ++switches;
        prev = chosen;
        ++row;
    }
    CHECK(row == tr.steps.size());
    CHECK(switches == tr.dominant_switches);
    CHECK(slurp_file(tr.svg_path).rfind("<svg", 0) == 0);
}

TEST_CASE("run records round-trip and validate against the committed schema") {
    CHECK(run_record_schema_text() ==
          slurp_file(std::string(KGRL_SOURCE_DIR) + "/configs/run_record.schema.json"));

    const std::string path = grid_run_dir() + "/run.json";
    const std::string text = slurp_file(path);
    validate_run_record_text(text);  // must not throw

    json j = json::parse(text);
    CHECK(j["format"] == "kgrl-run-v1");

    json broken = j;
    broken.erase("git_describe");
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    broken = j;
    broken["mystery"] = 1;
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    broken = j;
    broken["format"] = "kgrl-run-v2";
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    broken = j;
    broken["seeds"][0]["evals"] = json::array();
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    broken = j;
    std::swap(broken["seeds"][0]["evals"][0], broken["seeds"][0]["evals"][1]);
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);  // steps must rise

    broken = j;
    broken["seeds"][0]["evals"][0]["step"] = "zero";
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    broken = j;
    broken["config"]["name"] = "not a name";
    CHECK_THROWS_AS(validate_run_record_text(broken.dump()), ConfigError);

    RunRecord rec = read_run_record(path);
    const std::string copy = test_root() + "/copy-run.json";
    write_run_record(rec, copy);
    RunRecord again = read_run_record(copy);
    CHECK(again.git_describe == rec.git_describe);
    REQUIRE(again.seeds.size() == rec.seeds.size());
    CHECK(again.seeds[0].final_eval.mean_return == rec.seeds[0].final_eval.mean_return);
    CHECK(experiment_config_text(again.config) == experiment_config_text(rec.config));
}

TEST_CASE("point runs support sweeps and goal-range transfer") {
    const std::string& dir = point_run_dir();
    CHECK(std::filesystem::exists(dir + "/seed0/pack.json"));

    SweepOptions opts;
    opts.scales = {0.25, 1.0};
    opts.episodes = 2;
    std::vector<SweepRow> rows = run_goal_range_sweep(dir, opts);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].scale == 0.25);
    CHECK(rows[1].scale == 1.0);
    CHECK(rows[0].metrics.episodes == 2);

    const std::string csv = slurp_file(dir + "/sweep.csv");
    CHECK(csv.rfind(kSweepCsvHeader + "\n", 0) == 0);
    CHECK(slurp_file(dir + "/sweep.svg").rfind("<svg", 0) == 0);

    EvalOptions ev;
    ev.episodes = 2;
    ev.goal_range_override = 0.5;
    EvalReport rep = run_evaluation(dir, ev);
    CHECK(rep.metrics.episodes == 2);
    CHECK(mentions(rep.env_desc, "0.5"));

    ev = EvalOptions{};
    ev.variant_override = "pick_place";
    ev.episodes = 2;
    rep = run_evaluation(dir, ev);
    CHECK(mentions(rep.env_desc, "pick_place"));

    // Sweeps are a point-task notion.
    CHECK_THROWS_AS(run_goal_range_sweep(grid_run_dir(), SweepOptions{}), ConfigError);

    SweepOptions bad;
    bad.scales = {0.0};
    CHECK_THROWS_AS(run_goal_range_sweep(dir, bad), ConfigError);
}

TEST_CASE("checkpoints restore parameters and reject foreign stores") {
    ExperimentConfig cfg = parse_experiment_config(tiny_grid_config("/tmp/x").dump());
    GridBundle b = make_grid_bundle(cfg, 5, false);
    const std::string blob = test_root() + "/ckpt.blob";
    save_actor_checkpoint(*b.store, blob);

    std::map<std::string, TensorBuf> before = b.store->snapshot();
    b.store->get("actor.keys")->value[0] += 1.0;
    load_actor_checkpoint(*b.store, blob);
    for (const auto& [name, want] : before) {
        const auto node = b.store->get(name);
        REQUIRE(node->shape == want.shape);
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(static_cast<float>(node->value[i]) == static_cast<float>(want.data[i]));
    }

    // A baseline store lacks the knowledge-attention parameters.
    ExperimentConfig base = cfg;
    base.actor_kind = "baseline";
    base.knowledge.clear();
    GridBundle plain = make_grid_bundle(base, 5, false);
    CHECK_THROWS_AS(load_actor_checkpoint(*plain.store, blob), UsageError);

    CHECK_THROWS_AS(load_actor_checkpoint(*b.store, test_root() + "/no_such.blob"), IoError);
}

TEST_CASE("composed configs consume exported packs") {
    json j = tiny_grid_config(fresh_dir("composed"));
    j["name"] = "t-composed";
    j["knowledge"] = {{{"pack", grid_run_dir() + "/seed0/pack.json"}, {"name", "prior_skill"}},
                      {{"scripted", "grid_kg3_reach_goal"}}};
    ExperimentConfig cfg = parse_experiment_config(j.dump());

    KnowledgeSet set = build_knowledge(cfg);
    REQUIRE(set.size() == 2);
    CHECK(set.names() == std::vector<std::string>{"prior_skill", "grid_kg3_reach_goal"});

    GridBundle b = make_grid_bundle(cfg, 0, false);
    GridEnv env(cfg.grid, 11);
    GridObservation obs = env.reset();
    AttentionTrace trace;
    greedy_grid_action(*b.actor, obs, full_mask(b.actor->knowledge()), &trace);
    CHECK(trace.raw.size() == 3);  // inner + two knowledge components

    // A pack whose action space mismatches the task is rejected.
    json wrong = tiny_point_config(fresh_dir("composed-bad"));
    wrong["knowledge"] = {{{"pack", grid_run_dir() + "/seed0/pack.json"}}};
    ExperimentConfig bad = parse_experiment_config(wrong.dump());
    CHECK_THROWS_AS(build_knowledge(bad), ConfigError);
}
