#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgrl/actor.hpp"
#include "kgrl/algo.hpp"
#include "kgrl/grid_env.hpp"
#include "kgrl/knowledge.hpp"
#include "kgrl/nn.hpp"
#include "kgrl/point_env.hpp"
#include "kgrl/rng.hpp"

// Experiment orchestration: JSON experiment configs, deterministic training
// runs with periodic greedy evaluation, checkpoint/pack export, ablation and
// transfer evaluation, attention traces, goal-range sweeps, and the CSV/SVG
// artifacts behind them. Every run is reproducible from its config + seed.

namespace kgrl {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

// One knowledge-set entry: exactly one of `scripted` (built-in rule id) or
// `pack` (manifest path of a saved pack) is set. Point-robot scripted rules
// carry the activation distance `epsilon` (infinity = always active).
struct KnowledgeSourceConfig {
    std::string scripted;
    std::string pack;
    double epsilon = 0.0;
    std::string name;  // entry name; defaults to the rule id / pack name

    bool is_pack() const { return !pack.empty(); }
};

struct ExperimentConfig {
    std::string name;    // run label; also the exported pack's entry name
    std::string task;    // "grid" | "point"
    GridConfig grid;     // meaningful when task == "grid"
    PointConfig point;   // meaningful when task == "point"
    std::string actor_kind = "kgrl";  // "baseline" | "kgrl"
    GridActorConfig grid_actor;
    PointActorConfig point_actor;
    std::vector<KnowledgeSourceConfig> knowledge;
    PPOConfig ppo;  // grid task
    SACConfig sac;  // point task
    std::vector<std::uint64_t> seeds;
    std::size_t total_steps = 0;
    std::size_t eval_every = 0;        // env steps between greedy evaluations
    std::size_t eval_episodes = 20;    // episodes per periodic evaluation
    std::size_t final_eval_episodes = 100;
    std::string out_dir;

    bool is_grid() const { return task == "grid"; }
    void validate() const;  // throws ConfigError with a "config.<field>" path
};

// Parses and validates; errors carry the offending field path (unknown keys,
// wrong types, missing fields, and cross-field violations all throw
// ConfigError).
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);  // IoError when unreadable
// Canonical JSON snapshot (sorted keys, 2-space indent); parses back to an
// equal config.
std::string experiment_config_text(const ExperimentConfig& cfg);

// Builds the configured knowledge set: scripted rules by id, packs loaded
// from disk. Throws ConfigError when an entry's action space does not match
// the task.
KnowledgeSet build_knowledge(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Actor construction and checkpoints
// ---------------------------------------------------------------------------

// Heap-owned store + networks (the networks hold references into the store).
// `critic` / `trainer-side` members stay null unless requested.
struct GridBundle {
    std::unique_ptr<ParameterStore> store;
    std::unique_ptr<GridActor> actor;
    std::unique_ptr<GridCritic> critic;
};
struct PointBundle {
    std::unique_ptr<ParameterStore> store;
    std::unique_ptr<PointActor> actor;
};

inline const std::string kActorPrefix = "actor";
inline const std::string kCriticPrefix = "critic";

GridBundle make_grid_bundle(const ExperimentConfig& cfg, std::uint64_t seed, bool with_critic);
PointBundle make_point_bundle(const ExperimentConfig& cfg, std::uint64_t seed);

// Checkpoints hold the actor parameters only ("actor.*" names).
void save_actor_checkpoint(const ParameterStore& store, const std::string& blob_path);
void load_actor_checkpoint(ParameterStore& store, const std::string& blob_path);

// ---------------------------------------------------------------------------
// Greedy evaluation
// ---------------------------------------------------------------------------

// Deterministic greedy readout of the mixture: argmax action of the exact
// mixture pmf (grid), or the mean action of the argmax-weight component
// (point; tanh-squashed components squash the mean). `trace` receives the
// attention readout when non-null.
GridAction greedy_grid_action(const GridActor& actor, const GridObservation& obs,
                              const AblationMask& mask, AttentionTrace* trace = nullptr);
ContinuousAction greedy_point_action(const PointActor& actor, const TensorBuf& obs,
                                     const AblationMask& mask, AttentionTrace* trace = nullptr,
                                     int* component = nullptr);

struct EvalMetrics {
    std::size_t episodes = 0;
    double mean_return = 0.0;
    double min_return = 0.0;
    double success_rate = 0.0;
};

// Runs `episodes` greedy episodes on a fresh env seeded `env_seed` (episode i
// reseeds the layout with (env_seed, i)). `visited` collects observations
// (capped) for key estimation.
EvalMetrics evaluate_grid_policy(const GridActor& actor, const GridConfig& env_cfg,
                                 const AblationMask& mask, std::size_t episodes,
                                 std::uint64_t env_seed,
                                 std::vector<GridObservation>* visited = nullptr);
EvalMetrics evaluate_point_policy(const PointActor& actor, const PointConfig& env_cfg,
                                  const AblationMask& mask, std::size_t episodes,
                                  std::uint64_t env_seed,
                                  std::vector<TensorBuf>* visited = nullptr);

// Mean of the state-dependent inner key over a sample of observations: the
// state-free key stored with an exported policy pack.
TensorBuf mean_inner_key_grid(const GridActor& actor, const std::vector<GridObservation>& obs);
TensorBuf mean_inner_key_point(const PointActor& actor, const std::vector<TensorBuf>& obs);

// ---------------------------------------------------------------------------
// Run records (run.json)
// ---------------------------------------------------------------------------

struct EvalPoint {
    std::size_t step = 0;
    EvalMetrics metrics;
};

struct SeedRunResult {
    std::uint64_t seed = 0;
    std::vector<EvalPoint> evals;  // strictly increasing steps; last is final
    EvalMetrics final_eval;
    std::string actor_blob;  // paths relative to the run directory
    std::string pack_manifest;
};

struct RunRecord {
    ExperimentConfig config;
    std::string git_describe;
    std::vector<SeedRunResult> seeds;
};

// Serialization validates against the committed schema
// (configs/run_record.schema.json, embedded verbatim at build time) plus the
// strict step monotonicity invariant; violations throw ConfigError.
void write_run_record(const RunRecord& record, const std::string& path);
RunRecord read_run_record(const std::string& path);
std::string run_record_schema_text();
void validate_run_record_text(const std::string& json_text);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::optional<std::uint64_t> only_seed;  // restrict to one configured seed
    std::string out_override;                // replaces config.out_dir
    bool freeze_keys = false;                // freeze the knowledge key table
};

// Trains every configured seed sequentially. Writes, under the run dir:
// run.json, curves.csv (+ curves.svg), and per seed stats.jsonl, actor.blob,
// pack.json/.blob. Returns the record written to run.json.
RunRecord run_training(const ExperimentConfig& cfg, const TrainOptions& opts = {});

struct EvalOptions {
    std::optional<std::uint64_t> trained_seed;  // default: first recorded seed
    std::size_t episodes = 100;
    std::uint64_t eval_seed = 424242;          // fresh env stream, disjoint from training
    std::vector<std::string> drop;             // component names; "inner" drops the policy
    // Environment overrides (zero-shot transfer). The observation layouts are
    // shared across variants (the reach encoding zero-fills the object
    // slots), so no further adaptation is required.
    std::optional<std::string> variant_override;
    std::optional<double> goal_range_override;
};

struct EvalReport {
    EvalMetrics metrics;
    std::string env_desc;  // e.g. "grid/empty_random 5x5" after overrides
    std::uint64_t trained_seed = 0;
};

// Loads the trained actor from a run directory, optionally ablates
// components or overrides the env, and evaluates greedily on fresh seeds.
// Pack files and the checkpoint are hash-verified before/after (evaluation
// must never mutate them).
EvalReport run_evaluation(const std::string& run_dir, const EvalOptions& opts);

struct TraceOptions {
    std::optional<std::uint64_t> trained_seed;
    std::uint64_t episode_seed = 7;
    std::string out_csv;  // default "<run_dir>/trace.csv" (+ .svg alongside)
};

struct TraceResult {
    std::vector<std::string> component_names;  // "inner" + knowledge names
    std::vector<std::size_t> steps;
    std::vector<std::vector<double>> raw;         // per step, arity-sized
    std::vector<std::vector<double>> normalized;  // softmax of raw
    std::vector<int> chosen;                      // argmax of normalized
    std::vector<std::string> events;  // none|key_pickup|door_open|grasp|success
    std::size_t dominant_switches = 0;  // changes of argmax between steps
    double episode_return = 0.0;
    std::string csv_path, svg_path;
};

// One greedy episode with the full component set; per-step attention dumped
// to CSV and rendered to SVG.
TraceResult run_trace(const std::string& run_dir, const TraceOptions& opts);

struct SweepOptions {
    std::optional<std::uint64_t> trained_seed;
    std::vector<double> scales;  // defaults to 0.1, 0.2, ..., 1.0
    std::size_t episodes = 100;
    std::uint64_t eval_seed = 424242;
};

struct SweepRow {
    double scale = 0.0;
    EvalMetrics metrics;
};

// Evaluates a trained point-robot policy across goal-range scales; writes
// sweep.csv + sweep.svg to the run dir. Grid runs throw ConfigError.
std::vector<SweepRow> run_goal_range_sweep(const std::string& run_dir, const SweepOptions& opts);

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

// Fixed CSV headers (documented in the README).
inline const std::string kCurvesCsvHeader = "step,seed,mean_return,min_return,success_rate";
inline const std::string kSweepCsvHeader = "scale,episodes,mean_return,min_return,success_rate";

// Line charts re-read the CSV artifact of record rather than live data.
void render_curves_svg(const std::string& csv_path, const std::string& svg_path);
void render_trace_svg(const std::string& csv_path, const std::string& svg_path);
void render_sweep_svg(const std::string& csv_path, const std::string& svg_path);

// 64-bit FNV-1a over the file bytes; IoError when unreadable.
std::uint64_t fnv1a_file(const std::string& path);
// `git describe --always --dirty` of the working tree, or "unknown".
std::string git_describe_or_unknown();

}  // namespace kgrl
