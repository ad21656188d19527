#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kgrl/actor.hpp"
#include "kgrl/autodiff.hpp"
#include "kgrl/grid_env.hpp"
#include "kgrl/knowledge.hpp"
#include "kgrl/nn.hpp"
#include "kgrl/point_env.hpp"
#include "kgrl/rng.hpp"
#include "kgrl/tensor.hpp"

// Trainers for the two tasks. Both treat the actor purely through its public
// interface (forward_batch / log_prob / entropy / sample), so a baseline
// actor (empty knowledge set) and a knowledge-grounded actor train through
// identical code paths. Everything here runs single-threaded; parameter
// mutation is confined to the update calls.

namespace kgrl {

// ---------------------------------------------------------------------------
// Shared utilities
// ---------------------------------------------------------------------------

struct GaeResult {
    std::vector<double> advantages;
    std::vector<double> returns;  // advantages + values (critic regression targets)
};

// Generalized advantage estimation over one environment's step sequence.
// dones[t] = 1.0 ends the episode at step t: no bootstrapping across it.
// The value of the state following the final step enters as `bootstrap`
// (ignored when the last step is terminal). Throws UsageError on length
// mismatches, non-0/1 done flags, or non-finite inputs.
GaeResult gae_advantages(const std::vector<double>& rewards,
                         const std::vector<double>& values,
                         const std::vector<double>& dones, double bootstrap,
                         double gamma, double lam);

// In-place shift/scale to mean 0, std 1. A batch with std below 1e-8 is only
// centered (keeps all-equal advantages at zero instead of dividing by ~0).
void normalize_advantages(std::vector<double>& xs);

double global_grad_norm(const ParameterStore& params);
// Scales every gradient so the global norm is at most `max_norm`; returns
// the pre-clip norm.
double clip_grad_norm(ParameterStore& params, double max_norm);

// target <- tau * online + (1 - tau) * target, matched by parameter name.
// Throws UsageError when the stores hold different parameter sets.
void polyak_update(ParameterStore& target, const ParameterStore& online, double tau);

// ---------------------------------------------------------------------------
// PPO (grid task)
// ---------------------------------------------------------------------------

struct PPOConfig {
    std::size_t n_envs = 16;    // parallel episodes per rollout
    std::size_t n_steps = 128;  // steps per env per rollout
    std::size_t epochs = 4;
    std::size_t minibatch = 256;
    double gamma = 0.99;
    double lam = 0.95;
    double clip = 0.2;
    double value_coef = 0.5;
    double entropy_coef = 0.01;
    double lr = 1e-3;
    double max_grad_norm = 0.5;
    // Parameters whose gradients are dropped before every optimizer step.
    // Applied from the first update this is an exact freeze (the Adam moments
    // never leave zero). Unknown names throw UsageError at update time.
    std::vector<std::string> freeze_params;

    std::size_t rollout_size() const { return n_envs * n_steps; }
    void validate() const;  // throws ConfigError
};

// State-value network with the same encoder shape as the policy but its own
// parameters ("<prefix>.enc.*", "<prefix>.trunk.*", "<prefix>.v.*").
class GridCritic {
public:
    GridCritic(std::string prefix, GridPolicySpec spec, ParameterStore& params,
               CounterRng& init_rng);

    // img: [N, kViewChannels, 5, 5]; carry: [N, 1]. Returns [N, 1].
    ad::Value value(const ad::Value& img, const ad::Value& carry) const;
    // Value-only batch convenience (no graph).
    std::vector<double> values(const std::vector<GridObservation>& obs) const;

    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    GridPolicySpec spec_;
    std::unique_ptr<ConvEncoder> enc_;
    std::unique_ptr<Mlp> trunk_, v_;
};

// One rollout, flattened env-major: index = env * n_steps + t. All per-step
// vectors stay aligned; `knowledge` holds the captured per-observation
// knowledge evaluations replayed as constants during the update; `traces`
// records the attention readout (arity 1 + surviving knowledge entries).
struct GridRollout {
    std::size_t n_envs = 0;
    std::size_t n_steps = 0;
    std::vector<GridObservation> obs;
    std::vector<std::vector<DiscretePmf>> knowledge;
    std::vector<int> actions;
    std::vector<double> log_probs;
    std::vector<double> rewards;
    std::vector<double> values;
    std::vector<double> dones;  // 1.0 where the episode ended at this step
    std::vector<AttentionTrace> traces;
    std::vector<double> bootstrap;  // [n_envs] critic value after the last step

    std::size_t size() const { return obs.size(); }
    void validate() const;  // throws UsageError on misalignment / non-finite log-probs
};

struct PPOUpdateStats {
    double policy_loss = 0.0;   // mean over minibatches
    double value_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;     // mean(old_lp - new_lp)
    double clip_fraction = 0.0;
    double grad_norm = 0.0;     // mean pre-clip global norm
    std::size_t minibatches = 0;
};

// Clipped-surrogate update: advantage normalization over the whole rollout,
// `epochs` passes of shuffled minibatches, one Adam step per minibatch with
// gradient-norm clipping. Loss = policy + value_coef * value MSE -
// entropy_coef * mixture entropy. Throws NumericError (with batch
// diagnostics) if a loss turns non-finite.
PPOUpdateStats ppo_update(GridActor& actor, GridCritic& critic, ParameterStore& params,
                          const GridRollout& rollout, const PPOConfig& cfg,
                          CounterRng& rng);

struct PPOIterationStats {
    std::size_t env_steps_total = 0;  // cumulative over the trainer's lifetime
    std::size_t episodes = 0;         // completed during this iteration
    double mean_return = 0.0;         // over completed episodes (0 when none)
    double success_rate = 0.0;        // fraction of completed episodes that succeeded
    std::vector<double> mean_weights; // attention weights averaged over the rollout
    PPOUpdateStats update;
};

// Owns an env pool (env i seeded seed + i) and persistent episode state, so
// consecutive iterations continue episodes seamlessly.
class PPOTrainer {
public:
    PPOTrainer(PPOConfig cfg, GridConfig env_cfg, GridActor& actor, GridCritic& critic,
               ParameterStore& params, std::uint64_t seed);

    // Steps every env cfg.n_steps times under `mask`, capturing knowledge
    // evaluations and attention traces.
    GridRollout collect(const AblationMask& mask);
    // collect (full mask) + ppo_update.
    PPOIterationStats iterate();

    std::size_t total_steps() const { return total_steps_; }

private:
    PPOConfig cfg_;
    GridActor& actor_;
    GridCritic& critic_;
    ParameterStore& params_;
    std::vector<GridEnv> envs_;
    std::vector<GridObservation> cur_;
    std::vector<double> ep_return_;
    CounterRng act_rng_, update_rng_;
    std::size_t total_steps_ = 0;
    // Episode stats gathered by the latest collect().
    std::size_t win_episodes_ = 0, win_successes_ = 0;
    double win_return_sum_ = 0.0;
};

// ---------------------------------------------------------------------------
// SAC + hindsight relabeling (point task)
// ---------------------------------------------------------------------------

struct SACConfig {
    double gamma = 0.95;
    double tau = 0.005;      // target smoothing; 0 freezes the targets
    double lr = 1e-3;
    double alpha_lr = 1e-3;  // 0 freezes the entropy temperature
    double init_alpha = 0.2;
    double target_entropy = -4.0;  // -action_dim
    std::size_t batch = 256;
    std::size_t buffer_capacity = 1'000'000;
    std::size_t her_k = 4;         // relabeled goals per stored transition
    std::size_t start_steps = 500; // uniform-random warmup actions
    std::size_t update_every = 1;  // env steps per gradient update
    std::size_t actor_delay = 1;   // critic updates per actor/temperature update
    std::vector<std::size_t> critic_hidden{128, 128};
    // Actor-store parameters whose gradients are dropped before each actor
    // step (exact freeze when applied from the first update).
    std::vector<std::string> freeze_params;

    void validate() const;  // throws ConfigError
};

struct PointTransition {
    TensorBuf obs, next_obs;  // [kPointObsDim]
    std::array<double, 4> action{};
    double reward = -1.0;
    // Success at this step: bootstrapping stops. Timeouts stay false (the
    // episode ends but the state is not terminal for value purposes).
    bool terminal = false;
    // Goal-relabeling bookkeeping: the position the task grades (effector or
    // object) before/after the step, and the goal in effect.
    std::array<double, 3> achieved{}, achieved_next{}, goal{};
};

// Fixed-capacity ring; slot i is overwritten once capacity is exceeded.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    void push(PointTransition t);
    std::size_t size() const { return data_.size(); }
    std::size_t capacity() const { return capacity_; }
    const PointTransition& at(std::size_t i) const;  // throws UsageError out of range

    // n independent uniform draws over the current contents.
    std::vector<std::size_t> sample_indices(std::size_t n, CounterRng& rng) const;

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<PointTransition> data_;
};

// Future-strategy hindsight relabeling over one finished episode: for each
// step t, k goals are drawn from the achieved positions after steps u >= t;
// the goal slots of obs/next_obs are rewritten and reward/terminal recomputed
// with the env's success tolerance. Returns only the relabeled copies (the
// caller stores the originals separately). k = 0 yields an empty vector.
std::vector<PointTransition> her_relabel(const std::vector<PointTransition>& episode,
                                         std::size_t k, CounterRng& rng);

// Twin Q networks ("q1.*"/"q2.*" over [obs, action]) with same-shaped target
// copies in a separate frozen store, plus the entropy-temperature parameter
// ("log_alpha"). Online, target, and temperature parameters live in three
// stores so each loss steps only its own leaves.
class SACCritics {
public:
    SACCritics(const SACConfig& cfg, std::uint64_t seed);

    // Online Q network `which` (0 or 1); obs [N, kPointObsDim], action [N, 4].
    ad::Value q(int which, const ad::Value& obs, const ad::Value& action) const;
    // min(target q1, target q2) per row, value-only.
    std::vector<double> target_min_q(const TensorBuf& obs, const TensorBuf& action) const;
    // min of the online networks, value-only (diagnostics / tests).
    std::vector<double> online_min_q(const TensorBuf& obs, const TensorBuf& action) const;

    double alpha() const;
    ad::Value log_alpha() const { return log_alpha_; }
    void polyak(double tau);

    ParameterStore& critic_params() { return critic_params_; }
    ParameterStore& target_params() { return target_params_; }
    ParameterStore& alpha_params() { return alpha_params_; }

private:
    ParameterStore critic_params_, target_params_, alpha_params_;
    std::unique_ptr<Mlp> q1_, q2_, tq1_, tq2_;
    ad::Value log_alpha_;
};

struct SACBatch {
    TensorBuf obs;       // [B, kPointObsDim]
    TensorBuf action;    // [B, 4]
    TensorBuf next_obs;  // [B, kPointObsDim]
    std::vector<double> reward;    // [B]
    std::vector<double> terminal;  // [B], 1.0 where bootstrapping stops

    std::size_t size() const { return reward.size(); }
    void validate() const;  // throws UsageError
};

SACBatch make_sac_batch(const ReplayBuffer& buffer, const std::vector<std::size_t>& idx);

struct SACUpdateStats {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double alpha = 0.0;
    double entropy = 0.0;  // -mean log-prob of fresh actions (actor steps only)
    double mean_q = 0.0;
    bool actor_updated = false;
};

// One gradient update: twin-critic regression to r + gamma * (1 - terminal) *
// (min target Q - alpha * log pi), then (when `update_actor`) one actor step
// on alpha * log pi - min Q through the sampling path, one temperature step
// toward `target_entropy`, and a polyak target refresh. Knowledge mappings
// are re-evaluated on the batch observations (relabeled goals change the
// scripted advice). Throws NumericError with batch diagnostics on non-finite
// losses.
SACUpdateStats sac_update(PointActor& actor, ParameterStore& actor_params,
                          SACCritics& critics, const SACBatch& batch,
                          const SACConfig& cfg, bool update_actor, CounterRng& rng);

struct SACRunStats {
    std::size_t env_steps_total = 0;  // cumulative
    std::size_t episodes = 0;         // completed during this run() call
    double mean_return = 0.0;
    double success_rate = 0.0;
    std::size_t updates = 0;          // gradient updates performed
    std::size_t skipped_updates = 0;  // buffer still smaller than the batch
    double critic_loss = 0.0;         // means over the performed updates
    double actor_loss = 0.0;
    double alpha = 0.0;
    double entropy = 0.0;
    std::vector<double> mean_weights; // attention weights averaged over policy actions
};

// Single-env off-policy loop: uniform-random actions for the first
// start_steps, the actor afterwards; every finished episode is stored with
// her_k relabeled copies per transition; one sac_update per update_every env
// steps once the buffer holds a full batch (skips are counted, not fatal).
class SACTrainer {
public:
    SACTrainer(SACConfig cfg, PointConfig env_cfg, PointActor& actor,
               ParameterStore& actor_params, std::uint64_t seed);

    SACRunStats run(std::size_t env_steps, const AblationMask& mask);
    SACRunStats run(std::size_t env_steps);  // full mask

    SACCritics& critics() { return critics_; }
    const ReplayBuffer& buffer() const { return buffer_; }
    std::size_t total_steps() const { return total_steps_; }

private:
    void finish_episode();

    SACConfig cfg_;
    PointActor& actor_;
    ParameterStore& actor_params_;
    SACCritics critics_;
    ReplayBuffer buffer_;
    PointEnv env_;
    TensorBuf cur_obs_;
    std::vector<PointTransition> episode_;
    double ep_return_ = 0.0;
    CounterRng act_rng_, update_rng_, her_rng_;
    std::size_t total_steps_ = 0;
    std::size_t critic_updates_ = 0;
};

}  // namespace kgrl
