#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgrl/autodiff.hpp"
#include "kgrl/grid_env.hpp"
#include "kgrl/knowledge.hpp"
#include "kgrl/nn.hpp"
#include "kgrl/point_env.hpp"
#include "kgrl/policy_nets.hpp"
#include "kgrl/rng.hpp"

namespace kgrl {

// Mixture-of-strategies actor: an inner policy plus external knowledge
// mappings, combined by dot-product attention between a state-dependent
// query and the (state-dependent inner / state-independent knowledge) keys.
// With an empty knowledge set the actor reduces exactly to the plain inner
// policy, which doubles as the baseline control.

// Per-step attention readout for traces and diagnostics. Entry 0 is the
// inner component, entries 1..m follow the knowledge-set order of the
// surviving components.
struct AttentionTrace {
    std::vector<double> raw;         // dot products
    std::vector<double> normalized;  // softmax of raw
};

// Which components stay active. `knowledge` must be empty (keep all) or
// sized to the knowledge set. At least one component must survive.
struct AblationMask {
    bool inner = true;
    std::vector<bool> knowledge;
};

AblationMask full_mask(const KnowledgeSet& set);
// `drop` holds knowledge names, or the sentinel "inner" for the inner
// policy. Unknown names and empty survivor sets throw UsageError.
AblationMask make_ablation(const KnowledgeSet& set, const std::vector<std::string>& drop);

struct GridActorConfig {
    GridPolicySpec policy;
    std::size_t d_k = 8;

    void validate() const;
};

struct GridActResult {
    GridAction action = GridAction::turn_left;
    double log_prob = 0.0;
    std::vector<double> mixture;  // pmf over the 7 actions
    AttentionTrace attention;
};

class GridActor {
public:
    // Binds "<prefix>.in.*" (inner policy), "<prefix>.key"/"<prefix>.query"
    // heads on the shared trunk, and the "<prefix>.keys" table. Knowledge
    // entries that carry keys seed the table rows; the rest start on the
    // unit sphere.
    GridActor(std::string prefix, GridActorConfig config, KnowledgeSet knowledge,
              ParameterStore& params, CounterRng& init_rng);

    struct Batch {
        ad::Value features;  // [N, trunk]
        ad::Value k_in;      // [N, d_k]
        ad::Value query;     // [N, d_k]
        ad::Value raw;       // [N, 1+m] dot products (inner first)
        ad::Value weights;   // [N, 1+m] softmax
        ad::Value pi_in;     // [N, 7]
        ad::Value mixture;   // [N, 7]
        std::vector<std::size_t> active;  // surviving knowledge indices
        bool inner_active = true;
    };

    // Scripted/frozen knowledge distributions for one observation, in
    // knowledge-set order (mask-independent; capture once per step and feed
    // the stored values back into forward_batch during updates).
    std::vector<DiscretePmf> evaluate_knowledge(const GridObservation& obs) const;

    // `knowledge` may be null (evaluated internally) or one vector per
    // observation as produced by evaluate_knowledge.
    Batch forward_batch(const std::vector<GridObservation>& obs,
                        const std::vector<std::vector<DiscretePmf>>* knowledge,
                        const AblationMask& mask) const;

    ad::Value log_prob(const Batch& batch, const std::vector<int>& actions) const;
    ad::Value entropy(const Batch& batch) const;  // [N, 1]

    // Samples one action per observation from the exact mixture pmf. When
    // `captured` is non-null it receives the per-observation knowledge
    // evaluations so an update pass can replay them as constants.
    std::vector<GridActResult> act_batch(const std::vector<GridObservation>& obs,
                                         CounterRng& rng, const AblationMask& mask,
                                         std::vector<std::vector<DiscretePmf>>* captured = nullptr) const;
    GridActResult act(const GridObservation& obs, CounterRng& rng,
                      const AblationMask& mask) const;

    const KnowledgeSet& knowledge() const { return knowledge_; }
    const GridActorConfig& config() const { return config_; }
    const std::string& prefix() const { return prefix_; }
    const GridPolicy& inner() const { return *inner_; }

private:
    std::string prefix_;
    GridActorConfig config_;
    KnowledgeSet knowledge_;
    std::unique_ptr<GridPolicy> inner_;
    std::unique_ptr<Mlp> key_head_, query_head_;
    ad::Value key_table_;  // [m, d_k] when the set is non-empty
};

struct PointActorConfig {
    PointPolicySpec policy;
    std::vector<std::size_t> key_query_hidden{32};
    std::size_t d_k = 4;
    double temperature = 1.0;  // Gumbel-softmax temperature

    void validate() const;
};

struct PointActResult {
    ContinuousAction action;
    double log_prob = 0.0;
    int component = 0;  // 0 = inner, 1.. = surviving knowledge in order
    AttentionTrace attention;
};

class PointActor {
public:
    PointActor(std::string prefix, PointActorConfig config, KnowledgeSet knowledge,
               ParameterStore& params, CounterRng& init_rng);

    struct Batch {
        ad::Value obs;       // [N, kPointObsDim]
        ad::Value k_in;      // [N, d_k]
        ad::Value query;     // [N, d_k]
        ad::Value raw;       // [N, 1+m]
        ad::Value weights;   // [N, 1+m] softmax
        ad::Value log_weights;  // [N, 1+m] log-softmax of the same raw
        ad::Value mean;      // [N, 4] inner Gaussian mean (pre-squash)
        ad::Value log_std;   // [N, 4]
        // Per surviving knowledge component: constant [N, 4] mean/sigma.
        std::vector<ad::Value> k_mean, k_sigma;
        std::vector<bool> k_squashed;
        std::vector<std::size_t> active;
        bool inner_active = true;
        std::size_t n = 0;
    };

    std::vector<GaussianActionParams> evaluate_knowledge(const TensorBuf& obs) const;

    Batch forward_batch(const std::vector<TensorBuf>& obs,
                        const std::vector<std::vector<GaussianActionParams>>* knowledge,
                        const AblationMask& mask) const;

    struct Sample {
        ad::Value action;    // [N, 4]; forward value is the hard selection
        ad::Value log_prob;  // [N, 1] mixture log-density at the action
        std::vector<int> component;  // chosen component per row
    };

    // Straight-through Gumbel-softmax over the attention weights, then a
    // reparameterized draw from the chosen component. The forward value uses
    // the hard selection; the backward pass differentiates the relaxed
    // softmax surrogate, reaching the inner policy, key/query nets, and key
    // table.
    Sample sample(const Batch& batch, CounterRng& rng) const;

    // Mixture log-density of given actions (change-of-variables corrected
    // for squashed components). actions: [N, 4].
    ad::Value log_prob(const Batch& batch, const ad::Value& actions) const;

    PointActResult act(const TensorBuf& obs, CounterRng& rng,
                       const AblationMask& mask) const;

    const KnowledgeSet& knowledge() const { return knowledge_; }
    const PointActorConfig& config() const { return config_; }
    const std::string& prefix() const { return prefix_; }
    const PointPolicy& inner() const { return *inner_; }

private:
    std::string prefix_;
    PointActorConfig config_;
    KnowledgeSet knowledge_;
    std::unique_ptr<PointPolicy> inner_;
    std::unique_ptr<Mlp> key_head_, query_head_;
    ad::Value key_table_;
};

// Batched observation packing shared by the actors and trainers.
TensorBuf grid_batch_images(const std::vector<GridObservation>& obs);
TensorBuf grid_batch_carry(const std::vector<GridObservation>& obs);
TensorBuf point_batch_obs(const std::vector<TensorBuf>& obs);

// Inner-policy snapshot keyed for knowledge reuse: filters the store down to
// "<actor_prefix>.in.*" and re-prefixes the names for the pack format.
std::map<std::string, TensorBuf> extract_inner_policy(const ParameterStore& params,
                                                      const std::string& actor_prefix);

}  // namespace kgrl
