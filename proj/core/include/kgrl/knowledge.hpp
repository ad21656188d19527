#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgrl/grid_env.hpp"
#include "kgrl/policy_nets.hpp"
#include "kgrl/tensor.hpp"

namespace kgrl {

// External-knowledge mappings: observation -> action distribution. Scripted
// rules cover the tasks' hand-written controllers; frozen snapshots wrap a
// previously trained inner policy for reuse. Mappings are immutable after
// construction and safe to evaluate concurrently.

enum class ActionSpaceTag { grid7, cont4 };

std::string action_space_to_string(ActionSpaceTag t);
ActionSpaceTag action_space_from_string(const std::string& s);

// Observation layout tags recorded in packs; a mapping only evaluates
// observations produced under the layout it was built for.
inline const std::string kGridObsLayout = "grid-view5x5x14-v1";
inline const std::string kPointObsLayout = "point-obs25-v1";

// Parameter-name prefix expected in frozen-snapshot parameter maps and used
// inside packs ("policy.*").
inline const std::string kSnapshotParamPrefix = "policy";

struct DiscretePmf {
    std::array<double, static_cast<std::size_t>(kGridActionCount)> p{};
};

struct GaussianActionParams {
    std::array<double, 4> mean{};
    std::array<double, 4> sigma{};
    // Learned continuous policies act through tanh; scripted rules do not.
    bool squashed = false;
};

// Scripted grid rules. Smoothing: the chosen action keeps 1 - kRuleSmoothing
// of the mass, the rest spreads uniformly over the other actions, so
// downstream mixture log-probabilities stay finite.
constexpr double kRuleSmoothing = 0.01;

DiscretePmf grid_kg1_pickup_key(const GridObservation& obs);
DiscretePmf grid_kg2_open_door(const GridObservation& obs);
DiscretePmf grid_kg3_reach_goal(const GridObservation& obs);

// Scripted point-robot rules: proportional controllers emitting a diagonal
// Gaussian with fixed per-dimension sigma.
constexpr double kScriptedSigma = 0.05;
constexpr double kApproachGain = 5.0;

// Drive toward the goal with the gripper closing, once the object is within
// epsilon of the effector (the reach task passes epsilon = +infinity so the
// guidance is unconditional); otherwise hold position.
GaussianActionParams cont_kg1_to_goal(const TensorBuf& obs, double epsilon);
// Drive toward the object with the gripper opening while it is at least
// epsilon away; otherwise hold position.
GaussianActionParams cont_kg2_to_object(const TensorBuf& obs, double epsilon);

class KnowledgeMapping {
public:
    static KnowledgeMapping scripted_grid(const std::string& rule_id);
    static KnowledgeMapping scripted_point(const std::string& rule_id, double epsilon);
    // Frozen snapshots: `params` must cover the policy's parameter set
    // exactly (names and shapes), e.g. a filtered ParameterStore snapshot.
    static KnowledgeMapping frozen_grid(const GridPolicySpec& spec,
                                        const std::map<std::string, TensorBuf>& params);
    static KnowledgeMapping frozen_point(const PointPolicySpec& spec,
                                         const std::map<std::string, TensorBuf>& params);

    ActionSpaceTag space() const { return space_; }
    bool scripted() const { return learned_ == nullptr; }
    const std::string& rule_id() const { return rule_id_; }  // empty when learned
    double epsilon() const { return epsilon_; }
    const std::string& obs_layout() const { return obs_layout_; }

    // Frozen-snapshot evaluation runs the stored network value-only; no
    // gradient ever reaches the snapshot. Throws UsageError when called with
    // the wrong action space.
    DiscretePmf evaluate_grid(const GridObservation& obs) const;
    GaussianActionParams evaluate_point(const TensorBuf& obs) const;

    // Snapshot internals for pack serialization (null for scripted).
    const GridPolicySpec* grid_spec() const;
    const PointPolicySpec* point_spec() const;
    std::map<std::string, TensorBuf> snapshot_params() const;

private:
    KnowledgeMapping() = default;

    struct Learned;
    ActionSpaceTag space_ = ActionSpaceTag::grid7;
    std::string rule_id_;
    double epsilon_ = 0.0;
    std::string obs_layout_;
    std::shared_ptr<const Learned> learned_;
};

struct KnowledgeEntry {
    std::string name;
    KnowledgeMapping mapping;
    // Initial key in the joint embedding space; absent keys are drawn on the
    // unit sphere when an actor adopts the set.
    std::optional<TensorBuf> key;
};

// Ordered collection with unique names, one action space, and one key
// dimension across all present keys.
class KnowledgeSet {
public:
    void add(KnowledgeEntry entry);  // throws UsageError on invariant breaks
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const KnowledgeEntry& at(std::size_t i) const;
    const std::vector<KnowledgeEntry>& entries() const { return entries_; }
    std::vector<std::string> names() const;
    std::optional<ActionSpaceTag> space() const;
    std::optional<std::size_t> key_dim() const;

private:
    std::vector<KnowledgeEntry> entries_;
};

// Knowledge pack files: a JSON manifest carrying the mapping description and
// key vector, plus a parameter-blob side file (same path with the trailing
// ".json" replaced by ".blob") for frozen snapshots. Field-by-field format
// documentation lives in the repository README.
void save_pack(const std::string& manifest_path, const std::string& name,
               const KnowledgeMapping& mapping, const TensorBuf& key);

struct LoadedPack {
    std::string name;
    KnowledgeMapping mapping;
    TensorBuf key;
};

// Throws IoError on missing/corrupt files or unsupported format versions.
LoadedPack load_pack(const std::string& manifest_path);

// Guard used by consumers before wiring a pack to an environment; mismatched
// observation layouts must fail loudly, never silently.
void require_obs_layout(const KnowledgeMapping& mapping, const std::string& expected);

}  // namespace kgrl
