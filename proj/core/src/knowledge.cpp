#include "kgrl/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <tuple>

#include <json.hpp>

#include "kgrl/blob.hpp"
#include "kgrl/errors.hpp"
#include "kgrl/nn.hpp"

namespace kgrl {

namespace {

using nlohmann::json;

constexpr const char* kPackFormat = "kgrl-pack-v1";

double plane_at(const GridObservation& obs, std::size_t channel, std::size_t row,
                std::size_t col) {
    return obs.image.data[(channel * kViewSize + row) * kViewSize + col];
}

// Object planes: 0 unseen, 1 empty, 2 wall, 3 door, 4 key, 5 goal.
constexpr std::size_t kDoorPlane = 3;
constexpr std::size_t kKeyPlane = 4;
constexpr std::size_t kGoalPlane = 5;
constexpr std::size_t kDoorOpenPlane = kObjectPlanes + kColorPlanes + 1;

constexpr std::size_t kAgentRow = kViewSize - 1;
constexpr std::size_t kCenterCol = kViewSize / 2;

struct ViewTarget {
    int ahead = 0;    // cells in front of the agent
    int lateral = 0;  // negative left, positive right
    std::size_t row = 0, col = 0;
};

// Nearest visible cell carrying the plane, ranked by walking distance, then
// centeredness, then column (deterministic across evaluations).
std::optional<ViewTarget> find_target(const GridObservation& obs, std::size_t plane) {
    std::optional<ViewTarget> best;
    auto rank = [](const ViewTarget& t) {
        return std::make_tuple(t.ahead + std::abs(t.lateral), std::abs(t.lateral), t.col);
    };
    for (std::size_t row = 0; row < kViewSize; ++row)
        for (std::size_t col = 0; col < kViewSize; ++col) {
            if (plane_at(obs, plane, row, col) < 0.5) continue;
            ViewTarget t{static_cast<int>(kAgentRow - row),
                         static_cast<int>(col) - static_cast<int>(kCenterCol), row, col};
            if (!best || rank(t) < rank(*best)) best = t;
        }
    return best;
}

// Steer toward a visible target: turn toward its side only when it sits
// outside the 45-degree forward cone (|lateral| > ahead); on the cone or
// inside it, advancing reduces the distance, so ties go to forward. Turning
// whenever the column is merely off-center would oscillate between headings
// on exact diagonals and never close in.
GridAction go_toward(const ViewTarget& t) {
    if (std::abs(t.lateral) > t.ahead)
        return t.lateral < 0 ? GridAction::turn_left : GridAction::turn_right;
    return GridAction::forward;
}

DiscretePmf smooth_onehot(GridAction a) {
    DiscretePmf d;
    const double rest = kRuleSmoothing / static_cast<double>(kGridActionCount - 1);
    d.p.fill(rest);
    d.p[static_cast<std::size_t>(a)] = 1.0 - kRuleSmoothing;
    return d;
}

DiscretePmf fallback_pmf() {
    DiscretePmf d;
    d.p[static_cast<std::size_t>(GridAction::turn_left)] = 1.0 / 3.0;
    d.p[static_cast<std::size_t>(GridAction::turn_right)] = 1.0 / 3.0;
    d.p[static_cast<std::size_t>(GridAction::forward)] = 1.0 / 3.0;
    return d;
}

bool directly_ahead(const GridObservation& obs, std::size_t plane) {
    return plane_at(obs, plane, kAgentRow - 1, kCenterCol) > 0.5;
}

void check_point_obs(const TensorBuf& obs) {
    if (obs.data.size() != kPointObsDim)
        throw ShapeError("point observation must have " + std::to_string(kPointObsDim) +
                         " entries, got " + std::to_string(obs.data.size()));
}

double object_distance(const TensorBuf& obs) {
    // Slots [19:22) hold the object position relative to the effector.
    double sq = 0.0;
    for (int i = 0; i < 3; ++i) sq += obs.data[19 + i] * obs.data[19 + i];
    return std::sqrt(sq);
}

std::array<double, 3> clipped_approach(const TensorBuf& obs, std::size_t target_base,
                                       std::size_t from_base) {
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i)
        out[i] = std::clamp(
            kApproachGain * (obs.data[target_base + i] - obs.data[from_base + i]), -1.0,
            1.0);
    return out;
}

}  // namespace

std::string action_space_to_string(ActionSpaceTag t) {
    return t == ActionSpaceTag::grid7 ? "grid7" : "cont4";
}

ActionSpaceTag action_space_from_string(const std::string& s) {
    if (s == "grid7") return ActionSpaceTag::grid7;
    if (s == "cont4") return ActionSpaceTag::cont4;
    throw ConfigError("unknown action space tag: " + s);
}

DiscretePmf grid_kg1_pickup_key(const GridObservation& obs) {
    if (directly_ahead(obs, kKeyPlane)) return smooth_onehot(GridAction::pickup);
    if (auto t = find_target(obs, kKeyPlane)) return smooth_onehot(go_toward(*t));
    return fallback_pmf();
}

DiscretePmf grid_kg2_open_door(const GridObservation& obs) {
    if (directly_ahead(obs, kDoorPlane) &&
        plane_at(obs, kDoorOpenPlane, kAgentRow - 1, kCenterCol) < 0.5)
        return smooth_onehot(GridAction::toggle);
    if (auto t = find_target(obs, kDoorPlane)) return smooth_onehot(go_toward(*t));
    return fallback_pmf();
}

DiscretePmf grid_kg3_reach_goal(const GridObservation& obs) {
    if (auto t = find_target(obs, kGoalPlane)) return smooth_onehot(go_toward(*t));
    return fallback_pmf();
}

GaussianActionParams cont_kg1_to_goal(const TensorBuf& obs, double epsilon) {
    check_point_obs(obs);
    GaussianActionParams g;
    g.sigma.fill(kScriptedSigma);
    g.mean = {0.0, 0.0, 0.0, -1.0};
    if (object_distance(obs) < epsilon) {
        auto d = clipped_approach(obs, 22, 0);  // goal relative to effector
        for (int i = 0; i < 3; ++i) g.mean[i] = d[i];
    }
    return g;
}

GaussianActionParams cont_kg2_to_object(const TensorBuf& obs, double epsilon) {
    check_point_obs(obs);
    GaussianActionParams g;
    g.sigma.fill(kScriptedSigma);
    g.mean = {0.0, 0.0, 0.0, 1.0};
    if (object_distance(obs) >= epsilon) {
        for (int i = 0; i < 3; ++i)
            g.mean[i] = std::clamp(kApproachGain * obs.data[19 + i], -1.0, 1.0);
    }
    return g;
}

struct KnowledgeMapping::Learned {
    std::shared_ptr<ParameterStore> store;
    std::shared_ptr<GridPolicy> grid;
    std::shared_ptr<PointPolicy> point;
};

namespace {

DiscretePmf run_grid_rule(const std::string& rule_id, const GridObservation& obs) {
    if (rule_id == "grid_kg1_pickup_key") return grid_kg1_pickup_key(obs);
    if (rule_id == "grid_kg2_open_door") return grid_kg2_open_door(obs);
    if (rule_id == "grid_kg3_reach_goal") return grid_kg3_reach_goal(obs);
    throw UsageError("unknown grid rule id: " + rule_id);
}

GaussianActionParams run_point_rule(const std::string& rule_id, const TensorBuf& obs,
                                    double epsilon) {
    if (rule_id == "cont_kg1_to_goal") return cont_kg1_to_goal(obs, epsilon);
    if (rule_id == "cont_kg2_to_object") return cont_kg2_to_object(obs, epsilon);
    throw UsageError("unknown point rule id: " + rule_id);
}

void load_exact(ParameterStore& store, const std::map<std::string, TensorBuf>& params) {
    for (const auto& name : store.names())
        if (!params.count(name))
            throw UsageError("snapshot is missing parameter: " + name);
    store.load(params);  // rejects unknown names and shape mismatches
}

}  // namespace

KnowledgeMapping KnowledgeMapping::scripted_grid(const std::string& rule_id) {
    GridObservation probe;
    probe.image = TensorBuf::zeros({kViewChannels, kViewSize, kViewSize});
    run_grid_rule(rule_id, probe);  // validates the id
    KnowledgeMapping m;
    m.space_ = ActionSpaceTag::grid7;
    m.rule_id_ = rule_id;
    m.obs_layout_ = kGridObsLayout;
    return m;
}

KnowledgeMapping KnowledgeMapping::scripted_point(const std::string& rule_id,
                                                  double epsilon) {
    if (std::isnan(epsilon) || epsilon <= 0.0)
        throw ConfigError("point rule epsilon must be positive");
    TensorBuf probe = TensorBuf::zeros({kPointObsDim});
    run_point_rule(rule_id, probe, epsilon);
    KnowledgeMapping m;
    m.space_ = ActionSpaceTag::cont4;
    m.rule_id_ = rule_id;
    m.epsilon_ = epsilon;
    m.obs_layout_ = kPointObsLayout;
    return m;
}

KnowledgeMapping KnowledgeMapping::frozen_grid(
    const GridPolicySpec& spec, const std::map<std::string, TensorBuf>& params) {
    auto learned = std::make_shared<Learned>();
    learned->store = std::make_shared<ParameterStore>();
    CounterRng init_rng(0);
    learned->grid =
        std::make_shared<GridPolicy>(kSnapshotParamPrefix, spec, *learned->store, init_rng);
    load_exact(*learned->store, params);
    KnowledgeMapping m;
    m.space_ = ActionSpaceTag::grid7;
    m.obs_layout_ = kGridObsLayout;
    m.learned_ = std::move(learned);
    return m;
}

KnowledgeMapping KnowledgeMapping::frozen_point(
    const PointPolicySpec& spec, const std::map<std::string, TensorBuf>& params) {
    if (spec.act_dim != 4)
        throw UsageError("cont4 knowledge requires a 4-dimensional action head");
    auto learned = std::make_shared<Learned>();
    learned->store = std::make_shared<ParameterStore>();
    CounterRng init_rng(0);
    learned->point =
        std::make_shared<PointPolicy>(kSnapshotParamPrefix, spec, *learned->store, init_rng);
    load_exact(*learned->store, params);
    KnowledgeMapping m;
    m.space_ = ActionSpaceTag::cont4;
    m.obs_layout_ = kPointObsLayout;
    m.learned_ = std::move(learned);
    return m;
}

DiscretePmf KnowledgeMapping::evaluate_grid(const GridObservation& obs) const {
    if (space_ != ActionSpaceTag::grid7)
        throw UsageError("grid evaluation requested from a cont4 mapping");
    if (scripted()) return run_grid_rule(rule_id_, obs);
    ad::NoGradGuard guard;
    auto logits =
        learned_->grid->logits(learned_->grid->features(grid_image_input(obs),
                                                        grid_carry_input(obs)));
    DiscretePmf d;
    const auto& z = logits->value;
    double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t i = 0; i < d.p.size(); ++i) total += (d.p[i] = std::exp(z[i] - zmax));
    for (auto& v : d.p) v /= total;
    return d;
}

GaussianActionParams KnowledgeMapping::evaluate_point(const TensorBuf& obs) const {
    if (space_ != ActionSpaceTag::cont4)
        throw UsageError("point evaluation requested from a grid7 mapping");
    if (scripted()) return run_point_rule(rule_id_, obs, epsilon_);
    ad::NoGradGuard guard;
    auto [mean, log_std] =
        learned_->point->mean_log_std(learned_->point->features(point_obs_input(obs)));
    GaussianActionParams g;
    g.squashed = true;
    for (int i = 0; i < 4; ++i) {
        g.mean[i] = mean->value[i];
        g.sigma[i] = std::exp(log_std->value[i]);
    }
    return g;
}

const GridPolicySpec* KnowledgeMapping::grid_spec() const {
    return learned_ && learned_->grid ? &learned_->grid->spec() : nullptr;
}

const PointPolicySpec* KnowledgeMapping::point_spec() const {
    return learned_ && learned_->point ? &learned_->point->spec() : nullptr;
}

std::map<std::string, TensorBuf> KnowledgeMapping::snapshot_params() const {
    if (scripted()) return {};
    return learned_->store->snapshot();
}

void KnowledgeSet::add(KnowledgeEntry entry) {
    for (const auto& e : entries_)
        if (e.name == entry.name)
            throw UsageError("duplicate knowledge name: " + entry.name);
    if (auto s = space(); s && *s != entry.mapping.space())
        throw UsageError("knowledge set mixes action spaces at entry: " + entry.name);
    if (entry.key) {
        entry.key->validate("knowledge key");
        if (entry.key->shape.size() != 1)
            throw UsageError("knowledge key must be a vector: " + entry.name);
        if (auto d = key_dim(); d && *d != entry.key->size())
            throw UsageError("knowledge key dimension mismatch at entry: " + entry.name +
                             " (expected " + std::to_string(*d) + ", got " +
                             std::to_string(entry.key->size()) + ")");
    }
    entries_.push_back(std::move(entry));
}

const KnowledgeEntry& KnowledgeSet::at(std::size_t i) const {
    if (i >= entries_.size()) throw UsageError("knowledge index out of range");
    return entries_[i];
}

std::vector<std::string> KnowledgeSet::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

std::optional<ActionSpaceTag> KnowledgeSet::space() const {
    if (entries_.empty()) return std::nullopt;
    return entries_.front().mapping.space();
}

std::optional<std::size_t> KnowledgeSet::key_dim() const {
    for (const auto& e : entries_)
        if (e.key) return e.key->size();
    return std::nullopt;
}

namespace {

std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
    auto p = manifest;
    if (p.extension() == ".json") p.replace_extension(".blob");
    else p += ".blob";
    return p;
}

json arch_to_json(const KnowledgeMapping& m) {
    if (const auto* g = m.grid_spec()) {
        return json{{"type", "grid"},
                    {"channels", g->channels},
                    {"kernel", g->kernel},
                    {"stride", g->stride},
                    {"head_width", g->head_width},
                    {"trunk_width", g->trunk_width},
                    {"actions", g->actions}};
    }
    const auto* p = m.point_spec();
    return json{{"type", "point"},
                {"hidden", p->hidden},
                {"obs_dim", p->obs_dim},
                {"act_dim", p->act_dim}};
}

}  // namespace

void save_pack(const std::string& manifest_path, const std::string& name,
               const KnowledgeMapping& mapping, const TensorBuf& key) {
    key.validate("pack key");
    if (key.shape.size() != 1) throw UsageError("pack key must be a vector");
    json j{{"format", kPackFormat},
           {"name", name},
           {"kind", mapping.scripted() ? "scripted" : "learned"},
           {"action_space", action_space_to_string(mapping.space())},
           {"obs_layout", mapping.obs_layout()},
           {"d_k", key.size()},
           {"key", key.data}};
    if (mapping.scripted()) {
        j["rule"] = mapping.rule_id();
        if (mapping.space() == ActionSpaceTag::cont4) {
            if (std::isfinite(mapping.epsilon())) j["epsilon"] = mapping.epsilon();
            else j["epsilon"] = "inf";
        }
    } else {
        const auto blob = blob_path_for(manifest_path);
        j["arch"] = arch_to_json(mapping);
        j["blob"] = blob.filename().string();
        write_param_blob(blob.string(), mapping.snapshot_params());
    }
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("cannot write pack manifest: " + manifest_path);
    out << j.dump(2) << '\n';
    if (!out.good()) throw IoError("failed writing pack manifest: " + manifest_path);
}

LoadedPack load_pack(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open pack manifest: " + manifest_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("pack manifest is not valid JSON: " + manifest_path + " (" +
                      e.what() + ")");
    }
    try {
        if (!j.is_object() || j.value("format", "") != kPackFormat)
            throw IoError("unsupported pack format in " + manifest_path +
                          " (expected " + std::string(kPackFormat) + ")");
        const auto name = j.at("name").get<std::string>();
        const auto space = action_space_from_string(j.at("action_space").get<std::string>());
        const auto kind = j.at("kind").get<std::string>();
        const auto layout = j.at("obs_layout").get<std::string>();
        const auto d_k = j.at("d_k").get<std::size_t>();
        auto key_values = j.at("key").get<std::vector<double>>();
        if (key_values.size() != d_k)
            throw IoError("pack key length disagrees with d_k in " + manifest_path);
        auto key = TensorBuf::vector(std::move(key_values));

        std::optional<KnowledgeMapping> mapping;
        if (kind == "scripted") {
            const auto rule = j.at("rule").get<std::string>();
            if (space == ActionSpaceTag::grid7) {
                mapping = KnowledgeMapping::scripted_grid(rule);
            } else {
                double eps = std::numeric_limits<double>::infinity();
                const auto& je = j.at("epsilon");
                if (je.is_number()) eps = je.get<double>();
                else if (je != "inf")
                    throw IoError("bad epsilon value in " + manifest_path);
                mapping = KnowledgeMapping::scripted_point(rule, eps);
            }
        } else if (kind == "learned") {
            const auto blob_name = j.at("blob").get<std::string>();
            const auto blob =
                std::filesystem::path(manifest_path).parent_path() / blob_name;
            auto params = read_param_blob(blob.string());
            const auto& arch = j.at("arch");
            const auto type = arch.at("type").get<std::string>();
            if (type == "grid") {
                GridPolicySpec spec;
                spec.channels = arch.at("channels").get<std::array<std::size_t, 3>>();
                spec.kernel = arch.at("kernel").get<std::size_t>();
                spec.stride = arch.at("stride").get<std::size_t>();
                spec.head_width = arch.at("head_width").get<std::size_t>();
                spec.trunk_width = arch.at("trunk_width").get<std::size_t>();
                spec.actions = arch.at("actions").get<std::size_t>();
                mapping = KnowledgeMapping::frozen_grid(spec, params);
            } else if (type == "point") {
                PointPolicySpec spec;
                spec.hidden = arch.at("hidden").get<std::vector<std::size_t>>();
                spec.obs_dim = arch.at("obs_dim").get<std::size_t>();
                spec.act_dim = arch.at("act_dim").get<std::size_t>();
                mapping = KnowledgeMapping::frozen_point(spec, params);
            } else {
                throw IoError("unknown snapshot architecture type in " + manifest_path);
            }
            if (mapping->space() != space)
                throw IoError("pack action space disagrees with snapshot in " +
                              manifest_path);
        } else {
            throw IoError("unknown pack kind in " + manifest_path + ": " + kind);
        }
        if (mapping->obs_layout() != layout)
            throw IoError("pack observation layout " + layout + " is not supported (" +
                          manifest_path + " expects " + mapping->obs_layout() + ")");
        return LoadedPack{name, std::move(*mapping), std::move(key)};
    } catch (const json::exception& e) {
        throw IoError("pack manifest field error in " + manifest_path + ": " + e.what());
    }
}

void require_obs_layout(const KnowledgeMapping& mapping, const std::string& expected) {
    if (mapping.obs_layout() != expected)
        throw IoError("observation layout mismatch: mapping expects " +
                      mapping.obs_layout() + ", environment provides " + expected);
}

}  // namespace kgrl
