#include "kgrl/point_env.hpp"

#include <algorithm>
#include <cmath>

#include "kgrl/errors.hpp"
#include "kgrl/rng.hpp"

namespace kgrl {

PointVariant point_variant_from_string(const std::string& s) {
    if (s == "reach") return PointVariant::reach;
    if (s == "pick_place") return PointVariant::pick_place;
    throw ConfigError("unknown point variant '" + s + "'");
}

std::string point_variant_to_string(PointVariant v) {
    return v == PointVariant::reach ? "reach" : "pick_place";
}

void PointConfig::validate() const {
    if (!(goal_range_scale > 0.0 && goal_range_scale <= 1.0))
        throw ConfigError("point: goal_range_scale must lie in (0, 1]");
    if (max_steps < 1) throw ConfigError("point: max_steps must be at least 1");
}

namespace {

double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

std::array<double, 3> clip_workspace(std::array<double, 3> p) {
    for (int i = 0; i < 3; ++i) p[i] = std::clamp(p[i], kWorkspaceLo[i], kWorkspaceHi[i]);
    return p;
}

}  // namespace

bool point_success(const PointState& s) {
    const auto& target = s.config.variant == PointVariant::reach ? s.p_ee : s.p_obj;
    return point_goal_reached(target, s.p_goal);
}

bool point_goal_reached(const std::array<double, 3>& achieved,
                        const std::array<double, 3>& goal) {
    return dist3(achieved, goal) < kSuccessRadius;
}

PointState point_reset(const PointConfig& config, std::uint64_t seed) {
    config.validate();
    CounterRng rng(seed, 0);
    PointState s;
    s.config = config;
    s.p_ee = kEeStart;
    const double scale = config.goal_range_scale;

    if (config.variant == PointVariant::reach) {
        for (int i = 0; i < 3; ++i) {
            const double half = (i == 2 ? kGoalHalfZ : kGoalHalfXY) * scale;
            s.p_goal[i] = kEeStart[i] + rng.uniform(-half, half);
        }
        s.p_goal = clip_workspace(s.p_goal);
    } else {
        s.p_obj = {rng.uniform(-kGoalHalfXY, kGoalHalfXY),
                   rng.uniform(-kGoalHalfXY, kGoalHalfXY), 0.0};
        s.p_goal[0] = rng.uniform(-kGoalHalfXY, kGoalHalfXY) * scale;
        s.p_goal[1] = rng.uniform(-kGoalHalfXY, kGoalHalfXY) * scale;
        s.p_goal[2] = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, kAirGoalMaxZ) * scale;
    }
    return s;
}

PointStepResult point_step(const PointState& s, const ContinuousAction& a) {
    if (s.done) throw UsageError("point_step: episode already finished");
    PointStepResult out;
    out.state = s;
    PointState& n = out.state;

    const double grip = std::clamp(a.grip, -1.0, 1.0);

    // Grasp/release resolve on the pre-move distance, so closing the gripper
    // and pulling away in the same step still picks the object up.
    if (s.config.variant == PointVariant::pick_place) {
        if (grip < 0.0 && dist3(n.p_ee, n.p_obj) < kGraspRadius)
            n.object_held = true;
        else if (grip > 0.0)
            n.object_held = false;  // released in place; kinematics, no gravity
    }

    const auto old_ee = n.p_ee;
    std::array<double, 3> move{};
    for (int i = 0; i < 3; ++i) move[i] = kPointGain * std::clamp(a.dxyz[i], -1.0, 1.0);
    n.p_ee = clip_workspace({old_ee[0] + move[0], old_ee[1] + move[1], old_ee[2] + move[2]});
    for (int i = 0; i < 3; ++i) n.v_ee[i] = n.p_ee[i] - old_ee[i];

    const double old_gap = n.gripper_gap;
    n.gripper_gap = std::clamp(old_gap + kGripGain * grip, 0.0, kMaxGap);
    n.gap_vel = n.gripper_gap - old_gap;

    if (s.config.variant == PointVariant::pick_place) {
        const auto old_obj = n.p_obj;
        if (n.object_held) n.p_obj = n.p_ee;
        for (int i = 0; i < 3; ++i) n.v_obj[i] = n.p_obj[i] - old_obj[i];
    }

    ++n.step_count;
    if (point_success(n)) {
        out.reward = 0.0;
        n.done = true;
    } else {
        out.reward = -1.0;
        if (n.step_count >= n.config.max_steps) n.done = true;
    }
    out.done = n.done;
    return out;
}

TensorBuf encode_point_observation(const PointState& s) {
    TensorBuf obs = TensorBuf::zeros({kPointObsDim});
    auto put3 = [&obs](std::size_t at, const std::array<double, 3>& v) {
        for (int i = 0; i < 3; ++i) obs.data[at + static_cast<std::size_t>(i)] = v[i];
    };
    put3(0, s.p_ee);
    put3(3, s.v_ee);
    obs.data[6] = obs.data[7] = s.gripper_gap / 2.0;
    obs.data[8] = obs.data[9] = s.gap_vel / 2.0;
    if (s.config.variant == PointVariant::pick_place) {
        put3(10, s.p_obj);
        // [13:16) object rotation stays zero
        put3(16, s.v_obj);
        put3(19, {s.p_obj[0] - s.p_ee[0], s.p_obj[1] - s.p_ee[1], s.p_obj[2] - s.p_ee[2]});
    }
    put3(22, s.p_goal);
    return obs;
}

PointEnv::PointEnv(PointConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    state_ = point_reset(config_, seed_);
}

TensorBuf PointEnv::reset() {
    state_ = point_reset(config_, seed_ + 0x9E3779B97F4A7C15ULL * episode_);
    ++episode_;
    return encode_point_observation(state_);
}

PointStepResult PointEnv::step_state(const ContinuousAction& a) {
    PointStepResult out = point_step(state_, a);
    state_ = out.state;
    return out;
}

}  // namespace kgrl
