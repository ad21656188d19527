#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "kgrl/tensor.hpp"

namespace kgrl {

enum class PointVariant { reach, pick_place };

PointVariant point_variant_from_string(const std::string& s);
std::string point_variant_to_string(PointVariant v);

// Motion and interaction constants (meters; one simulation step per action).
constexpr double kPointGain = 0.05;      // commanded displacement scale
constexpr double kGraspRadius = 0.03;    // close the gripper this near to grab
constexpr double kSuccessRadius = 0.05;  // goal tolerance
constexpr double kGripGain = 0.01;       // finger gap change per unit grip
constexpr double kMaxGap = 0.1;

// Workspace and sampling geometry. The end effector starts at the workspace
// center; goals sample from a box whose half-widths shrink with
// goal_range_scale; objects spawn on the table plane z = 0.
constexpr std::array<double, 3> kWorkspaceLo{-0.25, -0.25, 0.0};
constexpr std::array<double, 3> kWorkspaceHi{0.25, 0.25, 0.3};
constexpr std::array<double, 3> kEeStart{0.0, 0.0, 0.15};
constexpr double kGoalHalfXY = 0.15;   // base half-width, x and y
constexpr double kGoalHalfZ = 0.15;    // reach only, around the ee start
constexpr double kAirGoalMaxZ = 0.25;  // pick_place air goals: z in (0, this]·scale

struct PointConfig {
    PointVariant variant = PointVariant::reach;
    double goal_range_scale = 1.0;  // in (0, 1]
    std::size_t max_steps = 50;

    void validate() const;  // throws ConfigError
};

struct ContinuousAction {
    std::array<double, 3> dxyz{0, 0, 0};  // each in [-1, 1]
    double grip = 0.0;                    // negative closes, positive opens
};

struct PointState {
    PointConfig config;
    std::array<double, 3> p_ee{};
    std::array<double, 3> v_ee{};
    double gripper_gap = kMaxGap / 2;
    double gap_vel = 0.0;
    std::array<double, 3> p_obj{};  // pick_place only
    std::array<double, 3> v_obj{};
    bool object_held = false;
    std::array<double, 3> p_goal{};
    std::size_t step_count = 0;
    bool done = false;
};

// Flat 25-vector:
//   [0:3)   ee position        [3:6)   ee velocity
//   [6:8)   finger positions (gap/2 each)
//   [8:10)  finger velocities (gap_vel/2 each)
//   [10:13) object position    [13:16) object rotation (always zero)
//   [16:19) object velocity    [19:22) object position relative to ee
//   [22:25) goal position
// The reach variant zero-fills [10:22).
constexpr std::size_t kPointObsDim = 25;

PointState point_reset(const PointConfig& config, std::uint64_t seed);

struct PointStepResult {
    PointState state;
    double reward = -1.0;
    bool done = false;
};

// Kinematic transition: the grasp/release predicate runs on the pre-move
// distance (grip < 0 within the grasp radius grabs; grip > 0 releases in
// place), then ee moves by gain·clip(dxyz) (clipped to the workspace), then a
// held object tracks the effector. Reward 0 on success (target within the
// goal tolerance), else -1. Throws UsageError on a finished episode.
PointStepResult point_step(const PointState& s, const ContinuousAction& a);

TensorBuf encode_point_observation(const PointState& s);

bool point_success(const PointState& s);
// The same tolerance check on raw positions (used when relabeling goals).
bool point_goal_reached(const std::array<double, 3>& achieved,
                        const std::array<double, 3>& goal);

// Stateful wrapper mirroring GridEnv: episode i reseeds with (seed, i).
class PointEnv {
public:
    PointEnv(PointConfig config, std::uint64_t seed);

    TensorBuf reset();
    PointStepResult step_state(const ContinuousAction& a);
    const PointState& state() const { return state_; }
    const PointConfig& config() const { return config_; }

private:
    PointConfig config_;
    std::uint64_t seed_;
    std::uint64_t episode_ = 0;
    PointState state_;
};

}  // namespace kgrl
