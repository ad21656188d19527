#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kgrl/tensor.hpp"

namespace kgrl {

enum class GridVariant { empty, empty_random, unlock, doorkey };
enum class GridObject { empty, wall, door, key, goal };
enum class DoorState { open, closed, locked };
enum class GridColor { none, grey, yellow, green };
enum class GridDir { east, south, west, north };  // turn_right cycles in this order
enum class GridAction { turn_left, turn_right, forward, pickup, drop, toggle, done };

constexpr int kGridActionCount = 7;
constexpr std::size_t kViewSize = 5;
// Per-cell one-hot planes: object {unseen, empty, wall, door, key, goal},
// color {none, grey, yellow, green}, door state {none, open, closed, locked}.
constexpr std::size_t kObjectPlanes = 6;
constexpr std::size_t kColorPlanes = 4;
constexpr std::size_t kDoorPlanes = 4;
constexpr std::size_t kViewChannels = kObjectPlanes + kColorPlanes + kDoorPlanes;

GridVariant grid_variant_from_string(const std::string& s);
std::string grid_variant_to_string(GridVariant v);
std::string grid_action_name(GridAction a);

struct GridConfig {
    std::size_t width = 5;
    std::size_t height = 5;
    GridVariant variant = GridVariant::empty;
    std::size_t max_steps = 0;  // 0 → default 4·width·height

    void validate() const;  // throws ConfigError
    std::size_t effective_max_steps() const;
};

struct GridCell {
    GridObject object = GridObject::empty;
    GridColor color = GridColor::none;
    DoorState door = DoorState::closed;  // meaningful only when object == door
};

// Plain value type; step() copies rather than mutating, so states may be
// held across workers freely.
struct GridState {
    GridConfig config;
    std::vector<GridCell> cells;  // row-major [height][width]
    int agent_x = 1, agent_y = 1;
    GridDir dir = GridDir::east;
    bool carrying_key = false;
    std::size_t step_count = 0;
    bool done = false;

    const GridCell& cell(int x, int y) const;
    GridCell& cell(int x, int y);
    bool in_bounds(int x, int y) const;
    bool opaque(int x, int y) const;    // wall or non-open door
    bool blocks_walk(int x, int y) const;
};

// Egocentric 5×5 directed view. Row 4 is the agent's row, column 2 the line
// straight ahead; the agent occupies image cell (row 4, column 2). Cells out
// of bounds or occluded by opaque cells encode as unseen.
struct GridObservation {
    TensorBuf image;  // [kViewChannels, kViewSize, kViewSize]
    bool carrying = false;
};

// Line-of-sight on the doubled integer lattice: a cell is visible when the
// open segment between cell centers crosses no opaque cell's open interior.
// Exact corner crossings step diagonally (corner contact does not occlude).
bool grid_visible(const GridState& s, int tx, int ty);

GridState grid_reset(const GridConfig& config, std::uint64_t seed);

struct GridStepResult {
    GridState state;
    double reward = 0.0;
    bool done = false;
};

// Pure transition. Throws UsageError when the episode is already done.
GridStepResult grid_step(const GridState& s, GridAction action);

GridObservation encode_observation(const GridState& s);

// Debug view; legend: '#' wall, '.' empty, 'K' key, 'G' goal, 'L' locked
// door, 'd' closed door, '/' open door, agent '>' 'v' '<' '^' by heading.
std::string render_grid(const GridState& s);

// Stateful convenience wrapper for rollouts: episode i reseeds the layout
// with (seed, episode_index) so trajectories replay exactly.
class GridEnv {
public:
    GridEnv(GridConfig config, std::uint64_t seed);

    GridObservation reset();
    GridStepResult step_state(GridAction a);  // advances and returns full result
    const GridState& state() const { return state_; }
    const GridConfig& config() const { return config_; }
    std::uint64_t episodes_started() const { return episode_; }

private:
    GridConfig config_;
    std::uint64_t seed_;
    std::uint64_t episode_ = 0;
    GridState state_;
};

}  // namespace kgrl
