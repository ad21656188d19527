#include "kgrl/grid_env.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "kgrl/errors.hpp"
#include "kgrl/rng.hpp"

namespace kgrl {

GridVariant grid_variant_from_string(const std::string& s) {
    if (s == "empty") return GridVariant::empty;
    if (s == "empty_random") return GridVariant::empty_random;
    if (s == "unlock") return GridVariant::unlock;
    if (s == "doorkey") return GridVariant::doorkey;
    throw ConfigError("unknown grid variant '" + s + "'");
}

std::string grid_variant_to_string(GridVariant v) {
    switch (v) {
        case GridVariant::empty: return "empty";
        case GridVariant::empty_random: return "empty_random";
        case GridVariant::unlock: return "unlock";
        case GridVariant::doorkey: return "doorkey";
    }
    return "empty";
}

std::string grid_action_name(GridAction a) {
    switch (a) {
        case GridAction::turn_left: return "turn_left";
        case GridAction::turn_right: return "turn_right";
        case GridAction::forward: return "forward";
        case GridAction::pickup: return "pickup";
        case GridAction::drop: return "drop";
        case GridAction::toggle: return "toggle";
        case GridAction::done: return "done";
    }
    return "?";
}

void GridConfig::validate() const {
    if (width < 5 || height < 5)
        throw ConfigError("grid: width and height must be at least 5");
    if (variant == GridVariant::doorkey || variant == GridVariant::unlock) {
        if (width < 5) throw ConfigError("grid: door variants need width >= 5");
    }
}

std::size_t GridConfig::effective_max_steps() const {
    return max_steps ? max_steps : 4 * width * height;
}

const GridCell& GridState::cell(int x, int y) const {
    return cells[static_cast<std::size_t>(y) * config.width + static_cast<std::size_t>(x)];
}

GridCell& GridState::cell(int x, int y) {
    return cells[static_cast<std::size_t>(y) * config.width + static_cast<std::size_t>(x)];
}

bool GridState::in_bounds(int x, int y) const {
    return x >= 0 && y >= 0 && x < static_cast<int>(config.width) &&
           y < static_cast<int>(config.height);
}

bool GridState::opaque(int x, int y) const {
    const GridCell& c = cell(x, y);
    if (c.object == GridObject::wall) return true;
    return c.object == GridObject::door && c.door != DoorState::open;
}

bool GridState::blocks_walk(int x, int y) const {
    const GridCell& c = cell(x, y);
    switch (c.object) {
        case GridObject::empty:
        case GridObject::goal: return false;
        case GridObject::door: return c.door != DoorState::open;
        case GridObject::wall:
        case GridObject::key: return true;
    }
    return true;
}

namespace {

struct Vec2 {
    int x, y;
};

Vec2 forward_vec(GridDir d) {
    switch (d) {
        case GridDir::east: return {1, 0};
        case GridDir::south: return {0, 1};
        case GridDir::west: return {-1, 0};
        case GridDir::north: return {0, -1};
    }
    return {1, 0};
}

// 90° clockwise with y growing downward: the agent's right-hand side.
Vec2 right_vec(GridDir d) { return forward_vec(static_cast<GridDir>((static_cast<int>(d) + 1) % 4)); }

}  // namespace

bool grid_visible(const GridState& s, int tx, int ty) {
    if (!s.in_bounds(tx, ty)) return false;
    // Doubled lattice: cell (c) spans [2c, 2c+2], its center sits at 2c+1.
    const long long x0 = 2LL * s.agent_x + 1, y0 = 2LL * s.agent_y + 1;
    const long long x1 = 2LL * tx + 1, y1 = 2LL * ty + 1;
    const long long dx = x1 - x0, dy = y1 - y0;
    int cx = s.agent_x, cy = s.agent_y;
    const int stepx = dx > 0 ? 1 : -1, stepy = dy > 0 ? 1 : -1;
    const long long adx = std::llabs(dx), ady = std::llabs(dy);
    while (cx != tx || cy != ty) {
        // Fractions of the segment at the next vertical/horizontal cell
        // boundary, compared exactly by cross-multiplication.
        long long nx = 0, ny = 0;
        if (adx) nx = std::llabs((2LL * cx + (stepx > 0 ? 2 : 0)) - x0);
        if (ady) ny = std::llabs((2LL * cy + (stepy > 0 ? 2 : 0)) - y0);
        bool step_x, step_y;
        if (adx == 0) {
            step_x = false;
            step_y = true;
        } else if (ady == 0) {
            step_x = true;
            step_y = false;
        } else {
            const long long lhs = nx * ady, rhs = ny * adx;
            step_x = lhs <= rhs;
            step_y = rhs <= lhs;  // both on an exact corner: go diagonal
        }
        if (step_x) cx += stepx;
        if (step_y) cy += stepy;
        if (cx == tx && cy == ty) break;
        if (s.opaque(cx, cy)) return false;
    }
    return true;
}

GridState grid_reset(const GridConfig& config, std::uint64_t seed) {
    config.validate();
    GridState s;
    s.config = config;
    const int w = static_cast<int>(config.width), h = static_cast<int>(config.height);
    s.cells.assign(config.width * config.height, GridCell{});
    for (int x = 0; x < w; ++x)
        for (int y = 0; y < h; ++y)
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1)
                s.cell(x, y) = {GridObject::wall, GridColor::grey, DoorState::closed};

    CounterRng rng(seed, 0);
    switch (config.variant) {
        case GridVariant::empty: {
            s.agent_x = 1;
            s.agent_y = 1;
            s.dir = GridDir::east;
            s.cell(w - 2, h - 2) = {GridObject::goal, GridColor::green, DoorState::closed};
            break;
        }
        case GridVariant::empty_random: {
            s.agent_x = 1;
            s.agent_y = 1;
            s.dir = GridDir::east;
            // Goal uniform over interior cells other than the agent's.
            std::vector<Vec2> open;
            for (int x = 1; x < w - 1; ++x)
                for (int y = 1; y < h - 1; ++y)
                    if (x != 1 || y != 1) open.push_back({x, y});
            const Vec2 g = open[rng.uniform_index(open.size())];
            s.cell(g.x, g.y) = {GridObject::goal, GridColor::green, DoorState::closed};
            break;
        }
        case GridVariant::unlock:
        case GridVariant::doorkey: {
            if (w < 5)
                throw ConfigError("grid: door variants need at least 5 columns");
            // Vertical wall with one locked door; agent and key start on the
            // left side, the goal (doorkey only) in the far right corner.
            const int wall_x =
                2 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(w - 4)));
            for (int y = 1; y < h - 1; ++y)
                s.cell(wall_x, y) = {GridObject::wall, GridColor::grey, DoorState::closed};
            const int door_y =
                1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(h - 2)));
            s.cell(wall_x, door_y) = {GridObject::door, GridColor::yellow, DoorState::locked};

            std::vector<Vec2> left;
            for (int x = 1; x < wall_x; ++x)
                for (int y = 1; y < h - 1; ++y) left.push_back({x, y});
            const std::size_t agent_idx = rng.uniform_index(left.size());
            const Vec2 a = left[agent_idx];
            s.agent_x = a.x;
            s.agent_y = a.y;
            s.dir = static_cast<GridDir>(rng.uniform_index(4));
            left.erase(left.begin() + static_cast<std::ptrdiff_t>(agent_idx));
            const Vec2 k = left[rng.uniform_index(left.size())];
            s.cell(k.x, k.y) = {GridObject::key, GridColor::yellow, DoorState::closed};

            if (config.variant == GridVariant::doorkey)
                s.cell(w - 2, h - 2) = {GridObject::goal, GridColor::green, DoorState::closed};
            break;
        }
    }
    return s;
}

GridStepResult grid_step(const GridState& s, GridAction action) {
    if (s.done) throw UsageError("grid_step: episode already finished");
    GridStepResult out;
    out.state = s;
    GridState& n = out.state;

    const Vec2 f = forward_vec(n.dir);
    const int ax = n.agent_x + f.x, ay = n.agent_y + f.y;
    bool success = false;

    switch (action) {
        case GridAction::turn_left:
            n.dir = static_cast<GridDir>((static_cast<int>(n.dir) + 3) % 4);
            break;
        case GridAction::turn_right:
            n.dir = static_cast<GridDir>((static_cast<int>(n.dir) + 1) % 4);
            break;
        case GridAction::forward:
            if (n.in_bounds(ax, ay) && !n.blocks_walk(ax, ay)) {
                n.agent_x = ax;
                n.agent_y = ay;
                if (n.cell(ax, ay).object == GridObject::goal) success = true;
            }
            break;
        case GridAction::pickup:
            if (n.in_bounds(ax, ay) && !n.carrying_key &&
                n.cell(ax, ay).object == GridObject::key) {
                n.cell(ax, ay) = GridCell{};
                n.carrying_key = true;
            }
            break;
        case GridAction::drop:
            if (n.in_bounds(ax, ay) && n.carrying_key &&
                n.cell(ax, ay).object == GridObject::empty) {
                n.cell(ax, ay) = {GridObject::key, GridColor::yellow, DoorState::closed};
                n.carrying_key = false;
            }
            break;
        case GridAction::toggle:
            if (n.in_bounds(ax, ay) && n.cell(ax, ay).object == GridObject::door) {
                GridCell& door = n.cell(ax, ay);
                switch (door.door) {
                    case DoorState::locked:
                        if (n.carrying_key) {
                            door.door = DoorState::open;
                            if (n.config.variant == GridVariant::unlock) success = true;
                        }
                        break;
                    case DoorState::closed: door.door = DoorState::open; break;
                    case DoorState::open: door.door = DoorState::closed; break;
                }
            }
            break;
        case GridAction::done: break;
    }

    ++n.step_count;
    if (success) {
        n.done = true;
        out.reward = 1.0 - 0.9 * static_cast<double>(n.step_count) /
                               static_cast<double>(n.config.effective_max_steps());
    } else if (n.step_count >= n.config.effective_max_steps()) {
        n.done = true;
        out.reward = 0.0;
    }
    out.done = n.done;
    return out;
}

GridObservation encode_observation(const GridState& s) {
    GridObservation obs;
    obs.image = TensorBuf::zeros({kViewChannels, kViewSize, kViewSize});
    obs.carrying = s.carrying_key;
    const Vec2 f = forward_vec(s.dir), r = right_vec(s.dir);

    auto plane = [&obs](std::size_t ch, std::size_t row, std::size_t col) -> double& {
        return obs.image.data[(ch * kViewSize + row) * kViewSize + col];
    };

    for (std::size_t row = 0; row < kViewSize; ++row) {
        for (std::size_t col = 0; col < kViewSize; ++col) {
            const int ahead = static_cast<int>(kViewSize - 1 - row);
            const int lateral = static_cast<int>(col) - 2;
            const int wx = s.agent_x + f.x * ahead + r.x * lateral;
            const int wy = s.agent_y + f.y * ahead + r.y * lateral;
            std::size_t obj = 0, color = 0, door = 0;  // unseen / none / none
            if (s.in_bounds(wx, wy) && grid_visible(s, wx, wy)) {
                const GridCell& c = s.cell(wx, wy);
                obj = static_cast<std::size_t>(c.object) + 1;  // skip "unseen"
                color = static_cast<std::size_t>(c.color);
                door = c.object == GridObject::door
                           ? 1 + static_cast<std::size_t>(c.door)
                           : 0;
            }
            plane(obj, row, col) = 1.0;
            plane(kObjectPlanes + color, row, col) = 1.0;
            plane(kObjectPlanes + kColorPlanes + door, row, col) = 1.0;
        }
    }
    return obs;
}

std::string render_grid(const GridState& s) {
    std::ostringstream os;
    const int w = static_cast<int>(s.config.width), h = static_cast<int>(s.config.height);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (x == s.agent_x && y == s.agent_y) {
                os << ">v<^"[static_cast<int>(s.dir)];
                continue;
            }
            const GridCell& c = s.cell(x, y);
            switch (c.object) {
                case GridObject::empty: os << '.'; break;
                case GridObject::wall: os << '#'; break;
                case GridObject::key: os << 'K'; break;
                case GridObject::goal: os << 'G'; break;
                case GridObject::door:
                    os << (c.door == DoorState::locked ? 'L'
                           : c.door == DoorState::closed ? 'd'
                                                         : '/');
                    break;
            }
        }
        os << '\n';
    }
    return os.str();
}

GridEnv::GridEnv(GridConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
    config_.validate();
    state_ = grid_reset(config_, seed_);  // episode 0 layout; reset() replays it
}

GridObservation GridEnv::reset() {
    state_ = grid_reset(config_, seed_ + 0x9E3779B97F4A7C15ULL * episode_);
    ++episode_;
    return encode_observation(state_);
}

GridStepResult GridEnv::step_state(GridAction a) {
    GridStepResult out = grid_step(state_, a);
    state_ = out.state;
    return out;
}

}  // namespace kgrl
