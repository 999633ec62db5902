#include "treeqn/boxworld.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace treeqn {

const char* action_name(Action a) {
    switch (a) {
    case Action::Up: return "Up";
    case Action::Down: return "Down";
    case Action::Left: return "Left";
    case Action::Right: return "Right";
    }
    return "?";
}

int box_count(const BoardState& s) { return std::popcount(s.boxes); }

namespace {
// Row 0 is the top row; Up decrements the row.
constexpr int kDeltaRow[kNumActions] = {-1, +1, 0, 0};
constexpr int kDeltaCol[kNumActions] = {0, 0, -1, +1};
}  // namespace

BoardState generate_level(Rng& rng) {
    std::array<int, 36> tiles{};
    int n = 0;
    for (int r = kCenterLo; r <= kCenterHi; ++r)
        for (int c = kCenterLo; c <= kCenterHi; ++c) tiles[static_cast<std::size_t>(n++)] = r * kGridSize + c;

    // Partial Fisher-Yates: the first 24 entries are a uniform
    // without-replacement sample, assigned agent -> boxes -> goals -> obstacles.
    constexpr int kEntities = 1 + kNumBoxes + kNumGoals + kNumObstacles;
    for (int i = 0; i < kEntities; ++i) {
        const int j = i + rng.next_int(36 - i);
        std::swap(tiles[static_cast<std::size_t>(i)], tiles[static_cast<std::size_t>(j)]);
    }

    BoardState s;
    s.agent_row = tiles[0] / kGridSize;
    s.agent_col = tiles[0] % kGridSize;
    int k = 1;
    for (int i = 0; i < kNumBoxes; ++i) s.boxes |= std::uint64_t{1} << tiles[static_cast<std::size_t>(k++)];
    for (int i = 0; i < kNumGoals; ++i) s.goals |= std::uint64_t{1} << tiles[static_cast<std::size_t>(k++)];
    for (int i = 0; i < kNumObstacles; ++i) s.obstacles |= std::uint64_t{1} << tiles[static_cast<std::size_t>(k++)];
    return s;
}

StepResult step(BoardState& state, Action a, bool consumable_goals) {
    if (state.done) throw std::logic_error("boxworld: step called on a finished episode");

    const int dr = kDeltaRow[static_cast<int>(a)];
    const int dc = kDeltaCol[static_cast<int>(a)];
    const int tr = state.agent_row + dr;
    const int tc = state.agent_col + dc;

    double reward = kStepPenalty;

    if (!on_grid(tr, tc)) {
        state.agent_row = tr;
        state.agent_col = tc;
        reward += kOffGridPenalty;
        state.done = true;
    } else if (has_box(state, tr, tc)) {
        const int br = tr + dr;
        const int bc = tc + dc;
        if (on_grid(br, bc) && has_box(state, br, bc)) {
            // Pushing a box into a box is not allowed; nothing moves.
            reward += kBlockedPushPenalty;
        } else {
            state.boxes &= ~tile_bit(tr, tc);
            if (!on_grid(br, bc)) {
                reward += kBoxOffGridPenalty;  // box leaves the grid and is removed
            } else if (has_goal(state, br, bc)) {
                reward += kGoalReward;  // delivered box is removed
                if (consumable_goals) state.goals &= ~tile_bit(br, bc);
            } else {
                state.boxes |= tile_bit(br, bc);
                if (has_obstacle(state, br, bc)) reward += kObstaclePenalty;
            }
            state.agent_row = tr;
            state.agent_col = tc;
            if (has_obstacle(state, tr, tc)) reward += kObstaclePenalty;
        }
    } else {
        state.agent_row = tr;
        state.agent_col = tc;
        if (has_obstacle(state, tr, tc)) reward += kObstaclePenalty;
    }

    ++state.steps_elapsed;
    if (state.steps_elapsed >= kEpisodeLimit) state.done = true;
    if (state.boxes == 0) state.done = true;

    StepResult result;
    result.observation = observe(state);
    result.reward = reward;
    result.done = state.done;
    return result;
}

std::vector<double> observe(const BoardState& state) {
    std::vector<double> obs(kObsSize, 0.0);
    constexpr int plane = kGridSize * kGridSize;
    if (on_grid(state.agent_row, state.agent_col))
        obs[static_cast<std::size_t>(state.agent_row * kGridSize + state.agent_col)] = 1.0;
    for (int t = 0; t < plane; ++t) {
        const std::uint64_t bit = std::uint64_t{1} << t;
        if (state.goals & bit) obs[static_cast<std::size_t>(plane + t)] = 1.0;
        if (state.boxes & bit) obs[static_cast<std::size_t>(2 * plane + t)] = 1.0;
        if (state.obstacles & bit) obs[static_cast<std::size_t>(3 * plane + t)] = 1.0;
    }
    const double remaining =
        static_cast<double>(kEpisodeLimit - state.steps_elapsed) / static_cast<double>(kEpisodeLimit);
    for (int t = 0; t < plane; ++t) obs[static_cast<std::size_t>(4 * plane + t)] = remaining;
    return obs;
}

std::string ascii_board(const BoardState& state) {
    std::string out;
    for (int r = 0; r < kGridSize; ++r) {
        for (int c = 0; c < kGridSize; ++c) {
            char ch = '.';
            if (has_obstacle(state, r, c)) ch = 'O';
            if (has_goal(state, r, c)) ch = 'G';
            if (has_box(state, r, c)) ch = 'B';
            if (r == state.agent_row && c == state.agent_col) ch = 'A';
            out += ch;
        }
        out += '\n';
    }
    return out;
}

BoardState parse_ascii_board(const std::string& text) {
    BoardState s;
    int agents = 0;
    std::istringstream in(text);
    std::string line;
    int r = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (r >= kGridSize || static_cast<int>(line.size()) != kGridSize)
            throw std::invalid_argument("ascii board: expected 8 lines of 8 tiles");
        for (int c = 0; c < kGridSize; ++c) {
            switch (line[static_cast<std::size_t>(c)]) {
            case 'A':
                s.agent_row = r;
                s.agent_col = c;
                ++agents;
                break;
            case 'B': s.boxes |= tile_bit(r, c); break;
            case 'G': s.goals |= tile_bit(r, c); break;
            case 'O': s.obstacles |= tile_bit(r, c); break;
            case '.': break;
            default:
                throw std::invalid_argument("ascii board: unexpected tile character");
            }
        }
        ++r;
    }
    if (r != kGridSize) throw std::invalid_argument("ascii board: expected 8 lines of 8 tiles");
    if (agents != 1) throw std::invalid_argument("ascii board: expected exactly one agent");
    return s;
}

std::string trajectory_json_line(int step, Action a, double reward, bool done) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), R"({"step":%d,"action":"%s","reward":%.10g,"done":%s})", step,
                  action_name(a), reward, done ? "true" : "false");
    return buf;
}

VecEnv::VecEnv(int n_env, std::uint64_t seed, bool consumable_goals) {
    if (n_env < 1) throw std::invalid_argument("VecEnv: n_env must be positive");
    envs_.reserve(static_cast<std::size_t>(n_env));
    for (int i = 0; i < n_env; ++i)
        envs_.emplace_back(Rng::split(seed, static_cast<std::uint64_t>(i)).next_u64(), consumable_goals);
}

std::vector<StepResult> VecEnv::step(std::span<const Action> actions) {
    if (static_cast<int>(actions.size()) != size())
        throw std::invalid_argument("VecEnv::step: expected one action per env");
    std::vector<StepResult> results;
    results.reserve(envs_.size());
    for (std::size_t i = 0; i < envs_.size(); ++i) {
        StepResult r = envs_[i].step(actions[i]);
        if (r.done) {
            // Fresh level for the next step; the terminal flag stays surfaced
            // so callers never bootstrap across the boundary.
            envs_[i].reset();
            r.observation = envs_[i].observe();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace treeqn
