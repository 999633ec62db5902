#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "treeqn/rng.hpp"

namespace treeqn {

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3 };
constexpr int kNumActions = 4;
const char* action_name(Action a);

constexpr int kGridSize = 8;
constexpr int kCenterLo = 1, kCenterHi = 6;  // inclusive bounds of the 6x6 center
constexpr int kEpisodeLimit = 75;
constexpr int kNumBoxes = 12;
constexpr int kNumGoals = 5;
constexpr int kNumObstacles = 6;
constexpr int kObsChannels = 5;  // agent, goals, boxes, obstacles, time
constexpr int kObsSize = kObsChannels * kGridSize * kGridSize;

constexpr double kStepPenalty = -0.01;
constexpr double kOffGridPenalty = -1.0;
constexpr double kBoxOffGridPenalty = -0.1;
constexpr double kBlockedPushPenalty = -0.1;
constexpr double kGoalReward = 1.0;
constexpr double kObstaclePenalty = -0.2;

// Full environment state. Entity sets are 8x8 occupancy bitboards
// (bit row * 8 + col). The agent leaves the grid on a fatal move, so its
// coordinates are only guaranteed in-range while done is false.
struct BoardState {
    int agent_row = 0;
    int agent_col = 0;
    std::uint64_t boxes = 0;
    std::uint64_t goals = 0;
    std::uint64_t obstacles = 0;
    int steps_elapsed = 0;
    bool done = false;

    bool operator==(const BoardState&) const = default;
};

inline bool on_grid(int r, int c) { return r >= 0 && r < kGridSize && c >= 0 && c < kGridSize; }
inline std::uint64_t tile_bit(int r, int c) { return std::uint64_t{1} << (r * kGridSize + c); }
inline bool has_box(const BoardState& s, int r, int c) { return (s.boxes & tile_bit(r, c)) != 0; }
inline bool has_goal(const BoardState& s, int r, int c) { return (s.goals & tile_bit(r, c)) != 0; }
inline bool has_obstacle(const BoardState& s, int r, int c) { return (s.obstacles & tile_bit(r, c)) != 0; }
int box_count(const BoardState& s);

struct StepResult {
    std::vector<double> observation;  // kObsSize, channel-major
    double reward = 0.0;
    bool done = false;
};

// Samples 24 distinct tiles uniformly without replacement from the 36 center
// tiles and assigns them in fixed order: agent, boxes, goals, obstacles.
BoardState generate_level(Rng& rng);

// Applies one action. Throws std::logic_error if the state is already done.
// consumable_goals removes a goal once a box is delivered to it (ablation;
// default goals persist).
StepResult step(BoardState& state, Action a, bool consumable_goals = false);

std::vector<double> observe(const BoardState& state);

// One char per tile: A agent, B box, G goal, O obstacle, . empty
// (precedence A > B > G > O when entities share a tile).
std::string ascii_board(const BoardState& state);
// Parses the ascii format back into a board (steps_elapsed 0, not done).
// Throws std::invalid_argument on malformed input.
BoardState parse_ascii_board(const std::string& text);

// JSON-lines trajectory record.
std::string trajectory_json_line(int step, Action a, double reward, bool done);

// Single environment owning its RNG stream; episodes must be reset manually.
class BoxEnv {
public:
    explicit BoxEnv(std::uint64_t seed, bool consumable_goals = false)
        : rng_(seed), consumable_goals_(consumable_goals) {
        reset();
    }

    void reset() { state_ = generate_level(rng_); }
    StepResult step(Action a) { return treeqn::step(state_, a, consumable_goals_); }
    std::vector<double> observe() const { return treeqn::observe(state_); }

    const BoardState& state() const { return state_; }
    void set_state(const BoardState& s) { state_ = s; }
    Rng& rng() { return rng_; }

private:
    Rng rng_;
    BoardState state_;
    bool consumable_goals_;
};

// Synchronous vectorized wrapper. Envs step independently; an env that
// finishes an episode is reset in place and the fresh level's observation is
// returned alongside the surfaced terminal flag, so rollouts continue
// seamlessly across episode boundaries.
class VecEnv {
public:
    VecEnv(int n_env, std::uint64_t seed, bool consumable_goals = false);

    int size() const { return static_cast<int>(envs_.size()); }
    std::vector<StepResult> step(std::span<const Action> actions);

    BoxEnv& env(int i) { return envs_[static_cast<std::size_t>(i)]; }
    const BoxEnv& env(int i) const { return envs_[static_cast<std::size_t>(i)]; }

private:
    std::vector<BoxEnv> envs_;
};

}  // namespace treeqn
