#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "treeqn/boxworld.hpp"

using namespace treeqn;

namespace {
bool entities_in_center(const BoardState& s) {
    if (s.agent_row < kCenterLo || s.agent_row > kCenterHi || s.agent_col < kCenterLo ||
        s.agent_col > kCenterHi)
        return false;
    for (int r = 0; r < kGridSize; ++r)
        for (int c = 0; c < kGridSize; ++c) {
            const bool center = r >= kCenterLo && r <= kCenterHi && c >= kCenterLo && c <= kCenterHi;
            if (!center && (has_box(s, r, c) || has_goal(s, r, c) || has_obstacle(s, r, c)))
                return false;
        }
    return true;
}

int occupied_tiles(const BoardState& s) {
    std::uint64_t all = s.boxes | s.goals | s.obstacles | tile_bit(s.agent_row, s.agent_col);
    return std::popcount(all);
}
}  // namespace

TEST_CASE("generate_level: deterministic for a fixed seed") {
    Rng a(123), b(123);
    CHECK(generate_level(a) == generate_level(b));
    Rng c(124);
    CHECK(generate_level(a) != generate_level(c));
}

TEST_CASE("generate_level: 24 distinct entities inside the center 6x6") {
    Rng rng(7);
    for (int i = 0; i < 500; ++i) {
        BoardState s = generate_level(rng);
        CHECK(box_count(s) == kNumBoxes);
        CHECK(std::popcount(s.goals) == kNumGoals);
        CHECK(std::popcount(s.obstacles) == kNumObstacles);
        CHECK(occupied_tiles(s) == 24);  // no overlaps
        CHECK(entities_in_center(s));
        CHECK(s.steps_elapsed == 0);
        CHECK_FALSE(s.done);
    }
}

TEST_CASE("generate_level: agent occupancy is uniform over the center tiles") {
    const int samples = 10000;
    Rng rng(2024);
    std::array<int, 64> counts{};
    for (int i = 0; i < samples; ++i) {
        BoardState s = generate_level(rng);
        counts[static_cast<std::size_t>(s.agent_row * 8 + s.agent_col)]++;
    }
    const double p = 1.0 / 36.0;
    const double sigma = std::sqrt(p * (1.0 - p) / samples);
    for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 8; ++c) {
            const double freq = static_cast<double>(counts[static_cast<std::size_t>(r * 8 + c)]) / samples;
            const bool center = r >= kCenterLo && r <= kCenterHi && c >= kCenterLo && c <= kCenterHi;
            if (center) CHECK(std::abs(freq - p) <= 5.0 * sigma);
            else CHECK(freq == 0.0);
        }
    }
}

TEST_CASE("step: goal delivery rewards +1 minus the step penalty") {
    BoardState s = oracle::make_board({3, 3}, {{3, 4}, {7, 7}}, {{3, 5}}, {});
    StepResult r = step(s, Action::Right);
    CHECK(r.reward == doctest::Approx(0.99).epsilon(1e-12));
    CHECK_FALSE(r.done);
    CHECK(s.agent_row == 3);
    CHECK(s.agent_col == 4);
    CHECK_FALSE(has_box(s, 3, 5));
    CHECK(has_goal(s, 3, 5));  // goals persist
}

TEST_CASE("step: walking off the grid ends the episode at -1.01") {
    BoardState s = oracle::make_board({0, 5}, {{7, 7}}, {}, {});
    StepResult r = step(s, Action::Up);
    CHECK(r.reward == doctest::Approx(-1.01).epsilon(1e-12));
    CHECK(r.done);
    CHECK(s.done);
}

TEST_CASE("step: blocked push leaves all positions unchanged") {
    BoardState s = oracle::make_board({2, 2}, {{2, 3}, {2, 4}}, {}, {});
    const BoardState before = s;
    StepResult r = step(s, Action::Right);
    CHECK(r.reward == doctest::Approx(-0.11).epsilon(1e-12));
    CHECK(s.agent_row == before.agent_row);
    CHECK(s.agent_col == before.agent_col);
    CHECK(s.boxes == before.boxes);
}

TEST_CASE("step: obstacles are soft") {
    BoardState s = oracle::make_board({4, 4}, {{7, 7}}, {}, {{4, 5}});
    StepResult r = step(s, Action::Right);
    CHECK(r.reward == doctest::Approx(-0.21).epsilon(1e-12));
    CHECK(s.agent_row == 4);
    CHECK(s.agent_col == 5);
}

TEST_CASE("step: episode times out after 75 steps") {
    BoardState s = oracle::make_board({3, 3}, {{7, 7}}, {}, {});
    StepResult r;
    for (int i = 0; i < kEpisodeLimit; ++i) {
        Action a = (i % 2 == 0) ? Action::Right : Action::Left;
        r = step(s, a);
    }
    CHECK(s.steps_elapsed == 75);
    CHECK(r.done);
    CHECK_THROWS_AS(step(s, Action::Up), std::logic_error);
}

TEST_CASE("step: consumable goals flag removes the goal on delivery") {
    BoardState s = oracle::make_board({3, 3}, {{3, 4}, {7, 7}}, {{3, 5}}, {});
    step(s, Action::Right, /*consumable_goals=*/true);
    CHECK_FALSE(has_goal(s, 3, 5));
}

TEST_CASE("rules table: every hand-constructed case matches") {
    for (const auto& rc : oracle::rule_case_table()) {
        CAPTURE(rc.name);
        BoardState s = rc.board;
        StepResult r = step(s, rc.action);
        CHECK(std::abs(r.reward - rc.expected_reward) <= 1e-12);
        CHECK(r.done == rc.expected_done);
        CHECK(s == rc.expected_next);

        // and the independent oracle agrees with both
        oracle::RuleOutcome oo = oracle::rules_step(rc.board, rc.action);
        CHECK(std::abs(oo.reward - rc.expected_reward) <= 1e-12);
        CHECK(oo.done == rc.expected_done);
        CHECK(oo.next == rc.expected_next);
    }
}

TEST_CASE("rules oracle: exhaustive local-pattern equivalence") {
    // All (agent position, action, next-tile content, next-next-tile content,
    // clock) combinations, with contents drawn from empty/box/goal/obstacle/
    // box-on-obstacle.
    enum Content { CEmpty, CBox, CGoal, CObstacle, CBoxOnObstacle };
    auto apply = [](BoardState& s, int r, int c, Content k) {
        if (!on_grid(r, c)) return;
        switch (k) {
        case CEmpty: break;
        case CBox: s.boxes |= tile_bit(r, c); break;
        case CGoal: s.goals |= tile_bit(r, c); break;
        case CObstacle: s.obstacles |= tile_bit(r, c); break;
        case CBoxOnObstacle:
            s.boxes |= tile_bit(r, c);
            s.obstacles |= tile_bit(r, c);
            break;
        }
    };
    constexpr int dr[4] = {-1, 1, 0, 0};
    constexpr int dc[4] = {0, 0, -1, 1};
    long long checked = 0;
    for (int ar = 0; ar < 8; ++ar) {
        for (int ac = 0; ac < 8; ++ac) {
            for (int act = 0; act < 4; ++act) {
                for (int t1 = 0; t1 < 5; ++t1) {
                    for (int t2 = 0; t2 < 5; ++t2) {
                        for (int clock : {0, 74}) {
                            BoardState s;
                            s.agent_row = ar;
                            s.agent_col = ac;
                            s.steps_elapsed = clock;
                            apply(s, ar + dr[act], ac + dc[act], static_cast<Content>(t1));
                            apply(s, ar + 2 * dr[act], ac + 2 * dc[act], static_cast<Content>(t2));

                            BoardState impl = s;
                            StepResult got = step(impl, static_cast<Action>(act));
                            oracle::RuleOutcome want = oracle::rules_step(s, static_cast<Action>(act));
                            REQUIRE(std::abs(got.reward - want.reward) <= 1e-12);
                            REQUIRE(got.done == want.done);
                            REQUIRE(impl == want.next);
                            REQUIRE(got.reward >= -1.01 - 1e-12);
                            REQUIRE(got.reward <= 0.99 + 1e-12);
                            ++checked;
                        }
                    }
                }
            }
        }
    }
    CHECK(checked == 8 * 8 * 4 * 5 * 5 * 2);
}

TEST_CASE("random play: reward bounds and box conservation") {
    Rng rng(99);
    BoxEnv env(555);
    int steps = 0;
    while (steps < 100000) {
        const int boxes_before = box_count(env.state());
        StepResult r = env.step(static_cast<Action>(rng.next_int(4)));
        ++steps;
        CHECK(r.reward >= -1.01 - 1e-12);
        CHECK(r.reward <= 0.99 + 1e-12);
        CHECK(box_count(env.state()) <= boxes_before);  // boxes never appear
        if (!env.state().done) {
            CHECK(on_grid(env.state().agent_row, env.state().agent_col));
        } else {
            env.reset();
        }
    }
}

TEST_CASE("observe: channel layout and time channel") {
    BoardState s = oracle::make_board({2, 3}, {{4, 4}}, {{5, 5}}, {{6, 6}});
    auto obs = observe(s);
    REQUIRE(static_cast<int>(obs.size()) == kObsSize);
    const int plane = 64;
    double agent_sum = 0.0;
    for (int t = 0; t < plane; ++t) agent_sum += obs[static_cast<std::size_t>(t)];
    CHECK(agent_sum == 1.0);
    CHECK(obs[static_cast<std::size_t>(2 * 8 + 3)] == 1.0);                // agent plane
    CHECK(obs[static_cast<std::size_t>(plane + 5 * 8 + 5)] == 1.0);        // goals
    CHECK(obs[static_cast<std::size_t>(2 * plane + 4 * 8 + 4)] == 1.0);    // boxes
    CHECK(obs[static_cast<std::size_t>(3 * plane + 6 * 8 + 6)] == 1.0);    // obstacles
    for (int t = 0; t < plane; ++t) CHECK(obs[static_cast<std::size_t>(4 * plane + t)] == 1.0);

    s.steps_elapsed = 75;
    auto late = observe(s);
    for (int t = 0; t < plane; ++t) CHECK(late[static_cast<std::size_t>(4 * plane + t)] == 0.0);

    s.steps_elapsed = 30;
    auto mid = observe(s);
    CHECK(mid[static_cast<std::size_t>(4 * plane)] == doctest::Approx(45.0 / 75.0).epsilon(1e-15));
}

TEST_CASE("vec env: batch size and surfaced terminal flags") {
    VecEnv venv(16, 42);
    std::vector<Action> actions(16, Action::Up);
    auto results = venv.step(actions);
    CHECK(results.size() == 16);
    for (const auto& r : results) CHECK(static_cast<int>(r.observation.size()) == kObsSize);

    std::vector<Action> too_few(15, Action::Up);
    CHECK_THROWS_AS(venv.step(too_few), std::invalid_argument);
}

TEST_CASE("vec env: auto-reset returns a fresh level and keeps stepping") {
    VecEnv venv(2, 7);
    Rng rng(3);
    int dones_seen = 0;
    for (int i = 0; i < 400; ++i) {
        std::vector<Action> actions = {static_cast<Action>(rng.next_int(4)),
                                       static_cast<Action>(rng.next_int(4))};
        auto results = venv.step(actions);
        for (int e = 0; e < 2; ++e) {
            if (results[static_cast<std::size_t>(e)].done) {
                ++dones_seen;
                // after a terminal the env already holds a fresh level
                CHECK_FALSE(venv.env(e).state().done);
                CHECK(venv.env(e).state().steps_elapsed == 0);
                CHECK(box_count(venv.env(e).state()) == kNumBoxes);
            }
        }
    }
    CHECK(dones_seen > 0);
}

TEST_CASE("vec env: per-env stream matches a standalone env with the derived seed") {
    const std::uint64_t master = 20240;
    VecEnv venv(4, master);
    BoxEnv solo(Rng::split(master, 2).next_u64());
    CHECK(venv.env(2).state() == solo.state());

    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
        const auto a = static_cast<Action>(rng.next_int(4));
        std::vector<Action> batch_actions(4, a);
        auto results = venv.step(batch_actions);
        StepResult solo_result = solo.step(a);
        if (solo_result.done) solo.reset();
        CHECK(results[2].reward == solo_result.reward);
        CHECK(results[2].done == solo_result.done);
        CHECK(venv.env(2).state() == solo.state());
    }
}

TEST_CASE("vec env: deterministic replay") {
    auto run = [](std::uint64_t seed) {
        VecEnv venv(3, seed);
        Rng rng(5);
        std::vector<double> rewards;
        for (int i = 0; i < 200; ++i) {
            std::vector<Action> actions;
            for (int e = 0; e < 3; ++e) actions.push_back(static_cast<Action>(rng.next_int(4)));
            for (const auto& r : venv.step(actions)) rewards.push_back(r.reward);
        }
        return rewards;
    };
    CHECK(run(77) == run(77));
    CHECK(run(77) != run(78));
}

TEST_CASE("ascii board round trip") {
    Rng rng(31);
    BoardState s = generate_level(rng);
    const std::string text = ascii_board(s);
    CHECK(text.size() == 8 * 9);  // 8 rows + newlines
    BoardState parsed = parse_ascii_board(text);
    CHECK(parsed.agent_row == s.agent_row);
    CHECK(parsed.agent_col == s.agent_col);
    CHECK(parsed.goals == s.goals);
    CHECK(parsed.boxes == s.boxes);
    CHECK(parsed.obstacles == s.obstacles);

    CHECK_THROWS_AS(parse_ascii_board("garbage"), std::invalid_argument);
    CHECK_THROWS_AS(parse_ascii_board(std::string(72, '.')), std::invalid_argument);
}

TEST_CASE("trajectory json lines") {
    CHECK(trajectory_json_line(3, Action::Left, -0.11, false) ==
          R"({"step":3,"action":"Left","reward":-0.11,"done":false})");
    CHECK(trajectory_json_line(0, Action::Up, 0.99, true) ==
          R"({"step":0,"action":"Up","reward":0.99,"done":true})");
}
