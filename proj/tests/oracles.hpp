// Test-side oracles, written independently of the library code paths they
// check: a component-based re-implementation of the box-pushing rules, and
// numeric tree-backup recursions operating on raw node values.
#pragma once

#include <string>
#include <vector>

#include "treeqn/boxworld.hpp"
#include "treeqn/model.hpp"

namespace treeqn::oracle {

struct RuleOutcome {
    BoardState next;
    double reward = 0.0;
    bool done = false;
};

// Independent rules oracle: classifies the move, then sums the reward
// components that fired.
RuleOutcome rules_step(const BoardState& state, Action a, bool consumable_goals = false);

// Board construction helper for hand-written cases.
struct Tile {
    int r, c;
};
BoardState make_board(Tile agent, const std::vector<Tile>& boxes, const std::vector<Tile>& goals,
                      const std::vector<Tile>& obstacles, int steps_elapsed = 0);

// One hand-constructed rule case.
struct RuleCase {
    std::string name;
    BoardState board;
    Action action;
    double expected_reward;
    bool expected_done;
    BoardState expected_next;  // agent/boxes/goals/obstacles after the step
};

// The conformance table covering every reward rule; >= 25 cases.
std::vector<RuleCase> rule_case_table();

// Brute-force hard-max Bellman recursion over the numeric rewards and values
// of an expanded tree:
//   Q(node, a) = r(node, a) + gamma * (leaf child ? V(child) : max_a' Q(child, a'))
std::vector<double> bellman_hardmax_q(const TreeNode& node, double gamma);

// Numeric lambda-mixed backup with an optional uniform shift added to every
// node's value estimate (for the shift-covariance check).
std::vector<double> lambda_backup_q(const TreeNode& node, double gamma, double lambda, bool hardmax,
                                    double temperature = 1.0, double value_shift = 0.0);

}  // namespace treeqn::oracle
