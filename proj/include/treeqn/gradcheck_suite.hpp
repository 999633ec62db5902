#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace treeqn {

// One section of the finite-difference verification suite.
struct GradCheckCase {
    std::string name;
    double threshold = 0.0;
    double worst_rel_err = 0.0;
    int instances = 0;
    int coords_checked = 0;
    double seconds = 0.0;
    bool pass = false;
};

struct GradCheckSummary {
    std::vector<GradCheckCase> cases;
    bool all_pass = false;
    double total_seconds = 0.0;
};

// Runs the whole suite: per-op checks at full coordinate coverage, then
// end-to-end architecture and loss checks on randomly drawn full-size models
// with sampled coordinates. Deterministic for a fixed seed.
GradCheckSummary run_gradcheck_suite(int instances, std::uint64_t seed);

std::string format_gradcheck_report(const GradCheckSummary& summary);

}  // namespace treeqn
