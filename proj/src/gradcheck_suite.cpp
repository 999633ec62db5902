#include "treeqn/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "treeqn/gradcheck.hpp"
#include "treeqn/model.hpp"
#include "treeqn/training.hpp"

namespace treeqn {

namespace {

constexpr double kPrimitiveTol = 1e-6;
constexpr double kForwardTol = 1e-5;
constexpr double kLossTol = 1e-4;
// Parameter perturbations move a relu input by at most ~1x the step, so a
// draw only sits on a kink when some |input| is below ~1.5 steps; such draws
// are rejected and redrawn. The step balances kink rejections against the
// difference quotient's cancellation noise (~eps |f| / step), which caps the
// gradient magnitudes the oracle can resolve.
constexpr double kOpStep = 1e-5;
constexpr double kLossStep = 1e-5;
constexpr double kLossZeroTol = 1e-6;

using Clock = std::chrono::steady_clock;

struct CaseRunner {
    GradCheckSummary& summary;
    int instances;
    std::uint64_t seed;

    // check: given an instance rng, runs one randomized instance and returns
    // the gradcheck report, or rejects the draw (kink proximity) by
    // returning a negative coords count.
    void run(const std::string& name, double threshold,
             const std::function<GradCheckReport(Rng&)>& check) {
        GradCheckCase c;
        c.name = name;
        c.threshold = threshold;
        const auto t0 = Clock::now();
        std::uint64_t draw = 0;
        for (int i = 0; i < instances; ++i) {
            GradCheckReport report;
            // Bounded redraws for rejected instances.
            for (int attempt = 0; attempt < 16; ++attempt) {
                Rng rng = Rng::split(seed, (draw++) * 977);
                report = check(rng);
                if (report.coords_checked >= 0) break;
            }
            if (report.coords_checked < 0) continue;
            ++c.instances;
            c.coords_checked += report.coords_checked;
            if (report.max_rel_err > c.worst_rel_err) c.worst_rel_err = report.max_rel_err;
        }
        c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        c.pass = c.worst_rel_err <= threshold && c.instances == instances;
        summary.cases.push_back(c);
    }
};

Variable random_var(const std::string& name, const Shape& shape, Rng& rng, double scale = 1.0) {
    Variable v(name, shape);
    for (double& x : v.value) x = rng.uniform(-scale, scale);
    return v;
}

std::vector<double> random_obs(Rng& rng) {
    BoardState s = generate_level(rng);
    s.steps_elapsed = rng.next_int(kEpisodeLimit);
    return observe(s);
}

// Rejects draws where a relu on the gradient path sits too close to its
// kink. Disconnected relus (e.g. leaf reward predictions outside the loss)
// cannot perturb the difference quotient and are ignored.
bool kink_adjacent(const std::function<Tensor(Tape&)>& forward, double step) {
    Tape probe;
    Tensor out = forward(probe);
    probe.backward(out);
    return probe.min_relu_input_on_grad_path() < 1.5 * step;
}

GradCheckReport rejected() {
    GradCheckReport r;
    r.coords_checked = -1;
    return r;
}

RolloutBatch synthetic_batch(int n_env, int n_steps, Rng& rng) {
    RolloutBatch b;
    b.n_env = n_env;
    b.n_steps = n_steps;
    b.obs.resize(static_cast<std::size_t>(n_env));
    b.actions.resize(static_cast<std::size_t>(n_env));
    b.rewards.resize(static_cast<std::size_t>(n_env));
    b.dones.resize(static_cast<std::size_t>(n_env));
    b.bootstrap_obs.resize(static_cast<std::size_t>(n_env));
    for (int e = 0; e < n_env; ++e) {
        for (int o = 0; o < n_steps; ++o) {
            b.obs[static_cast<std::size_t>(e)].push_back(random_obs(rng));
            b.actions[static_cast<std::size_t>(e)].push_back(rng.next_int(kNumActions));
            b.rewards[static_cast<std::size_t>(e)].push_back(rng.uniform(-1, 1));
            b.dones[static_cast<std::size_t>(e)].push_back(0);
        }
        b.bootstrap_obs[static_cast<std::size_t>(e)] = random_obs(rng);
    }
    return b;
}

}  // namespace

GradCheckSummary run_gradcheck_suite(int instances, std::uint64_t seed) {
    GradCheckSummary summary;
    const auto t0 = Clock::now();
    CaseRunner runner{summary, instances, seed};

    // ---- primitive operations, every coordinate --------------------------
    runner.run("op/fc", kPrimitiveTol, [](Rng& rng) {
        const int k_in = 2 + rng.next_int(6), k_out = 2 + rng.next_int(6);
        Variable x = random_var("x", Shape{k_in}, rng);
        Variable w = random_var("w", Shape{k_out, k_in}, rng);
        Variable b = random_var("b", Shape{k_out}, rng);
        Variable* vars[] = {&x, &w, &b};
        return finite_diff_check(
            [&](Tape& t) { return t.sum(t.tanh(t.fc(t.param(x), t.param(w), t.param(b)))); }, vars);
    });

    runner.run("op/conv2d", kPrimitiveTol, [](Rng& rng) {
        const int ci = 1 + rng.next_int(3), co = 1 + rng.next_int(3);
        const int kh = 2 + rng.next_int(2), kw = 2 + rng.next_int(2);
        const int stride = 1 + rng.next_int(2);
        const int h = kh + stride * (1 + rng.next_int(3));
        const int w = kw + stride * (1 + rng.next_int(3));
        Variable x = random_var("x", Shape{ci, h, w}, rng);
        Variable k = random_var("k", Shape{co, ci, kh, kw}, rng);
        Variable b = random_var("b", Shape{co}, rng);
        Variable* vars[] = {&x, &k, &b};
        return finite_diff_check(
            [&](Tape& t) {
                return t.sum(t.tanh(t.conv2d(t.param(x), t.param(k), t.param(b), stride)));
            },
            vars);
    });

    runner.run("op/activations", kPrimitiveTol, [](Rng& rng) {
        Variable x = random_var("x", Shape{8}, rng, 2.0);
        Variable* vars[] = {&x};
        auto forward = [&](Tape& t) {
            Tensor h = t.l2_normalize(t.param(x));
            Tensor r = t.relu(t.tanh(h));
            Tensor p = t.softmax(r);
            Tensor lp = t.log_softmax(r);
            std::vector<Tensor> parts = {t.sum(t.mul(p, lp)), t.mean(r)};
            return t.add_n(parts);
        };
        if (kink_adjacent(forward, kOpStep)) return rejected();
        return finite_diff_check(forward, vars);
    });

    runner.run("op/elementwise", kPrimitiveTol, [](Rng& rng) {
        Variable a = random_var("a", Shape{6}, rng);
        Variable b = random_var("b", Shape{6}, rng);
        Variable* vars[] = {&a, &b};
        return finite_diff_check(
            [&](Tape& t) {
                Tensor s = t.add(t.mul(t.param(a), t.param(b)), t.sub(t.param(a), t.param(b)));
                Tensor q = t.square(t.add_scalar(t.mul_scalar(s, 0.7), 0.1));
                std::vector<Tensor> parts = {t.sum(q), t.index(s, 2)};
                return t.add_n(parts);
            },
            vars);
    });

    runner.run("op/backup-softmax", kPrimitiveTol, [](Rng& rng) {
        Variable x = random_var("x", Shape{4}, rng, 2.0);
        Variable* vars[] = {&x};
        return finite_diff_check(
            [&](Tape& t) { return backup_value(t, t.param(x), BackupMode::Softmax); }, vars);
    });

    runner.run("op/backup-hardmax", kPrimitiveTol, [](Rng& rng) {
        Variable x = random_var("x", Shape{4}, rng, 2.0);
        // A near-tie puts the hard max on a kink; redraw.
        std::vector<double> sorted(x.value.begin(), x.value.end());
        std::sort(sorted.begin(), sorted.end());
        if (sorted[3] - sorted[2] < 1e-3) return rejected();
        Variable* vars[] = {&x};
        return finite_diff_check(
            [&](Tape& t) { return backup_value(t, t.param(x), BackupMode::HardMax); }, vars);
    });

    // ---- per-architecture forwards on full-size models -------------------
    auto arch_forward_case = [&](const std::string& arch, int coords_per_var, double tol) {
        runner.run("arch/" + arch, tol, [arch, coords_per_var](Rng& rng) {
            Model model(ModelConfig::for_arch(arch), rng.next_u64());
            const auto obs = random_obs(rng);
            auto forward = [&](Tape& t) { return t.sum(model.q_forward(t, obs).q); };
            if (kink_adjacent(forward, kOpStep)) return rejected();
            GradCheckOptions opts;
            opts.step = kOpStep;
            opts.max_coords_per_var = coords_per_var;
            std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
            return finite_diff_check(forward, vars, opts, &rng);
        });
    };
    arch_forward_case("dqn", 4, kForwardTol);
    arch_forward_case("dqn-deep", 4, kForwardTol);
    arch_forward_case("dqn-wide", 4, kForwardTol);
    arch_forward_case("treeqn-d1", 2, kForwardTol);
    arch_forward_case("treeqn-d2", 2, kForwardTol);

    // ---- end-to-end: depth-3 tree through the n-step loss ----------------
    runner.run("end2end/treeqn-d3-nstep-loss", kLossTol, [](Rng& rng) {
        TrainConfig tc;
        tc.arch = "treeqn-d3";
        ModelConfig mc = tc.model_config();
        Model model(mc, rng.next_u64());
        auto target = model.clone();
        RolloutBatch batch = synthetic_batch(1, 1, rng);
        const auto targets = nstep_q_targets(batch, *target, 0.99);
        auto forward = [&](Tape& t) {
            QForwards fwd = q_forwards(t, model, batch);
            return nstep_q_loss_from_forwards(t, fwd, batch, targets);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 2;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    // ---- end-to-end: ATreeC actor-critic loss with auxiliaries -----------
    runner.run("end2end/atreec-d3-a2c-loss", kLossTol, [](Rng& rng) {
        TrainConfig tc;
        tc.arch = "atreec-d3";
        Model model(tc.model_config(), rng.next_u64());
        RolloutBatch batch = synthetic_batch(1, 1, rng);
        A2cTargets fixed;
        {
            Tape t;
            PolicyForwards fwd = policy_forwards(t, model, batch);
            fixed = a2c_targets(batch, fwd, model, 0.99);
        }
        auto forward = [&](Tape& t) {
            PolicyForwards fwd = policy_forwards(t, model, batch);
            Tensor base = a2c_loss_from_forwards(t, fwd, batch, fixed, 0.5, 0.01);
            std::vector<const TreeNode*> roots;
            for (auto& env : fwd.per_env)
                for (auto& f : env) roots.push_back(&*f.root);
            Tensor rg = reward_grounding_loss(t, roots, batch, 3, 1.0);
            std::vector<Tensor> parts = {base, rg};
            return t.add_n(parts);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 2;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    // ---- per-loss checks on mid-size models -------------------------------
    runner.run("loss/nstep-q-dqn", kLossTol, [](Rng& rng) {
        ModelConfig mc = ModelConfig::for_arch("dqn");
        Model model(mc, rng.next_u64());
        auto target = model.clone();
        RolloutBatch batch = synthetic_batch(2, 3, rng);
        const auto targets = nstep_q_targets(batch, *target, 0.99);
        auto forward = [&](Tape& t) {
            QForwards fwd = q_forwards(t, model, batch);
            return nstep_q_loss_from_forwards(t, fwd, batch, targets);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 3;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    runner.run("loss/a2c-flat", kLossTol, [](Rng& rng) {
        Model model(ModelConfig::for_arch("a2c"), rng.next_u64());
        RolloutBatch batch = synthetic_batch(2, 2, rng);
        A2cTargets fixed;
        {
            Tape t;
            PolicyForwards fwd = policy_forwards(t, model, batch);
            fixed = a2c_targets(batch, fwd, model, 0.99);
        }
        auto forward = [&](Tape& t) {
            PolicyForwards fwd = policy_forwards(t, model, batch);
            return a2c_loss_from_forwards(t, fwd, batch, fixed, 0.5, 0.01);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 4;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    runner.run("loss/reward-grounding", kLossTol, [](Rng& rng) {
        Model model(ModelConfig::for_arch("treeqn-d2"), rng.next_u64());
        RolloutBatch batch = synthetic_batch(1, 2, rng);
        auto forward = [&](Tape& t) {
            QForwards fwd = q_forwards(t, model, batch);
            std::vector<const TreeNode*> roots;
            for (auto& f : fwd.per_env[0]) roots.push_back(&*f.root);
            return reward_grounding_loss(t, roots, batch, 2, 1.3);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 2;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    // State grounding is checked with live (unblocked) targets: blocking
    // makes the targets parameter-dependent constants, which a difference
    // oracle cannot treat as fixed.
    runner.run("loss/state-grounding", kLossTol, [](Rng& rng) {
        Model model(ModelConfig::for_arch("treeqn-d2"), rng.next_u64());
        RolloutBatch batch = synthetic_batch(1, 2, rng);
        auto forward = [&](Tape& t) {
            QForwards fwd = q_forwards(t, model, batch);
            std::vector<const TreeNode*> roots;
            for (auto& f : fwd.per_env[0]) roots.push_back(&*f.root);
            return state_grounding_loss(t, roots, batch, 2, 0.9, /*block_target=*/false, model);
        };
        if (kink_adjacent(forward, kLossStep)) return rejected();
        GradCheckOptions opts;
        opts.step = kLossStep;
        opts.zero_tol = kLossZeroTol;
        opts.max_coords_per_var = 2;
        std::vector<Variable*> vars(model.parameters().begin(), model.parameters().end());
        return finite_diff_check(forward, vars, opts, &rng);
    });

    summary.total_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    summary.all_pass = true;
    for (const auto& c : summary.cases) summary.all_pass = summary.all_pass && c.pass;
    return summary;
}

std::string format_gradcheck_report(const GradCheckSummary& summary) {
    std::string out;
    char line[256];
    for (const auto& c : summary.cases) {
        std::snprintf(line, sizeof(line), "%-32s worst rel err %.3e (tol %.0e)  [%d instances, %d coords, %.1fs]  %s\n",
                      c.name.c_str(), c.worst_rel_err, c.threshold, c.instances, c.coords_checked,
                      c.seconds, c.pass ? "PASS" : "FAIL");
        out += line;
    }
    std::snprintf(line, sizeof(line), "gradcheck: %s in %.1fs\n",
                  summary.all_pass ? "all checks passed" : "FAILURES detected", summary.total_seconds);
    out += line;
    return out;
}

}  // namespace treeqn
