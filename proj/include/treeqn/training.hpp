#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treeqn/boxworld.hpp"
#include "treeqn/config.hpp"
#include "treeqn/model.hpp"
#include "treeqn/optim.hpp"
#include "treeqn/rng.hpp"
#include "treeqn/tensor.hpp"

namespace treeqn {

struct TrainConfig {
    std::string arch = "treeqn-d2";
    std::uint64_t seed = 0;
    std::int64_t total_transitions = 400000;
    int n_env = 16;
    int rollout_len = 5;  // n
    double gamma = 0.99;
    double lr = 1e-4;
    double rmsprop_alpha = 0.99;
    double rmsprop_eps = 1e-5;
    std::int64_t target_sync_interval = 40000;  // transitions between theta- copies
    double eps_start = 1.0;
    double eps_end = 0.05;
    std::int64_t eps_decay_transitions = 400000;  // desk-scale default
    double eta_r = 1.0;
    double eta_s = 0.0;
    double critic_coef = 0.5;   // alpha
    double entropy_coef = 0.01; // beta
    double lambda = 0.8;
    std::string backup = "softmax";
    double temperature = 1.0;
    double grad_clip = 5.0;  // global-norm clip; <= 0 disables
    std::int64_t checkpoint_interval = 100000;
    int metrics_interval = 1;  // updates per metrics row
    std::string precision = "f64";
    bool normalize_at_creation = true;
    bool state_ground_block_target = true;
    bool consumable_goals = false;
    int embedding_dim = 0;  // 0 = architecture default
    int reward_hidden = 64;

    int batch_size() const { return n_env * rollout_len; }
    ModelConfig model_config() const;
    Precision tape_precision() const;

    // Full flat snapshot / strict parse (unknown keys are errors).
    FlatConfig to_flat() const;
    static TrainConfig from_flat(const FlatConfig& flat);
};

double epsilon_at(std::int64_t transitions_seen, const TrainConfig& cfg);

int argmax_lowest(std::span<const double> xs);

// One rollout of n_env x n transitions plus the bootstrap observation per
// env. Latents needed by the grounding losses are recomputed in the update's
// forward pass, not cached here.
struct RolloutBatch {
    int n_env = 0;
    int n_steps = 0;
    // [env][step]
    std::vector<std::vector<std::vector<double>>> obs;
    std::vector<std::vector<int>> actions;
    std::vector<std::vector<double>> rewards;
    std::vector<std::vector<std::uint8_t>> dones;
    std::vector<std::vector<double>> bootstrap_obs;  // [env]
};

enum class PolicyMode { EpsilonGreedy, Sampling };

// Tracks episode returns across rollout boundaries and keeps the rolling
// window behind the 100-episode mean return metric.
struct EpisodeStats {
    std::vector<double> partial_returns;
    std::deque<double> last_returns;  // at most 100
    std::int64_t episodes_completed = 0;

    explicit EpisodeStats(int n_env = 0) : partial_returns(static_cast<std::size_t>(n_env), 0.0) {}
    void record(int env, double reward, bool done);
    double mean_return() const;  // 0 until the first episode completes
};

// Steps the vectorized env for n steps, choosing actions with a no-grad
// forward pass (epsilon-greedy over Q-values, or sampling from the policy).
// current_obs is the per-env observation stream and is left at s_{t+n}.
RolloutBatch collect_rollout(VecEnv& venv, Model& model, int n_steps, PolicyMode mode, double epsilon,
                             Rng& action_rng, std::vector<std::vector<double>>& current_obs,
                             EpisodeStats* stats = nullptr);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// n-step targets per (env, step): discounted observed rewards up to the first
// terminal, bootstrapped from max_a Q(s_{t+n}, a; theta-) only when the
// segment reaches the rollout end unterminated. Plain numbers, so they are
// gradient-blocked by construction.
std::vector<std::vector<double>> nstep_q_targets(const RolloutBatch& batch, Model& target_model,
                                                 double gamma);

// Forward passes of one update, shared between the main loss and the
// grounding auxiliaries.
struct QForwards {
    std::vector<std::vector<Model::QForward>> per_env;  // [env][step]
};
QForwards q_forwards(Tape& tape, Model& model, const RolloutBatch& batch);

Tensor nstep_q_loss_from_forwards(Tape& tape, const QForwards& fwd, const RolloutBatch& batch,
                                  const std::vector<std::vector<double>>& targets);
// Convenience wrapper: forwards + targets + loss in one call.
Tensor nstep_q_loss(Tape& tape, Model& model, Model& target_model, const RolloutBatch& batch,
                    double gamma);

struct PolicyForwards {
    std::vector<std::vector<Model::PolicyForward>> per_env;
};
PolicyForwards policy_forwards(Tape& tape, Model& model, const RolloutBatch& batch);

// Returns and advantages for A2C, computed numerically from the given
// forwards (gradient-blocked).
struct A2cTargets {
    std::vector<std::vector<double>> returns;
    std::vector<std::vector<double>> advantages;
};
A2cTargets a2c_targets(const RolloutBatch& batch, const PolicyForwards& fwd, Model& model, double gamma);

struct A2cDiagnostics {
    double pg_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
};

// Minimized scalar: -sum log pi(a|s) A - beta sum H(pi) + alpha sum (V - R)^2.
Tensor a2c_loss_from_forwards(Tape& tape, const PolicyForwards& fwd, const RolloutBatch& batch,
                              const A2cTargets& targets, double critic_coef, double entropy_coef,
                              A2cDiagnostics* diag = nullptr);
Tensor a2c_loss(Tape& tape, Model& model, const RolloutBatch& batch, double gamma, double critic_coef,
                double entropy_coef, A2cDiagnostics* diag = nullptr);

// Tree access shared by both grounding losses: node at depth l-1 along the
// taken action path, and taken-path latents. Terms whose action path crosses
// an episode boundary are skipped.
Tensor reward_grounding_loss(Tape& tape, std::span<const TreeNode* const> roots_flat,
                             const RolloutBatch& batch, int tree_depth, double eta_r);
Tensor state_grounding_loss(Tape& tape, std::span<const TreeNode* const> roots_flat,
                            const RolloutBatch& batch, int tree_depth, double eta_s, bool block_target,
                            Model& model);

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::int64_t transitions = 0;
    std::int64_t updates = 0;
    double mean_return_100ep = 0.0;
    double main_loss = 0.0;  // q_loss (Q modes) or pg_loss (actor modes)
    double value_loss = 0.0;
    double entropy = 0.0;
    double reward_ground_loss = 0.0;
    double state_ground_loss = 0.0;
    double epsilon = 0.0;
    double wallclock_s = 0.0;
};

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);

    struct Hooks {
        std::function<void(const MetricsRow&)> on_metrics;
        // Called when a checkpoint interval elapses; implementations decide
        // where to write.
        std::function<void(Trainer&, std::int64_t transitions)> on_checkpoint;
    };

    // Runs until total_transitions. Throws TrainingDiverged on NaN loss.
    void run(const Hooks& hooks = {});
    // One collect + update step; returns the metrics of that update.
    MetricsRow update_once();

    Model& model() { return *model_; }
    Model& target() { return *target_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t transitions_seen() const { return transitions_seen_; }
    std::int64_t updates_done() const { return updates_done_; }
    double mean_return_100ep() const { return stats_.mean_return(); }
    const EpisodeStats& episode_stats() const { return stats_; }
    VecEnv& vecenv() { return *venv_; }
    bool actor_mode() const { return actor_mode_; }

    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<Trainer> load_checkpoint(const std::string& path);

private:
    void sync_target();
    MetricsRow update_from_batch(const RolloutBatch& batch, double epsilon_used);

    TrainConfig cfg_;
    bool actor_mode_;
    std::unique_ptr<Model> model_;
    std::unique_ptr<Model> target_;  // Q modes only
    std::unique_ptr<RmsProp> optimizer_;
    std::unique_ptr<VecEnv> venv_;
    Rng action_rng_;
    std::vector<std::vector<double>> current_obs_;
    EpisodeStats stats_;
    Tape tape_;
    std::int64_t transitions_seen_ = 0;
    std::int64_t updates_done_ = 0;
    double wallclock_offset_ = 0.0;
    std::chrono::steady_clock::time_point start_time_;
};

// Loads just the model (plus its TrainConfig) from a checkpoint, for
// evaluation and inspection.
struct LoadedModel {
    TrainConfig config;
    std::unique_ptr<Model> model;
};
LoadedModel load_model_from_checkpoint(const std::string& path);

// Greedy (Q) or mode-action (actor) evaluation over fresh episodes.
struct EvalResult {
    double mean_return = 0.0;
    double stddev_return = 0.0;
    std::vector<double> episode_returns;
};
EvalResult evaluate_policy(Model& model, int episodes, std::uint64_t seed,
                           bool consumable_goals = false);

// Monte-Carlo statistics of the uniform-random policy (oracle for the
// desk-scale learning criteria).
EvalResult random_policy_stats(int episodes, std::uint64_t seed, bool consumable_goals = false);

std::string metrics_csv_header(bool actor_mode);
std::string metrics_csv_row(const MetricsRow& row);

}  // namespace treeqn
