#include "treeqn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "treeqn/checkpoint.hpp"

namespace treeqn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

ModelConfig TrainConfig::model_config() const {
    ModelConfig mc = ModelConfig::for_arch(arch);
    mc.tree.lambda = lambda;
    mc.tree.gamma = gamma;
    mc.tree.temperature = temperature;
    if (backup == "softmax") mc.tree.backup = BackupMode::Softmax;
    else if (backup == "hardmax") mc.tree.backup = BackupMode::HardMax;
    else throw std::runtime_error("config key backup: expected softmax or hardmax, got " + backup);
    if (embedding_dim > 0) mc.embedding_dim = embedding_dim;
    mc.reward_hidden = reward_hidden;
    mc.normalize_at_creation = normalize_at_creation;
    mc.precision = tape_precision();
    return mc;
}

Precision TrainConfig::tape_precision() const {
    if (precision == "f64") return Precision::f64;
    if (precision == "f32") return Precision::f32;
    throw std::runtime_error("config key precision: expected f64 or f32, got " + precision);
}

namespace {
std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

FlatConfig TrainConfig::to_flat() const {
    FlatConfig f;
    f.set("arch", arch);
    f.set("seed", std::to_string(seed));
    f.set("total_transitions", std::to_string(total_transitions));
    f.set("n_env", std::to_string(n_env));
    f.set("rollout_len", std::to_string(rollout_len));
    f.set("gamma", fmt_double(gamma));
    f.set("lr", fmt_double(lr));
    f.set("rmsprop_alpha", fmt_double(rmsprop_alpha));
    f.set("rmsprop_eps", fmt_double(rmsprop_eps));
    f.set("target_sync_interval", std::to_string(target_sync_interval));
    f.set("eps_start", fmt_double(eps_start));
    f.set("eps_end", fmt_double(eps_end));
    f.set("eps_decay_transitions", std::to_string(eps_decay_transitions));
    f.set("eta_r", fmt_double(eta_r));
    f.set("eta_s", fmt_double(eta_s));
    f.set("critic_coef", fmt_double(critic_coef));
    f.set("entropy_coef", fmt_double(entropy_coef));
    f.set("lambda", fmt_double(lambda));
    f.set("backup", backup);
    f.set("temperature", fmt_double(temperature));
    f.set("grad_clip", fmt_double(grad_clip));
    f.set("checkpoint_interval", std::to_string(checkpoint_interval));
    f.set("metrics_interval", std::to_string(metrics_interval));
    f.set("precision", precision);
    f.set("normalize_at_creation", normalize_at_creation ? "true" : "false");
    f.set("state_ground_block_target", state_ground_block_target ? "true" : "false");
    f.set("consumable_goals", consumable_goals ? "true" : "false");
    f.set("embedding_dim", std::to_string(embedding_dim));
    f.set("reward_hidden", std::to_string(reward_hidden));
    return f;
}

TrainConfig TrainConfig::from_flat(const FlatConfig& flat) {
    TrainConfig cfg;
    for (const auto& [key, value] : flat.entries()) {
        (void)value;
        if (key == "arch") cfg.arch = flat.get_str(key);
        else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(flat.get_int(key));
        else if (key == "total_transitions") cfg.total_transitions = flat.get_int(key);
        else if (key == "n_env") cfg.n_env = static_cast<int>(flat.get_int(key));
        else if (key == "rollout_len") cfg.rollout_len = static_cast<int>(flat.get_int(key));
        else if (key == "gamma") cfg.gamma = flat.get_double(key);
        else if (key == "lr") cfg.lr = flat.get_double(key);
        else if (key == "rmsprop_alpha") cfg.rmsprop_alpha = flat.get_double(key);
        else if (key == "rmsprop_eps") cfg.rmsprop_eps = flat.get_double(key);
        else if (key == "target_sync_interval") cfg.target_sync_interval = flat.get_int(key);
        else if (key == "eps_start") cfg.eps_start = flat.get_double(key);
        else if (key == "eps_end") cfg.eps_end = flat.get_double(key);
        else if (key == "eps_decay_transitions") cfg.eps_decay_transitions = flat.get_int(key);
        else if (key == "eta_r") cfg.eta_r = flat.get_double(key);
        else if (key == "eta_s") cfg.eta_s = flat.get_double(key);
        else if (key == "critic_coef") cfg.critic_coef = flat.get_double(key);
        else if (key == "entropy_coef") cfg.entropy_coef = flat.get_double(key);
        else if (key == "lambda") cfg.lambda = flat.get_double(key);
        else if (key == "backup") cfg.backup = flat.get_str(key);
        else if (key == "temperature") cfg.temperature = flat.get_double(key);
        else if (key == "grad_clip") cfg.grad_clip = flat.get_double(key);
        else if (key == "checkpoint_interval") cfg.checkpoint_interval = flat.get_int(key);
        else if (key == "metrics_interval") cfg.metrics_interval = static_cast<int>(flat.get_int(key));
        else if (key == "precision") cfg.precision = flat.get_str(key);
        else if (key == "normalize_at_creation") cfg.normalize_at_creation = flat.get_bool(key);
        else if (key == "state_ground_block_target") cfg.state_ground_block_target = flat.get_bool(key);
        else if (key == "consumable_goals") cfg.consumable_goals = flat.get_bool(key);
        else if (key == "embedding_dim") cfg.embedding_dim = static_cast<int>(flat.get_int(key));
        else if (key == "reward_hidden") cfg.reward_hidden = static_cast<int>(flat.get_int(key));
        else throw std::runtime_error("unknown config key: " + key);
    }
    cfg.arch = flat.get_str("arch");  // required; everything else has defaults
    if (cfg.n_env < 1 || cfg.rollout_len < 1)
        throw std::runtime_error("config: n_env and rollout_len must be positive");
    (void)parse_arch(cfg.arch);
    (void)cfg.tape_precision();
    return cfg;
}

double epsilon_at(std::int64_t transitions_seen, const TrainConfig& cfg) {
    if (cfg.eps_decay_transitions <= 0 || transitions_seen >= cfg.eps_decay_transitions)
        return cfg.eps_end;
    const double frac = static_cast<double>(transitions_seen) / static_cast<double>(cfg.eps_decay_transitions);
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac;
}

int argmax_lowest(std::span<const double> xs) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(xs.size()); ++i)
        if (xs[static_cast<std::size_t>(i)] > xs[static_cast<std::size_t>(best)]) best = i;
    return best;
}

// ---------------------------------------------------------------------------
// rollouts
// ---------------------------------------------------------------------------

void EpisodeStats::record(int env, double reward, bool done) {
    partial_returns[static_cast<std::size_t>(env)] += reward;
    if (done) {
        last_returns.push_back(partial_returns[static_cast<std::size_t>(env)]);
        if (last_returns.size() > 100) last_returns.pop_front();
        partial_returns[static_cast<std::size_t>(env)] = 0.0;
        ++episodes_completed;
    }
}

double EpisodeStats::mean_return() const {
    if (last_returns.empty()) return 0.0;
    const double total = std::accumulate(last_returns.begin(), last_returns.end(), 0.0);
    return total / static_cast<double>(last_returns.size());
}

RolloutBatch collect_rollout(VecEnv& venv, Model& model, int n_steps, PolicyMode mode, double epsilon,
                             Rng& action_rng, std::vector<std::vector<double>>& current_obs,
                             EpisodeStats* stats) {
    const int n_env = venv.size();
    RolloutBatch batch;
    batch.n_env = n_env;
    batch.n_steps = n_steps;
    batch.obs.assign(static_cast<std::size_t>(n_env), {});
    batch.actions.assign(static_cast<std::size_t>(n_env), {});
    batch.rewards.assign(static_cast<std::size_t>(n_env), {});
    batch.dones.assign(static_cast<std::size_t>(n_env), {});
    batch.bootstrap_obs.resize(static_cast<std::size_t>(n_env));

    Tape tape(model.config().precision);
    std::vector<Action> actions(static_cast<std::size_t>(n_env));

    for (int step = 0; step < n_steps; ++step) {
        tape.reset();
        if (mode == PolicyMode::EpsilonGreedy) {
            // Fixed draw order keeps the stream reproducible: one uniform per
            // env, plus one integer draw when exploring.
            std::vector<int> chosen(static_cast<std::size_t>(n_env), -1);
            for (int e = 0; e < n_env; ++e)
                if (action_rng.next_double() < epsilon) chosen[static_cast<std::size_t>(e)] = action_rng.next_int(kNumActions);
            for (int e = 0; e < n_env; ++e) {
                if (chosen[static_cast<std::size_t>(e)] < 0) {
                    auto q = model.q_forward(tape, current_obs[static_cast<std::size_t>(e)]);
                    chosen[static_cast<std::size_t>(e)] = argmax_lowest(q.q.values());
                }
                actions[static_cast<std::size_t>(e)] = static_cast<Action>(chosen[static_cast<std::size_t>(e)]);
            }
        } else {
            for (int e = 0; e < n_env; ++e) {
                auto pf = model.policy_forward(tape, current_obs[static_cast<std::size_t>(e)]);
                auto pi = pf.pi.values();
                const double u = action_rng.next_double();
                double acc = 0.0;
                int a = static_cast<int>(pi.size()) - 1;
                for (int i = 0; i < static_cast<int>(pi.size()); ++i) {
                    acc += pi[static_cast<std::size_t>(i)];
                    if (u < acc) {
                        a = i;
                        break;
                    }
                }
                actions[static_cast<std::size_t>(e)] = static_cast<Action>(a);
            }
        }

        std::vector<StepResult> results = venv.step(actions);
        for (int e = 0; e < n_env; ++e) {
            auto& r = results[static_cast<std::size_t>(e)];
            batch.obs[static_cast<std::size_t>(e)].push_back(std::move(current_obs[static_cast<std::size_t>(e)]));
            batch.actions[static_cast<std::size_t>(e)].push_back(static_cast<int>(actions[static_cast<std::size_t>(e)]));
            batch.rewards[static_cast<std::size_t>(e)].push_back(r.reward);
            batch.dones[static_cast<std::size_t>(e)].push_back(r.done ? 1 : 0);
            if (stats != nullptr) stats->record(e, r.reward, r.done);
            current_obs[static_cast<std::size_t>(e)] = std::move(r.observation);
        }
    }
    for (int e = 0; e < n_env; ++e) batch.bootstrap_obs[static_cast<std::size_t>(e)] = current_obs[static_cast<std::size_t>(e)];
    return batch;
}

// ---------------------------------------------------------------------------
// n-step Q loss
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> nstep_q_targets(const RolloutBatch& batch, Model& target_model,
                                                 double gamma) {
    std::vector<std::vector<double>> targets(static_cast<std::size_t>(batch.n_env));
    Tape tape(target_model.config().precision);
    for (int e = 0; e < batch.n_env; ++e) {
        const auto& rewards = batch.rewards[static_cast<std::size_t>(e)];
        const auto& dones = batch.dones[static_cast<std::size_t>(e)];
        double running = 0.0;
        if (!dones[static_cast<std::size_t>(batch.n_steps - 1)]) {
            tape.reset();
            auto q = target_model.q_forward(tape, batch.bootstrap_obs[static_cast<std::size_t>(e)]).q.values();
            running = *std::max_element(q.begin(), q.end());
        }
        std::vector<double>& t = targets[static_cast<std::size_t>(e)];
        t.assign(static_cast<std::size_t>(batch.n_steps), 0.0);
        for (int o = batch.n_steps - 1; o >= 0; --o) {
            // A terminal ends the segment: the remaining episode return is the
            // target, with no bootstrap.
            running = dones[static_cast<std::size_t>(o)] ? rewards[static_cast<std::size_t>(o)]
                                                         : rewards[static_cast<std::size_t>(o)] + gamma * running;
            t[static_cast<std::size_t>(o)] = running;
        }
    }
    return targets;
}

QForwards q_forwards(Tape& tape, Model& model, const RolloutBatch& batch) {
    QForwards fwd;
    fwd.per_env.resize(static_cast<std::size_t>(batch.n_env));
    for (int e = 0; e < batch.n_env; ++e)
        for (int o = 0; o < batch.n_steps; ++o)
            fwd.per_env[static_cast<std::size_t>(e)].push_back(
                model.q_forward(tape, batch.obs[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)]));
    return fwd;
}

Tensor nstep_q_loss_from_forwards(Tape& tape, const QForwards& fwd, const RolloutBatch& batch,
                                  const std::vector<std::vector<double>>& targets) {
    std::vector<Tensor> terms;
    terms.reserve(static_cast<std::size_t>(batch.n_env * batch.n_steps));
    for (int e = 0; e < batch.n_env; ++e) {
        for (int o = 0; o < batch.n_steps; ++o) {
            Tensor q_sel = tape.index(fwd.per_env[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)].q,
                                      batch.actions[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)]);
            Tensor diff = tape.sub(q_sel, tape.constant_scalar(targets[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)]));
            terms.push_back(tape.square(diff));
        }
    }
    return tape.add_n(terms);
}

Tensor nstep_q_loss(Tape& tape, Model& model, Model& target_model, const RolloutBatch& batch,
                    double gamma) {
    QForwards fwd = q_forwards(tape, model, batch);
    auto targets = nstep_q_targets(batch, target_model, gamma);
    return nstep_q_loss_from_forwards(tape, fwd, batch, targets);
}

// ---------------------------------------------------------------------------
// A2C loss
// ---------------------------------------------------------------------------

PolicyForwards policy_forwards(Tape& tape, Model& model, const RolloutBatch& batch) {
    PolicyForwards fwd;
    fwd.per_env.resize(static_cast<std::size_t>(batch.n_env));
    for (int e = 0; e < batch.n_env; ++e)
        for (int o = 0; o < batch.n_steps; ++o)
            fwd.per_env[static_cast<std::size_t>(e)].push_back(
                model.policy_forward(tape, batch.obs[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)]));
    return fwd;
}

A2cTargets a2c_targets(const RolloutBatch& batch, const PolicyForwards& fwd, Model& model, double gamma) {
    A2cTargets out;
    out.returns.resize(static_cast<std::size_t>(batch.n_env));
    out.advantages.resize(static_cast<std::size_t>(batch.n_env));
    Tape tape(model.config().precision);
    for (int e = 0; e < batch.n_env; ++e) {
        const auto& rewards = batch.rewards[static_cast<std::size_t>(e)];
        const auto& dones = batch.dones[static_cast<std::size_t>(e)];
        double running = 0.0;
        if (!dones[static_cast<std::size_t>(batch.n_steps - 1)]) {
            tape.reset();
            running = model.critic_forward(tape, batch.bootstrap_obs[static_cast<std::size_t>(e)]).scalar();
        }
        auto& rets = out.returns[static_cast<std::size_t>(e)];
        auto& advs = out.advantages[static_cast<std::size_t>(e)];
        rets.assign(static_cast<std::size_t>(batch.n_steps), 0.0);
        advs.assign(static_cast<std::size_t>(batch.n_steps), 0.0);
        for (int o = batch.n_steps - 1; o >= 0; --o) {
            running = dones[static_cast<std::size_t>(o)] ? rewards[static_cast<std::size_t>(o)]
                                                         : rewards[static_cast<std::size_t>(o)] + gamma * running;
            rets[static_cast<std::size_t>(o)] = running;
            advs[static_cast<std::size_t>(o)] =
                running - fwd.per_env[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)].v_critic.scalar();
        }
    }
    return out;
}

Tensor a2c_loss_from_forwards(Tape& tape, const PolicyForwards& fwd, const RolloutBatch& batch,
                              const A2cTargets& targets, double critic_coef, double entropy_coef,
                              A2cDiagnostics* diag) {
    std::vector<Tensor> terms;
    double pg_total = 0.0, value_total = 0.0, entropy_total = 0.0;
    for (int e = 0; e < batch.n_env; ++e) {
        for (int o = 0; o < batch.n_steps; ++o) {
            const auto& f = fwd.per_env[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)];
            const int a = batch.actions[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)];
            const double adv = targets.advantages[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)];
            const double ret = targets.returns[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)];

            Tensor log_pi_a = tape.index(f.log_pi, a);
            terms.push_back(tape.mul_scalar(log_pi_a, -adv));
            pg_total += -adv * log_pi_a.scalar();

            // sum pi log pi = -H, so adding beta * sum pi log pi subtracts the
            // entropy bonus from the minimized loss.
            Tensor neg_entropy = tape.sum(tape.mul(f.pi, f.log_pi));
            terms.push_back(tape.mul_scalar(neg_entropy, entropy_coef));
            entropy_total += -neg_entropy.scalar();

            Tensor v_err = tape.sub(f.v_critic, tape.constant_scalar(ret));
            Tensor v_sq = tape.square(v_err);
            terms.push_back(tape.mul_scalar(v_sq, critic_coef));
            value_total += v_sq.scalar();
        }
    }
    if (diag != nullptr) {
        diag->pg_loss = pg_total;
        diag->value_loss = value_total;
        diag->entropy = entropy_total / static_cast<double>(batch.n_env * batch.n_steps);
    }
    return tape.add_n(terms);
}

Tensor a2c_loss(Tape& tape, Model& model, const RolloutBatch& batch, double gamma, double critic_coef,
                double entropy_coef, A2cDiagnostics* diag) {
    PolicyForwards fwd = policy_forwards(tape, model, batch);
    A2cTargets targets = a2c_targets(batch, fwd, model, gamma);
    return a2c_loss_from_forwards(tape, fwd, batch, targets, critic_coef, entropy_coef, diag);
}

// ---------------------------------------------------------------------------
// grounding losses
// ---------------------------------------------------------------------------

namespace {
const TreeNode* root_at(std::span<const TreeNode* const> roots, const RolloutBatch& batch, int e, int o) {
    return roots[static_cast<std::size_t>(e * batch.n_steps + o)];
}
}  // namespace

Tensor reward_grounding_loss(Tape& tape, std::span<const TreeNode* const> roots_flat,
                             const RolloutBatch& batch, int tree_depth, double eta_r) {
    std::vector<Tensor> terms;
    for (int e = 0; e < batch.n_env; ++e) {
        for (int o = 0; o < batch.n_steps; ++o) {
            const TreeNode* node = root_at(roots_flat, batch, e, o);
            if (node == nullptr) continue;
            const int d_bar = std::min(tree_depth, batch.n_steps - o);
            for (int l = 1; l <= d_bar; ++l) {
                // Stop once the taken path crosses an episode boundary; the
                // terminal step's own reward is still grounded.
                if (l >= 2 && batch.dones[static_cast<std::size_t>(e)][static_cast<std::size_t>(o + l - 2)]) break;
                const int a = batch.actions[static_cast<std::size_t>(e)][static_cast<std::size_t>(o + l - 1)];
                Tensor pred = tape.index(node->reward_preds, a);
                Tensor diff = tape.sub(
                    pred, tape.constant_scalar(batch.rewards[static_cast<std::size_t>(e)][static_cast<std::size_t>(o + l - 1)]));
                terms.push_back(tape.square(diff));
                if (l < d_bar) node = &node->children[static_cast<std::size_t>(a)];
            }
        }
    }
    if (terms.empty()) return tape.constant_scalar(0.0);
    return tape.mul_scalar(tape.add_n(terms), eta_r);
}

Tensor state_grounding_loss(Tape& tape, std::span<const TreeNode* const> roots_flat,
                            const RolloutBatch& batch, int tree_depth, double eta_s, bool block_target,
                            Model& model) {
    std::vector<Tensor> terms;
    std::vector<Tensor> bootstrap_z(static_cast<std::size_t>(batch.n_env));
    for (int e = 0; e < batch.n_env; ++e) {
        for (int o = 0; o < batch.n_steps; ++o) {
            const TreeNode* node = root_at(roots_flat, batch, e, o);
            if (node == nullptr) continue;
            const int d_bar = std::min(tree_depth, batch.n_steps - o);
            for (int l = 1; l <= d_bar; ++l) {
                // The state after a terminal action belongs to a fresh level.
                if (batch.dones[static_cast<std::size_t>(e)][static_cast<std::size_t>(o + l - 1)]) break;
                const int a = batch.actions[static_cast<std::size_t>(e)][static_cast<std::size_t>(o + l - 1)];
                node = &node->children[static_cast<std::size_t>(a)];

                Tensor target;
                if (o + l <= batch.n_steps - 1) {
                    target = root_at(roots_flat, batch, e, o + l)->z;
                } else {
                    Tensor& boot = bootstrap_z[static_cast<std::size_t>(e)];
                    if (!boot.defined())
                        boot = model.encode(tape, batch.bootstrap_obs[static_cast<std::size_t>(e)]);
                    target = boot;
                }
                if (block_target) target = tape.constant(target.shape(), target.values());
                terms.push_back(tape.sum(tape.square(tape.sub(node->z, target))));
            }
        }
    }
    if (terms.empty()) return tape.constant_scalar(0.0);
    return tape.mul_scalar(tape.add_n(terms), eta_s);
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      actor_mode_(arch_is_actor_critic(parse_arch(cfg.arch).arch)),
      action_rng_(Rng::split(cfg.seed, 2)),
      stats_(cfg.n_env),
      tape_(cfg.tape_precision()) {
    // Seed streams off the master seed: 0 init, 1 envs, 2 action selection.
    model_ = std::make_unique<Model>(cfg_.model_config(), Rng::split(cfg.seed, 0).next_u64());
    if (!actor_mode_) target_ = model_->clone();
    optimizer_ = std::make_unique<RmsProp>(model_->parameters(), cfg.lr, cfg.rmsprop_alpha, cfg.rmsprop_eps);
    venv_ = std::make_unique<VecEnv>(cfg.n_env, Rng::split(cfg.seed, 1).next_u64(), cfg.consumable_goals);
    current_obs_.resize(static_cast<std::size_t>(cfg.n_env));
    for (int e = 0; e < cfg.n_env; ++e) current_obs_[static_cast<std::size_t>(e)] = venv_->env(e).observe();
    start_time_ = std::chrono::steady_clock::now();
}

void Trainer::sync_target() { target_->copy_values_from(*model_); }

MetricsRow Trainer::update_once() {
    const double eps = actor_mode_ ? 0.0 : epsilon_at(transitions_seen_, cfg_);
    RolloutBatch batch =
        collect_rollout(*venv_, *model_, cfg_.rollout_len,
                        actor_mode_ ? PolicyMode::Sampling : PolicyMode::EpsilonGreedy, eps, action_rng_,
                        current_obs_, &stats_);
    return update_from_batch(batch, eps);
}

MetricsRow Trainer::update_from_batch(const RolloutBatch& batch, double epsilon_used) {
    tape_.reset();
    MetricsRow row;
    const bool tree_arch = arch_has_tree(model_->config().arch);
    const bool want_ground = tree_arch && (cfg_.eta_r != 0.0 || cfg_.eta_s != 0.0);

    Tensor total;
    std::vector<const TreeNode*> roots;

    if (!actor_mode_) {
        QForwards fwd = q_forwards(tape_, *model_, batch);
        auto targets = nstep_q_targets(batch, *target_, cfg_.gamma);
        Tensor q_loss = nstep_q_loss_from_forwards(tape_, fwd, batch, targets);
        row.main_loss = q_loss.scalar();
        total = q_loss;
        if (want_ground) {
            roots.reserve(static_cast<std::size_t>(batch.n_env * batch.n_steps));
            for (int e = 0; e < batch.n_env; ++e)
                for (int o = 0; o < batch.n_steps; ++o)
                    roots.push_back(&*fwd.per_env[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)].root);
        }
        if (want_ground && cfg_.eta_r != 0.0) {
            Tensor rg = reward_grounding_loss(tape_, roots, batch, model_->config().tree.depth, cfg_.eta_r);
            row.reward_ground_loss = rg.scalar();
            total = tape_.add(total, rg);
        }
        if (want_ground && cfg_.eta_s != 0.0) {
            Tensor sg = state_grounding_loss(tape_, roots, batch, model_->config().tree.depth, cfg_.eta_s,
                                             cfg_.state_ground_block_target, *model_);
            row.state_ground_loss = sg.scalar();
            total = tape_.add(total, sg);
        }
    } else {
        PolicyForwards fwd = policy_forwards(tape_, *model_, batch);
        A2cTargets targets = a2c_targets(batch, fwd, *model_, cfg_.gamma);
        A2cDiagnostics diag;
        Tensor loss = a2c_loss_from_forwards(tape_, fwd, batch, targets, cfg_.critic_coef, cfg_.entropy_coef, &diag);
        row.main_loss = diag.pg_loss;
        row.value_loss = diag.value_loss;
        row.entropy = diag.entropy;
        total = loss;
        if (want_ground) {
            roots.reserve(static_cast<std::size_t>(batch.n_env * batch.n_steps));
            for (int e = 0; e < batch.n_env; ++e)
                for (int o = 0; o < batch.n_steps; ++o)
                    roots.push_back(&*fwd.per_env[static_cast<std::size_t>(e)][static_cast<std::size_t>(o)].root);
        }
        if (want_ground && cfg_.eta_r != 0.0) {
            Tensor rg = reward_grounding_loss(tape_, roots, batch, model_->config().tree.depth, cfg_.eta_r);
            row.reward_ground_loss = rg.scalar();
            total = tape_.add(total, rg);
        }
        if (want_ground && cfg_.eta_s != 0.0) {
            Tensor sg = state_grounding_loss(tape_, roots, batch, model_->config().tree.depth, cfg_.eta_s,
                                             cfg_.state_ground_block_target, *model_);
            row.state_ground_loss = sg.scalar();
            total = tape_.add(total, sg);
        }
    }

    if (!std::isfinite(total.scalar()))
        throw TrainingDiverged("loss is not finite at update " + std::to_string(updates_done_ + 1) +
                               " (transitions " + std::to_string(transitions_seen_) + ")");

    tape_.backward(total);
    clip_global_grad_norm(model_->parameters(), cfg_.grad_clip);
    optimizer_->step();

    const std::int64_t prev = transitions_seen_;
    transitions_seen_ += batch.n_env * batch.n_steps;
    ++updates_done_;

    if (!actor_mode_ && cfg_.target_sync_interval > 0 &&
        prev / cfg_.target_sync_interval != transitions_seen_ / cfg_.target_sync_interval)
        sync_target();

    row.transitions = transitions_seen_;
    row.updates = updates_done_;
    row.mean_return_100ep = stats_.mean_return();
    row.epsilon = epsilon_used;
    row.wallclock_s =
        wallclock_offset_ +
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time_).count();
    return row;
}

void Trainer::run(const Hooks& hooks) {
    while (transitions_seen_ < cfg_.total_transitions) {
        const std::int64_t prev = transitions_seen_;
        MetricsRow row = update_once();
        if (hooks.on_metrics && (updates_done_ % cfg_.metrics_interval == 0 ||
                                 transitions_seen_ >= cfg_.total_transitions))
            hooks.on_metrics(row);
        if (hooks.on_checkpoint && cfg_.checkpoint_interval > 0 &&
            prev / cfg_.checkpoint_interval != transitions_seen_ / cfg_.checkpoint_interval)
            hooks.on_checkpoint(*this, transitions_seen_);
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace {
json rng_to_json(const Rng& rng) {
    json arr = json::array();
    for (std::uint64_t w : rng.state()) arr.push_back(w);
    return arr;
}

Rng rng_from_json(const json& arr) {
    Rng rng;
    std::array<std::uint64_t, 4> state{};
    for (int i = 0; i < 4; ++i) state[static_cast<std::size_t>(i)] = arr.at(static_cast<std::size_t>(i)).get<std::uint64_t>();
    rng.set_state(state);
    return rng;
}

json board_to_json(const BoardState& s) {
    json j;
    j["agent_row"] = s.agent_row;
    j["agent_col"] = s.agent_col;
    j["boxes"] = s.boxes;
    j["goals"] = s.goals;
    j["obstacles"] = s.obstacles;
    j["steps_elapsed"] = s.steps_elapsed;
    j["done"] = s.done;
    return j;
}

BoardState board_from_json(const json& j) {
    BoardState s;
    s.agent_row = j.at("agent_row").get<int>();
    s.agent_col = j.at("agent_col").get<int>();
    s.boxes = j.at("boxes").get<std::uint64_t>();
    s.goals = j.at("goals").get<std::uint64_t>();
    s.obstacles = j.at("obstacles").get<std::uint64_t>();
    s.steps_elapsed = j.at("steps_elapsed").get<int>();
    s.done = j.at("done").get<bool>();
    return s;
}
}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
    Checkpoint ckpt;
    json meta;
    meta["kind"] = "trainer";
    json cfg_json = json::object();
    const FlatConfig flat_cfg = cfg_.to_flat();
    for (const auto& [k, v] : flat_cfg.entries()) cfg_json[k] = v;
    meta["config"] = cfg_json;
    meta["transitions"] = transitions_seen_;
    meta["updates"] = updates_done_;
    meta["episodes"] = stats_.episodes_completed;
    meta["action_rng"] = rng_to_json(action_rng_);
    meta["opt_step_count"] = optimizer_->step_count();
    meta["wallclock_s"] =
        wallclock_offset_ +
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time_).count();
    json envs = json::array();
    for (int e = 0; e < venv_->size(); ++e) {
        json je;
        je["board"] = board_to_json(venv_->env(e).state());
        je["rng"] = rng_to_json(const_cast<VecEnv&>(*venv_).env(e).rng());
        envs.push_back(je);
    }
    meta["envs"] = envs;
    ckpt.meta_json = meta.dump();

    for (const Variable* p : model_->parameters()) ckpt.add("param/" + p->name, p->shape, p->value);
    for (std::size_t k = 0; k < optimizer_->num_params(); ++k)
        ckpt.add("opt/v/" + optimizer_->param(k).name, optimizer_->param(k).shape, optimizer_->moment(k));
    if (target_)
        for (const Variable* p : target_->parameters()) ckpt.add("target/" + p->name, p->shape, p->value);

    std::vector<double> window(stats_.last_returns.begin(), stats_.last_returns.end());
    ckpt.add("stats/episode_window", Shape{static_cast<int>(window.size())}, window);
    ckpt.add("stats/partial_returns", Shape{static_cast<int>(stats_.partial_returns.size())},
             stats_.partial_returns);
    ckpt.save(path);
}

std::unique_ptr<Trainer> Trainer::load_checkpoint(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    json meta = json::parse(ckpt.meta_json);
    FlatConfig flat;
    for (const auto& [k, v] : meta.at("config").items()) flat.set(k, v.get<std::string>());
    auto trainer = std::make_unique<Trainer>(TrainConfig::from_flat(flat));

    for (Variable* p : trainer->model_->parameters()) {
        const auto& a = ckpt.require("param/" + p->name);
        if (a.shape != p->shape) throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = a.data;
    }
    for (std::size_t k = 0; k < trainer->optimizer_->num_params(); ++k)
        trainer->optimizer_->set_moment(k, ckpt.require("opt/v/" + trainer->optimizer_->param(k).name).data);
    trainer->optimizer_->set_step_count(meta.at("opt_step_count").get<std::int64_t>());
    if (trainer->target_)
        for (Variable* p : trainer->target_->parameters())
            p->value = ckpt.require("target/" + p->name).data;

    trainer->transitions_seen_ = meta.at("transitions").get<std::int64_t>();
    trainer->updates_done_ = meta.at("updates").get<std::int64_t>();
    trainer->stats_.episodes_completed = meta.at("episodes").get<std::int64_t>();
    trainer->action_rng_ = rng_from_json(meta.at("action_rng"));
    trainer->wallclock_offset_ = meta.at("wallclock_s").get<double>();
    trainer->start_time_ = std::chrono::steady_clock::now();

    const json& envs = meta.at("envs");
    for (int e = 0; e < trainer->venv_->size(); ++e) {
        const json& je = envs.at(static_cast<std::size_t>(e));
        trainer->venv_->env(e).set_state(board_from_json(je.at("board")));
        trainer->venv_->env(e).rng() = rng_from_json(je.at("rng"));
        trainer->current_obs_[static_cast<std::size_t>(e)] = trainer->venv_->env(e).observe();
    }

    const auto& window = ckpt.require("stats/episode_window");
    trainer->stats_.last_returns.assign(window.data.begin(), window.data.end());
    const auto& partial = ckpt.require("stats/partial_returns");
    trainer->stats_.partial_returns.assign(partial.data.begin(), partial.data.end());
    return trainer;
}

LoadedModel load_model_from_checkpoint(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    json meta = json::parse(ckpt.meta_json);
    FlatConfig flat;
    for (const auto& [k, v] : meta.at("config").items()) flat.set(k, v.get<std::string>());
    LoadedModel out;
    out.config = TrainConfig::from_flat(flat);
    out.model = std::make_unique<Model>(out.config.model_config(), 0);
    for (Variable* p : out.model->parameters()) {
        const auto& a = ckpt.require("param/" + p->name);
        if (a.shape != p->shape) throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = a.data;
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate_policy(Model& model, int episodes, std::uint64_t seed, bool consumable_goals) {
    if (episodes <= 0) throw std::invalid_argument("evaluate_policy: episodes must be positive");
    EvalResult out;
    Tape tape(model.config().precision);
    for (int ep = 0; ep < episodes; ++ep) {
        BoxEnv env(Rng::split(seed, static_cast<std::uint64_t>(ep)).next_u64(), consumable_goals);
        double ret = 0.0;
        while (!env.state().done) {
            tape.reset();
            auto q = model.q_forward(tape, env.observe());
            const int a = argmax_lowest(q.q.values());
            ret += env.step(static_cast<Action>(a)).reward;
        }
        out.episode_returns.push_back(ret);
    }
    const double n = static_cast<double>(episodes);
    out.mean_return = std::accumulate(out.episode_returns.begin(), out.episode_returns.end(), 0.0) / n;
    double sq = 0.0;
    for (double r : out.episode_returns) sq += (r - out.mean_return) * (r - out.mean_return);
    out.stddev_return = episodes > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    return out;
}

EvalResult random_policy_stats(int episodes, std::uint64_t seed, bool consumable_goals) {
    if (episodes <= 0) throw std::invalid_argument("random_policy_stats: episodes must be positive");
    EvalResult out;
    for (int ep = 0; ep < episodes; ++ep) {
        Rng rng = Rng::split(seed, static_cast<std::uint64_t>(ep));
        BoxEnv env(rng.next_u64(), consumable_goals);
        double ret = 0.0;
        while (!env.state().done) ret += env.step(static_cast<Action>(rng.next_int(kNumActions))).reward;
        out.episode_returns.push_back(ret);
    }
    const double n = static_cast<double>(episodes);
    out.mean_return = std::accumulate(out.episode_returns.begin(), out.episode_returns.end(), 0.0) / n;
    double sq = 0.0;
    for (double r : out.episode_returns) sq += (r - out.mean_return) * (r - out.mean_return);
    out.stddev_return = episodes > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    return out;
}

std::string metrics_csv_header(bool actor_mode) {
    return std::string("transitions,updates,mean_return_100ep,") + (actor_mode ? "pg_loss" : "q_loss") +
           ",value_loss,entropy,reward_ground_loss,state_ground_loss,epsilon,wallclock_s";
}

std::string metrics_csv_row(const MetricsRow& row) {
    char buf[360];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f",
                  static_cast<long long>(row.transitions), static_cast<long long>(row.updates),
                  row.mean_return_100ep, row.main_loss, row.value_loss, row.entropy,
                  row.reward_ground_loss, row.state_ground_loss, row.epsilon, row.wallclock_s);
    return buf;
}

}  // namespace treeqn
