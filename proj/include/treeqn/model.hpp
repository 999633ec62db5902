#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "treeqn/boxworld.hpp"
#include "treeqn/rng.hpp"
#include "treeqn/tensor.hpp"

namespace treeqn {

enum class Arch { Dqn, DqnDeep, DqnWide, TreeQn, A2c, ATreeC };

// Parses the CLI architecture names: dqn, dqn-deep, dqn-wide, a2c,
// treeqn-d{1,2,3}, atreec-d{1,2,3}. Throws std::invalid_argument otherwise.
struct ArchSpec {
    Arch arch;
    int depth;  // 0 for non-tree architectures
};
ArchSpec parse_arch(const std::string& name);
std::string arch_name(Arch arch, int depth);
bool arch_is_actor_critic(Arch arch);
bool arch_has_tree(Arch arch);

enum class BackupMode { Softmax, HardMax };

struct TreeConfig {
    int depth = 2;
    double lambda = 0.8;
    double gamma = 0.99;
    BackupMode backup = BackupMode::Softmax;
    double temperature = 1.0;
};

struct ModelConfig {
    Arch arch = Arch::TreeQn;
    TreeConfig tree;
    int embedding_dim = 128;                   // k (256 for dqn-wide)
    int reward_hidden = 64;                    // m
    int n_actions = kNumActions;
    std::array<int, 3> conv_channels = {24, 24, 48};
    Precision precision = Precision::f64;
    // Default: every representation is unit-normalized once when created
    // (encoder output and each transition output), so the value and reward
    // heads also see unit vectors. false restores the literal placement where
    // normalization happens only immediately before a transition is applied.
    bool normalize_at_creation = true;

    static ModelConfig for_arch(const std::string& name);
};

// One latent state of the look-ahead tree. Tensors live on the tape used to
// build the tree.
struct TreeNode {
    Tensor z;
    Tensor intermediate;   // action-agnostic intermediate used to expand this node
    Tensor reward_preds;   // [n_actions]
    Tensor value;          // V(z)
    Tensor q;              // [n_actions], internal nodes only (after backup)
    Tensor v_lambda;       // lambda-mixed value (after backup)
    std::vector<TreeNode> children;

    int descendant_count() const {
        int n = 0;
        for (const TreeNode& c : children) n += 1 + c.descendant_count();
        return n;
    }
    const TreeNode& child(Action a) const { return children[static_cast<std::size_t>(a)]; }
};

// Softmax-weighted mean of x (a smooth stand-in for max that passes gradient
// down every branch), or the hard max.
Tensor backup_value(Tape& tape, Tensor x, BackupMode mode, double temperature = 1.0);

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    std::span<Variable* const> parameters() const { return param_ptrs_; }
    Variable& param(const std::string& name) const;
    bool has_param(const std::string& name) const { return by_name_.count(name) != 0; }
    std::int64_t parameter_count() const;
    void zero_grads();

    // Deep parameter snapshot (target networks).
    std::unique_ptr<Model> clone() const;
    void copy_values_from(const Model& other);

    // Convolutional embedding of an observation; unit-normalized when the
    // config says representations are normalized at creation.
    Tensor encode(Tape& tape, std::span<const double> obs);

    // One tree transition: intermediate = z + tanh(W_env z + b_env),
    // child = normalize(intermediate + tanh(W_a intermediate)).
    // Returns (child, intermediate).
    std::pair<Tensor, Tensor> transition(Tape& tape, Tensor z, int action);

    Tensor predict_rewards(Tape& tape, Tensor z);  // [n_actions]
    Tensor predict_value(Tape& tape, Tensor z);    // scalar, actor/Q value head
    Tensor critic_value(Tape& tape, Tensor z);     // scalar, separate critic head
    // Encoder + critic head only (bootstrap values without expanding a tree).
    Tensor critic_forward(Tape& tape, std::span<const double> obs);

    // Full recursive tree forward: expands every action sequence to the
    // configured depth, evaluates rewards and values at every node, and backs
    // the lambda-mixed values up to the root Q-vector.
    struct TreeResult {
        Tensor q;
        TreeNode root;
    };
    TreeResult tree_q(Tape& tape, std::span<const double> obs);

    // Architecture-dispatched Q-values; tree architectures also return the
    // expanded tree (used by the grounding losses).
    struct QForward {
        Tensor q;
        std::optional<TreeNode> root;
    };
    QForward q_forward(Tape& tape, std::span<const double> obs);

    // Actor-critic forward (a2c, atreec). pi = softmax over the Q estimates.
    struct PolicyForward {
        Tensor q;
        Tensor pi;
        Tensor log_pi;
        Tensor v_critic;
        std::optional<TreeNode> root;
    };
    PolicyForward policy_forward(Tape& tape, std::span<const double> obs);

private:
    Variable* add_param(const std::string& name, const Shape& shape);
    void init_params(std::uint64_t seed);
    Tensor embed_raw(Tape& tape, std::span<const double> obs);
    TreeNode expand(Tape& tape, Tensor z, int level);
    void backup_tree(Tape& tape, TreeNode& node);

    ModelConfig cfg_;
    std::uint64_t init_seed_;
    std::vector<std::unique_ptr<Variable>> params_;
    std::vector<Variable*> param_ptrs_;
    std::unordered_map<std::string, Variable*> by_name_;
};

// JSON dump of a fully expanded tree (rewards, values and Q at every node;
// latent vectors included on request).
std::string tree_dump_json(const TreeNode& root, bool include_latents, int json_indent = -1);

}  // namespace treeqn
