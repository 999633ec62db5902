#include "treeqn/model.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace treeqn {

ArchSpec parse_arch(const std::string& name) {
    if (name == "dqn") return {Arch::Dqn, 0};
    if (name == "dqn-deep") return {Arch::DqnDeep, 0};
    if (name == "dqn-wide") return {Arch::DqnWide, 0};
    if (name == "a2c") return {Arch::A2c, 0};
    for (int d = 1; d <= 3; ++d) {
        if (name == "treeqn-d" + std::to_string(d)) return {Arch::TreeQn, d};
        if (name == "atreec-d" + std::to_string(d)) return {Arch::ATreeC, d};
    }
    throw std::invalid_argument(
        "unknown arch '" + name +
        "' (expected dqn, dqn-deep, dqn-wide, a2c, treeqn-d{1,2,3} or atreec-d{1,2,3})");
}

std::string arch_name(Arch arch, int depth) {
    switch (arch) {
    case Arch::Dqn: return "dqn";
    case Arch::DqnDeep: return "dqn-deep";
    case Arch::DqnWide: return "dqn-wide";
    case Arch::A2c: return "a2c";
    case Arch::TreeQn: return "treeqn-d" + std::to_string(depth);
    case Arch::ATreeC: return "atreec-d" + std::to_string(depth);
    }
    return "?";
}

bool arch_is_actor_critic(Arch arch) { return arch == Arch::A2c || arch == Arch::ATreeC; }
bool arch_has_tree(Arch arch) { return arch == Arch::TreeQn || arch == Arch::ATreeC; }

ModelConfig ModelConfig::for_arch(const std::string& name) {
    const ArchSpec spec = parse_arch(name);
    ModelConfig cfg;
    cfg.arch = spec.arch;
    if (arch_has_tree(spec.arch)) cfg.tree.depth = spec.depth;
    if (spec.arch == Arch::DqnWide) cfg.embedding_dim = 256;  // doubled embedding
    return cfg;
}

Tensor backup_value(Tape& tape, Tensor x, BackupMode mode, double temperature) {
    if (mode == BackupMode::HardMax) return tape.max(x);
    Tensor logits = temperature == 1.0 ? x : tape.mul_scalar(x, 1.0 / temperature);
    return tape.sum(tape.mul(x, tape.softmax(logits)));
}

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg), init_seed_(init_seed) {
    const int k = cfg_.embedding_dim;
    const int m = cfg_.reward_hidden;
    const int na = cfg_.n_actions;
    const auto [c1, c2, c3] = cfg_.conv_channels;

    add_param("encoder.conv1.w", Shape{c1, kObsChannels, 3, 3});
    add_param("encoder.conv1.b", Shape{c1});
    add_param("encoder.conv2.w", Shape{c2, c1, 3, 3});
    add_param("encoder.conv2.b", Shape{c2});
    add_param("encoder.conv3.w", Shape{c3, c2, 4, 4});
    add_param("encoder.conv3.b", Shape{c3});
    add_param("encoder.fc.w", Shape{k, c3});
    add_param("encoder.fc.b", Shape{k});

    if (arch_has_tree(cfg_.arch)) {
        add_param("transition.env.w", Shape{k, k});
        add_param("transition.env.b", Shape{k});
        for (int a = 0; a < na; ++a)
            add_param("transition.a" + std::to_string(a) + ".w", Shape{k, k});
        add_param("reward.fc1.w", Shape{m, k});
        add_param("reward.fc1.b", Shape{m});
        add_param("reward.fc2.w", Shape{na, m});
        add_param("reward.fc2.b", Shape{na});
        add_param("value.w", Shape{k});
        add_param("value.b", Shape::scalar());
    } else {
        if (cfg_.arch == Arch::DqnDeep) {
            // One weight set applied twice: the two inserted residual layers
            // share parameters.
            add_param("deep.w", Shape{k, k});
            add_param("deep.b", Shape{k});
        }
        add_param("head.w", Shape{na, k});
        add_param("head.b", Shape{na});
    }

    if (arch_is_actor_critic(cfg_.arch)) {
        add_param("critic.w", Shape{k});
        add_param("critic.b", Shape::scalar());
    }

    init_params(init_seed);
}

Variable* Model::add_param(const std::string& name, const Shape& shape) {
    params_.push_back(std::make_unique<Variable>(name, shape));
    Variable* v = params_.back().get();
    param_ptrs_.push_back(v);
    by_name_.emplace(name, v);
    return v;
}

void Model::init_params(std::uint64_t seed) {
    Rng rng(seed);
    for (Variable* v : param_ptrs_) {
        const Shape& s = v->shape;
        // Biases (and the scalar value offsets) start at zero; weights are
        // Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
        if (s.rank() < 2 && v->name != "value.w" && v->name != "critic.w") continue;
        int fan_in;
        if (s.rank() == 4) fan_in = s[1] * s[2] * s[3];
        else if (s.rank() == 2) fan_in = s[1];
        else fan_in = s[0];  // value.w / critic.w act on a k-vector
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& x : v->value) x = rng.uniform(-bound, bound);
    }
}

Variable& Model::param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::invalid_argument("no parameter named " + name);
    return *it->second;
}

std::int64_t Model::parameter_count() const {
    std::int64_t n = 0;
    for (const Variable* v : param_ptrs_) n += v->numel();
    return n;
}

void Model::zero_grads() {
    for (Variable* v : param_ptrs_) v->zero_grad();
}

std::unique_ptr<Model> Model::clone() const {
    auto copy = std::make_unique<Model>(cfg_, init_seed_);
    copy->copy_values_from(*this);
    return copy;
}

void Model::copy_values_from(const Model& other) {
    if (other.param_ptrs_.size() != param_ptrs_.size())
        throw std::invalid_argument("copy_values_from: parameter sets differ");
    for (std::size_t i = 0; i < param_ptrs_.size(); ++i) {
        if (param_ptrs_[i]->name != other.param_ptrs_[i]->name ||
            param_ptrs_[i]->shape != other.param_ptrs_[i]->shape)
            throw std::invalid_argument("copy_values_from: parameter sets differ");
        param_ptrs_[i]->value = other.param_ptrs_[i]->value;
    }
}

Tensor Model::embed_raw(Tape& tape, std::span<const double> obs) {
    if (static_cast<int>(obs.size()) != kObsSize)
        throw std::invalid_argument("encode: observation must have " + std::to_string(kObsSize) + " entries");
    Tensor x = tape.constant(Shape{kObsChannels, kGridSize, kGridSize}, obs);
    x = tape.relu(tape.conv2d(x, tape.param(param("encoder.conv1.w")), tape.param(param("encoder.conv1.b")), 1));
    x = tape.relu(tape.conv2d(x, tape.param(param("encoder.conv2.w")), tape.param(param("encoder.conv2.b")), 1));
    x = tape.relu(tape.conv2d(x, tape.param(param("encoder.conv3.w")), tape.param(param("encoder.conv3.b")), 1));
    return tape.fc(x, tape.param(param("encoder.fc.w")), tape.param(param("encoder.fc.b")));
}

Tensor Model::encode(Tape& tape, std::span<const double> obs) {
    Tensor z = embed_raw(tape, obs);
    return cfg_.normalize_at_creation ? tape.l2_normalize(z) : z;
}

std::pair<Tensor, Tensor> Model::transition(Tape& tape, Tensor z, int action) {
    if (!cfg_.normalize_at_creation) z = tape.l2_normalize(z);
    Tensor zin = z;
    Tensor intermediate = tape.add(zin, tape.tanh(tape.fc(zin, tape.param(param("transition.env.w")),
                                                          tape.param(param("transition.env.b")))));
    Tensor raw = tape.add(intermediate,
                          tape.tanh(tape.matvec(intermediate,
                                                tape.param(param("transition.a" + std::to_string(action) + ".w")))));
    Tensor child = cfg_.normalize_at_creation ? tape.l2_normalize(raw) : raw;
    return {child, intermediate};
}

Tensor Model::predict_rewards(Tape& tape, Tensor z) {
    Tensor h = tape.relu(tape.fc(z, tape.param(param("reward.fc1.w")), tape.param(param("reward.fc1.b"))));
    return tape.fc(h, tape.param(param("reward.fc2.w")), tape.param(param("reward.fc2.b")));
}

Tensor Model::predict_value(Tape& tape, Tensor z) {
    Tensor s = tape.sum(tape.mul(tape.param(param("value.w")), z));
    return tape.add(s, tape.param(param("value.b")));
}

Tensor Model::critic_value(Tape& tape, Tensor z) {
    Tensor s = tape.sum(tape.mul(tape.param(param("critic.w")), z));
    return tape.add(s, tape.param(param("critic.b")));
}

Tensor Model::critic_forward(Tape& tape, std::span<const double> obs) {
    if (!arch_is_actor_critic(cfg_.arch)) throw std::logic_error("critic_forward: no critic head");
    Tensor z = cfg_.arch == Arch::ATreeC ? encode(tape, obs) : tape.relu(embed_raw(tape, obs));
    return critic_value(tape, z);
}

TreeNode Model::expand(Tape& tape, Tensor z, int level) {
    TreeNode node;
    node.z = z;
    node.reward_preds = predict_rewards(tape, z);
    node.value = predict_value(tape, z);
    if (level < cfg_.tree.depth) {
        Tensor zin = cfg_.normalize_at_creation ? z : tape.l2_normalize(z);
        Tensor intermediate = tape.add(zin, tape.tanh(tape.fc(zin, tape.param(param("transition.env.w")),
                                                              tape.param(param("transition.env.b")))));
        node.intermediate = intermediate;
        node.children.reserve(static_cast<std::size_t>(cfg_.n_actions));
        for (int a = 0; a < cfg_.n_actions; ++a) {
            Tensor raw = tape.add(
                intermediate,
                tape.tanh(tape.matvec(intermediate, tape.param(param("transition.a" + std::to_string(a) + ".w")))));
            Tensor child = cfg_.normalize_at_creation ? tape.l2_normalize(raw) : raw;
            node.children.push_back(expand(tape, child, level + 1));
        }
    }
    return node;
}

// Leaf-to-root lambda backup:
//   leaf:     v_lambda = V(z)
//   internal: q[a]     = r_hat[a] + gamma * child_a.v_lambda
//             v_lambda = (1 - lambda) V(z) + lambda * b(q)
void Model::backup_tree(Tape& tape, TreeNode& node) {
    if (node.children.empty()) {
        node.v_lambda = node.value;
        return;
    }
    for (TreeNode& child : node.children) backup_tree(tape, child);
    std::vector<Tensor> qs;
    qs.reserve(node.children.size());
    for (int a = 0; a < static_cast<int>(node.children.size()); ++a)
        qs.push_back(tape.add(tape.index(node.reward_preds, a),
                              tape.mul_scalar(node.children[static_cast<std::size_t>(a)].v_lambda, cfg_.tree.gamma)));
    node.q = tape.stack(qs);
    Tensor mixed = backup_value(tape, node.q, cfg_.tree.backup, cfg_.tree.temperature);
    node.v_lambda = tape.add(tape.mul_scalar(node.value, 1.0 - cfg_.tree.lambda),
                             tape.mul_scalar(mixed, cfg_.tree.lambda));
}

Model::TreeResult Model::tree_q(Tape& tape, std::span<const double> obs) {
    if (!arch_has_tree(cfg_.arch)) throw std::logic_error("tree_q: not a tree architecture");
    if (cfg_.tree.depth < 1) throw std::invalid_argument("tree_q: depth must be >= 1");
    TreeResult result;
    result.root = expand(tape, encode(tape, obs), 0);
    backup_tree(tape, result.root);
    result.q = result.root.q;
    return result;
}

Model::QForward Model::q_forward(Tape& tape, std::span<const double> obs) {
    QForward out;
    switch (cfg_.arch) {
    case Arch::TreeQn:
    case Arch::ATreeC: {
        TreeResult tr = tree_q(tape, obs);
        out.q = tr.q;
        out.root = std::move(tr.root);
        break;
    }
    case Arch::DqnDeep: {
        Tensor h = tape.relu(embed_raw(tape, obs));
        for (int rep = 0; rep < 2; ++rep)
            h = tape.add(h, tape.tanh(tape.fc(h, tape.param(param("deep.w")), tape.param(param("deep.b")))));
        out.q = tape.fc(h, tape.param(param("head.w")), tape.param(param("head.b")));
        break;
    }
    default: {
        Tensor h = tape.relu(embed_raw(tape, obs));
        out.q = tape.fc(h, tape.param(param("head.w")), tape.param(param("head.b")));
        break;
    }
    }
    return out;
}

Model::PolicyForward Model::policy_forward(Tape& tape, std::span<const double> obs) {
    if (!arch_is_actor_critic(cfg_.arch)) throw std::logic_error("policy_forward: not an actor-critic architecture");
    PolicyForward out;
    if (cfg_.arch == Arch::ATreeC) {
        TreeResult tr = tree_q(tape, obs);
        out.q = tr.q;
        out.v_critic = critic_value(tape, tr.root.z);
        out.root = std::move(tr.root);
    } else {
        Tensor h = tape.relu(embed_raw(tape, obs));
        out.q = tape.fc(h, tape.param(param("head.w")), tape.param(param("head.b")));
        out.v_critic = critic_value(tape, h);
    }
    out.pi = tape.softmax(out.q);
    out.log_pi = tape.log_softmax(out.q);
    return out;
}

namespace {
nlohmann::json node_to_json(const TreeNode& node, bool include_latents) {
    nlohmann::json j;
    j["value"] = node.value.scalar();
    j["v_lambda"] = node.v_lambda.scalar();
    auto rewards = node.reward_preds.values();
    j["rewards"] = std::vector<double>(rewards.begin(), rewards.end());
    if (node.q.defined()) {
        auto q = node.q.values();
        j["q"] = std::vector<double>(q.begin(), q.end());
    }
    if (include_latents) {
        auto z = node.z.values();
        j["z"] = std::vector<double>(z.begin(), z.end());
    }
    j["children"] = nlohmann::json::array();
    for (const TreeNode& c : node.children) j["children"].push_back(node_to_json(c, include_latents));
    return j;
}
}  // namespace

std::string tree_dump_json(const TreeNode& root, bool include_latents, int json_indent) {
    nlohmann::json j;
    j["node_count"] = 1 + root.descendant_count();
    j["tree"] = node_to_json(root, include_latents);
    return j.dump(json_indent);
}

}  // namespace treeqn
