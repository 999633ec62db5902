#pragma once

#include <array>
#include <cassert>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace treeqn {

// Dense shapes up to rank 4 (vectors, matrices, CHW images, conv kernel banks).
class Shape {
public:
    Shape() : rank_(0) {}
    Shape(std::initializer_list<int> dims) : rank_(0) {
        for (int d : dims) dims_[rank_++] = d;
    }

    static Shape scalar() { return Shape{}; }

    int rank() const { return rank_; }
    int dim(int i) const { return dims_[i]; }
    int operator[](int i) const { return dims_[i]; }

    int numel() const {
        int n = 1;
        for (int i = 0; i < rank_; ++i) n *= dims_[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (dims_[i] != o.dims_[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const;

private:
    std::array<int, 4> dims_{};
    int rank_;
};

enum class Precision { f64, f32 };

// A named learnable parameter that persists across tapes. Gradients are
// accumulated here by Tape::backward.
struct Variable {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;

    Variable() = default;
    Variable(std::string name_, Shape shape_)
        : name(std::move(name_)),
          shape(shape_),
          value(static_cast<std::size_t>(shape_.numel()), 0.0),
          grad(static_cast<std::size_t>(shape_.numel()), 0.0) {}

    int numel() const { return shape.numel(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

// Lightweight handle to a node on a tape. Valid until the tape is reset.
class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const;
    int numel() const;
    bool defined() const { return tape_ != nullptr; }

    std::span<const double> values() const;
    double value(int i) const { return values()[static_cast<std::size_t>(i)]; }
    double scalar() const;

    // Gradient of the last backward() w.r.t. this tensor (zero if off-path).
    std::span<const double> grad() const;

private:
    friend class Tape;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Records primitive operations in topological order; values live in a flat
// arena so reset() keeps allocations across training steps. Kernels are plain
// deterministic loops: identical inputs reproduce identical outputs
// bit-for-bit.
class Tape {
public:
    explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}

    Precision precision() const { return precision_; }

    // -- leaves ------------------------------------------------------------
    Tensor constant(const Shape& shape, std::span<const double> data);
    Tensor constant_scalar(double v);
    // Differentiable leaf not tied to a Variable (gradient check inputs).
    Tensor input(const Shape& shape, std::span<const double> data);
    // Leaf backed by a persistent parameter; cached, so repeated calls for
    // the same Variable within one tape share a node.
    Tensor param(Variable& var);

    // -- primitives ----------------------------------------------------------
    Tensor fc(Tensor x, Tensor w, Tensor b);   // y = Wx + b
    Tensor matvec(Tensor x, Tensor w);         // y = Wx
    Tensor conv2d(Tensor x, Tensor kernels, Tensor bias, int stride);
    Tensor tanh(Tensor x);
    Tensor relu(Tensor x);
    Tensor softmax(Tensor x);
    Tensor log_softmax(Tensor x);
    Tensor l2_normalize(Tensor x);
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor mul(Tensor a, Tensor b);
    Tensor add_scalar(Tensor a, double c);
    Tensor mul_scalar(Tensor a, double c);
    Tensor square(Tensor a);
    Tensor sum(Tensor a);
    Tensor mean(Tensor a);
    Tensor max(Tensor a);                       // ties resolve to lowest index
    Tensor index(Tensor a, int i);              // rank-1 -> scalar
    Tensor stack(std::span<const Tensor> scalars);
    Tensor add_n(std::span<const Tensor> scalars);

    // -- differentiation -----------------------------------------------------
    // Accumulates dLoss/d(theta) into every requires-grad tensor and every
    // Variable registered on this tape. Variable grads are zeroed first
    // unless accumulate is set.
    void backward(Tensor loss, bool accumulate = false);

    void reset();
    std::size_t num_nodes() const { return nodes_.size(); }

    // Smallest |input| seen by any relu on this tape since reset; gradient
    // checks use it to reject draws sitting on a kink.
    double min_relu_input_magnitude() const { return min_relu_input_; }

    // Same, but restricted to relu units that received gradient in the last
    // backward pass. Kinks in disconnected units cannot perturb a loss.
    double min_relu_input_on_grad_path() const;

private:
    enum class Op : std::uint8_t {
        Leaf, Fc, Conv2d, Tanh, Relu, Softmax, LogSoftmax, L2Normalize,
        Add, Sub, Mul, AddScalar, MulScalar, Square, Sum, Mean, Max,
        Index, Stack, AddN,
    };

    struct Node {
        Op op = Op::Leaf;
        Shape shape;
        int in0 = -1, in1 = -1, in2 = -1;
        int varg_begin = 0, varg_len = 0;
        int iarg = 0;
        double darg = 0.0;
        std::size_t off = 0;
        bool requires_grad = false;
        Variable* var = nullptr;
    };

    friend class Tensor;

    double quantize(double x) const {
        return precision_ == Precision::f32 ? static_cast<double>(static_cast<float>(x)) : x;
    }

    int push_node(Op op, const Shape& shape, int in0, int in1, int in2, bool requires_grad);
    std::span<double> node_vals(int id);
    std::span<const double> node_vals(int id) const;
    std::span<double> node_grads(int id);
    bool rg(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    void accumulate_grad(int id, int i, double g);
    void check_rank1(const Tensor& t, const char* op) const;

    Precision precision_;
    std::vector<Node> nodes_;
    std::vector<double> vals_;
    std::vector<double> grads_;
    std::vector<int> vargs_;
    std::unordered_map<const Variable*, int> param_cache_;
    double min_relu_input_ = 1e300;
};

inline const Shape& Tensor::shape() const {
    return tape_->nodes_[static_cast<std::size_t>(id_)].shape;
}
inline int Tensor::numel() const { return shape().numel(); }
inline std::span<const double> Tensor::values() const {
    return static_cast<const Tape*>(tape_)->node_vals(id_);
}
inline double Tensor::scalar() const {
    assert(numel() == 1);
    return values()[0];
}
inline std::span<const double> Tensor::grad() const { return tape_->node_grads(id_); }

}  // namespace treeqn
