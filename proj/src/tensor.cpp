#include "treeqn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace treeqn {

namespace {
constexpr double kNormGuard = 1e-12;  // l2_normalize denominator floor

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }
}  // namespace

std::string Shape::str() const {
    std::string s = "[";
    for (int i = 0; i < rank_; ++i) {
        if (i) s += "x";
        s += std::to_string(dims_[i]);
    }
    return s + "]";
}

int Tape::push_node(Op op, const Shape& shape, int in0, int in1, int in2, bool requires_grad) {
    // `shape` may reference a node inside nodes_, which push_back can
    // reallocate; copy it up front.
    const Shape shape_copy = shape;
    Node n;
    n.op = op;
    n.shape = shape_copy;
    n.in0 = in0;
    n.in1 = in1;
    n.in2 = in2;
    n.off = vals_.size();
    n.requires_grad = requires_grad;
    nodes_.push_back(n);
    vals_.resize(vals_.size() + static_cast<std::size_t>(shape_copy.numel()), 0.0);
    return static_cast<int>(nodes_.size()) - 1;
}

std::span<double> Tape::node_vals(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return {vals_.data() + n.off, static_cast<std::size_t>(n.shape.numel())};
}

std::span<const double> Tape::node_vals(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return {vals_.data() + n.off, static_cast<std::size_t>(n.shape.numel())};
}

std::span<double> Tape::node_grads(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (grads_.size() < n.off + static_cast<std::size_t>(n.shape.numel()))
        grads_.resize(vals_.size(), 0.0);
    return {grads_.data() + n.off, static_cast<std::size_t>(n.shape.numel())};
}

void Tape::accumulate_grad(int id, int i, double g) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    double& slot = grads_[n.off + static_cast<std::size_t>(i)];
    slot = quantize(slot + g);
}

void Tape::check_rank1(const Tensor& t, const char* op) const {
    if (t.shape().rank() != 1) fail(std::string(op) + " expects a rank-1 tensor, got " + t.shape().str());
}

double Tape::min_relu_input_on_grad_path() const {
    double lo = 1e300;
    for (const Node& n : nodes_) {
        if (n.op != Op::Relu || !n.requires_grad) continue;
        const Node& parent = nodes_[static_cast<std::size_t>(n.in0)];
        const int count = n.shape.numel();
        for (int i = 0; i < count; ++i) {
            if (grads_[n.off + static_cast<std::size_t>(i)] == 0.0) continue;
            lo = std::min(lo, std::abs(vals_[parent.off + static_cast<std::size_t>(i)]));
        }
    }
    return lo;
}

void Tape::reset() {
    nodes_.clear();
    vals_.clear();
    grads_.clear();
    vargs_.clear();
    param_cache_.clear();
    min_relu_input_ = 1e300;
}

// ---------------------------------------------------------------------------
// leaves
// ---------------------------------------------------------------------------

Tensor Tape::constant(const Shape& shape, std::span<const double> data) {
    if (static_cast<int>(data.size()) != shape.numel())
        fail("constant: data size " + std::to_string(data.size()) + " does not match shape " + shape.str());
    // `data` may view this tape's own value arena; copy before growing it.
    const std::vector<double> copied(data.begin(), data.end());
    int id = push_node(Op::Leaf, shape, -1, -1, -1, false);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < copied.size(); ++i) out[i] = quantize(copied[i]);
    return Tensor(this, id);
}

Tensor Tape::constant_scalar(double v) {
    double d[1] = {v};
    return constant(Shape::scalar(), d);
}

Tensor Tape::input(const Shape& shape, std::span<const double> data) {
    if (static_cast<int>(data.size()) != shape.numel())
        fail("input: data size does not match shape " + shape.str());
    const std::vector<double> copied(data.begin(), data.end());
    int id = push_node(Op::Leaf, shape, -1, -1, -1, true);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < copied.size(); ++i) out[i] = quantize(copied[i]);
    return Tensor(this, id);
}

Tensor Tape::param(Variable& var) {
    auto it = param_cache_.find(&var);
    if (it != param_cache_.end()) return Tensor(this, it->second);
    int id = push_node(Op::Leaf, var.shape, -1, -1, -1, true);
    nodes_[static_cast<std::size_t>(id)].var = &var;
    auto out = node_vals(id);
    for (std::size_t i = 0; i < var.value.size(); ++i) out[i] = quantize(var.value[i]);
    param_cache_.emplace(&var, id);
    return Tensor(this, id);
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor Tape::fc(Tensor x, Tensor w, Tensor b) {
    // Inputs of higher rank are read in row-major flattened order.
    if (w.shape().rank() != 2) fail("fc: weight must be rank-2, got " + w.shape().str());
    const int k_out = w.shape()[0], k_in = w.shape()[1];
    if (x.numel() != k_in)
        fail("fc: input " + x.shape().str() + " does not match weight " + w.shape().str());
    if (b.defined() && (b.shape().rank() != 1 || b.numel() != k_out))
        fail("fc: bias " + b.shape().str() + " does not match weight " + w.shape().str());

    const bool g = rg(x.id_) || rg(w.id_) || (b.defined() && rg(b.id_));
    int id = push_node(Op::Fc, Shape{k_out}, x.id_, w.id_, b.defined() ? b.id_ : -1, g);
    auto xv = node_vals(x.id_);
    auto wv = node_vals(w.id_);
    auto out = node_vals(id);
    for (int i = 0; i < k_out; ++i) {
        double acc = b.defined() ? node_vals(b.id_)[static_cast<std::size_t>(i)] : 0.0;
        const double* row = wv.data() + static_cast<std::size_t>(i) * k_in;
        for (int j = 0; j < k_in; ++j) acc += row[j] * xv[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = quantize(acc);
    }
    return Tensor(this, id);
}

Tensor Tape::matvec(Tensor x, Tensor w) { return fc(x, w, Tensor()); }

Tensor Tape::conv2d(Tensor x, Tensor kernels, Tensor bias, int stride) {
    if (x.shape().rank() != 3) fail("conv2d: input must be CxHxW, got " + x.shape().str());
    if (kernels.shape().rank() != 4) fail("conv2d: kernels must be OxCxKHxKW, got " + kernels.shape().str());
    const int c_in = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int c_out = kernels.shape()[0], kc = kernels.shape()[1], kh = kernels.shape()[2], kw = kernels.shape()[3];
    if (kc != c_in) fail("conv2d: kernel channels " + kernels.shape().str() + " do not match input " + x.shape().str());
    if (bias.shape().rank() != 1 || bias.numel() != c_out) fail("conv2d: bias must be [c_out]");
    if (stride < 1) fail("conv2d: stride must be >= 1");
    if (h < kh || w < kw || (h - kh) % stride != 0 || (w - kw) % stride != 0)
        fail("conv2d: input " + x.shape().str() + " with kernel " + kernels.shape().str() +
             " stride " + std::to_string(stride) + " has non-integral valid output size");
    const int ho = (h - kh) / stride + 1;
    const int wo = (w - kw) / stride + 1;

    const bool g = rg(x.id_) || rg(kernels.id_) || rg(bias.id_);
    int id = push_node(Op::Conv2d, Shape{c_out, ho, wo}, x.id_, kernels.id_, bias.id_, g);
    nodes_[static_cast<std::size_t>(id)].iarg = stride;
    auto xv = node_vals(x.id_);
    auto kv = node_vals(kernels.id_);
    auto bv = node_vals(bias.id_);
    auto out = node_vals(id);
    for (int co = 0; co < c_out; ++co) {
        for (int i = 0; i < ho; ++i) {
            for (int j = 0; j < wo; ++j) {
                double acc = bv[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < c_in; ++ci) {
                    for (int u = 0; u < kh; ++u) {
                        const double* xrow = xv.data() + (static_cast<std::size_t>(ci) * h + (i * stride + u)) * w + j * stride;
                        const double* krow = kv.data() + ((static_cast<std::size_t>(co) * c_in + ci) * kh + u) * kw;
                        for (int v = 0; v < kw; ++v) acc += xrow[v] * krow[v];
                    }
                }
                out[(static_cast<std::size_t>(co) * ho + i) * wo + j] = quantize(acc);
            }
        }
    }
    return Tensor(this, id);
}

Tensor Tape::tanh(Tensor x) {
    int id = push_node(Op::Tanh, x.shape(), x.id_, -1, -1, rg(x.id_));
    auto xv = node_vals(x.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(std::tanh(xv[i]));
    return Tensor(this, id);
}

Tensor Tape::relu(Tensor x) {
    int id = push_node(Op::Relu, x.shape(), x.id_, -1, -1, rg(x.id_));
    auto xv = node_vals(x.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        min_relu_input_ = std::min(min_relu_input_, std::abs(xv[i]));
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    }
    return Tensor(this, id);
}

Tensor Tape::softmax(Tensor x) {
    check_rank1(x, "softmax");
    int id = push_node(Op::Softmax, x.shape(), x.id_, -1, -1, rg(x.id_));
    auto xv = node_vals(x.id_);
    auto out = node_vals(id);
    double hi = xv[0];
    for (double v : xv) hi = std::max(hi, v);
    double z = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = std::exp(xv[i] - hi);
        z += out[i];
    }
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(out[i] / z);
    return Tensor(this, id);
}

Tensor Tape::log_softmax(Tensor x) {
    check_rank1(x, "log_softmax");
    int id = push_node(Op::LogSoftmax, x.shape(), x.id_, -1, -1, rg(x.id_));
    auto xv = node_vals(x.id_);
    auto out = node_vals(id);
    double hi = xv[0];
    for (double v : xv) hi = std::max(hi, v);
    double z = 0.0;
    for (double v : xv) z += std::exp(v - hi);
    const double lse = hi + std::log(z);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(xv[i] - lse);
    return Tensor(this, id);
}

Tensor Tape::l2_normalize(Tensor x) {
    check_rank1(x, "l2_normalize");
    int id = push_node(Op::L2Normalize, x.shape(), x.id_, -1, -1, rg(x.id_));
    auto xv = node_vals(x.id_);
    auto out = node_vals(id);
    double sq = 0.0;
    for (double v : xv) sq += v * v;
    const double norm = std::sqrt(sq);
    assert(norm > kNormGuard && "l2_normalize: near-zero vector");
    const double denom = std::max(norm, kNormGuard);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(xv[i] / denom);
    return Tensor(this, id);
}

Tensor Tape::add(Tensor a, Tensor b) {
    if (a.shape() != b.shape()) fail("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    int id = push_node(Op::Add, a.shape(), a.id_, b.id_, -1, rg(a.id_) || rg(b.id_));
    auto av = node_vals(a.id_);
    auto bv = node_vals(b.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] + bv[i]);
    return Tensor(this, id);
}

Tensor Tape::sub(Tensor a, Tensor b) {
    if (a.shape() != b.shape()) fail("sub: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    int id = push_node(Op::Sub, a.shape(), a.id_, b.id_, -1, rg(a.id_) || rg(b.id_));
    auto av = node_vals(a.id_);
    auto bv = node_vals(b.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] - bv[i]);
    return Tensor(this, id);
}

Tensor Tape::mul(Tensor a, Tensor b) {
    if (a.shape() != b.shape()) fail("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    int id = push_node(Op::Mul, a.shape(), a.id_, b.id_, -1, rg(a.id_) || rg(b.id_));
    auto av = node_vals(a.id_);
    auto bv = node_vals(b.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] * bv[i]);
    return Tensor(this, id);
}

Tensor Tape::add_scalar(Tensor a, double c) {
    int id = push_node(Op::AddScalar, a.shape(), a.id_, -1, -1, rg(a.id_));
    nodes_[static_cast<std::size_t>(id)].darg = c;
    auto av = node_vals(a.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] + c);
    return Tensor(this, id);
}

Tensor Tape::mul_scalar(Tensor a, double c) {
    int id = push_node(Op::MulScalar, a.shape(), a.id_, -1, -1, rg(a.id_));
    nodes_[static_cast<std::size_t>(id)].darg = c;
    auto av = node_vals(a.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] * c);
    return Tensor(this, id);
}

Tensor Tape::square(Tensor a) {
    int id = push_node(Op::Square, a.shape(), a.id_, -1, -1, rg(a.id_));
    auto av = node_vals(a.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = quantize(av[i] * av[i]);
    return Tensor(this, id);
}

Tensor Tape::sum(Tensor a) {
    int id = push_node(Op::Sum, Shape::scalar(), a.id_, -1, -1, rg(a.id_));
    auto av = node_vals(a.id_);
    double acc = 0.0;
    for (double v : av) acc = quantize(acc + v);
    node_vals(id)[0] = acc;
    return Tensor(this, id);
}

Tensor Tape::mean(Tensor a) {
    int id = push_node(Op::Mean, Shape::scalar(), a.id_, -1, -1, rg(a.id_));
    auto av = node_vals(a.id_);
    double acc = 0.0;
    for (double v : av) acc = quantize(acc + v);
    node_vals(id)[0] = quantize(acc / static_cast<double>(av.size()));
    return Tensor(this, id);
}

Tensor Tape::max(Tensor a) {
    if (a.numel() < 1) fail("max: empty tensor");
    int id = push_node(Op::Max, Shape::scalar(), a.id_, -1, -1, rg(a.id_));
    auto av = node_vals(a.id_);
    int best = 0;
    for (int i = 1; i < static_cast<int>(av.size()); ++i)
        if (av[static_cast<std::size_t>(i)] > av[static_cast<std::size_t>(best)]) best = i;
    nodes_[static_cast<std::size_t>(id)].iarg = best;
    node_vals(id)[0] = av[static_cast<std::size_t>(best)];
    return Tensor(this, id);
}

Tensor Tape::index(Tensor a, int i) {
    check_rank1(a, "index");
    if (i < 0 || i >= a.numel()) fail("index: " + std::to_string(i) + " out of range for " + a.shape().str());
    int id = push_node(Op::Index, Shape::scalar(), a.id_, -1, -1, rg(a.id_));
    nodes_[static_cast<std::size_t>(id)].iarg = i;
    node_vals(id)[0] = node_vals(a.id_)[static_cast<std::size_t>(i)];
    return Tensor(this, id);
}

Tensor Tape::stack(std::span<const Tensor> scalars) {
    if (scalars.empty()) fail("stack: no inputs");
    bool g = false;
    for (const Tensor& t : scalars) {
        if (t.numel() != 1) fail("stack: inputs must be scalars");
        g = g || rg(t.id_);
    }
    int id = push_node(Op::Stack, Shape{static_cast<int>(scalars.size())}, -1, -1, -1, g);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    n.varg_begin = static_cast<int>(vargs_.size());
    n.varg_len = static_cast<int>(scalars.size());
    for (const Tensor& t : scalars) vargs_.push_back(t.id_);
    auto out = node_vals(id);
    for (std::size_t i = 0; i < scalars.size(); ++i) out[i] = node_vals(scalars[i].id_)[0];
    return Tensor(this, id);
}

Tensor Tape::add_n(std::span<const Tensor> scalars) {
    if (scalars.empty()) fail("add_n: no inputs");
    bool g = false;
    for (const Tensor& t : scalars) {
        if (t.numel() != 1) fail("add_n: inputs must be scalars");
        g = g || rg(t.id_);
    }
    int id = push_node(Op::AddN, Shape::scalar(), -1, -1, -1, g);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    n.varg_begin = static_cast<int>(vargs_.size());
    n.varg_len = static_cast<int>(scalars.size());
    double acc = 0.0;
    for (const Tensor& t : scalars) {
        vargs_.push_back(t.id_);
        acc = quantize(acc + node_vals(t.id_)[0]);
    }
    node_vals(id)[0] = acc;
    return Tensor(this, id);
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

void Tape::backward(Tensor loss, bool accumulate) {
    if (nodes_.empty()) fail("backward: empty tape");
    if (loss.tape_ != this) fail("backward: loss is not on this tape");
    if (loss.numel() != 1) fail("backward: loss must be scalar, got " + loss.shape().str());

    grads_.assign(vals_.size(), 0.0);
    if (!accumulate) {
        for (const Node& n : nodes_)
            if (n.var != nullptr) n.var->zero_grad();
    }
    grads_[nodes_[static_cast<std::size_t>(loss.id_)].off] = 1.0;

    for (int id = loss.id_; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) continue;
        const double* g = grads_.data() + n.off;
        const int count = n.shape.numel();

        switch (n.op) {
        case Op::Leaf: {
            if (n.var != nullptr) {
                for (int i = 0; i < count; ++i)
                    n.var->grad[static_cast<std::size_t>(i)] += g[i];
            }
            break;
        }
        case Op::Fc: {
            const int k_out = n.shape[0];
            const int k_in = nodes_[static_cast<std::size_t>(n.in0)].shape.numel();
            const double* xv = vals_.data() + nodes_[static_cast<std::size_t>(n.in0)].off;
            const double* wv = vals_.data() + nodes_[static_cast<std::size_t>(n.in1)].off;
            double* dx = grads_.data() + nodes_[static_cast<std::size_t>(n.in0)].off;
            double* dw = grads_.data() + nodes_[static_cast<std::size_t>(n.in1)].off;
            const bool gx = rg(n.in0), gw = rg(n.in1);
            const bool gb = n.in2 >= 0 && rg(n.in2);
            double* db = gb ? grads_.data() + nodes_[static_cast<std::size_t>(n.in2)].off : nullptr;
            for (int i = 0; i < k_out; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                const double* row = wv + static_cast<std::size_t>(i) * k_in;
                if (gx)
                    for (int j = 0; j < k_in; ++j) dx[j] = quantize(dx[j] + gi * row[j]);
                if (gw) {
                    double* drow = dw + static_cast<std::size_t>(i) * k_in;
                    for (int j = 0; j < k_in; ++j) drow[j] = quantize(drow[j] + gi * xv[j]);
                }
                if (gb) db[i] = quantize(db[i] + gi);
            }
            break;
        }
        case Op::Conv2d: {
            const Shape& xs = nodes_[static_cast<std::size_t>(n.in0)].shape;
            const Shape& ks = nodes_[static_cast<std::size_t>(n.in1)].shape;
            const int c_in = xs[0], h = xs[1], w = xs[2];
            const int c_out = ks[0], kh = ks[2], kw = ks[3];
            const int ho = n.shape[1], wo = n.shape[2];
            const int stride = n.iarg;
            const double* xv = vals_.data() + nodes_[static_cast<std::size_t>(n.in0)].off;
            const double* kv = vals_.data() + nodes_[static_cast<std::size_t>(n.in1)].off;
            double* dx = grads_.data() + nodes_[static_cast<std::size_t>(n.in0)].off;
            double* dk = grads_.data() + nodes_[static_cast<std::size_t>(n.in1)].off;
            double* db = grads_.data() + nodes_[static_cast<std::size_t>(n.in2)].off;
            const bool gx = rg(n.in0), gk = rg(n.in1), gb = rg(n.in2);
            for (int co = 0; co < c_out; ++co) {
                for (int i = 0; i < ho; ++i) {
                    for (int j = 0; j < wo; ++j) {
                        const double go = g[(co * ho + i) * wo + j];
                        if (go == 0.0) continue;
                        if (gb) db[co] = quantize(db[co] + go);
                        for (int ci = 0; ci < c_in; ++ci) {
                            for (int u = 0; u < kh; ++u) {
                                const int xbase = (ci * h + (i * stride + u)) * w + j * stride;
                                const int kbase = ((co * c_in + ci) * kh + u) * kw;
                                for (int v = 0; v < kw; ++v) {
                                    if (gk) dk[kbase + v] = quantize(dk[kbase + v] + go * xv[xbase + v]);
                                    if (gx) dx[xbase + v] = quantize(dx[xbase + v] + go * kv[kbase + v]);
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case Op::Tanh: {
            auto yv = node_vals(id);
            for (int i = 0; i < count; ++i)
                accumulate_grad(n.in0, i, g[i] * (1.0 - yv[static_cast<std::size_t>(i)] * yv[static_cast<std::size_t>(i)]));
            break;
        }
        case Op::Relu: {
            auto xv = node_vals(n.in0);
            for (int i = 0; i < count; ++i)
                if (xv[static_cast<std::size_t>(i)] > 0.0) accumulate_grad(n.in0, i, g[i]);
            break;
        }
        case Op::Softmax: {
            auto yv = node_vals(id);
            double dot = 0.0;
            for (int i = 0; i < count; ++i) dot += g[i] * yv[static_cast<std::size_t>(i)];
            for (int i = 0; i < count; ++i)
                accumulate_grad(n.in0, i, yv[static_cast<std::size_t>(i)] * (g[i] - dot));
            break;
        }
        case Op::LogSoftmax: {
            auto yv = node_vals(id);
            double gsum = 0.0;
            for (int i = 0; i < count; ++i) gsum += g[i];
            for (int i = 0; i < count; ++i)
                accumulate_grad(n.in0, i, g[i] - std::exp(yv[static_cast<std::size_t>(i)]) * gsum);
            break;
        }
        case Op::L2Normalize: {
            auto xv = node_vals(n.in0);
            auto yv = node_vals(id);
            double sq = 0.0;
            for (double v : xv) sq += v * v;
            const double norm = std::sqrt(sq);
            if (norm > kNormGuard) {
                double dot = 0.0;
                for (int i = 0; i < count; ++i) dot += g[i] * yv[static_cast<std::size_t>(i)];
                for (int i = 0; i < count; ++i)
                    accumulate_grad(n.in0, i, (g[i] - yv[static_cast<std::size_t>(i)] * dot) / norm);
            } else {
                for (int i = 0; i < count; ++i) accumulate_grad(n.in0, i, g[i] / kNormGuard);
            }
            break;
        }
        case Op::Add: {
            const bool ga = rg(n.in0), gb = rg(n.in1);
            for (int i = 0; i < count; ++i) {
                if (ga) accumulate_grad(n.in0, i, g[i]);
                if (gb) accumulate_grad(n.in1, i, g[i]);
            }
            break;
        }
        case Op::Sub: {
            const bool ga = rg(n.in0), gb = rg(n.in1);
            for (int i = 0; i < count; ++i) {
                if (ga) accumulate_grad(n.in0, i, g[i]);
                if (gb) accumulate_grad(n.in1, i, -g[i]);
            }
            break;
        }
        case Op::Mul: {
            auto av = node_vals(n.in0);
            auto bv = node_vals(n.in1);
            const bool ga = rg(n.in0), gb = rg(n.in1);
            for (int i = 0; i < count; ++i) {
                if (ga) accumulate_grad(n.in0, i, g[i] * bv[static_cast<std::size_t>(i)]);
                if (gb) accumulate_grad(n.in1, i, g[i] * av[static_cast<std::size_t>(i)]);
            }
            break;
        }
        case Op::AddScalar: {
            for (int i = 0; i < count; ++i) accumulate_grad(n.in0, i, g[i]);
            break;
        }
        case Op::MulScalar: {
            for (int i = 0; i < count; ++i) accumulate_grad(n.in0, i, g[i] * n.darg);
            break;
        }
        case Op::Square: {
            auto av = node_vals(n.in0);
            for (int i = 0; i < count; ++i)
                accumulate_grad(n.in0, i, 2.0 * av[static_cast<std::size_t>(i)] * g[i]);
            break;
        }
        case Op::Sum: {
            const int m = nodes_[static_cast<std::size_t>(n.in0)].shape.numel();
            for (int i = 0; i < m; ++i) accumulate_grad(n.in0, i, g[0]);
            break;
        }
        case Op::Mean: {
            const int m = nodes_[static_cast<std::size_t>(n.in0)].shape.numel();
            const double gi = g[0] / static_cast<double>(m);
            for (int i = 0; i < m; ++i) accumulate_grad(n.in0, i, gi);
            break;
        }
        case Op::Max: {
            accumulate_grad(n.in0, n.iarg, g[0]);
            break;
        }
        case Op::Index: {
            accumulate_grad(n.in0, n.iarg, g[0]);
            break;
        }
        case Op::Stack: {
            for (int i = 0; i < n.varg_len; ++i) {
                const int pid = vargs_[static_cast<std::size_t>(n.varg_begin + i)];
                if (rg(pid)) accumulate_grad(pid, 0, g[i]);
            }
            break;
        }
        case Op::AddN: {
            for (int i = 0; i < n.varg_len; ++i) {
                const int pid = vargs_[static_cast<std::size_t>(n.varg_begin + i)];
                if (rg(pid)) accumulate_grad(pid, 0, g[0]);
            }
            break;
        }
        }
    }
}

}  // namespace treeqn
