#include "advvae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "advvae/error.hpp"

namespace advvae {

const char* op_name(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::Parameter: return "parameter";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::AddRow: return "add_row";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::Tanh: return "tanh";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Relu: return "relu";
        case OpKind::Square: return "square";
        case OpKind::Dropout: return "dropout";
        case OpKind::L2NormalizeRows: return "l2_normalize_rows";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::LogSoftmaxRows: return "log_softmax_rows";
        case OpKind::Sum: return "sum";
        case OpKind::SliceCols: return "slice_cols";
        case OpKind::Grl: return "grl";
        case OpKind::GaussianSample: return "gaussian_sample";
    }
    return "?";
}

const Tensor& Var::value() const {
    return tape_->node(id_).value;
}

const Tensor& Var::grad() const {
    return tape_->node(id_).grad;
}

Var Tape::parameter(Tensor value) {
    TapeNode n;
    n.kind = OpKind::Parameter;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Tape::constant(Tensor value) {
    TapeNode n;
    n.kind = OpKind::Constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::push(TapeNode node) {
    for (std::uint8_t i = 0; i < node.input_count; ++i) {
        if (node.inputs[i] >= nodes_.size()) {
            throw ContractError("tape node input refers to a later node");
        }
        node.requires_grad = node.requires_grad || nodes_[node.inputs[i]].requires_grad;
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::ensure_grad(TapeNode& node) {
    if (node.grad.shape() != node.value.shape() || node.grad.numel() != node.value.numel()) {
        node.grad = Tensor(node.value.shape());
    }
}

void Tape::zero_grad() {
    for (auto& n : nodes_) {
        if (n.requires_grad) {
            ensure_grad(n);
            n.grad.fill(0.0);
        }
    }
}

namespace {

// Row sums of a matrix.
std::vector<double> row_sums(const Tensor& t) {
    const std::size_t m = t.rows(), n = t.cols();
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i] += t[i * n + j];
        }
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace

void Tape::backward(Var loss) {
    if (loss.id() >= nodes_.size() || &loss.tape() != this) {
        throw ContractError("backward: loss does not belong to this tape");
    }
    if (nodes_[loss.id()].value.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_string(nodes_[loss.id()].value.shape()));
    }
    for (auto& n : nodes_) {
        if (!n.requires_grad) {
            continue;
        }
        ensure_grad(n);
        if (n.kind != OpKind::Parameter) {
            n.grad.fill(0.0);
        }
    }
    if (!nodes_[loss.id()].requires_grad) {
        return;
    }
    nodes_[loss.id()].grad[0] += 1.0;

    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        TapeNode& n = nodes_[id];
        if (!n.requires_grad || n.kind == OpKind::Parameter || n.kind == OpKind::Constant) {
            continue;
        }
        const Tensor& g = n.grad;
        TapeNode* a = &nodes_[n.inputs[0]];
        TapeNode* b = n.input_count > 1 ? &nodes_[n.inputs[1]] : nullptr;
        const bool ga = a->requires_grad;
        const bool gb = b && b->requires_grad;
        const std::size_t count = n.value.numel();

        switch (n.kind) {
            case OpKind::MatMul:
                if (ga) kernels::matmul_grad_a(g, b->value, a->grad);
                if (gb) kernels::matmul_grad_b(a->value, g, b->grad);
                break;
            case OpKind::Add:
                for (std::size_t i = 0; i < count; ++i) {
                    if (ga) a->grad[i] += g[i];
                    if (gb) b->grad[i] += g[i];
                }
                break;
            case OpKind::AddRow: {
                const std::size_t cols = n.value.cols();
                for (std::size_t i = 0; i < count; ++i) {
                    if (ga) a->grad[i] += g[i];
                    if (gb) b->grad[i % cols] += g[i];
                }
                break;
            }
            case OpKind::Mul:
                for (std::size_t i = 0; i < count; ++i) {
                    if (ga) a->grad[i] += g[i] * b->value[i];
                    if (gb) b->grad[i] += g[i] * a->value[i];
                }
                break;
            case OpKind::Scale:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += g[i] * n.scalar;
                break;
            case OpKind::AddScalar:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += g[i];
                break;
            case OpKind::Tanh:
                for (std::size_t i = 0; i < count; ++i) {
                    const double y = n.value[i];
                    a->grad[i] += g[i] * (1.0 - y * y);
                }
                break;
            case OpKind::Exp:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += g[i] * n.value[i];
                break;
            case OpKind::Log:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += g[i] / a->value[i];
                break;
            case OpKind::Relu:
                for (std::size_t i = 0; i < count; ++i) {
                    if (a->value[i] > 0.0) a->grad[i] += g[i];
                }
                break;
            case OpKind::Square:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += 2.0 * a->value[i] * g[i];
                break;
            case OpKind::Dropout:
                for (std::size_t i = 0; i < count; ++i) a->grad[i] += g[i] * n.aux[i];
                break;
            case OpKind::L2NormalizeRows: {
                const std::size_t m = n.value.rows(), cols = n.value.cols();
                for (std::size_t r = 0; r < m; ++r) {
                    const double norm = n.aux[r];
                    if (norm == 0.0) {
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += n.value[r * cols + c] * g[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        a->grad[i] += (g[i] - n.value[i] * dot) / norm;
                    }
                }
                break;
            }
            case OpKind::SoftmaxRows: {
                const std::size_t m = n.value.rows(), cols = n.value.cols();
                for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += n.value[r * cols + c] * g[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        a->grad[i] += n.value[i] * (g[i] - dot);
                    }
                }
                break;
            }
            case OpKind::LogSoftmaxRows: {
                const std::size_t m = n.value.rows(), cols = n.value.cols();
                const std::vector<double> gsum = row_sums(g);
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        a->grad[i] += g[i] - std::exp(n.value[i]) * gsum[r];
                    }
                }
                break;
            }
            case OpKind::Sum: {
                const double g0 = g[0];
                for (auto& v : a->grad.values()) v += g0;
                break;
            }
            case OpKind::SliceCols: {
                const std::size_t m = n.value.rows(), cols = n.value.cols(), src_cols = a->value.cols();
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        a->grad[r * src_cols + n.offset + c] += g[r * cols + c];
                    }
                }
                break;
            }
            case OpKind::Grl:
                // lambda == 0 contributes nothing, not a signed zero.
                if (n.scalar != 0.0) {
                    for (std::size_t i = 0; i < count; ++i) a->grad[i] += -n.scalar * g[i];
                }
                break;
            case OpKind::GaussianSample:
                for (std::size_t i = 0; i < count; ++i) {
                    if (ga) a->grad[i] += g[i];
                    if (gb) b->grad[i] += g[i] * n.aux[i] * 0.5 * std::exp(0.5 * b->value[i]);
                }
                break;
            case OpKind::Parameter:
            case OpKind::Constant:
                break;
        }
    }
}

namespace ops {

namespace {

TapeNode unary(OpKind kind, Var a, Tensor value) {
    TapeNode n;
    n.kind = kind;
    n.inputs = {a.id(), 0};
    n.input_count = 1;
    n.value = std::move(value);
    return n;
}

TapeNode binary(OpKind kind, Var a, Var b, Tensor value) {
    if (&a.tape() != &b.tape()) {
        throw ContractError(std::string(op_name(kind)) + ": operands on different tapes");
    }
    TapeNode n;
    n.kind = kind;
    n.inputs = {a.id(), b.id()};
    n.input_count = 2;
    n.value = std::move(value);
    return n;
}

template <typename F>
Tensor map(const Tensor& x, F f) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    return out;
}

}  // namespace

Var matmul(Var a, Var b) {
    Tensor out;
    kernels::matmul(a.value(), b.value(), out);
    return a.tape().push(binary(OpKind::MatMul, a, b, std::move(out)));
}

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return a.tape().push(binary(OpKind::Add, a, b, std::move(out)));
}

Var add_row(Var a, Var row) {
    const Tensor& x = a.value();
    const Tensor& r = row.value();
    if (r.numel() != x.cols() || (r.rank() == 2 && r.rows() != 1)) {
        throw DimensionError("add_row: " + shape_string(x.shape()) + " + " + shape_string(r.shape()));
    }
    Tensor out = x;
    const std::size_t cols = x.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += r[i % cols];
    return a.tape().push(binary(OpKind::AddRow, a, row, std::move(out)));
}

Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return a.tape().push(binary(OpKind::Mul, a, b, std::move(out)));
}

Var scale(Var a, double factor) {
    TapeNode n = unary(OpKind::Scale, a, map(a.value(), [factor](double v) { return v * factor; }));
    n.scalar = factor;
    return a.tape().push(std::move(n));
}

Var add_scalar(Var a, double value) {
    TapeNode n = unary(OpKind::AddScalar, a, map(a.value(), [value](double v) { return v + value; }));
    n.scalar = value;
    return a.tape().push(std::move(n));
}

Var tanh(Var a) {
    return a.tape().push(unary(OpKind::Tanh, a, map(a.value(), [](double v) { return std::tanh(v); })));
}

Var exp(Var a) {
    return a.tape().push(unary(OpKind::Exp, a, map(a.value(), [](double v) { return std::exp(v); })));
}

Var log(Var a) {
    for (double v : a.value().data()) {
        if (!(v > 0.0)) {
            throw DomainError("log: non-positive input " + std::to_string(v));
        }
    }
    return a.tape().push(unary(OpKind::Log, a, map(a.value(), [](double v) { return std::log(v); })));
}

Var relu(Var a) {
    return a.tape().push(unary(OpKind::Relu, a, map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; })));
}

Var square(Var a) {
    return a.tape().push(unary(OpKind::Square, a, map(a.value(), [](double v) { return v * v; })));
}

Var dropout(Var a, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw DomainError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        return a;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor mask(a.value().shape());
    for (auto& m : mask.values()) {
        m = rng.uniform() < p ? 0.0 : keep_scale;
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    TapeNode n = unary(OpKind::Dropout, a, std::move(out));
    n.aux = std::move(mask);
    n.scalar = p;
    return a.tape().push(std::move(n));
}

Var l2_normalize_rows(Var a) {
    const Tensor& x = a.value();
    if (!x.all_finite()) {
        throw DomainError("l2_normalize_rows: non-finite input");
    }
    const std::size_t m = x.rows(), cols = x.cols();
    Tensor out(x.shape());
    Tensor norms(Shape{m});
    for (std::size_t r = 0; r < m; ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += x[r * cols + c] * x[r * cols + c];
        const double norm = std::sqrt(ss);
        norms[r] = norm;
        if (norm > 0.0) {
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / norm;
        }
    }
    TapeNode n = unary(OpKind::L2NormalizeRows, a, std::move(out));
    n.aux = std::move(norms);
    return a.tape().push(std::move(n));
}

namespace {

Tensor log_softmax_values(const Tensor& x) {
    const std::size_t m = x.rows(), cols = x.cols();
    Tensor out(x.shape());
    for (std::size_t r = 0; r < m; ++r) {
        const auto row = x.row_span(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
    }
    return out;
}

}  // namespace

Var softmax_rows(Var a) {
    Tensor out = log_softmax_values(a.value());
    for (auto& v : out.values()) v = std::exp(v);
    return a.tape().push(unary(OpKind::SoftmaxRows, a, std::move(out)));
}

Var log_softmax_rows(Var a) {
    return a.tape().push(unary(OpKind::LogSoftmaxRows, a, log_softmax_values(a.value())));
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.tape().push(unary(OpKind::Sum, a, Tensor::scalar(s)));
}

Var mean(Var a) {
    const std::size_t n = a.value().numel();
    if (n == 0) {
        throw ContractError("mean of an empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Tensor& x = a.value();
    const std::size_t m = x.rows(), cols = x.cols();
    if (begin + count > cols) {
        throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside " + std::to_string(cols) + " columns");
    }
    Tensor out = Tensor::matrix(m, count);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x[r * cols + begin + c];
    }
    TapeNode n = unary(OpKind::SliceCols, a, std::move(out));
    n.offset = begin;
    return a.tape().push(std::move(n));
}

Var grl(Var a, GrlConfig cfg) {
    if (!(cfg.lambda >= 0.0)) {
        throw DomainError("grl: lambda must be non-negative");
    }
    TapeNode n = unary(OpKind::Grl, a, a.value());
    n.scalar = cfg.lambda;
    return a.tape().push(std::move(n));
}

Var gaussian_sample(Var mu, Var log_var, Tensor eps) {
    require_same_shape(mu.value(), log_var.value(), "gaussian_sample");
    require_same_shape(mu.value(), eps, "gaussian_sample noise");
    Tensor out = mu.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += std::exp(0.5 * log_var.value()[i]) * eps[i];
    }
    TapeNode n = binary(OpKind::GaussianSample, mu, log_var, std::move(out));
    n.aux = std::move(eps);
    return mu.tape().push(std::move(n));
}

Var gaussian_sample(Var mu, Var log_var, Rng& rng) {
    require_same_shape(mu.value(), log_var.value(), "gaussian_sample");
    Tensor eps(mu.value().shape());
    for (auto& e : eps.values()) e = rng.normal();
    return gaussian_sample(mu, log_var, std::move(eps));
}

}  // namespace ops

}  // namespace advvae
