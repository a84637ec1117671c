#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "advvae/rng.hpp"
#include "advvae/tensor.hpp"

namespace advvae {

enum class OpKind : std::uint8_t {
    Parameter,
    Constant,
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Exp,
    Log,
    Relu,
    Square,
    Dropout,
    L2NormalizeRows,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,
    SliceCols,
    Grl,
    GaussianSample,
};

const char* op_name(OpKind kind) noexcept;

struct GrlConfig {
    double lambda = 1.0;
};

struct TapeNode {
    OpKind kind = OpKind::Constant;
    std::array<std::size_t, 2> inputs{};
    std::uint8_t input_count = 0;
    Tensor value;
    Tensor grad;       // allocated on first backward; same shape as value
    Tensor aux;        // dropout mask, sampling noise, row norms
    double scalar = 0.0;
    std::size_t offset = 0;  // SliceCols start column
    bool requires_grad = false;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is already topologically sorted. Single-threaded; one tape per training task.
class Tape {
public:
    Var parameter(Tensor value);
    Var constant(Tensor value);

    const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Accumulates d(loss)/d(node) into every node that requires a gradient.
    // Intermediate adjoints are recomputed on each call; parameter gradients
    // accumulate across calls until zero_grad().
    void backward(Var loss);
    void zero_grad();

    // Used by the op builders below.
    Var push(TapeNode node);
    TapeNode& mutable_node(std::size_t id) { return nodes_[id]; }

private:
    void ensure_grad(TapeNode& node);

    std::vector<TapeNode> nodes_;
};

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// a (m x n) plus a 1 x n row broadcast over every row.
Var add_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double value);
Var tanh(Var a);
Var exp(Var a);
// Requires strictly positive inputs.
Var log(Var a);
Var relu(Var a);
Var square(Var a);
// Inverted dropout. Identity when !training or p == 0.
Var dropout(Var a, double p, bool training, Rng& rng);
// Rows with zero norm map to zero rows.
Var l2_normalize_rows(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var sum(Var a);
Var mean(Var a);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
// Identity forward; backward multiplies the incoming gradient by -lambda.
Var grl(Var a, GrlConfig cfg);
// z = mu + exp(0.5 * log_var) * eps, eps ~ N(0, I) drawn from rng.
Var gaussian_sample(Var mu, Var log_var, Rng& rng);
// Same with caller-supplied noise; eps = 0 gives z = mu.
Var gaussian_sample(Var mu, Var log_var, Tensor eps);

}  // namespace ops

}  // namespace advvae
