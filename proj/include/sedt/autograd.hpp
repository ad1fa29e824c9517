#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Parameters are owned
// outside the tape (see Parameter); after Tape::backward their gradients are
// accumulated into Parameter::grad. A tape is single-use and single-threaded.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace sedt::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// A trainable tensor with its accumulated gradient.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    /// Called during backward with the node's output gradient already available.
    using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Non-differentiable input.
    Var constant(Matrix value);
    /// Differentiable input whose gradient can be read back with grad().
    Var input(Matrix value);
    /// Leaf bound to an external parameter; repeated calls return the same node.
    Var parameter(Parameter& p);

    /// Records an op. `backward` is skipped when no input requires a gradient.
    Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
    Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

    const Matrix& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id_)].value; }
    bool requires_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id_)].requires_grad; }

    /// Adds `g` to the gradient of `v` (no-op for constants).
    void accumulate(const Var& v, const Matrix& g);
    template <typename Expr>
    void accumulate_expr(const Var& v, const Expr& g) {
        auto& n = nodes_[static_cast<std::size_t>(v.id_)];
        if (!n.requires_grad) return;
        ensure_grad(n);
        n.grad += g;
    }

    /// Back-propagates from a 1x1 node, then adds leaf gradients into the bound parameters.
    void backward(const Var& loss, double seed = 1.0);

    /// Gradient of an input/parameter node after backward (zero matrix if untouched).
    Matrix grad(const Var& v) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
        Parameter* param = nullptr;
    };

    static void ensure_grad(Node& n) {
        if (!n.has_grad) {
            n.grad.setZero(n.value.rows(), n.value.cols());
            n.has_grad = true;
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// ---- elementwise and linear algebra -------------------------------------

Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds a 1 x C row to every row of a (R x C).
Var add_row(const Var& a, const Var& row);
/// Adds a R x 1 column to every column of a (R x C).
Var add_col(const Var& a, const Var& col);
/// Multiplies column j of a by the constant weights[j].
Var scale_cols(const Var& a, const RowVector& weights);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log_clamped(const Var& a, double floor);

/// Row-wise softmax. Columns with key_mask[j] != 0 receive exactly zero weight.
Var softmax_rows(const Var& a, std::span<const char> key_mask = {});

/// Row-wise layer normalization with learned gain/bias (1 x C each).
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

/// Sum of all entries as a 1x1 node.
Var sum(const Var& a);
/// Weighted sum of 1x1 nodes.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

/// Inverted dropout; identity when rate == 0.
Var dropout(const Var& a, double rate, std::mt19937_64& rng);

// ---- convolution ---------------------------------------------------------

struct Conv2dGeometry {
    int in_channels = 1;
    int height = 1;  // time
    int width = 1;   // frequency
    int kernel_h = 3;
    int kernel_w = 3;
    int stride_h = 1;
    int stride_w = 1;
    int pad_h = 1;
    int pad_w = 1;

    int out_height() const { return (height + 2 * pad_h - kernel_h) / stride_h + 1; }
    int out_width() const { return (width + 2 * pad_w - kernel_w) / stride_w + 1; }
};

/// 2-D convolution. `x` is C_in x (H*W) with spatial index h*W + w; `weight`
/// is C_out x (C_in*kh*kw); `bias` is C_out x 1. Output is C_out x (Ho*Wo).
Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dGeometry& g);

}  // namespace sedt::ag
