#include "sedt/autograd.hpp"

#include "sedt/core.hpp"

#include <algorithm>
#include <cmath>

namespace sedt::ag {

Var Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::input(Matrix value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        return Var(this, it->second);
    }
    Node n;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size() - 1);
    param_nodes_.emplace(&p, id);
    return Var(this, id);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (const auto& in : inputs) {
        if (in.tape_ != this) {
            throw ValidationError("autograd: input belongs to a different tape");
        }
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in.id_)].requires_grad;
    }
    if (n.requires_grad) {
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id_)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Var& loss, double seed) {
    if (loss.tape_ != this) {
        throw ValidationError("autograd: loss belongs to a different tape");
    }
    auto& root = nodes_[static_cast<std::size_t>(loss.id_)];
    if (root.value.size() != 1) {
        throw ValidationError("autograd: backward needs a scalar loss");
    }
    if (!root.requires_grad) return;
    ensure_grad(root);
    root.grad(0, 0) += seed;

    for (int i = loss.id_; i >= 0; --i) {
        auto& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
        if (n.param == nullptr || !n.has_grad) continue;
        if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
            n.param->zero_grad();
        }
        n.param->grad += n.grad;
    }
}

Matrix Tape::grad(const Var& v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id_)];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ValidationError(std::string("autograd: shape mismatch in ") + op);
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ValidationError("autograd: shape mismatch in matmul");
    Tape& t = *a.tape();
    Matrix out = a.value() * b.value();
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate_expr(b, a.value().transpose() * g);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw ValidationError("autograd: shape mismatch in matmul_nt");
    Tape& t = *a.tape();
    Matrix out = a.value() * b.value().transpose();
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g * b.value());
        if (t.requires_grad(b)) t.accumulate_expr(b, g.transpose() * a.value());
    });
}

Var transpose(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = a.value().transpose();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate_expr(a, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tape& t = *a.tape();
    Matrix out = a.value() + b.value();
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tape& t = *a.tape();
    Matrix out = a.value() - b.value();
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate_expr(b, -g);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tape& t = *a.tape();
    Matrix out = a.value().cwiseProduct(b.value());
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate_expr(b, g.cwiseProduct(a.value()));
    });
}

Var scale(const Var& a, double s) {
    Tape& t = *a.tape();
    Matrix out = a.value() * s;
    return t.record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate_expr(a, g * s); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("autograd: shape mismatch in add_row");
    Tape& t = *a.tape();
    Matrix out = a.value().rowwise() + row.value().row(0);
    return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate_expr(row, g.colwise().sum());
    });
}

Var add_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) throw ValidationError("autograd: shape mismatch in add_col");
    Tape& t = *a.tape();
    Matrix out = a.value().colwise() + col.value().col(0);
    return t.record(std::move(out), {a, col}, [a, col](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(col)) t.accumulate_expr(col, g.rowwise().sum());
    });
}

Var scale_cols(const Var& a, const RowVector& weights) {
    if (weights.size() != a.cols()) throw ValidationError("autograd: shape mismatch in scale_cols");
    Tape& t = *a.tape();
    Matrix out = a.value() * weights.asDiagonal();
    return t.record(std::move(out), {a}, [a, weights](Tape& t, const Matrix& g) {
        t.accumulate_expr(a, g * weights.asDiagonal());
    });
}

Var relu(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = a.value().cwiseMax(0.0);
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate_expr(a, (a.value().array() > 0.0).select(g.array(), 0.0).matrix());
    });
}

Var sigmoid(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    Matrix y = out;
    return t.record(std::move(out), {a}, [a, y = std::move(y)](Tape& t, const Matrix& g) {
        t.accumulate_expr(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
}

Var log_clamped(const Var& a, double floor) {
    Tape& t = *a.tape();
    Matrix out = a.value().unaryExpr([floor](double x) { return std::log(std::max(x, floor)); });
    return t.record(std::move(out), {a}, [a, floor](Tape& t, const Matrix& g) {
        const Matrix& x = a.value();
        t.accumulate_expr(a, (x.array() > floor).select(g.array() / x.array(), 0.0).matrix());
    });
}

Var softmax_rows(const Var& a, std::span<const char> key_mask) {
    if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != a.cols()) {
        throw ValidationError("autograd: key mask length mismatch in softmax_rows");
    }
    Tape& t = *a.tape();
    const Matrix& x = a.value();
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            if (key_mask.empty() || !key_mask[static_cast<std::size_t>(c)]) mx = std::max(mx, x(r, c));
        }
        double total = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const bool masked = !key_mask.empty() && key_mask[static_cast<std::size_t>(c)];
            y(r, c) = masked ? 0.0 : std::exp(x(r, c) - mx);
            total += y(r, c);
        }
        if (total > 0.0) y.row(r) /= total;
    }
    Matrix y_copy = y;
    return t.record(std::move(y), {a}, [a, y = std::move(y_copy)](Tape& t, const Matrix& g) {
        Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
        Matrix dx = y.cwiseProduct((g.colwise() - dots));
        t.accumulate(a, dx);
    });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index cols = a.cols();
    if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
        throw ValidationError("autograd: shape mismatch in layer_norm");
    }
    Tape& t = *a.tape();
    const Matrix& x = a.value();
    Matrix xhat(x.rows(), cols);
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return t.record(std::move(out), {a, gamma, beta},
                    [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Matrix& g) {
                        if (t.requires_grad(gamma)) t.accumulate_expr(gamma, g.cwiseProduct(xhat).colwise().sum());
                        if (t.requires_grad(beta)) t.accumulate_expr(beta, g.colwise().sum());
                        if (!t.requires_grad(a)) return;
                        const auto n = static_cast<double>(xhat.cols());
                        Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                        Eigen::VectorXd s1 = dxhat.rowwise().sum();
                        Eigen::VectorXd s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
                        Matrix dx(xhat.rows(), xhat.cols());
                        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                            dx.row(r) = (inv_std(r) / n) *
                                        (n * dxhat.row(r).array() - s1(r) - xhat.row(r).array() * s2(r));
                        }
                        t.accumulate(a, dx);
                    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw ValidationError("autograd: slice_rows out of range");
    Tape& t = *a.tape();
    Matrix out = a.value().middleRows(start, count);
    return t.record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleRows(start, count) = g;
        t.accumulate(a, full);
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw ValidationError("autograd: slice_cols out of range");
    Tape& t = *a.tape();
    Matrix out = a.value().middleCols(start, count);
    return t.record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleCols(start, count) = g;
        t.accumulate(a, full);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("autograd: concat_rows of nothing");
    Tape& t = *parts.front().tape();
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ValidationError("autograd: shape mismatch in concat_rows");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [inputs](Tape& t, const Matrix& g) {
        Eigen::Index at = 0;
        for (const auto& p : inputs) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleRows(at, p.rows()));
            at += p.rows();
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("autograd: concat_cols of nothing");
    Tape& t = *parts.front().tape();
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ValidationError("autograd: shape mismatch in concat_cols");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [inputs](Tape& t, const Matrix& g) {
        Eigen::Index at = 0;
        for (const auto& p : inputs) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleCols(at, p.cols()));
            at += p.cols();
        }
    });
}

Var sum(const Var& a) {
    Tape& t = *a.tape();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate_expr(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    if (terms.empty() || terms.size() != weights.size()) throw ValidationError("autograd: weighted_sum arity");
    Tape& t = *terms.front().tape();
    Matrix out = Matrix::Zero(1, 1);
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) throw ValidationError("autograd: weighted_sum needs scalars");
        out(0, 0) += weights[i] * terms[i].value()(0, 0);
    }
    std::vector<Var> inputs(terms.begin(), terms.end());
    std::vector<double> w(weights.begin(), weights.end());
    return t.record(std::move(out), terms, [inputs, w](Tape& t, const Matrix& g) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            t.accumulate_expr(inputs[i], Matrix::Constant(1, 1, w[i] * g(0, 0)));
        }
    });
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw ValidationError("autograd: dropout rate must be < 1");
    Tape& t = *a.tape();
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix mask(a.rows(), a.cols());
    const double s = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : 0.0;
    Matrix out = a.value().cwiseProduct(mask);
    return t.record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, const Matrix& g) {
        t.accumulate_expr(a, g.cwiseProduct(mask));
    });
}

namespace {

Matrix im2col(const Matrix& x, const Conv2dGeometry& g) {
    const int ho = g.out_height(), wo = g.out_width();
    Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(g.in_channels) * g.kernel_h * g.kernel_w,
                               static_cast<Eigen::Index>(ho) * wo);
    for (int c = 0; c < g.in_channels; ++c) {
        for (int ki = 0; ki < g.kernel_h; ++ki) {
            for (int kj = 0; kj < g.kernel_w; ++kj) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * g.kernel_h + ki) * g.kernel_w + kj;
                double* dst = cols.row(row).data();
                for (int i = 0; i < ho; ++i) {
                    const int hi = i * g.stride_h - g.pad_h + ki;
                    if (hi < 0 || hi >= g.height) continue;
                    const double* src = x.row(c).data() + static_cast<Eigen::Index>(hi) * g.width;
                    for (int j = 0; j < wo; ++j) {
                        const int wj = j * g.stride_w - g.pad_w + kj;
                        if (wj < 0 || wj >= g.width) continue;
                        dst[static_cast<Eigen::Index>(i) * wo + j] = src[wj];
                    }
                }
            }
        }
    }
    return cols;
}

Matrix col2im(const Matrix& cols, const Conv2dGeometry& g) {
    const int ho = g.out_height(), wo = g.out_width();
    Matrix x = Matrix::Zero(g.in_channels, static_cast<Eigen::Index>(g.height) * g.width);
    for (int c = 0; c < g.in_channels; ++c) {
        for (int ki = 0; ki < g.kernel_h; ++ki) {
            for (int kj = 0; kj < g.kernel_w; ++kj) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * g.kernel_h + ki) * g.kernel_w + kj;
                const double* src = cols.row(row).data();
                for (int i = 0; i < ho; ++i) {
                    const int hi = i * g.stride_h - g.pad_h + ki;
                    if (hi < 0 || hi >= g.height) continue;
                    double* dst = x.row(c).data() + static_cast<Eigen::Index>(hi) * g.width;
                    for (int j = 0; j < wo; ++j) {
                        const int wj = j * g.stride_w - g.pad_w + kj;
                        if (wj < 0 || wj >= g.width) continue;
                        dst[wj] += src[static_cast<Eigen::Index>(i) * wo + j];
                    }
                }
            }
        }
    }
    return x;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dGeometry& g) {
    if (x.rows() != g.in_channels || x.cols() != static_cast<Eigen::Index>(g.height) * g.width) {
        throw ValidationError("autograd: conv2d input shape mismatch");
    }
    if (weight.cols() != static_cast<Eigen::Index>(g.in_channels) * g.kernel_h * g.kernel_w ||
        bias.rows() != weight.rows() || bias.cols() != 1) {
        throw ValidationError("autograd: conv2d weight shape mismatch");
    }
    if (g.out_height() < 1 || g.out_width() < 1) {
        throw ValidationError("autograd: conv2d produces an empty output");
    }
    Tape& t = *x.tape();
    Matrix cols = im2col(x.value(), g);
    Matrix out = weight.value() * cols;
    out.colwise() += bias.value().col(0);
    return t.record(std::move(out), {x, weight, bias},
                    [x, weight, bias, g, cols = std::move(cols)](Tape& t, const Matrix& grad) {
                        if (t.requires_grad(weight)) t.accumulate_expr(weight, grad * cols.transpose());
                        if (t.requires_grad(bias)) t.accumulate_expr(bias, grad.rowwise().sum());
                        if (t.requires_grad(x)) {
                            Matrix dcols = weight.value().transpose() * grad;
                            t.accumulate(x, col2im(dcols, g));
                        }
                    });
}

}  // namespace sedt::ag
