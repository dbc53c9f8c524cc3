#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "deviant/tensor.hpp"

namespace deviant {

// Handle to a node recorded on a Tape.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
};

// Reverse-mode automatic differentiation over a linear tape.
//
// Nodes are appended in evaluation order, so the tape is topologically sorted
// by construction and backward() is a single reverse sweep. Values are
// immutable once recorded. Every op validates that its output is finite and
// throws NumericError otherwise.
//
// Broadcasting is deliberately narrow: elementwise binary ops require equal
// shapes; add_row/mul_row broadcast a 1xN row over an MxN matrix.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    // Leaf that never receives a gradient.
    Var constant(Tensor<T> value);
    // Leaf bound to an external tensor. If param.requires_grad, backward()
    // accumulates into param.grad. The tensor must outlive backward().
    Var parameter(Tensor<T>& param);

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    // Gradient of the last backward() loss w.r.t. v; empty if none flowed.
    const std::vector<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
    std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var scale(Var a, T factor);
    Var add_scalar(Var a, T offset);
    Var add_row(Var x, Var row);
    Var mul_row(Var x, Var row);
    Var gelu(Var x);
    // Softmax over each row after adding an optional same-shape constant bias.
    // Rows whose every bias entry is <= kMaskedBias are still normalized and
    // counted in masked_rows().
    Var softmax_lastdim(Var x, const Tensor<T>* bias = nullptr);
    Var log(Var x);
    Var pow_scalar(Var x, T exponent);
    // Gradient passes through for lo <= x <= hi and is zero outside.
    Var clamp(Var x, T lo, T hi);
    // 1/x, or 0 where |x| < threshold (with zero gradient there).
    Var safe_reciprocal(Var x, T threshold);
    // Each row divided by its L2 norm; rows with norm < eps map to zero.
    Var normalize_rows(Var x, T eps = T(1e-12));
    // MxN, MxN -> Mx1 of per-row inner products.
    Var row_dot(Var a, Var b);
    Var sum(Var x);
    Var mean(Var x);
    Var slice_cols(Var x, std::size_t begin, std::size_t end);
    Var concat_cols(std::span<const Var> parts);
    // Picks x.data[i] for each flat index; result is Kx1.
    Var gather(Var x, std::vector<std::size_t> flat_indices);
    // Mean of the k largest entries (ties broken by lower flat index).
    Var topk_mean(Var x, std::size_t k);

    // Reverse sweep from a 1-element node. Clears previous tape gradients
    // first; bound parameter gradients are accumulated, not overwritten.
    void backward(Var loss);

    std::size_t masked_rows() const { return masked_rows_; }

    static constexpr T kMaskedBias = T(-1e8);

private:
    struct Node {
        std::string op;
        Tensor<T> value;
        std::vector<T> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        Tensor<T>* bound = nullptr;
        std::function<void(Tape&, std::size_t)> backward;
    };

    Var push(std::string op, Tensor<T> value, std::vector<std::size_t> inputs,
             std::function<void(Tape&, std::size_t)> backward);
    const Node& node(Var v) const { return nodes_.at(v.id); }
    // Gradient buffer of input node `id`, allocated on first touch.
    std::vector<T>& grad_buffer(std::size_t id);

    std::vector<Node> nodes_;
    std::size_t masked_rows_ = 0;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace deviant
