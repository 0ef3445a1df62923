#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rafl/rng.hpp"
#include "rafl/tensor.hpp"

namespace rafl {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

using GradientMap = std::map<std::string, Tensor>;

/// Reverse-mode recorder. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and backward is a single reverse sweep.
class Tape {
public:
    /// Receives the output gradient and one slot per input: a pointer to that
    /// input's gradient accumulator, or nullptr when the input needs none.
    using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_inputs)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable leaf. Leaves with a non-empty path show up in the
    /// gradient map returned by backward().
    Var leaf(Tensor value, std::string path = {});
    /// Non-differentiable input.
    Var constant(Tensor value);
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps every node in reverse. Gradients
    /// accumulate by summation at fan-out; each leaf receives exactly one total.
    GradientMap backward(Var loss);

    /// Gradient of the last backward() loss with respect to leaf v; zeros if v
    /// did not influence the loss. Interior gradients are released during the
    /// sweep.
    Tensor grad(Var v) const;

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        std::string path;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

/// Attention-style bias: 0 where attention is allowed, this value where it is not.
inline constexpr double kMaskBias = -1e9;

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// x[..., n] + bias[n]
Var add_bias(Var x, Var bias);

/// Batched matrix product. a is [..., m, k], b is [..., k, n]; batch extents
/// must match exactly, or one operand may be a plain matrix broadcast over
/// the other's batch.
Var matmul(Var a, Var b);
Var transpose_last2(Var a);
Var reshape(Var a, Shape shape);
/// [a, b, c, d] -> [a, c, b, d]
Var swap_axes_12(Var a);
Var concat_last(std::span<const Var> parts);

/// Row softmax over the last axis with per-row max subtraction. The optional
/// additive mask is broadcast (numpy rules, right aligned) onto x.
Var softmax_rows(Var x, const Tensor* mask = nullptr);
/// Biased variance, eps inside the square root.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// x·Φ(x) with the exact Gaussian CDF.
Var gelu(Var x);
Var relu(Var x);
/// Inverted dropout; identity when !training or rate == 0.
Var dropout(Var x, double rate, Rng* rng, bool training);

/// Rows of a 2-D table selected by index: out[i] = table[rows[i]].
Var take_rows(Var table, std::span<const std::size_t> rows);

Var sum(Var x);
Var mean(Var x);
/// Mean over rows of -log softmax(logits)[row, label].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

} // namespace ops

/// Broadcasts t to shape (numpy rules, right aligned).
Tensor broadcast_to(const Tensor& t, const Shape& shape);

} // namespace rafl
