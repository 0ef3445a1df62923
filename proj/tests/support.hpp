#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rafl/autodiff.hpp"

namespace rafl::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = scale * rng.normal();
    return t;
}

/// Builds a scalar from its inputs on the given tape.
using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Largest relative error between tape gradients and central differences
/// over every input element.
inline double max_grad_error(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5,
                             double floor = 1e-8) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (auto& t : inputs) vars.push_back(tape.leaf(t));
        Var out = f(tape, vars);
        tape.backward(out);
        for (auto& v : vars) analytic.push_back(tape.grad(v));
    }
    auto eval = [&] {
        Tape tape;
        std::vector<Var> vars;
        for (auto& t : inputs) vars.push_back(tape.leaf(t));
        return f(tape, vars).value().item();
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double up = eval();
            inputs[k][i] = orig - h;
            const double down = eval();
            inputs[k][i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
        }
    }
    return worst;
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// gets a distinct gradient.
inline Var probe_sum(Tape& tape, Var x, std::uint64_t seed = 99) {
    return ops::sum(ops::mul(x, tape.constant(random_tensor(x.shape(), seed))));
}

} // namespace rafl::test
