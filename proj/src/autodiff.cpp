#include "rafl/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "rafl/errors.hpp"

namespace rafl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

const Tensor& Var::value() const {
    if (!tape) throw UsageError("Var is not bound to a tape");
    return tape->value(id);
}

Var Tape::leaf(Tensor value, std::string path) {
    nodes_.push_back(Node{std::move(value), {}, {}, std::move(path), true});
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto id : inputs) {
        if (id >= nodes_.size()) throw UsageError("tape input refers to a later node");
        needs = needs || nodes_[id].requires_grad;
    }
    Node node{std::move(value), std::move(inputs), {}, {}, needs};
    if (needs) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

GradientMap Tape::backward(Var loss) {
    if (loss.tape != this) throw UsageError("loss was not recorded on this tape");
    if (value(loss.id).size() != 1) {
        throw UsageError("backward() needs a scalar loss, got shape " + to_string(value(loss.id).shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    if (!nodes_[loss.id].requires_grad) return {};
    grads_[loss.id] = Tensor(value(loss.id).shape(), 1.0);

    std::vector<Tensor*> slots;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.backward || grads_[i].empty()) continue;
        slots.clear();
        for (auto in : node.inputs) {
            if (!nodes_[in].requires_grad) {
                slots.push_back(nullptr);
                continue;
            }
            if (grads_[in].empty()) grads_[in] = Tensor::zeros(nodes_[in].value.shape());
            slots.push_back(&grads_[in]);
        }
        node.backward(grads_[i], slots);
        // Interior gradients are not needed once propagated.
        if (!node.inputs.empty()) grads_[i] = Tensor{};
    }

    GradientMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& node = nodes_[i];
        if (node.path.empty() || !node.requires_grad) continue;
        Tensor g = grads_[i].empty() ? Tensor::zeros(node.value.shape()) : grads_[i];
        auto [it, inserted] = out.emplace(node.path, std::move(g));
        if (!inserted) throw UsageError("duplicate leaf path on tape: " + node.path);
    }
    return out;
}

Tensor Tape::grad(Var v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Tensor::zeros(value(v.id).shape());
}

Tensor broadcast_to(const Tensor& t, const Shape& shape) {
    const Shape& src = t.shape();
    if (src == shape) return t;
    if (src.size() > shape.size()) {
        throw DimensionError("cannot broadcast " + to_string(src) + " to " + to_string(shape));
    }
    const std::size_t offset = shape.size() - src.size();
    std::vector<std::size_t> stride(shape.size(), 0);
    std::size_t running = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        const std::size_t axis = i + offset;
        if (src[i] == shape[axis]) {
            stride[axis] = running;
        } else if (src[i] != 1) {
            throw DimensionError("cannot broadcast " + to_string(src) + " to " + to_string(shape));
        }
        running *= src[i];
    }
    Tensor out(shape);
    std::vector<std::size_t> index(shape.size(), 0);
    std::size_t source = 0;
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        out[flat] = t[source];
        for (std::size_t axis = shape.size(); axis-- > 0;) {
            source += stride[axis];
            if (++index[axis] < shape[axis]) break;
            source -= stride[axis] * shape[axis];
            index[axis] = 0;
        }
    }
    return out;
}

namespace ops {
namespace {

Tape& common_tape(Var a, Var b) {
    if (!a.tape || a.tape != b.tape) throw UsageError("operands live on different tapes");
    return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
}

std::size_t last_extent(const Tensor& t) { return t.shape().back(); }

} // namespace

Var add(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_same_shape(x, y, "add");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return tape.record(std::move(out), {a.id, b.id}, [](const Tensor& g, std::span<Tensor* const> gi) {
        for (auto* slot : gi) {
            if (slot) *slot += g;
        }
    });
}

Var sub(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_same_shape(x, y, "sub");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return tape.record(std::move(out), {a.id, b.id}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0]) *gi[0] += g;
        if (gi[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_same_shape(x, y, "mul");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return tape.record(std::move(out), {a.id, b.id}, [&tape, ia = a.id, ib = b.id](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(ib);
        if (gi[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i];
        }
        if (gi[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * x[i];
        }
    });
}

Var scale(Var a, double factor) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return a.tape->record(std::move(out), {a.id}, [factor](const Tensor& g, std::span<Tensor* const> gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
    });
}

Var add_bias(Var x, Var bias) {
    Tape& tape = common_tape(x, bias);
    const Tensor& v = x.value();
    const Tensor& b = bias.value();
    const std::size_t n = last_extent(v);
    if (b.size() != n) {
        throw DimensionError("add_bias: bias " + to_string(b.shape()) + " does not match " + to_string(v.shape()));
    }
    Tensor out(v.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + b[i % n];
    return tape.record(std::move(out), {x.id, bias.id}, [n](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0]) *gi[0] += g;
        if (gi[1]) {
            Tensor& gb = *gi[1];
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
    });
}

namespace {

struct MatmulPlan {
    std::size_t batch = 1;  // number of stacked products
    std::size_t m = 0, k = 0, n = 0;
    bool a_batched = false, b_batched = false;
    Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b) {
    auto fail = [&] {
        return DimensionError("matmul: incompatible shapes " + to_string(a) + " and " + to_string(b));
    };
    if (a.size() < 2 || b.size() < 2) throw fail();
    MatmulPlan p;
    p.m = a[a.size() - 2];
    p.k = a.back();
    p.n = b.back();
    if (b[b.size() - 2] != p.k) throw fail();
    const Shape a_batch(a.begin(), a.end() - 2);
    const Shape b_batch(b.begin(), b.end() - 2);
    Shape batch_shape;
    if (a_batch == b_batch) {
        batch_shape = a_batch;
        p.a_batched = p.b_batched = !a_batch.empty();
    } else if (b_batch.empty()) {
        batch_shape = a_batch;
        p.a_batched = true;
    } else if (a_batch.empty()) {
        batch_shape = b_batch;
        p.b_batched = true;
    } else {
        throw fail();
    }
    p.batch = element_count(batch_shape);
    p.out_shape = batch_shape;
    p.out_shape.push_back(p.m);
    p.out_shape.push_back(p.n);
    return p;
}

} // namespace

Var matmul(Var a, Var b) {
    Tape& tape = common_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const MatmulPlan p = plan_matmul(x.shape(), y.shape());
    Tensor out(p.out_shape);

    if (p.a_batched && !p.b_batched) {
        // A stack of matrices times one matrix is a single taller product.
        ConstMatrixView av(x.data().data(), static_cast<Eigen::Index>(p.batch * p.m), p.k);
        ConstMatrixView bv(y.data().data(), p.k, p.n);
        MatrixView ov(out.data().data(), static_cast<Eigen::Index>(p.batch * p.m), p.n);
        ov.noalias() = av * bv;
    } else {
        for (std::size_t s = 0; s < p.batch; ++s) {
            ConstMatrixView av(x.data().data() + (p.a_batched ? s * p.m * p.k : 0), p.m, p.k);
            ConstMatrixView bv(y.data().data() + (p.b_batched ? s * p.k * p.n : 0), p.k, p.n);
            MatrixView ov(out.data().data() + s * p.m * p.n, p.m, p.n);
            ov.noalias() = av * bv;
        }
    }

    return tape.record(std::move(out), {a.id, b.id}, [&tape, ia = a.id, ib = b.id, p](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(ib);
        if (p.a_batched && !p.b_batched) {
            const auto rows = static_cast<Eigen::Index>(p.batch * p.m);
            ConstMatrixView gv(g.data().data(), rows, p.n);
            if (gi[0]) {
                MatrixView ga(gi[0]->data().data(), rows, p.k);
                ga.noalias() += gv * ConstMatrixView(y.data().data(), p.k, p.n).transpose();
            }
            if (gi[1]) {
                MatrixView gb(gi[1]->data().data(), p.k, p.n);
                gb.noalias() += ConstMatrixView(x.data().data(), rows, p.k).transpose() * gv;
            }
            return;
        }
        for (std::size_t s = 0; s < p.batch; ++s) {
            ConstMatrixView gv(g.data().data() + s * p.m * p.n, p.m, p.n);
            const std::size_t a_off = p.a_batched ? s * p.m * p.k : 0;
            const std::size_t b_off = p.b_batched ? s * p.k * p.n : 0;
            if (gi[0]) {
                MatrixView ga(gi[0]->data().data() + a_off, p.m, p.k);
                ga.noalias() += gv * ConstMatrixView(y.data().data() + b_off, p.k, p.n).transpose();
            }
            if (gi[1]) {
                MatrixView gb(gi[1]->data().data() + b_off, p.k, p.n);
                gb.noalias() += ConstMatrixView(x.data().data() + a_off, p.m, p.k).transpose() * gv;
            }
        }
    });
}

namespace {

// Copies src (viewed as [outer, r, c]) into dst as [outer, c, r].
void transpose_blocks(std::span<const double> src, std::span<double> dst, std::size_t outer, std::size_t r,
                      std::size_t c) {
    for (std::size_t o = 0; o < outer; ++o) {
        const double* s = src.data() + o * r * c;
        double* d = dst.data() + o * r * c;
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) d[j * r + i] = s[i * c + j];
        }
    }
}

void transpose_blocks_acc(std::span<const double> src, std::span<double> dst, std::size_t outer, std::size_t r,
                          std::size_t c) {
    for (std::size_t o = 0; o < outer; ++o) {
        const double* s = src.data() + o * r * c;
        double* d = dst.data() + o * r * c;
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) d[j * r + i] += s[i * c + j];
        }
    }
}

} // namespace

Var transpose_last2(Var a) {
    const Tensor& x = a.value();
    if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + to_string(x.shape()));
    Shape shape = x.shape();
    const std::size_t r = shape[shape.size() - 2];
    const std::size_t c = shape.back();
    const std::size_t outer = x.size() / (r * c);
    std::swap(shape[shape.size() - 2], shape.back());
    Tensor out(shape);
    transpose_blocks(x.data(), out.data(), outer, r, c);
    return a.tape->record(std::move(out), {a.id}, [outer, r, c](const Tensor& g, std::span<Tensor* const> gi) {
        transpose_blocks_acc(g.data(), gi[0]->data(), outer, c, r);
    });
}

Var reshape(Var a, Shape shape) {
    const Tensor& x = a.value();
    if (element_count(shape) != x.size()) {
        throw DimensionError("reshape: " + to_string(x.shape()) + " has no view as " + to_string(shape));
    }
    return a.tape->record(x.reshaped(std::move(shape)), {a.id}, [](const Tensor& g, std::span<Tensor* const> gi) {
        Tensor& acc = *gi[0];
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    });
}

Var swap_axes_12(Var a) {
    const Tensor& x = a.value();
    if (x.rank() != 4) throw DimensionError("swap_axes_12 needs rank 4, got " + to_string(x.shape()));
    const Shape& s = x.shape();
    const std::size_t n0 = s[0], n1 = s[1], n2 = s[2], n3 = s[3];
    Tensor out({n0, n2, n1, n3});
    auto permute = [=](std::span<const double> src, std::span<double> dst, bool forward, bool accumulate) {
        for (std::size_t i = 0; i < n0; ++i) {
            for (std::size_t j = 0; j < n1; ++j) {
                for (std::size_t k = 0; k < n2; ++k) {
                    const std::size_t a_idx = ((i * n1 + j) * n2 + k) * n3;
                    const std::size_t b_idx = ((i * n2 + k) * n1 + j) * n3;
                    const double* from = src.data() + (forward ? a_idx : b_idx);
                    double* to = dst.data() + (forward ? b_idx : a_idx);
                    for (std::size_t l = 0; l < n3; ++l) {
                        if (accumulate) {
                            to[l] += from[l];
                        } else {
                            to[l] = from[l];
                        }
                    }
                }
            }
        }
    };
    permute(x.data(), out.data(), true, false);
    return a.tape->record(std::move(out), {a.id}, [permute](const Tensor& g, std::span<Tensor* const> gi) {
        permute(g.data(), gi[0]->data(), false, true);
    });
}

Var concat_last(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_last of nothing");
    Tape* tape = parts[0].tape;
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::vector<std::size_t> widths;
    std::vector<std::size_t> ids;
    std::size_t total = 0;
    for (const Var& v : parts) {
        if (v.tape != tape) throw UsageError("operands live on different tapes");
        Shape s = v.shape();
        const std::size_t w = s.back();
        s.pop_back();
        if (s != lead) throw DimensionError("concat_last: leading extents differ, " + to_string(v.shape()));
        widths.push_back(w);
        ids.push_back(v.id);
        total += w;
    }
    const std::size_t rows = element_count(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor out(out_shape);
    std::size_t col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor& x = parts[p].value();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(x.data().data() + r * widths[p], widths[p], out.data().data() + r * total + col);
        }
        col += widths[p];
    }
    return tape->record(std::move(out), std::move(ids), [widths, rows, total](const Tensor& g, std::span<Tensor* const> gi) {
        std::size_t col = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
            if (gi[p]) {
                double* dst = gi[p]->data().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* src = g.data().data() + r * total + col;
                    for (std::size_t j = 0; j < widths[p]; ++j) dst[r * widths[p] + j] += src[j];
                }
            }
            col += widths[p];
        }
    });
}

Var softmax_rows(Var x, const Tensor* mask) {
    const Tensor& in = x.value();
    const std::size_t n = last_extent(in);
    Tensor out(in.shape());
    Tensor bias;
    if (mask) bias = broadcast_to(*mask, in.shape());
    const std::size_t rows = in.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data().data() + r * n;
        const double* add = mask ? bias.data().data() + r * n : nullptr;
        double* dst = out.data().data() + r * n;
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            dst[j] = add ? src[j] + add[j] : src[j];
            top = std::max(top, dst[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            dst[j] = std::exp(dst[j] - top);
            total += dst[j];
        }
        for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
    }
    Tape* tape = x.tape;
    const std::size_t out_id = tape->size();
    return tape->record(std::move(out), {x.id}, [tape, out_id, n](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& y = tape->value(out_id);
        Tensor& acc = *gi[0];
        const std::size_t rows = y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data().data() + r * n;
            const double* gr = g.data().data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            double* ar = acc.data().data() + r * n;
            for (std::size_t j = 0; j < n; ++j) ar[j] += yr[j] * (gr[j] - dot);
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& tape = common_tape(x, gamma);
    common_tape(x, beta);
    const Tensor& in = x.value();
    const std::size_t h = last_extent(in);
    if (gamma.value().size() != h || beta.value().size() != h) {
        throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                             " do not match input " + to_string(in.shape()));
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t rows = in.size() / h;
    auto normalized = std::make_shared<Tensor>(in.shape());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    Tensor out(in.shape());
    const Tensor& gm = gamma.value();
    const Tensor& bt = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data().data() + r * h;
        double mean = 0.0;
        for (std::size_t j = 0; j < h; ++j) mean += src[j];
        mean /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t j = 0; j < h; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= static_cast<double>(h);
        const double rstd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = rstd;
        double* xh = normalized->data().data() + r * h;
        double* dst = out.data().data() + r * h;
        for (std::size_t j = 0; j < h; ++j) {
            xh[j] = (src[j] - mean) * rstd;
            dst[j] = xh[j] * gm[j] + bt[j];
        }
    }
    return tape.record(std::move(out), {x.id, gamma.id, beta.id},
                       [&tape, gid = gamma.id, normalized, inv_std, h](const Tensor& g, std::span<Tensor* const> gi) {
                           const Tensor& gm = tape.value(gid);
                           const std::size_t rows = g.size() / h;
                           std::vector<double> dxhat(h);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* gr = g.data().data() + r * h;
                               const double* xh = normalized->data().data() + r * h;
                               if (gi[1]) {
                                   for (std::size_t j = 0; j < h; ++j) (*gi[1])[j] += gr[j] * xh[j];
                               }
                               if (gi[2]) {
                                   for (std::size_t j = 0; j < h; ++j) (*gi[2])[j] += gr[j];
                               }
                               if (!gi[0]) continue;
                               double mean_d = 0.0, mean_dx = 0.0;
                               for (std::size_t j = 0; j < h; ++j) {
                                   dxhat[j] = gr[j] * gm[j];
                                   mean_d += dxhat[j];
                                   mean_dx += dxhat[j] * xh[j];
                               }
                               mean_d /= static_cast<double>(h);
                               mean_dx /= static_cast<double>(h);
                               double* ar = gi[0]->data().data() + r * h;
                               const double rstd = (*inv_std)[r];
                               for (std::size_t j = 0; j < h; ++j) ar[j] += rstd * (dxhat[j] - mean_d - xh[j] * mean_dx);
                           }
                       });
}

Var gelu(Var x) {
    const Tensor& in = x.value();
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * 0.5 * std::erfc(-in[i] * std::numbers::sqrt2 / 2.0);
    Tape* tape = x.tape;
    return tape->record(std::move(out), {x.id}, [tape, id = x.id](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& in = tape->value(id);
        constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = in[i];
            const double cdf = 0.5 * std::erfc(-v * std::numbers::sqrt2 / 2.0);
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            (*gi[0])[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Var relu(Var x) {
    const Tensor& in = x.value();
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    Tape* tape = x.tape;
    return tape->record(std::move(out), {x.id}, [tape, id = x.id](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& in = tape->value(id);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in[i] > 0.0) (*gi[0])[i] += g[i];
        }
    });
}

Var dropout(Var x, double rate, Rng* rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    if (!rng) throw UsageError("dropout in training mode needs a generator");
    const Tensor& in = x.value();
    auto keep = std::make_shared<Tensor>(in.shape());
    const double factor = 1.0 / (1.0 - rate);
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) {
        (*keep)[i] = rng->uniform() < rate ? 0.0 : factor;
        out[i] = in[i] * (*keep)[i];
    }
    return x.tape->record(std::move(out), {x.id}, [keep](const Tensor& g, std::span<Tensor* const> gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*keep)[i];
    });
}

Var take_rows(Var table, std::span<const std::size_t> rows) {
    const Tensor& t = table.value();
    if (t.rank() != 2) throw DimensionError("take_rows needs a 2-D table, got " + to_string(t.shape()));
    if (rows.empty()) throw DimensionError("take_rows with no rows");
    const std::size_t width = t.dim(1);
    Tensor out({rows.size(), width});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.dim(0)) {
            throw DimensionError("take_rows: row " + std::to_string(rows[i]) + " out of range for " + to_string(t.shape()));
        }
        std::copy_n(t.data().data() + rows[i] * width, width, out.data().data() + i * width);
    }
    std::vector<std::size_t> index(rows.begin(), rows.end());
    return table.tape->record(std::move(out), {table.id}, [index = std::move(index), width](const Tensor& g, std::span<Tensor* const> gi) {
        double* acc = gi[0]->data().data();
        for (std::size_t i = 0; i < index.size(); ++i) {
            const double* src = g.data().data() + i * width;
            double* dst = acc + index[i] * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
    });
}

Var sum(Var x) {
    const Tensor& in = x.value();
    double total = 0.0;
    for (double v : in.data()) total += v;
    return x.tape->record(Tensor::scalar(total), {x.id}, [](const Tensor& g, std::span<Tensor* const> gi) {
        const double s = g[0];
        for (auto& v : gi[0]->data()) v += s;
    });
}

Var mean(Var x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
    const Tensor& z = logits.value();
    if (z.rank() != 2) throw DimensionError("cross_entropy needs [rows, classes], got " + to_string(z.shape()));
    const std::size_t rows = z.dim(0), classes = z.dim(1);
    if (labels.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                             " rows");
    }
    auto probs = std::make_shared<Tensor>(z.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] >= classes) throw DataError("cross_entropy: label " + std::to_string(labels[r]) + " out of range");
        const double* zr = z.data().data() + r * classes;
        double* pr = probs->data().data() + r * classes;
        const double top = *std::max_element(zr, zr + classes);
        double denom = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            pr[j] = std::exp(zr[j] - top);
            denom += pr[j];
        }
        for (std::size_t j = 0; j < classes; ++j) pr[j] /= denom;
        total += std::log(denom) + top - zr[labels[r]];
    }
    std::vector<std::size_t> targets(labels.begin(), labels.end());
    return logits.tape->record(
        Tensor::scalar(total / static_cast<double>(rows)), {logits.id},
        [probs, targets = std::move(targets), classes](const Tensor& g, std::span<Tensor* const> gi) {
            const double s = g[0] / static_cast<double>(targets.size());
            double* acc = gi[0]->data().data();
            for (std::size_t r = 0; r < targets.size(); ++r) {
                const double* pr = probs->data().data() + r * classes;
                double* ar = acc + r * classes;
                for (std::size_t j = 0; j < classes; ++j) ar[j] += s * (pr[j] - (j == targets[r] ? 1.0 : 0.0));
            }
        });
}

} // namespace ops
} // namespace rafl
