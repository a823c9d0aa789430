#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "sidemoe/tensor.hpp"

namespace sidemoe {

// Handle into a GradTape node.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode tape over whole tensors. Every operation records a backward
// closure together with whatever inputs it needs; backward() replays the
// closures in exact reverse order of recording. Recording order is a
// topological order by construction, since an op can only consume vars that
// already exist.
class GradTape {
public:
    struct Node {
        Tensor value;
        Tensor grad; // allocated lazily in backward()
        std::function<void(GradTape&)> backward;
    };

    Var leaf(Tensor value) {
        nodes_.push_back({std::move(value), {}, {}});
        return {nodes_.size() - 1};
    }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    std::size_t size() const { return nodes_.size(); }

    // --- primitives ---------------------------------------------------------

    Var matmul(Var a, Var b) {
        Tensor out = sidemoe::matmul(value(a), value(b));
        return record(std::move(out), [a, b](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            // dA = dC * B^T, dB = A^T * dC
            t.accumulate(a, sidemoe::matmul(g, sidemoe::transpose(t.value(b))));
            t.accumulate(b, sidemoe::matmul(sidemoe::transpose(t.value(a)), g));
        });
    }

    Var transpose(Var a) {
        return record(sidemoe::transpose(value(a)), [a](GradTape& t) {
            t.accumulate(a, sidemoe::transpose(t.nodes_[t.cursor_].grad));
        });
    }

    Var add(Var a, Var b) {
        return record(sidemoe::add(value(a), value(b)), [a, b](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            t.accumulate(a, g);
            t.accumulate(b, g);
        });
    }

    Var scale(Var a, double factor) {
        return record(sidemoe::scale(value(a), factor), [a, factor](GradTape& t) {
            t.accumulate(a, sidemoe::scale(t.nodes_[t.cursor_].grad, factor));
        });
    }

    // x (R x C) + bias (C) broadcast over rows
    Var add_row_broadcast(Var x, Var bias) {
        const Tensor& xv = value(x);
        const Tensor& bv = value(bias);
        if (bv.size() != xv.cols()) {
            throw DimensionError("add_row_broadcast: bias length " + std::to_string(bv.size()) +
                                 " vs row width " + std::to_string(xv.cols()));
        }
        Tensor out = xv;
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += bv.data[c];
        return record(std::move(out), [x, bias](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            t.accumulate(x, g);
            Tensor gb({g.cols()});
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gb.data[c] += g.at(r, c);
            t.accumulate(bias, std::move(gb));
        });
    }

    // tile a 1 x C row R times
    Var repeat_row(Var rowvar, std::size_t times) {
        const Tensor& rv = value(rowvar);
        Tensor out({times, rv.size()});
        for (std::size_t r = 0; r < times; ++r)
            for (std::size_t c = 0; c < rv.size(); ++c) out.at(r, c) = rv.data[c];
        return record(std::move(out), [rowvar](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gr(t.value(rowvar).shape);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gr.data[c] += g.at(r, c);
            t.accumulate(rowvar, std::move(gr));
        });
    }

    Var gelu(Var a) {
        Tensor out = value(a);
        for (double& v : out.data) v = gelu_scalar(v);
        return record(std::move(out), [a](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor ga = t.value(a);
            for (std::size_t i = 0; i < ga.size(); ++i)
                ga.data[i] = g.data[i] * gelu_grad_scalar(ga.data[i]);
            t.accumulate(a, std::move(ga));
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, double eps) {
        const Tensor& xv = value(x);
        Tensor out = sidemoe::layer_norm(xv, value(gamma), value(beta), eps);
        return record(std::move(out), [x, gamma, beta, eps](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            const Tensor& xv = t.value(x);
            const Tensor& gam = t.value(gamma);
            const std::size_t rows = xv.ndim() == 2 ? xv.rows() : 1;
            const std::size_t cols = xv.cols();
            Tensor gx(xv.shape);
            Tensor ggamma(gam.shape);
            Tensor gbeta(gam.shape);
            const double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean = 0.0;
                for (std::size_t c = 0; c < cols; ++c) mean += xv.data[r * cols + c];
                mean /= n;
                double var = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double d = xv.data[r * cols + c] - mean;
                    var += d * d;
                }
                var /= n;
                const double inv = 1.0 / std::sqrt(var + eps);
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double xhat = (xv.data[r * cols + c] - mean) * inv;
                    const double gy = g.data[r * cols + c] * gam.data[c];
                    ggamma.data[c] += g.data[r * cols + c] * xhat;
                    gbeta.data[c] += g.data[r * cols + c];
                    sum_gy += gy;
                    sum_gyx += gy * xhat;
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    const double xhat = (xv.data[r * cols + c] - mean) * inv;
                    const double gy = g.data[r * cols + c] * gam.data[c];
                    gx.data[r * cols + c] = inv * (gy - sum_gy / n - xhat * sum_gyx / n);
                }
            }
            t.accumulate(x, std::move(gx));
            t.accumulate(gamma, std::move(ggamma));
            t.accumulate(beta, std::move(gbeta));
        });
    }

    Var softmax_rows(Var x) {
        Tensor out = sidemoe::softmax_rows(value(x));
        const std::size_t id = nodes_.size();
        return record(std::move(out), [x, id](GradTape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.nodes_[id].value;
            const std::size_t rows = y.ndim() == 2 ? y.rows() : 1;
            const std::size_t cols = y.cols();
            Tensor gx(y.shape);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    dot += g.data[r * cols + c] * y.data[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    gx.data[r * cols + c] =
                        y.data[r * cols + c] * (g.data[r * cols + c] - dot);
            }
            t.accumulate(x, std::move(gx));
        });
    }

    Var gather_rows(Var x, std::vector<std::size_t> idx) {
        const Tensor& xv = value(x);
        Tensor out({idx.size(), xv.cols()});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < xv.cols(); ++c) out.at(r, c) = xv.at(idx[r], c);
        return record(std::move(out), [x, idx = std::move(idx)](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gx(t.value(x).shape);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gx.at(idx[r], c) += g.at(r, c);
            t.accumulate(x, std::move(gx));
        });
    }

    // scatter rows of src into a zero (nrows x C) tensor, accumulating
    Var scatter_add_rows(Var src, std::vector<std::size_t> idx, std::size_t nrows) {
        const Tensor& sv = value(src);
        Tensor out({nrows, sv.cols()});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < sv.cols(); ++c) out.at(idx[r], c) += sv.at(r, c);
        return record(std::move(out), [src, idx = std::move(idx)](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gs(t.value(src).shape);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gs.at(r, c) = g.at(idx[r], c);
            t.accumulate(src, std::move(gs));
        });
    }

    // per-row column gather: out[r][j] = x[r][idx[r][j]]
    Var gather_cols_per_row(Var x, std::vector<std::vector<int>> idx) {
        const Tensor& xv = value(x);
        const std::size_t k = idx.empty() ? 0 : idx[0].size();
        Tensor out({idx.size(), k});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < k; ++j)
                out.at(r, j) = xv.at(r, static_cast<std::size_t>(idx[r][j]));
        return record(std::move(out), [x, idx = std::move(idx)](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gx(t.value(x).shape);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < g.cols(); ++j)
                    gx.at(r, static_cast<std::size_t>(idx[r][j])) += g.at(r, j);
            t.accumulate(x, std::move(gx));
        });
    }

    // out[r] = x[r] / sum(x[r]); sums taken in ascending value order so the
    // result is exactly invariant under column permutations
    Var div_by_row_sum(Var x) {
        const Tensor& xv = value(x);
        Tensor out = xv;
        std::vector<double> sums(xv.rows());
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            sums[r] = ordered_sum(xv.row(r));
            for (std::size_t c = 0; c < xv.cols(); ++c) out.at(r, c) /= sums[r];
        }
        const std::size_t id = nodes_.size();
        return record(std::move(out), [x, id, sums = std::move(sums)](GradTape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.nodes_[id].value;
            Tensor gx(y.shape);
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c)
                    gx.at(r, c) = (g.at(r, c) - dot) / sums[r];
            }
            t.accumulate(x, std::move(gx));
        });
    }

    // scale row r of x by w[r]
    Var scale_rows(Var x, Var w) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        if (wv.size() != xv.rows())
            throw DimensionError("scale_rows: weight length must equal row count");
        Tensor out = xv;
        for (std::size_t r = 0; r < xv.rows(); ++r)
            for (std::size_t c = 0; c < xv.cols(); ++c) out.at(r, c) *= wv.data[r];
        return record(std::move(out), [x, w](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            const Tensor& xv = t.value(x);
            const Tensor& wv = t.value(w);
            Tensor gx(xv.shape);
            Tensor gw(wv.shape);
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                for (std::size_t c = 0; c < xv.cols(); ++c) {
                    gx.at(r, c) = g.at(r, c) * wv.data[r];
                    gw.data[r] += g.at(r, c) * xv.at(r, c);
                }
            }
            t.accumulate(x, std::move(gx));
            t.accumulate(w, std::move(gw));
        });
    }

    // flatten x and gather elements: out[i] = x.data[idx[i]]
    Var gather_elems(Var x, std::vector<std::size_t> idx) {
        const Tensor& xv = value(x);
        Tensor out({idx.size()});
        for (std::size_t i = 0; i < idx.size(); ++i) out.data[i] = xv.data[idx[i]];
        return record(std::move(out), [x, idx = std::move(idx)](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gx(t.value(x).shape);
            for (std::size_t i = 0; i < idx.size(); ++i) gx.data[idx[i]] += g.data[i];
            t.accumulate(x, std::move(gx));
        });
    }

    Var mean_rows(Var x) {
        const Tensor& xv = value(x);
        Tensor out({1, xv.cols()});
        const double inv = 1.0 / static_cast<double>(xv.rows());
        for (std::size_t r = 0; r < xv.rows(); ++r)
            for (std::size_t c = 0; c < xv.cols(); ++c) out.at(0, c) += xv.at(r, c) * inv;
        return record(std::move(out), [x, inv](GradTape& t) {
            const Tensor& g = t.nodes_[t.cursor_].grad;
            Tensor gx(t.value(x).shape);
            for (std::size_t r = 0; r < gx.rows(); ++r)
                for (std::size_t c = 0; c < gx.cols(); ++c) gx.at(r, c) = g.at(0, c) * inv;
            t.accumulate(x, std::move(gx));
        });
    }

    // scalar = sum_i coeff[i] * x.data[i]
    Var weighted_sum(Var x, std::vector<double> coeff) {
        const Tensor& xv = value(x);
        if (coeff.size() != xv.size())
            throw DimensionError("weighted_sum: coefficient length mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < coeff.size(); ++i) acc += coeff[i] * xv.data[i];
        Tensor out({1});
        out.data[0] = acc;
        return record(std::move(out), [x, coeff = std::move(coeff)](GradTape& t) {
            const double g = t.nodes_[t.cursor_].grad.data[0];
            Tensor gx(t.value(x).shape);
            for (std::size_t i = 0; i < coeff.size(); ++i) gx.data[i] = g * coeff[i];
            t.accumulate(x, std::move(gx));
        });
    }

    // fused mean cross-entropy over rows; gradient is (softmax - onehot)/rows
    Var cross_entropy(Var logits, std::vector<int> labels) {
        const Tensor& lv = value(logits);
        const double loss = sidemoe::cross_entropy(lv, labels);
        Tensor out({1});
        out.data[0] = loss;
        return record(std::move(out), [logits, labels = std::move(labels)](GradTape& t) {
            const double g = t.nodes_[t.cursor_].grad.data[0];
            const Tensor& lv = t.value(logits);
            Tensor probs = sidemoe::softmax_rows(lv);
            const double inv = 1.0 / static_cast<double>(lv.rows());
            for (std::size_t r = 0; r < lv.rows(); ++r) {
                probs.at(r, static_cast<std::size_t>(labels[r])) -= 1.0;
                for (std::size_t c = 0; c < lv.cols(); ++c) probs.at(r, c) *= g * inv;
            }
            t.accumulate(logits, std::move(probs));
        });
    }

    // --- backward ------------------------------------------------------------

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops last-to-first.
    void backward(Var loss) {
        if (value(loss).size() != 1) throw DimensionError("backward: loss must be scalar");
        for (Node& n : nodes_) {
            n.grad = Tensor(n.value.shape);
        }
        nodes_[loss.id].grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (!nodes_[i].backward) continue;
            cursor_ = i;
            nodes_[i].backward(*this);
        }
    }

    static double ordered_sum(std::span<const double> values) {
        std::vector<double> tmp(values.begin(), values.end());
        std::sort(tmp.begin(), tmp.end());
        double acc = 0.0;
        for (const double v : tmp) acc += v;
        return acc;
    }

private:
    Var record(Tensor value, std::function<void(GradTape&)> backward) {
        nodes_.push_back({std::move(value), {}, std::move(backward)});
        return {nodes_.size() - 1};
    }

    void accumulate(Var v, Tensor g) {
        Tensor& dst = nodes_[v.id].grad;
        require_same_shape(dst, g, "grad accumulate");
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
    }

    std::vector<Node> nodes_;
    std::size_t cursor_ = 0;
};

} // namespace sidemoe
