#pragma once

// Tape-based reverse-mode gradient engine. Deliberately small: it supports
// exactly the operations the models in this project need (affine maps,
// attention products, elementwise nonlinearities, softmax, normalization,
// MSE/NLL losses, the policy surrogate) and nothing else.
//
// Usage: build a fresh Graph per forward pass, call backward() on a scalar
// node, then read accumulated parameter gradients from the bound sinks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "physar/mat.hpp"

namespace physar {

// Transcendentals at the tape's precision. The float path uses inlinable
// polynomial forms (about 2e-6 relative error) so elementwise loops stay
// vectorizable; the double path keeps libm, which the finite-difference
// oracles rely on.
inline float fast_expf(float x) {
    if (x < -87.0f) return 0.0f;
    if (x > 88.0f) return std::exp(x);
    const float y = x * 1.44269504088896341f;  // x / ln 2
    const float n = std::nearbyintf(y);
    const float f = y - n;
    // e^(f ln2) as a degree-5 Taylor polynomial, |f| <= 0.5
    float p = 1.3333558146428443e-3f;
    p = p * f + 9.6181291076284772e-3f;
    p = p * f + 5.5504108664821580e-2f;
    p = p * f + 2.4022650695910071e-1f;
    p = p * f + 6.9314718055994531e-1f;
    p = p * f + 1.0f;
    union {
        uint32_t bits;
        float value;
    } scale;
    scale.bits = static_cast<uint32_t>(static_cast<int32_t>(n) + 127) << 23;
    return p * scale.value;
}

inline float fast_erff(float x) {
    // Abramowitz-Stegun 7.1.26, max absolute error ~1.5e-7
    const float sign = x < 0.0f ? -1.0f : 1.0f;
    const float a = std::fabs(x);
    const float t = 1.0f / (1.0f + 0.3275911f * a);
    float poly = 1.061405429f;
    poly = poly * t - 1.453152027f;
    poly = poly * t + 1.421413741f;
    poly = poly * t - 0.284496736f;
    poly = poly * t + 0.254829592f;
    const float y = 1.0f - poly * t * fast_expf(-a * a);
    return sign * y;
}

inline float g_exp(float x) { return fast_expf(x); }
inline double g_exp(double x) { return std::exp(x); }
inline float g_erf(float x) { return fast_erff(x); }
inline double g_erf(double x) { return std::erf(x); }

template <class T>
class Graph {
public:
    using NodeId = int;

    struct Node {
        Mat<T> val;
        Mat<T> grad;
        bool needs_grad = false;
        std::function<void()> back;
    };

    std::vector<Node> nodes;

    const Mat<T>& val(NodeId id) const { return nodes[id].val; }
    Mat<T>& grad(NodeId id) { return nodes[id].grad; }

    NodeId constant(Mat<T> v) {
        nodes.push_back(Node{std::move(v), {}, false, nullptr});
        return static_cast<NodeId>(nodes.size()) - 1;
    }

    // Leaf backed by an external parameter; gradients accumulate into sink.
    NodeId param(const Mat<T>& w, Mat<T>& sink) {
        NodeId id = constant(w);
        nodes[id].needs_grad = true;
        binds_.push_back({id, &sink});
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        require(nodes[a].val.same_shape(nodes[b].val), "add: shape mismatch");
        Mat<T> out = nodes[a].val;
        axpy(T(1), nodes[b].val, out);
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            if (nodes[a].needs_grad) axpy(T(1), nodes[self].grad, nodes[a].grad);
            if (nodes[b].needs_grad) axpy(T(1), nodes[self].grad, nodes[b].grad);
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        require(nodes[a].val.same_shape(nodes[b].val), "sub: shape mismatch");
        Mat<T> out = nodes[a].val;
        axpy(T(-1), nodes[b].val, out);
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            if (nodes[a].needs_grad) axpy(T(1), nodes[self].grad, nodes[a].grad);
            if (nodes[b].needs_grad) axpy(T(-1), nodes[self].grad, nodes[b].grad);
        });
    }

    NodeId hadamard(NodeId a, NodeId b) {
        require(nodes[a].val.same_shape(nodes[b].val), "hadamard: shape mismatch");
        Mat<T> out = nodes[a].val;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= nodes[b].val.data[i];
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            const auto& g = nodes[self].grad;
            if (nodes[a].needs_grad)
                for (int64_t i = 0; i < g.numel(); ++i)
                    nodes[a].grad.data[i] += g.data[i] * nodes[b].val.data[i];
            if (nodes[b].needs_grad)
                for (int64_t i = 0; i < g.numel(); ++i)
                    nodes[b].grad.data[i] += g.data[i] * nodes[a].val.data[i];
        });
    }

    NodeId scale(NodeId a, double c) {
        Mat<T> out = nodes[a].val;
        for (auto& x : out.data) x = static_cast<T>(x * c);
        return make(std::move(out), {a}, [this, a, c](NodeId self) {
            if (nodes[a].needs_grad) axpy(static_cast<T>(c), nodes[self].grad, nodes[a].grad);
        });
    }

    // x (S x n) + v (1 x n) broadcast over rows
    NodeId add_rowvec(NodeId a, NodeId v) {
        require(nodes[v].val.rows == 1 && nodes[v].val.cols == nodes[a].val.cols,
                "add_rowvec: bias shape mismatch");
        Mat<T> out = nodes[a].val;
        const T* b = nodes[v].val.row(0);
        for (int i = 0; i < out.rows; ++i) {
            T* r = out.row(i);
            for (int j = 0; j < out.cols; ++j) r[j] += b[j];
        }
        return make(std::move(out), {a, v}, [this, a, v](NodeId self) {
            const auto& g = nodes[self].grad;
            if (nodes[a].needs_grad) axpy(T(1), g, nodes[a].grad);
            if (nodes[v].needs_grad) {
                T* gv = nodes[v].grad.row(0);
                for (int i = 0; i < g.rows; ++i) {
                    const T* gr = g.row(i);
                    for (int j = 0; j < g.cols; ++j) gv[j] += gr[j];
                }
            }
        });
    }

    NodeId matmul(NodeId a, NodeId b) {
        require(nodes[a].val.cols == nodes[b].val.rows, "matmul: inner dim mismatch");
        Mat<T> out(nodes[a].val.rows, nodes[b].val.cols);
        gemm_nn(nodes[a].val, nodes[b].val, out);
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            const auto& g = nodes[self].grad;
            if (nodes[a].needs_grad) gemm_nt(g, nodes[b].val, nodes[a].grad, true);
            if (nodes[b].needs_grad) gemm_tn(nodes[a].val, g, nodes[b].grad, true);
        });
    }

    // A (m x k) * B^T with B stored (n x k) -> (m x n)
    NodeId matmul_nt(NodeId a, NodeId b) {
        require(nodes[a].val.cols == nodes[b].val.cols, "matmul_nt: inner dim mismatch");
        Mat<T> out(nodes[a].val.rows, nodes[b].val.rows);
        gemm_nt(nodes[a].val, nodes[b].val, out);
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            const auto& g = nodes[self].grad;
            if (nodes[a].needs_grad) gemm_nn(g, nodes[b].val, nodes[a].grad, true);
            if (nodes[b].needs_grad) gemm_tn(g, nodes[a].val, nodes[b].grad, true);
        });
    }

    // As matmul_nt but only the causal lower triangle is computed; the
    // backward is identical because the upper-triangle grads are zero.
    NodeId matmul_nt_causal(NodeId a, NodeId b) {
        require(nodes[a].val.cols == nodes[b].val.cols &&
                    nodes[a].val.rows == nodes[b].val.rows,
                "matmul_nt_causal: shape mismatch");
        Mat<T> out(nodes[a].val.rows, nodes[b].val.rows);
        gemm_nt_causal(nodes[a].val, nodes[b].val, out);
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            const auto& g = nodes[self].grad;
            if (nodes[a].needs_grad) gemm_nn(g, nodes[b].val, nodes[a].grad, true);
            if (nodes[b].needs_grad) gemm_tn(g, nodes[a].val, nodes[b].grad, true);
        });
    }

    NodeId gelu(NodeId a) {
        Mat<T> out = nodes[a].val;
        for (auto& x : out.data) {
            x = T(0.5) * x * (T(1) + g_erf(x * T(0.7071067811865475)));
        }
        return make(std::move(out), {a}, [this, a](NodeId self) {
            if (!nodes[a].needs_grad) return;
            const auto& g = nodes[self].grad;
            const auto& x = nodes[a].val;
            auto& gx = nodes[a].grad;
            for (int64_t i = 0; i < g.numel(); ++i) {
                const T xd = x.data[i];
                const T cdf = T(0.5) * (T(1) + g_erf(xd * T(0.7071067811865475)));
                const T pdf = g_exp(T(-0.5) * xd * xd) * T(0.3989422804014327);
                gx.data[i] += g.data[i] * (cdf + xd * pdf);
            }
        });
    }

    NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
        const auto& xv = nodes[x].val;
        require(nodes[gamma].val.cols == xv.cols && nodes[beta].val.cols == xv.cols,
                "layernorm: affine shape mismatch");
        const int S = xv.rows, n = xv.cols;
        auto xhat = std::make_shared<Mat<T>>(S, n);
        auto inv_std = std::make_shared<std::vector<T>>(S);
        Mat<T> out(S, n);
        const T* gm = nodes[gamma].val.row(0);
        const T* bt = nodes[beta].val.row(0);
        for (int i = 0; i < S; ++i) {
            const T* r = xv.row(i);
            double mu = 0;
            for (int j = 0; j < n; ++j) mu += r[j];
            mu /= n;
            double var = 0;
            for (int j = 0; j < n; ++j) {
                const double d = r[j] - mu;
                var += d * d;
            }
            var /= n;
            const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
            (*inv_std)[i] = is;
            T* xh = xhat->row(i);
            T* o = out.row(i);
            for (int j = 0; j < n; ++j) {
                xh[j] = static_cast<T>((r[j] - mu) * is);
                o[j] = gm[j] * xh[j] + bt[j];
            }
        }
        return make(std::move(out), {x, gamma, beta},
                    [this, x, gamma, beta, xhat, inv_std](NodeId self) {
                        const auto& g = nodes[self].grad;
                        const int S = g.rows, n = g.cols;
                        const T* gm = nodes[gamma].val.row(0);
                        for (int i = 0; i < S; ++i) {
                            const T* gr = g.row(i);
                            const T* xh = xhat->row(i);
                            if (nodes[beta].needs_grad) {
                                T* gb = nodes[beta].grad.row(0);
                                for (int j = 0; j < n; ++j) gb[j] += gr[j];
                            }
                            if (nodes[gamma].needs_grad) {
                                T* gg = nodes[gamma].grad.row(0);
                                for (int j = 0; j < n; ++j) gg[j] += gr[j] * xh[j];
                            }
                            if (nodes[x].needs_grad) {
                                double m1 = 0, m2 = 0;
                                for (int j = 0; j < n; ++j) {
                                    const double gd = static_cast<double>(gm[j]) * gr[j];
                                    m1 += gd;
                                    m2 += gd * xh[j];
                                }
                                m1 /= n;
                                m2 /= n;
                                T* gx = nodes[x].grad.row(i);
                                const T is = (*inv_std)[i];
                                for (int j = 0; j < n; ++j) {
                                    const double gd = static_cast<double>(gm[j]) * gr[j];
                                    gx[j] += static_cast<T>((gd - m1 - xh[j] * m2) * is);
                                }
                            }
                        }
                    });
    }

    // Row softmax. causal=true restricts row i to columns [0, i] (square input).
    NodeId softmax_rows(NodeId x, bool causal = false) {
        const auto& xv = nodes[x].val;
        if (causal) require(xv.rows == xv.cols, "softmax_rows: causal requires square");
        Mat<T> out(xv.rows, xv.cols, T(0));
        for (int i = 0; i < xv.rows; ++i) {
            const int lim = causal ? i + 1 : xv.cols;
            const T* r = xv.row(i);
            T mx = r[0];
            for (int j = 1; j < lim; ++j) mx = std::max(mx, r[j]);
            T* o = out.row(i);
            for (int j = 0; j < lim; ++j) o[j] = g_exp(r[j] - mx);
            double z = 0;
            for (int j = 0; j < lim; ++j) z += o[j];
            const T iz = static_cast<T>(1.0 / z);
            for (int j = 0; j < lim; ++j) o[j] *= iz;
        }
        return make(std::move(out), {x}, [this, x, causal](NodeId self) {
            if (!nodes[x].needs_grad) return;
            const auto& g = nodes[self].grad;
            const auto& p = nodes[self].val;
            auto& gx = nodes[x].grad;
            for (int i = 0; i < g.rows; ++i) {
                const int lim = causal ? i + 1 : g.cols;
                const T* gr = g.row(i);
                const T* pr = p.row(i);
                double dot = 0;
                for (int j = 0; j < lim; ++j) dot += static_cast<double>(gr[j]) * pr[j];
                T* gxr = gx.row(i);
                for (int j = 0; j < lim; ++j)
                    gxr[j] += static_cast<T>(pr[j] * (gr[j] - dot));
            }
        });
    }

    NodeId slice_rows(NodeId a, int r0, int r1) {
        const auto& av = nodes[a].val;
        require(0 <= r0 && r0 <= r1 && r1 <= av.rows, "slice_rows: bad range");
        Mat<T> out(r1 - r0, av.cols);
        std::copy(av.row(r0), av.row(r0) + out.numel(), out.data.begin());
        return make(std::move(out), {a}, [this, a, r0](NodeId self) {
            if (!nodes[a].needs_grad) return;
            const auto& g = nodes[self].grad;
            T* dst = nodes[a].grad.row(r0);
            for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g.data[i];
        });
    }

    NodeId concat_rows(NodeId a, NodeId b) {
        const auto& av = nodes[a].val;
        const auto& bv = nodes[b].val;
        require(av.cols == bv.cols, "concat_rows: col mismatch");
        Mat<T> out(av.rows + bv.rows, av.cols);
        std::copy(av.data.begin(), av.data.end(), out.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
        return make(std::move(out), {a, b}, [this, a, b](NodeId self) {
            const auto& g = nodes[self].grad;
            const int64_t na = nodes[a].val.numel();
            if (nodes[a].needs_grad)
                for (int64_t i = 0; i < na; ++i) nodes[a].grad.data[i] += g.data[i];
            if (nodes[b].needs_grad)
                for (int64_t i = 0; i < nodes[b].val.numel(); ++i)
                    nodes[b].grad.data[i] += g.data[na + i];
        });
    }

    NodeId slice_cols(NodeId a, int c0, int c1) {
        const auto& av = nodes[a].val;
        require(0 <= c0 && c0 <= c1 && c1 <= av.cols, "slice_cols: bad range");
        Mat<T> out(av.rows, c1 - c0);
        for (int i = 0; i < av.rows; ++i)
            std::copy(av.row(i) + c0, av.row(i) + c1, out.row(i));
        return make(std::move(out), {a}, [this, a, c0](NodeId self) {
            if (!nodes[a].needs_grad) return;
            const auto& g = nodes[self].grad;
            for (int i = 0; i < g.rows; ++i) {
                T* dst = nodes[a].grad.row(i) + c0;
                const T* src = g.row(i);
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
        });
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        require(!parts.empty(), "concat_cols: empty");
        int cols = 0;
        const int rows = nodes[parts[0]].val.rows;
        for (NodeId p : parts) {
            require(nodes[p].val.rows == rows, "concat_cols: row mismatch");
            cols += nodes[p].val.cols;
        }
        Mat<T> out(rows, cols);
        int off = 0;
        for (NodeId p : parts) {
            const auto& pv = nodes[p].val;
            for (int i = 0; i < rows; ++i)
                std::copy(pv.row(i), pv.row(i) + pv.cols, out.row(i) + off);
            off += pv.cols;
        }
        auto parts_copy = parts;
        return make(std::move(out), parts, [this, parts_copy](NodeId self) {
            const auto& g = nodes[self].grad;
            int off = 0;
            for (NodeId p : parts_copy) {
                const int pc = nodes[p].val.cols;
                if (nodes[p].needs_grad) {
                    for (int i = 0; i < g.rows; ++i) {
                        T* dst = nodes[p].grad.row(i);
                        const T* src = g.row(i) + off;
                        for (int j = 0; j < pc; ++j) dst[j] += src[j];
                    }
                }
                off += pc;
            }
        });
    }

    // Row gather from an embedding table; backward scatter-adds.
    NodeId embed_rows(NodeId table, std::vector<int> ids) {
        const auto& tv = nodes[table].val;
        for (int id : ids) require(0 <= id && id < tv.rows, "embed_rows: id out of range");
        Mat<T> out(static_cast<int>(ids.size()), tv.cols);
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy(tv.row(ids[i]), tv.row(ids[i]) + tv.cols, out.row(static_cast<int>(i)));
        auto ids_ptr = std::make_shared<std::vector<int>>(std::move(ids));
        return make(std::move(out), {table}, [this, table, ids_ptr](NodeId self) {
            if (!nodes[table].needs_grad) return;
            const auto& g = nodes[self].grad;
            for (size_t i = 0; i < ids_ptr->size(); ++i) {
                T* dst = nodes[table].grad.row((*ids_ptr)[i]);
                const T* src = g.row(static_cast<int>(i));
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
        });
    }

    // out.flat[i] = in.flat[index[i]]; index must stay in range.
    NodeId gather_flat(NodeId a, std::shared_ptr<const std::vector<int64_t>> index,
                       int out_rows, int out_cols) {
        const auto& av = nodes[a].val;
        require(static_cast<int64_t>(index->size()) == static_cast<int64_t>(out_rows) * out_cols,
                "gather_flat: index size mismatch");
        Mat<T> out(out_rows, out_cols);
        for (size_t i = 0; i < index->size(); ++i) out.data[i] = av.data[(*index)[i]];
        return make(std::move(out), {a}, [this, a, index](NodeId self) {
            if (!nodes[a].needs_grad) return;
            const auto& g = nodes[self].grad;
            for (size_t i = 0; i < index->size(); ++i)
                nodes[a].grad.data[(*index)[i]] += g.data[i];
        });
    }

    NodeId l2normalize_rows(NodeId a, double eps = 1e-12) {
        const auto& av = nodes[a].val;
        Mat<T> out(av.rows, av.cols);
        auto inv_norm = std::make_shared<std::vector<T>>(av.rows);
        for (int i = 0; i < av.rows; ++i) {
            const T* r = av.row(i);
            double s = eps;
            for (int j = 0; j < av.cols; ++j) s += static_cast<double>(r[j]) * r[j];
            const T in = static_cast<T>(1.0 / std::sqrt(s));
            (*inv_norm)[i] = in;
            T* o = out.row(i);
            for (int j = 0; j < av.cols; ++j) o[j] = r[j] * in;
        }
        return make(std::move(out), {a}, [this, a, inv_norm](NodeId self) {
            if (!nodes[a].needs_grad) return;
            const auto& g = nodes[self].grad;
            const auto& y = nodes[self].val;
            for (int i = 0; i < g.rows; ++i) {
                const T* gr = g.row(i);
                const T* yr = y.row(i);
                double dot = 0;
                for (int j = 0; j < g.cols; ++j) dot += static_cast<double>(gr[j]) * yr[j];
                T* gx = nodes[a].grad.row(i);
                const T in = (*inv_norm)[i];
                for (int j = 0; j < g.cols; ++j)
                    gx[j] += static_cast<T>((gr[j] - dot * yr[j]) * in);
            }
        });
    }

    // Forward value = q; backward passes gradients to x unchanged.
    NodeId straight_through(NodeId x, Mat<T> q) {
        require(nodes[x].val.same_shape(q), "straight_through: shape mismatch");
        return make(std::move(q), {x}, [this, x](NodeId self) {
            if (nodes[x].needs_grad) axpy(T(1), nodes[self].grad, nodes[x].grad);
        });
    }

    NodeId mse_mean(NodeId x, Mat<T> target) {
        require(nodes[x].val.same_shape(target), "mse_mean: shape mismatch");
        const auto& xv = nodes[x].val;
        double s = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double d = static_cast<double>(xv.data[i]) - target.data[i];
            s += d * d;
        }
        Mat<T> out(1, 1);
        out.data[0] = static_cast<T>(s / xv.numel());
        auto tgt = std::make_shared<Mat<T>>(std::move(target));
        return make(std::move(out), {x}, [this, x, tgt](NodeId self) {
            if (!nodes[x].needs_grad) return;
            const T gy = nodes[self].grad.data[0];
            const auto& xv = nodes[x].val;
            const T c = static_cast<T>(2.0 / xv.numel()) * gy;
            for (int64_t i = 0; i < xv.numel(); ++i)
                nodes[x].grad.data[i] += c * (xv.data[i] - tgt->data[i]);
        });
    }

    // Weighted MSE: sum_p w_p (x_p - t_p)^2 / sum_p w_p.
    NodeId wmse_mean(NodeId x, Mat<T> target, Mat<T> weight) {
        require(nodes[x].val.same_shape(target) && nodes[x].val.same_shape(weight),
                "wmse_mean: shape mismatch");
        const auto& xv = nodes[x].val;
        double s = 0, wsum = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double d = static_cast<double>(xv.data[i]) - target.data[i];
            s += weight.data[i] * d * d;
            wsum += weight.data[i];
        }
        require(wsum > 0, "wmse_mean: zero total weight");
        Mat<T> out(1, 1);
        out.data[0] = static_cast<T>(s / wsum);
        auto tgt = std::make_shared<Mat<T>>(std::move(target));
        auto wgt = std::make_shared<Mat<T>>(std::move(weight));
        return make(std::move(out), {x}, [this, x, tgt, wgt, wsum](NodeId self) {
            if (!nodes[x].needs_grad) return;
            const T gy = nodes[self].grad.data[0];
            const auto& xv = nodes[x].val;
            const T c = static_cast<T>(2.0 / wsum) * gy;
            for (int64_t i = 0; i < xv.numel(); ++i)
                nodes[x].grad.data[i] += c * wgt->data[i] * (xv.data[i] - tgt->data[i]);
        });
    }

    NodeId sum_sq_diff(NodeId x, Mat<T> target) {
        require(nodes[x].val.same_shape(target), "sum_sq_diff: shape mismatch");
        const auto& xv = nodes[x].val;
        double s = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double d = static_cast<double>(xv.data[i]) - target.data[i];
            s += d * d;
        }
        Mat<T> out(1, 1);
        out.data[0] = static_cast<T>(s);
        auto tgt = std::make_shared<Mat<T>>(std::move(target));
        return make(std::move(out), {x}, [this, x, tgt](NodeId self) {
            if (!nodes[x].needs_grad) return;
            const T gy = nodes[self].grad.data[0];
            const auto& xv = nodes[x].val;
            for (int64_t i = 0; i < xv.numel(); ++i)
                nodes[x].grad.data[i] += T(2) * gy * (xv.data[i] - tgt->data[i]);
        });
    }

    // Mean NLL over rows whose target >= 0. Additive masks (large negative
    // logits) yield exactly-zero probabilities for forbidden ids.
    NodeId nll_mean(NodeId logits, std::vector<int> targets) {
        const auto& lv = nodes[logits].val;
        require(static_cast<int>(targets.size()) == lv.rows, "nll_mean: target count mismatch");
        auto probs = std::make_shared<Mat<T>>(lv.rows, lv.cols);
        int count = 0;
        double loss = 0;
        for (int i = 0; i < lv.rows; ++i) {
            if (targets[i] < 0) continue;
            require(targets[i] < lv.cols, "nll_mean: target out of range");
            const T* r = lv.row(i);
            T mx = r[0];
            for (int j = 1; j < lv.cols; ++j) mx = std::max(mx, r[j]);
            T* p = probs->row(i);
            for (int j = 0; j < lv.cols; ++j) p[j] = g_exp(r[j] - mx);
            double z = 0;
            for (int j = 0; j < lv.cols; ++j) z += p[j];
            const T iz = static_cast<T>(1.0 / z);
            for (int j = 0; j < lv.cols; ++j) p[j] *= iz;
            loss -= std::log(std::max(static_cast<double>(p[targets[i]]), 1e-300));
            ++count;
        }
        require(count > 0, "nll_mean: no predicted positions");
        Mat<T> out(1, 1);
        out.data[0] = static_cast<T>(loss / count);
        auto tg = std::make_shared<std::vector<int>>(std::move(targets));
        return make(std::move(out), {logits}, [this, logits, probs, tg, count](NodeId self) {
            if (!nodes[logits].needs_grad) return;
            const T gy = nodes[self].grad.data[0];
            const T c = gy / static_cast<T>(count);
            auto& gx = nodes[logits].grad;
            for (int i = 0; i < gx.rows; ++i) {
                if ((*tg)[i] < 0) continue;
                const T* p = probs->row(i);
                T* g = gx.row(i);
                for (int j = 0; j < gx.cols; ++j) g[j] += c * p[j];
                g[(*tg)[i]] -= c;
            }
        });
    }

    // Per-row log p(target); rows with target < 0 yield 0.
    NodeId rows_logp(NodeId logits, std::vector<int> targets) {
        const auto& lv = nodes[logits].val;
        require(static_cast<int>(targets.size()) == lv.rows, "rows_logp: target count mismatch");
        auto probs = std::make_shared<Mat<T>>(lv.rows, lv.cols);
        Mat<T> out(lv.rows, 1, T(0));
        for (int i = 0; i < lv.rows; ++i) {
            if (targets[i] < 0) continue;
            const T* r = lv.row(i);
            T mx = r[0];
            for (int j = 1; j < lv.cols; ++j) mx = std::max(mx, r[j]);
            T* p = probs->row(i);
            for (int j = 0; j < lv.cols; ++j) p[j] = g_exp(r[j] - mx);
            double z = 0;
            for (int j = 0; j < lv.cols; ++j) z += p[j];
            const T iz = static_cast<T>(1.0 / z);
            for (int j = 0; j < lv.cols; ++j) p[j] *= iz;
            out.data[i] = static_cast<T>(std::log(std::max(static_cast<double>(p[targets[i]]), 1e-300)));
        }
        auto tg = std::make_shared<std::vector<int>>(std::move(targets));
        return make(std::move(out), {logits}, [this, logits, probs, tg](NodeId self) {
            if (!nodes[logits].needs_grad) return;
            const auto& g = nodes[self].grad;
            auto& gx = nodes[logits].grad;
            for (int i = 0; i < gx.rows; ++i) {
                if ((*tg)[i] < 0) continue;
                const T gy = g.data[i];
                if (gy == T(0)) continue;
                const T* p = probs->row(i);
                T* gr = gx.row(i);
                for (int j = 0; j < gx.cols; ++j) gr[j] -= gy * p[j];
                gr[(*tg)[i]] += gy;
            }
        });
    }

    // Clipped-surrogate + KL penalty, summed over rows with old_logp entries.
    // Per row: d = logp - old_logp, rho = e^d,
    //   term = -min(rho*A, clamp(rho, 1-eps, 1+eps)*A) + beta*(e^-d + d - 1).
    // Rows where mask=false contribute 0 (structural / forced tokens).
    NodeId surrogate_sum(NodeId logp, std::shared_ptr<const std::vector<double>> old_logp,
                         double advantage, double clip_eps, double beta,
                         std::shared_ptr<const std::vector<char>> active) {
        const auto& lv = nodes[logp].val;
        require(lv.cols == 1, "surrogate_sum: logp must be a column");
        require(static_cast<int>(old_logp->size()) == lv.rows, "surrogate_sum: old_logp size");
        double total = 0;
        for (int i = 0; i < lv.rows; ++i) {
            if (!(*active)[i]) continue;
            const double d = static_cast<double>(lv.data[i]) - (*old_logp)[i];
            const double rho = std::exp(d);
            const double clipped = std::min(std::max(rho, 1.0 - clip_eps), 1.0 + clip_eps);
            total += -std::min(rho * advantage, clipped * advantage);
            total += beta * (std::exp(-d) + d - 1.0);
        }
        Mat<T> out(1, 1);
        out.data[0] = static_cast<T>(total);
        return make(std::move(out), {logp},
                    [this, logp, old_logp, advantage, clip_eps, beta, active](NodeId self) {
                        if (!nodes[logp].needs_grad) return;
                        const T gy = nodes[self].grad.data[0];
                        const auto& lv = nodes[logp].val;
                        auto& gx = nodes[logp].grad;
                        for (int i = 0; i < lv.rows; ++i) {
                            if (!(*active)[i]) continue;
                            const double d = static_cast<double>(lv.data[i]) - (*old_logp)[i];
                            const double rho = std::exp(d);
                            const double t1 = rho * advantage;
                            const double clipped =
                                std::min(std::max(rho, 1.0 - clip_eps), 1.0 + clip_eps);
                            const double t2 = clipped * advantage;
                            double dmin;  // d(min)/d(logp)
                            if (t1 <= t2) {
                                dmin = rho * advantage;
                            } else {
                                const bool inside = rho > 1.0 - clip_eps && rho < 1.0 + clip_eps;
                                dmin = inside ? rho * advantage : 0.0;
                            }
                            const double dkl = beta * (1.0 - std::exp(-d));
                            gx.data[i] += gy * static_cast<T>(-dmin + dkl);
                        }
                    });
    }

    NodeId add_scalars(const std::vector<NodeId>& xs) {
        require(!xs.empty(), "add_scalars: empty");
        NodeId acc = xs[0];
        for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
        return acc;
    }

    void backward(NodeId root) {
        require(nodes[root].val.numel() == 1, "backward: root must be scalar");
        for (auto& n : nodes) {
            if (n.needs_grad || n.back) {
                n.grad = Mat<T>(n.val.rows, n.val.cols, T(0));
            }
        }
        nodes[root].grad.data[0] = T(1);
        for (int id = root; id >= 0; --id) {
            if (nodes[id].back && nodes[id].grad.numel() > 0) nodes[id].back();
        }
        for (const auto& b : binds_) {
            if (b.sink->numel() == 0) *b.sink = Mat<T>(nodes[b.node].val.rows, nodes[b.node].val.cols, T(0));
            axpy(T(1), nodes[b.node].grad, *b.sink);
        }
    }

    double scalar(NodeId id) const { return static_cast<double>(nodes[id].val.data[0]); }

private:
    struct Bind {
        NodeId node;
        Mat<T>* sink;
    };
    std::vector<Bind> binds_;

    NodeId make(Mat<T> out, std::initializer_list<NodeId> deps,
                std::function<void(NodeId)> back) {
        bool ng = false;
        for (NodeId d : deps) ng = ng || nodes[d].needs_grad;
        return finish(std::move(out), ng, std::move(back));
    }
    NodeId make(Mat<T> out, const std::vector<NodeId>& deps, std::function<void(NodeId)> back) {
        bool ng = false;
        for (NodeId d : deps) ng = ng || nodes[d].needs_grad;
        return finish(std::move(out), ng, std::move(back));
    }
    NodeId finish(Mat<T> out, bool ng, std::function<void(NodeId)> back) {
        const NodeId id = static_cast<NodeId>(nodes.size());
        nodes.push_back(Node{std::move(out), {}, ng, nullptr});
        if (ng) {
            nodes[id].back = [fn = std::move(back), id]() { fn(id); };
        }
        return id;
    }
};

}  // namespace physar
