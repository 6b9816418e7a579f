#pragma once

// Named parameter store + the transformer building blocks shared by the
// tokenizer (two-stream joint-attention) and the AR model (causal).

#include <cmath>
#include <string>
#include <vector>

#include "physar/graph.hpp"
#include "physar/mat.hpp"
#include "physar/rng.hpp"

namespace physar {

template <class T>
struct ParamStore {
    struct Entry {
        std::string name;
        Mat<T> w;
    };
    std::vector<Entry> entries;

    int add(std::string name, Mat<T> w) {
        entries.push_back({std::move(name), std::move(w)});
        return static_cast<int>(entries.size()) - 1;
    }
    int find(const std::string& name) const {
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<int>(i);
        return -1;
    }
    Mat<T>& operator[](int i) { return entries[i].w; }
    const Mat<T>& operator[](int i) const { return entries[i].w; }
    size_t size() const { return entries.size(); }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.w.numel();
        return n;
    }
};

// One gradient buffer per parameter; Graph::backward fills bound slots.
template <class T>
using GradSinks = std::vector<Mat<T>>;

template <class T>
GradSinks<T> make_sinks(const ParamStore<T>& store) {
    GradSinks<T> s(store.size());
    return s;
}

template <class T>
void zero_sinks(const ParamStore<T>& store, GradSinks<T>& s) {
    s.resize(store.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i].numel() == 0)
            s[i] = Mat<T>(store[static_cast<int>(i)].rows, store[static_cast<int>(i)].cols, T(0));
        else
            s[i].fill(T(0));
    }
}

template <class T>
void accumulate_sinks(GradSinks<T>& into, const GradSinks<T>& from) {
    for (size_t i = 0; i < into.size(); ++i)
        if (from[i].numel() > 0) axpy(T(1), from[i], into[i]);
}

// Binds store parameter i as a graph leaf.
template <class T>
typename Graph<T>::NodeId pnode(Graph<T>& g, const ParamStore<T>& store, GradSinks<T>& sinks,
                                int i) {
    if (sinks[i].numel() == 0)
        sinks[i] = Mat<T>(store[i].rows, store[i].cols, T(0));
    return g.param(store[i], sinks[i]);
}

struct LinearIdx {
    int w = -1;
    int b = -1;
};

template <class T>
LinearIdx add_linear(ParamStore<T>& store, const std::string& name, int in, int out,
                     double init_std, Rng& rng) {
    LinearIdx li;
    li.w = store.add(name + ".w", init_std == 0.0 ? Mat<T>(in, out, T(0))
                                                  : Mat<T>::randn(in, out, init_std, rng));
    li.b = store.add(name + ".b", Mat<T>(1, out, T(0)));
    return li;
}

template <class T>
typename Graph<T>::NodeId linear(Graph<T>& g, const ParamStore<T>& store, GradSinks<T>& sinks,
                                 LinearIdx li, typename Graph<T>::NodeId x) {
    return g.add_rowvec(g.matmul(x, pnode(g, store, sinks, li.w)), pnode(g, store, sinks, li.b));
}

struct NormIdx {
    int gamma = -1;
    int beta = -1;
};

template <class T>
NormIdx add_norm(ParamStore<T>& store, const std::string& name, int dim) {
    NormIdx n;
    n.gamma = store.add(name + ".g", Mat<T>(1, dim, T(1)));
    n.beta = store.add(name + ".b", Mat<T>(1, dim, T(0)));
    return n;
}

template <class T>
typename Graph<T>::NodeId norm(Graph<T>& g, const ParamStore<T>& store, GradSinks<T>& sinks,
                               NormIdx ni, typename Graph<T>::NodeId x) {
    return g.layernorm(x, pnode(g, store, sinks, ni.gamma), pnode(g, store, sinks, ni.beta));
}

// Multi-head self-attention over an already-projected qkv (S x 3d).
template <class T>
typename Graph<T>::NodeId attend(Graph<T>& g, typename Graph<T>::NodeId qkv, int dim, int heads,
                                 bool causal) {
    const int dh = dim / heads;
    require(dh * heads == dim, "attend: dim must divide heads");
    auto q = g.slice_cols(qkv, 0, dim);
    auto k = g.slice_cols(qkv, dim, 2 * dim);
    auto v = g.slice_cols(qkv, 2 * dim, 3 * dim);
    std::vector<typename Graph<T>::NodeId> outs;
    outs.reserve(heads);
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        auto qh = g.scale(g.slice_cols(q, h * dh, (h + 1) * dh), sc);
        auto kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        auto scores = causal ? g.matmul_nt_causal(qh, kh) : g.matmul_nt(qh, kh);
        auto p = g.softmax_rows(scores, causal);
        outs.push_back(g.matmul(p, vh));
    }
    return g.concat_cols(outs);
}

// Pre-LN transformer block with a single token stream.
struct BlockIdx {
    NormIdx ln1, ln2;
    LinearIdx qkv, proj, fc1, fc2;
};

template <class T>
BlockIdx add_block(ParamStore<T>& store, const std::string& prefix, int dim, double init_std,
                   Rng& rng) {
    BlockIdx b;
    b.ln1 = add_norm(store, prefix + ".ln1", dim);
    b.qkv = add_linear(store, prefix + ".qkv", dim, 3 * dim, init_std, rng);
    b.proj = add_linear(store, prefix + ".proj", dim, dim, init_std, rng);
    b.ln2 = add_norm(store, prefix + ".ln2", dim);
    b.fc1 = add_linear(store, prefix + ".fc1", dim, 4 * dim, init_std, rng);
    b.fc2 = add_linear(store, prefix + ".fc2", 4 * dim, dim, init_std, rng);
    return b;
}

template <class T>
typename Graph<T>::NodeId block_forward(Graph<T>& g, const ParamStore<T>& store,
                                        GradSinks<T>& sinks, const BlockIdx& b,
                                        typename Graph<T>::NodeId x, int dim, int heads,
                                        bool causal) {
    auto a = linear(g, store, sinks, b.proj,
                    attend<T>(g, linear(g, store, sinks, b.qkv, norm(g, store, sinks, b.ln1, x)),
                              dim, heads, causal));
    x = g.add(x, a);
    auto h = linear(g, store, sinks, b.fc1, norm(g, store, sinks, b.ln2, x));
    auto m = linear(g, store, sinks, b.fc2, g.gelu(h));
    return g.add(x, m);
}

// Two-stream block: each stream keeps its own projections and MLP, but the
// attention runs over the joined sequence so either side can read the other.
struct TwoStreamBlockIdx {
    BlockIdx a, b;
};

template <class T>
TwoStreamBlockIdx add_two_stream_block(ParamStore<T>& store, const std::string& prefix, int dim,
                                       double init_std, Rng& rng) {
    TwoStreamBlockIdx t;
    t.a = add_block(store, prefix + ".img", dim, init_std, rng);
    t.b = add_block(store, prefix + ".tok", dim, init_std, rng);
    return t;
}

template <class T>
std::pair<typename Graph<T>::NodeId, typename Graph<T>::NodeId> two_stream_forward(
    Graph<T>& g, const ParamStore<T>& store, GradSinks<T>& sinks, const TwoStreamBlockIdx& blk,
    typename Graph<T>::NodeId xa, typename Graph<T>::NodeId xb, int dim, int heads) {
    const int sa = g.val(xa).rows;
    const int sb = g.val(xb).rows;
    auto qkv_a = linear(g, store, sinks, blk.a.qkv, norm(g, store, sinks, blk.a.ln1, xa));
    auto qkv_b = linear(g, store, sinks, blk.b.qkv, norm(g, store, sinks, blk.b.ln1, xb));
    auto joint = attend<T>(g, g.concat_rows(qkv_a, qkv_b), dim, heads, /*causal=*/false);
    auto attn_a = linear(g, store, sinks, blk.a.proj, g.slice_rows(joint, 0, sa));
    auto attn_b = linear(g, store, sinks, blk.b.proj, g.slice_rows(joint, sa, sa + sb));
    xa = g.add(xa, attn_a);
    xb = g.add(xb, attn_b);
    auto ma = linear(g, store, sinks, blk.a.fc2,
                     g.gelu(linear(g, store, sinks, blk.a.fc1, norm(g, store, sinks, blk.a.ln2, xa))));
    auto mb = linear(g, store, sinks, blk.b.fc2,
                     g.gelu(linear(g, store, sinks, blk.b.fc1, norm(g, store, sinks, blk.b.ln2, xb))));
    return {g.add(xa, ma), g.add(xb, mb)};
}

// Sinusoidal features of a scalar in [0,1]; first half sin, second half cos.
template <class T>
Mat<T> time_features(double t, int dim) {
    Mat<T> f(1, dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(1000.0, static_cast<double>(i) / half);
        f.data[i] = static_cast<T>(std::sin(t * freq));
        f.data[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return f;
}

}  // namespace physar
