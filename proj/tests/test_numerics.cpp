#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "physar/graph.hpp"
#include "physar/nn.hpp"
#include "physar/optim.hpp"
#include "physar/rng.hpp"

using namespace physar;

TEST_CASE("rng streams are deterministic and independent") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(7);
    Rng child1 = c.child(3);
    Rng child2 = c.child(4);
    CHECK(child1.next_u64() != child2.next_u64());
    // uniform01 in range, mean roughly centered
    Rng d(11);
    double sum = 0;
    for (int i = 0; i < 10000; ++i) {
        const double u = d.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(std::fabs(sum / 10000 - 0.5) < 0.02);
}

TEST_CASE("interval union sampling is measure proportional") {
    Rng rng(5);
    auto u = IntervalUnion::pair(0.0, 0.8, 4.5, 6.0);
    int low = 0, high = 0;
    for (int i = 0; i < 20000; ++i) {
        const double x = u.sample(rng);
        CHECK(u.contains(x));
        if (x <= 0.8)
            ++low;
        else
            ++high;
    }
    // widths 0.8 vs 1.5
    CHECK(std::fabs(static_cast<double>(low) / 20000 - 0.8 / 2.3) < 0.02);
}

namespace {

template <class T>
Mat<T> naive_mm(const Mat<T>& A, const Mat<T>& B) {
    Mat<T> C(A.rows, B.cols, T(0));
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < B.cols; ++j) {
            T s = 0;
            for (int p = 0; p < A.cols; ++p) s += A.at(i, p) * B.at(p, j);
            C.at(i, j) = s;
        }
    return C;
}

}  // namespace

TEST_CASE("gemm variants agree with the naive triple loop") {
    Rng rng(3);
    auto A = Mat<double>::randn(7, 5, 1.0, rng);
    auto B = Mat<double>::randn(5, 9, 1.0, rng);
    Mat<double> C(7, 9);
    gemm_nn(A, B, C);
    auto R = naive_mm(A, B);
    for (int64_t i = 0; i < C.numel(); ++i) CHECK(C.data[i] == doctest::Approx(R.data[i]));

    auto Bt = Mat<double>::randn(9, 5, 1.0, rng);  // represents B^T storage
    Mat<double> C2(7, 9);
    gemm_nt(A, Bt, C2);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 9; ++j) {
            double s = 0;
            for (int p = 0; p < 5; ++p) s += A.at(i, p) * Bt.at(j, p);
            CHECK(C2.at(i, j) == doctest::Approx(s));
        }

    auto At = Mat<double>::randn(5, 7, 1.0, rng);  // represents A^T storage
    Mat<double> C3(7, 9);
    gemm_tn(At, B, C3);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 9; ++j) {
            double s = 0;
            for (int p = 0; p < 5; ++p) s += At.at(p, i) * B.at(p, j);
            CHECK(C3.at(i, j) == doctest::Approx(s));
        }
}

// ---------------------------------------------------------------------------
// gradient checks for each graph op, double precision

namespace {

// builds a scalar loss from the bound parameter nodes; rebuilt per evaluation
using BuildFn = std::function<Graph<double>::NodeId(Graph<double>&, GradSinks<double>&,
                                                    ParamStore<double>&)>;

double op_grad_check(ParamStore<double>& store, const BuildFn& build, int probes = 25,
                     uint64_t seed = 99) {
    GradSinks<double> sinks = make_sinks(store);
    auto loss_fn = [&]() {
        Graph<double> g;
        GradSinks<double> tmp = make_sinks(store);
        return g.scalar(build(g, tmp, store));
    };
    auto grad_fn = [&]() {
        zero_sinks(store, sinks);
        Graph<double> g;
        auto root = build(g, sinks, store);
        g.backward(root);
    };
    Rng rng(seed);
    const auto rep = finite_diff_check(loss_fn, grad_fn, store, sinks, probes, 1e-6, rng);
    return rep.max_rel_err;
}

}  // namespace

TEST_CASE("graph ops pass central-difference gradient checks") {
    Rng rng(17);

    SUBCASE("affine + gelu + layernorm + softmax chain") {
        ParamStore<double> store;
        const int x = store.add("x", Mat<double>::randn(4, 6, 0.8, rng));
        const int w = store.add("w", Mat<double>::randn(6, 5, 0.5, rng));
        const int b = store.add("b", Mat<double>::randn(1, 5, 0.5, rng));
        const int gm = store.add("g", Mat<double>::randn(1, 5, 0.2, rng));
        const int bt = store.add("be", Mat<double>::randn(1, 5, 0.2, rng));
        Mat<double> target = Mat<double>::randn(4, 5, 1.0, rng);
        auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
            auto xn = pnode(g, st, s, x);
            auto h = g.add_rowvec(g.matmul(xn, pnode(g, st, s, w)), pnode(g, st, s, b));
            h = g.gelu(h);
            h = g.layernorm(h, pnode(g, st, s, gm), pnode(g, st, s, bt));
            h = g.softmax_rows(h);
            return g.mse_mean(h, target);
        };
        CHECK(op_grad_check(store, build) < 1e-6);
    }

    SUBCASE("causal softmax with attention shapes") {
        ParamStore<double> store;
        const int q = store.add("q", Mat<double>::randn(5, 4, 0.7, rng));
        const int k = store.add("k", Mat<double>::randn(5, 4, 0.7, rng));
        const int v = store.add("v", Mat<double>::randn(5, 4, 0.7, rng));
        Mat<double> target = Mat<double>::randn(5, 4, 1.0, rng);
        auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
            auto scores = g.scale(g.matmul_nt(pnode(g, st, s, q), pnode(g, st, s, k)), 0.5);
            auto p = g.softmax_rows(scores, /*causal=*/true);
            auto o = g.matmul(p, pnode(g, st, s, v));
            return g.mse_mean(o, target);
        };
        CHECK(op_grad_check(store, build) < 1e-6);
    }

    SUBCASE("slices, concats, gather, normalize") {
        ParamStore<double> store;
        const int a = store.add("a", Mat<double>::randn(6, 8, 0.9, rng));
        Mat<double> target = Mat<double>::randn(3, 4, 1.0, rng);
        Mat<double> q = Mat<double>::randn(3, 4, 1.0, rng);
        auto idx = std::make_shared<std::vector<int64_t>>();
        Rng perm_rng(5);
        for (int i = 0; i < 12; ++i) idx->push_back(static_cast<int64_t>(perm_rng.next_below(48)));
        auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
            auto an = pnode(g, st, s, a);
            auto top = g.slice_rows(an, 0, 3);
            auto bottom = g.slice_rows(an, 3, 6);
            auto joined = g.concat_rows(top, bottom);
            auto left = g.slice_cols(joined, 0, 4);
            auto right = g.slice_cols(joined, 4, 8);
            auto mixed = g.concat_cols({g.hadamard(left, right), left});
            auto gathered = g.gather_flat(mixed, idx, 3, 4);
            auto nrm = g.l2normalize_rows(gathered);
            auto d = g.sub(nrm, g.scale(nrm, 0.25));
            return g.add(g.mse_mean(d, target), g.sum_sq_diff(nrm, q));
        };
        CHECK(op_grad_check(store, build) < 1e-6);
    }

    SUBCASE("straight-through backward equals the additive-offset surrogate") {
        // value(q) with identity backward == x + const(q - x0), differentiated
        ParamStore<double> store;
        const int x = store.add("x", Mat<double>::randn(3, 4, 0.8, rng));
        Mat<double> q = Mat<double>::randn(3, 4, 1.0, rng);
        Mat<double> target = Mat<double>::randn(3, 4, 1.0, rng);

        GradSinks<double> s1 = make_sinks(store);
        zero_sinks(store, s1);
        Graph<double> g1;
        auto xn1 = pnode(g1, store, s1, x);
        auto st1 = g1.straight_through(g1.gelu(xn1), q);
        g1.backward(g1.mse_mean(st1, target));

        Mat<double> offset = q;
        {
            Graph<double> probe;
            GradSinks<double> tmp = make_sinks(store);
            auto base = probe.gelu(pnode(probe, store, tmp, x));
            axpy(-1.0, probe.val(base), offset);  // offset = q - gelu(x0)
        }
        GradSinks<double> s2 = make_sinks(store);
        zero_sinks(store, s2);
        Graph<double> g2;
        auto xn2 = pnode(g2, store, s2, x);
        auto sur = g2.add(g2.gelu(xn2), g2.constant(offset));
        g2.backward(g2.mse_mean(sur, target));

        for (int64_t i = 0; i < s1[0].numel(); ++i)
            CHECK(s1[0].data[i] == doctest::Approx(s2[0].data[i]).epsilon(1e-12));
    }

    SUBCASE("embedding + nll with additive mask") {
        ParamStore<double> store;
        const int table = store.add("table", Mat<double>::randn(10, 6, 0.5, rng));
        const int w = store.add("w", Mat<double>::randn(6, 10, 0.5, rng));
        std::vector<int> ids = {1, 4, 9, 0, 3};
        std::vector<int> targets = {4, 9, 0, 3, -1};
        Mat<double> mask(5, 10, 0.0);
        for (int i = 0; i < 5; ++i) mask.at(i, 7) = -1e30;  // forbid id 7 everywhere
        auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
            auto e = g.embed_rows(pnode(g, st, s, table), ids);
            auto logits = g.add(g.matmul(e, pnode(g, st, s, w)), g.constant(mask));
            return g.nll_mean(logits, targets);
        };
        CHECK(op_grad_check(store, build) < 1e-6);
    }

    SUBCASE("per-row logp and the policy surrogate") {
        ParamStore<double> store;
        const int logits = store.add("logits", Mat<double>::randn(6, 5, 0.8, rng));
        std::vector<int> targets = {2, 0, -1, 4, 1, 3};
        auto old_lp = std::make_shared<std::vector<double>>(
            std::vector<double>{-1.1, -0.7, 0.0, -2.0, -1.4, -0.9});
        auto active = std::make_shared<std::vector<char>>(
            std::vector<char>{1, 1, 0, 1, 1, 1});
        auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
            auto lp = g.rows_logp(pnode(g, st, s, logits), targets);
            return g.surrogate_sum(lp, old_lp, 0.8, 0.2, 0.05, active);
        };
        CHECK(op_grad_check(store, build) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// optimizer and schedule oracles

TEST_CASE("adamw leaves parameters unchanged for zero gradient and zero decay") {
    ParamStore<float> store;
    Rng rng(2);
    store.add("w", Mat<float>::randn(3, 3, 1.0, rng));
    const Mat<float> before = store[0];
    OptimizerState<float> st(store);
    GradSinks<float> grads;
    grads.push_back(Mat<float>(3, 3, 0.0f));
    TrainHyper h;
    h.weight_decay = 0.0;
    adamw_step(store, grads, st, h, 0.1);
    for (int64_t i = 0; i < before.numel(); ++i) CHECK(store[0].data[i] == before.data[i]);
    CHECK(st.step == 1);
}

TEST_CASE("adamw first-step update matches the hand-evaluated definition") {
    // w=1, g=1, lr=0.1, b1=0.9, b2=0.95, eps=1e-6, wd=0 -> w ~ 0.9
    ParamStore<double> store;
    store.add("w", Mat<double>(1, 1, 1.0));
    OptimizerState<double> st(store);
    GradSinks<double> grads;
    grads.push_back(Mat<double>(1, 1, 1.0));
    TrainHyper h;
    h.beta1 = 0.9;
    h.beta2 = 0.95;
    h.eps = 1e-6;
    h.weight_decay = 0.0;
    adamw_step(store, grads, st, h, 0.1);
    CHECK(store[0].data[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-6)).epsilon(1e-9));
}

TEST_CASE("adamw decoupled decay shrinks weights with zero gradient") {
    // wd=0.05, lr=0.1, g=0 -> w *= (1 - 0.005)
    ParamStore<double> store;
    store.add("w", Mat<double>(1, 1, 2.0));
    OptimizerState<double> st(store);
    GradSinks<double> grads;
    grads.push_back(Mat<double>(1, 1, 0.0));
    TrainHyper h;
    h.weight_decay = 0.05;
    adamw_step(store, grads, st, h, 0.1);
    CHECK(store[0].data[0] == doctest::Approx(2.0 * (1.0 - 0.005)).epsilon(1e-12));
}

TEST_CASE("cosine schedule endpoints and peak") {
    TrainHyper h;
    h.peak_lr = 0.3;
    h.warmup_steps = 50;
    h.total_steps = 500;
    CHECK(cosine_lr(0, h) == 0.0);
    CHECK(cosine_lr(50, h) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(std::fabs(cosine_lr(500, h)) < 1e-12);
    // continuity and monotone decay after the peak
    double prev = cosine_lr(50, h);
    for (int s = 51; s <= 500; ++s) {
        const double cur = cosine_lr(s, h);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
}

TEST_CASE("gradient clipping scales only above the budget") {
    GradSinks<double> g;
    g.push_back(Mat<double>(1, 2));
    g[0].data = {3.0, 4.0};
    const double n = clip_grad_norm(g, 1.0);
    CHECK(n == doctest::Approx(5.0));
    CHECK(g[0].data[0] == doctest::Approx(0.6));
    CHECK(g[0].data[1] == doctest::Approx(0.8));

    GradSinks<double> g2;
    g2.push_back(Mat<double>(1, 2));
    g2[0].data = {0.3, 0.4};
    clip_grad_norm(g2, 1.0);
    CHECK(g2[0].data[0] == doctest::Approx(0.3));

    GradSinks<double> g3;
    g3.push_back(Mat<double>(2, 2, 0.0));
    clip_grad_norm(g3, 1.0);
    for (double v : g3[0].data) CHECK(v == 0.0);
}

TEST_CASE("clipped norm never exceeds the budget") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        GradSinks<double> g;
        g.push_back(Mat<double>::randn(4, 4, rng.uniform(0.01, 10.0), rng));
        g.push_back(Mat<double>::randn(2, 7, rng.uniform(0.01, 10.0), rng));
        clip_grad_norm(g, 1.0);
        double sq = 0;
        for (const auto& m : g)
            for (double v : m.data) sq += v * v;
        CHECK(std::sqrt(sq) <= 1.0 + 1e-12);
    }
}

TEST_CASE("finite difference harness agrees with simple analytic gradients") {
    SUBCASE("quadratic") {
        ParamStore<double> store;
        store.add("w", Mat<double>(1, 1, 3.0));
        GradSinks<double> grads = make_sinks(store);
        auto loss = [&]() { return store[0].data[0] * store[0].data[0]; };
        auto grad = [&]() {
            zero_sinks(store, grads);
            grads[0].data[0] = 2.0 * store[0].data[0];
        };
        Rng rng(1);
        const auto rep = finite_diff_check(loss, grad, store, grads, 5, 1e-6, rng);
        CHECK(rep.max_rel_err < 1e-8);
    }
    SUBCASE("linear") {
        ParamStore<double> store;
        store.add("w", Mat<double>(1, 1, 1.5));
        GradSinks<double> grads = make_sinks(store);
        auto loss = [&]() { return 2.0 * store[0].data[0]; };
        auto grad = [&]() {
            zero_sinks(store, grads);
            grads[0].data[0] = 2.0;
        };
        Rng rng(1);
        const auto rep = finite_diff_check(loss, grad, store, grads, 5, 1e-6, rng);
        CHECK(rep.max_rel_err < 1e-9);
    }
}

TEST_CASE("transformer blocks gradient-check end to end") {
    Rng rng(23);
    ParamStore<double> store;
    const int x = store.add("x", Mat<double>::randn(5, 8, 0.5, rng));
    const BlockIdx blk = add_block(store, "blk", 8, 0.3, rng);
    Mat<double> target = Mat<double>::randn(5, 8, 1.0, rng);
    auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
        auto out = block_forward(g, st, s, blk, pnode(g, st, s, x), 8, 2, /*causal=*/true);
        return g.mse_mean(out, target);
    };
    CHECK(op_grad_check(store, build, 40, 7) < 1e-6);
}

TEST_CASE("two-stream block gradient-checks and routes information across streams") {
    Rng rng(29);
    ParamStore<double> store;
    const int xa = store.add("xa", Mat<double>::randn(6, 8, 0.5, rng));
    const int xb = store.add("xb", Mat<double>::randn(3, 8, 0.5, rng));
    const TwoStreamBlockIdx blk = add_two_stream_block(store, "ts", 8, 0.3, rng);
    Mat<double> target = Mat<double>::randn(6, 8, 1.0, rng);
    auto build = [&](Graph<double>& g, GradSinks<double>& s, ParamStore<double>& st) {
        auto [na, nb] =
            two_stream_forward(g, st, s, blk, pnode(g, st, s, xa), pnode(g, st, s, xb), 8, 2);
        auto probe = g.add(na, g.concat_rows(nb, nb));
        return g.mse_mean(probe, target);
    };
    CHECK(op_grad_check(store, build, 40, 9) < 1e-6);

    // the b-stream must influence the a-stream output through joint attention
    Graph<double> g;
    GradSinks<double> s = make_sinks(store);
    auto [a1, b1] =
        two_stream_forward(g, store, s, blk, pnode(g, store, s, xa), pnode(g, store, s, xb), 8, 2);
    (void)b1;
    store[xb].data[0] += 0.5;
    Graph<double> g2;
    GradSinks<double> s2 = make_sinks(store);
    auto [a2, b2] = two_stream_forward(g2, store, s2, blk, pnode(g2, store, s2, xa),
                                       pnode(g2, store, s2, xb), 8, 2);
    (void)b2;
    double diff = 0;
    for (int64_t i = 0; i < g.val(a1).numel(); ++i)
        diff = std::max(diff, std::fabs(g.val(a1).data[i] - g2.val(a2).data[i]));
    CHECK(diff > 1e-9);
}
