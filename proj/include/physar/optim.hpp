#pragma once

// AdamW with decoupled weight decay, warmup+cosine schedule, global-norm
// gradient clipping, and a central-difference gradient checker.

#include <cmath>
#include <functional>
#include <vector>

#include "physar/nn.hpp"

namespace physar {

struct TrainHyper {
    double peak_lr = 1e-4;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // <= 0 disables
    int batch_size = 1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-6;

    void validate() const {
        require(peak_lr > 0, "TrainHyper: peak_lr must be positive");
        require(warmup_steps >= 0 && warmup_steps <= total_steps,
                "TrainHyper: need 0 <= warmup_steps <= total_steps");
    }
};

inline double cosine_lr(int64_t step, const TrainHyper& h) {
    if (step < h.warmup_steps)
        return h.peak_lr * static_cast<double>(step) / static_cast<double>(h.warmup_steps);
    if (step >= h.total_steps && h.total_steps == h.warmup_steps) return h.peak_lr;
    const double frac = static_cast<double>(step - h.warmup_steps) /
                        static_cast<double>(h.total_steps - h.warmup_steps);
    return h.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(frac, 1.0)));
}

template <class T>
struct OptimizerState {
    std::vector<Mat<T>> m;
    std::vector<Mat<T>> v;
    int64_t step = 0;

    explicit OptimizerState(const ParamStore<T>& store) {
        m.reserve(store.size());
        v.reserve(store.size());
        for (const auto& e : store.entries) {
            m.emplace_back(e.w.rows, e.w.cols, T(0));
            v.emplace_back(e.w.rows, e.w.cols, T(0));
        }
    }
};

// Returns the pre-clip global norm; scales grads in place when over budget.
template <class T>
double clip_grad_norm(GradSinks<T>& grads, double max_norm) {
    require(max_norm > 0, "clip_grad_norm: max_norm must be positive");
    double sq = 0;
    for (const auto& g : grads)
        for (const T x : g.data) sq += static_cast<double>(x) * x;
    const double n = std::sqrt(sq);
    if (n > max_norm) {
        const T s = static_cast<T>(max_norm / n);
        for (auto& g : grads)
            for (auto& x : g.data) x *= s;
    }
    return n;
}

// Decoupled decay applied before the bias-corrected adaptive update.
template <class T>
void adamw_step(ParamStore<T>& store, const GradSinks<T>& grads, OptimizerState<T>& state,
                const TrainHyper& h, double lr) {
    require(lr >= 0, "adamw_step: lr must be non-negative");
    require(grads.size() == store.size() && state.m.size() == store.size(),
            "adamw_step: state/grad count mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < store.size(); ++p) {
        auto& w = store[static_cast<int>(p)];
        const auto& g = grads[p];
        require(g.same_shape(w), "adamw_step: grad shape mismatch for " + store.entries[p].name);
        auto& m = state.m[p];
        auto& v = state.v[p];
        const int64_t n = w.numel();
        for (int64_t i = 0; i < n; ++i) {
            if (h.weight_decay != 0.0)
                w.data[i] -= static_cast<T>(lr * h.weight_decay) * w.data[i];
            const double gi = static_cast<double>(g.data[i]);
            m.data[i] = static_cast<T>(h.beta1 * m.data[i] + (1.0 - h.beta1) * gi);
            v.data[i] = static_cast<T>(h.beta2 * v.data[i] + (1.0 - h.beta2) * gi * gi);
            const double mh = m.data[i] / bc1;
            const double vh = v.data[i] / bc2;
            w.data[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + h.eps));
        }
    }
}

// Central differences on randomly probed coordinates, 64-bit. loss_fn must be
// deterministic; analytic gradients are read from `grads` after grad_fn().
struct FdReport {
    double max_rel_err = 0;
    int probes = 0;
};

inline FdReport finite_diff_check(const std::function<double()>& loss_fn,
                                  const std::function<void()>& grad_fn,
                                  ParamStore<double>& store, GradSinks<double>& grads,
                                  int probe_count, double h, Rng& rng) {
    require(h > 0, "finite_diff_check: h must be positive");
    grad_fn();
    std::vector<std::pair<int, int64_t>> probes;
    int64_t total = store.param_count();
    for (int i = 0; i < probe_count; ++i) {
        int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
        int p = 0;
        while (flat >= store[p].numel()) {
            flat -= store[p].numel();
            ++p;
        }
        probes.emplace_back(p, flat);
    }
    FdReport rep;
    rep.probes = probe_count;
    for (auto [p, i] : probes) {
        const double analytic = grads[p].data[i];
        const double orig = store[p].data[i];
        store[p].data[i] = orig + h;
        const double lp = loss_fn();
        store[p].data[i] = orig - h;
        const double lm = loss_fn();
        store[p].data[i] = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel =
            std::fabs(analytic - numeric) / (std::fabs(analytic) + std::fabs(numeric) + 1e-6);
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
    }
    return rep;
}

}  // namespace physar
