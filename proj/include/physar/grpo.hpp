#pragma once

// Group Relative Policy Optimization over generated frame-token streams,
// rewarded by physical-quantity extraction from the detokenized frames.

#include <memory>
#include <vector>

#include "physar/ar_model.hpp"
#include "physar/metrics.hpp"
#include "physar/threadpool.hpp"
#include "physar/tokenizer.hpp"

namespace physar {

struct GrpoConfig {
    int group_size = 8;       // g
    double beta = 0.01;       // KL coefficient
    double clip_eps = 0.2;    // importance-ratio clip; <= 0 disables
    double lr = 3e-6;
    int steps = 200;
    SamplerConfig sampler;    // top-k 50 / top-p 0.95
    int flow_steps = 8;       // detokenization budget during reward scoring
    double alpha = 4.0;       // reward shaping
    double k = 1.4;

    void validate() const {
        require(group_size >= 2, "GrpoConfig: group size must be >= 2");
        require(beta >= 0.0, "GrpoConfig: beta must be non-negative");
    }
};

struct Rollout {
    std::vector<int> gen_ids;
    std::vector<double> logp;    // under the generating policy, sampled tokens
    std::vector<char> sampled;   // false on forced structural tokens
    metrics::RewardBreakdown reward;
    double advantage = 0;
};

struct RolloutGroup {
    std::vector<int> condition;          // shared context c
    const world::Trajectory* truth = nullptr;
    std::vector<Mat<float>> condition_frames;  // ground-truth renders, reused per rollout
    std::vector<Rollout> rollouts;
};

// Population-std normalization with an epsilon guard; all-equal rewards give
// exactly zero advantages.
inline std::vector<double> compute_advantages(const std::vector<double>& rewards) {
    require(rewards.size() >= 2, "compute_advantages: need at least 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= n;
    const double denom = std::sqrt(var) + 1e-8;
    std::vector<double> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / denom;
    return adv;
}

// Samples g continuations from the frozen policy, detokenizes each and scores
// it against the exact trajectory. Detokenization failures zero the reward.
template <class T>
RolloutGroup rollout_group(const ArModel<T>& policy, const Tokenizer<T>& tok,
                           const std::vector<int>& condition, const world::Trajectory& truth,
                           const std::vector<Mat<float>>& condition_frames,
                           const world::WorldConfig& wcfg, const GrpoConfig& cfg, Rng& rng) {
    cfg.validate();
    RolloutGroup group;
    group.condition = condition;
    group.truth = &truth;
    group.condition_frames = condition_frames;
    group.rollouts.resize(static_cast<size_t>(cfg.group_size));
    const int frames_to_generate = policy.cfg.frame_count - policy.cfg.condition_frames;

    std::vector<Rng> rngs;
    for (int i = 0; i < cfg.group_size; ++i) rngs.push_back(rng.child(static_cast<uint64_t>(i)));
    rng.next_u64();

    parallel_for(cfg.group_size, [&](int64_t i) {
        Rng& r = rngs[static_cast<size_t>(i)];
        Rollout& ro = group.rollouts[static_cast<size_t>(i)];
        const Continuation cont =
            sample_continuation(policy, condition, frames_to_generate, cfg.sampler, r);
        ro.gen_ids = cont.gen_ids;
        ro.logp = cont.logp;
        ro.sampled = cont.sampled;
        try {
            const ParsedStream parsed = stream_to_frames(cont.full_ids, policy.layout, policy.cfg.T);
            std::vector<Mat<float>> video = condition_frames;
            Rng drng = r.child("detok");
            for (size_t f = static_cast<size_t>(policy.cfg.condition_frames);
                 f < parsed.frames.size(); ++f) {
                Rng frng = drng.child(static_cast<uint64_t>(f));
                Mat<T> img = tok.detokenize(parsed.frames[f], frng, cfg.flow_steps);
                video.push_back(img.template cast<float>());
            }
            ro.reward = metrics::compute_reward(video, truth, wcfg, cfg.alpha, cfg.k,
                                                policy.cfg.condition_frames);
        } catch (const std::exception&) {
            ro.reward = metrics::RewardBreakdown{};
            ro.reward.degenerate = true;
        }
    });

    std::vector<double> rewards;
    for (const auto& ro : group.rollouts) rewards.push_back(ro.reward.total);
    const auto adv = compute_advantages(rewards);
    for (size_t i = 0; i < adv.size(); ++i) group.rollouts[i].advantage = adv[i];
    return group;
}

// Token-level clipped surrogate + KL penalty, averaged over sampled tokens of
// all rollouts. Gradients flow into `sinks`; kl_out receives the mean k3
// estimate when requested.
template <class T>
double grpo_loss(const ArModel<T>& policy, const RolloutGroup& group, const GrpoConfig& cfg,
                 GradSinks<T>& sinks, bool backward = true, double* kl_out = nullptr) {
    int64_t active_total = 0;
    for (const auto& ro : group.rollouts)
        for (char s : ro.sampled) active_total += s != 0;
    require(active_total > 0, "grpo_loss: no sampled tokens in group");
    const double clip = cfg.clip_eps > 0 ? cfg.clip_eps : 1e18;

    double total = 0;
    double kl_sum = 0;
    const int cond_len = static_cast<int>(group.condition.size());
    for (const auto& ro : group.rollouts) {
        Graph<T> g;
        std::vector<int> full = group.condition;
        full.insert(full.end(), ro.gen_ids.begin(), ro.gen_ids.end());
        const int S = static_cast<int>(full.size());
        auto logits = policy.logits_node(g, sinks, full);
        // visual-only renormalization at sampled positions, matching the
        // distribution the sampler actually drew from
        Mat<T> mask(S, policy.layout.vocab(), T(0));
        std::vector<int> targets(static_cast<size_t>(S), -1);
        auto old_logp = std::make_shared<std::vector<double>>(static_cast<size_t>(S), 0.0);
        auto active = std::make_shared<std::vector<char>>(static_cast<size_t>(S), 0);
        for (size_t j = 0; j < ro.gen_ids.size(); ++j) {
            if (!ro.sampled[j]) continue;
            const int p = cond_len + static_cast<int>(j);  // stream position of this token
            const int row = p - 1;                          // logits row predicting it
            targets[static_cast<size_t>(row)] = ro.gen_ids[j];
            (*old_logp)[static_cast<size_t>(row)] = ro.logp[j];
            (*active)[static_cast<size_t>(row)] = 1;
            for (int v = policy.layout.n_visual; v < policy.layout.vocab(); ++v)
                mask.at(row, v) = static_cast<T>(-1e30);
        }
        auto lp = g.rows_logp(g.add(logits, g.constant(std::move(mask))), targets);
        if (kl_out) {
            const auto& lpv = g.val(lp);
            for (int r = 0; r < lpv.rows; ++r) {
                if (!(*active)[static_cast<size_t>(r)]) continue;
                const double d = static_cast<double>(lpv.data[r]) - (*old_logp)[static_cast<size_t>(r)];
                kl_sum += std::exp(-d) + d - 1.0;
            }
        }
        auto rollout_sum = g.surrogate_sum(lp, old_logp, ro.advantage, clip, cfg.beta, active);
        auto loss = g.scale(rollout_sum, 1.0 / static_cast<double>(active_total));
        total += g.scalar(loss);
        if (backward) g.backward(loss);
    }
    if (kl_out) *kl_out = kl_sum / static_cast<double>(active_total);
    return total;
}

}  // namespace physar
