#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "physar/grpo.hpp"
#include "physar/world.hpp"

using namespace physar;

namespace {

// independent mean/std oracle in long double
std::vector<double> oracle_advantages(const std::vector<double>& r) {
    long double mean = 0;
    for (double x : r) mean += x;
    mean /= r.size();
    long double var = 0;
    for (double x : r) var += (x - mean) * (x - mean);
    var /= r.size();
    const long double denom = std::sqrt(var) + 1e-8L;
    std::vector<double> out;
    for (double x : r) out.push_back(static_cast<double>((x - mean) / denom));
    return out;
}

ArConfig micro_ar() {
    ArConfig cfg;
    cfg.layers = 1;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.n_visual = 16;
    cfg.T = 2;
    cfg.frame_count = 4;
    cfg.condition_frames = 1;
    return cfg;
}

// builds a rollout whose old log-probs are the policy's own current values,
// so rho = 1 exactly at loss time
RolloutGroup group_at_rho_one(const ArModel<float>& policy, const std::vector<double>& rewards,
                              Rng& rng) {
    RolloutGroup group;
    std::vector<std::vector<int>> cond_frames
        = {{static_cast<int>(rng.next_below(16)), static_cast<int>(rng.next_below(16))}};
    group.condition = frames_to_stream(cond_frames, world::Kind::uniform, policy.layout, 2);
    const int cond_len = static_cast<int>(group.condition.size());
    for (size_t g = 0; g < rewards.size(); ++g) {
        Rollout ro;
        const int frames_to_gen = policy.cfg.frame_count - policy.cfg.condition_frames;
        for (int f = 0; f < frames_to_gen; ++f) {
            ro.gen_ids.push_back(policy.layout.frame_sep());
            ro.logp.push_back(0);
            ro.sampled.push_back(0);
            for (int t = 0; t < policy.cfg.T; ++t) {
                ro.gen_ids.push_back(static_cast<int>(rng.next_below(16)));
                ro.logp.push_back(0);  // filled below
                ro.sampled.push_back(1);
            }
        }
        // compute the policy's own masked log-probs for the sampled ids
        std::vector<int> full = group.condition;
        full.insert(full.end(), ro.gen_ids.begin(), ro.gen_ids.end());
        Graph<float> gph;
        GradSinks<float> sinks = make_sinks(policy.store);
        auto logits = gph.val(policy.logits_node(gph, sinks, full));
        for (size_t j = 0; j < ro.gen_ids.size(); ++j) {
            if (!ro.sampled[j]) continue;
            const int row = cond_len + static_cast<int>(j) - 1;
            double mx = -1e300;
            for (int v = 0; v < policy.layout.n_visual; ++v)
                mx = std::max(mx, static_cast<double>(logits.at(row, v)));
            double z = 0;
            for (int v = 0; v < policy.layout.n_visual; ++v)
                z += std::exp(static_cast<double>(logits.at(row, v)) - mx);
            ro.logp[j] =
                static_cast<double>(logits.at(row, ro.gen_ids[j])) - mx - std::log(z);
        }
        ro.reward.total = rewards[g];
        group.rollouts.push_back(std::move(ro));
    }
    const auto adv = compute_advantages(rewards);
    for (size_t i = 0; i < adv.size(); ++i) group.rollouts[i].advantage = adv[i];
    return group;
}

}  // namespace

TEST_CASE("advantages match the independent oracle and the frozen example") {
    const auto a = compute_advantages({1.0, 2.0, 3.0});
    CHECK(a[0] == doctest::Approx(-1.2247).epsilon(1e-4));
    CHECK(a[1] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(a[2] == doctest::Approx(1.2247).epsilon(1e-4));
    const auto oracle = oracle_advantages({1.0, 2.0, 3.0});
    for (int i = 0; i < 3; ++i) CHECK(a[static_cast<size_t>(i)] == doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-9));
}

TEST_CASE("advantage vectors are normalized over random groups") {
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const int g = 2 + static_cast<int>(rng.next_below(14));
        std::vector<double> rewards;
        for (int i = 0; i < g; ++i) rewards.push_back(rng.uniform(0.0, 5.0));
        const auto adv = compute_advantages(rewards);
        double mean = 0, var = 0;
        for (double v : adv) mean += v;
        mean /= g;
        for (double v : adv) var += (v - mean) * (v - mean);
        var /= g;
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-4);  // eps guard skews slightly
        const auto oracle = oracle_advantages(rewards);
        for (int i = 0; i < g; ++i)
            CHECK(adv[static_cast<size_t>(i)] ==
                  doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-9));
    }
}

TEST_CASE("all-equal rewards give exactly zero advantages") {
    const auto adv = compute_advantages({2.5, 2.5, 2.5, 2.5});
    for (double v : adv) CHECK(v == 0.0);
}

TEST_CASE("loss is zero at rho=1 for a normalized group") {
    Rng rng(7);
    ArModel<float> policy(micro_ar(), rng);
    Rng grng(11);
    auto group = group_at_rho_one(policy, {1.0, 2.0, 4.0}, grng);
    GrpoConfig cfg;
    cfg.group_size = 3;
    cfg.beta = 0.5;  // KL active but zero at equality
    GradSinks<float> sinks = make_sinks(policy.store);
    zero_sinks(policy.store, sinks);
    double kl = 0;
    const double loss = grpo_loss(policy, group, cfg, sinks, /*backward=*/false, &kl);
    CHECK(std::fabs(loss) < 1e-5);
    CHECK(std::fabs(kl) < 1e-10);
}

TEST_CASE("equal-reward group at rho=1 has zero loss and zero gradient") {
    Rng rng(13);
    ArModel<float> policy(micro_ar(), rng);
    Rng grng(17);
    auto group = group_at_rho_one(policy, {3.0, 3.0, 3.0, 3.0}, grng);
    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.beta = 0.01;
    GradSinks<float> sinks = make_sinks(policy.store);
    zero_sinks(policy.store, sinks);
    double kl = 0;
    const double loss = grpo_loss(policy, group, cfg, sinks, /*backward=*/true, &kl);
    CHECK(std::fabs(loss) < 1e-8);
    double gnorm = 0;
    for (const auto& m : sinks)
        for (float v : m.data) gnorm += static_cast<double>(v) * v;
    // advantages are exactly zero and the KL gradient vanishes at equality
    CHECK(std::sqrt(gnorm) < 1e-6);
    CHECK(kl < 1e-10);
}

TEST_CASE("surrogate reduces to REINFORCE against an enumerated-gradient oracle") {
    // two-token policy: logits are the parameters themselves
    for (double advantage : {1.0, -0.7, 2.5}) {
        for (int target : {0, 1}) {
            ParamStore<double> store;
            store.add("logits", Mat<double>(1, 2, 0.0));
            store[0].data = {0.3, -0.2};
            GradSinks<double> sinks = make_sinks(store);
            zero_sinks(store, sinks);
            Graph<double> g;
            auto logits = pnode(g, store, sinks, 0);
            auto lp = g.rows_logp(logits, {target});
            auto old_lp = std::make_shared<std::vector<double>>(1, 0.0);
            {  // old = current -> rho = 1
                const double mx = std::max(store[0].data[0], store[0].data[1]);
                const double z =
                    std::exp(store[0].data[0] - mx) + std::exp(store[0].data[1] - mx);
                (*old_lp)[0] = store[0].data[target] - mx - std::log(z);
            }
            auto active = std::make_shared<std::vector<char>>(1, 1);
            auto loss = g.surrogate_sum(lp, old_lp, advantage, /*clip=*/1e18, /*beta=*/0.0, active);
            g.backward(loss);
            // oracle: grad = -A * (onehot - p)
            const double mx = std::max(store[0].data[0], store[0].data[1]);
            const double e0 = std::exp(store[0].data[0] - mx);
            const double e1 = std::exp(store[0].data[1] - mx);
            const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
            const double expect0 = -advantage * ((target == 0 ? 1.0 : 0.0) - p0);
            const double expect1 = -advantage * ((target == 1 ? 1.0 : 0.0) - p1);
            CHECK(sinks[0].data[0] == doctest::Approx(expect0).epsilon(1e-6));
            CHECK(sinks[0].data[1] == doctest::Approx(expect1).epsilon(1e-6));
            // single token, A=1, rho=1, beta=0 -> loss = -1 * A
            if (advantage == 1.0) CHECK(g.scalar(loss) == doctest::Approx(-1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("surrogate gradients pass finite differences away from rho=1") {
    Rng rng(19);
    ParamStore<double> store;
    store.add("logits", Mat<double>::randn(5, 7, 0.6, rng));
    std::vector<int> targets = {2, -1, 6, 0, 3};
    auto old_lp = std::make_shared<std::vector<double>>(
        std::vector<double>{-1.2, 0.0, -2.1, -0.4, -1.8});
    auto active = std::make_shared<std::vector<char>>(std::vector<char>{1, 0, 1, 1, 1});
    GradSinks<double> grads = make_sinks(store);
    auto build = [&](Graph<double>& g, GradSinks<double>& s) {
        auto lp = g.rows_logp(pnode(g, store, s, 0), targets);
        return g.surrogate_sum(lp, old_lp, -0.9, 0.2, 0.05, active);
    };
    auto loss_fn = [&]() {
        Graph<double> g;
        GradSinks<double> s = make_sinks(store);
        return g.scalar(build(g, s));
    };
    auto grad_fn = [&]() {
        zero_sinks(store, grads);
        Graph<double> g;
        g.backward(build(g, grads));
    };
    Rng prng(23);
    const auto rep = finite_diff_check(loss_fn, grad_fn, store, grads, 40, 1e-6, prng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("rollout groups share the condition and zero out failures") {
    Rng rng(29);
    ArModel<float> policy(micro_ar(), rng);
    TokenizerConfig tcfg;
    tcfg.T = 2;
    tcfg.N = 16;
    tcfg.code_dim = 4;
    tcfg.image_size = 16;
    tcfg.patch = 4;
    tcfg.enc_layers = 1;
    tcfg.enc_dim = 8;
    tcfg.enc_heads = 2;
    tcfg.dec_layers = 1;
    tcfg.dec_dim = 8;
    tcfg.dec_heads = 2;
    tcfg.time_feat_dim = 4;
    Rng trng(31);
    Tokenizer<float> tok(tcfg, trng);

    world::WorldConfig wcfg;
    wcfg.image_size = 16;
    wcfg.frame_count = 4;
    wcfg.min_visible_frames = 4;
    world::ScenarioSpec spec;
    spec.kind = world::Kind::uniform;
    spec.balls = {{{5.0, 5.0}, {2.0, 0.0}, 1.2}};
    const auto truth = world::simulate(spec, wcfg);
    std::vector<Mat<float>> cond_frames = {world::render_frame(truth.frames[0], wcfg)};
    std::vector<std::vector<int>> cond_tokens = {tok.tokenize(cond_frames[0])};
    const auto condition = frames_to_stream(cond_tokens, spec.kind, policy.layout, 2);

    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.flow_steps = 2;
    cfg.sampler.top_k = 8;  // tiny vocabulary
    Rng grng(37);
    const auto group = rollout_group(policy, tok, condition, truth, cond_frames, wcfg, cfg, grng);
    REQUIRE(group.rollouts.size() == 4u);
    // identical conditioning, per-rollout structure, normalized advantages
    double mean = 0;
    bool all_same = true;
    for (const auto& ro : group.rollouts) {
        CHECK(ro.gen_ids.size() == 3u * 3u);  // 3 frames x (SEP + 2 ids)
        CHECK(ro.reward.total >= 0.0);
        CHECK(ro.reward.total <= 5.0);
        mean += ro.advantage;
        all_same = all_same && ro.gen_ids == group.rollouts[0].gen_ids;
    }
    CHECK(std::fabs(mean) < 1e-6);
    CHECK_FALSE(all_same);  // stochastic sampling diversifies the group
}
