#pragma once

// Diffusion-timestep tokenizer: a two-stream encoder distills each frame into
// T query latents, an EMA codebook quantizes them by cosine similarity, and a
// two-stream denoiser reconstructs the clean frame from a noisy interpolant
// conditioned on an expanding token prefix (rectified-flow training).

#include <memory>
#include <string>
#include <vector>

#include "physar/checkpoint.hpp"
#include "physar/graph.hpp"
#include "physar/nn.hpp"
#include "physar/optim.hpp"
#include "physar/rng.hpp"
#include "physar/threadpool.hpp"

namespace physar {

struct TokenizerConfig {
    int T = 16;            // tokens per frame
    int N = 256;           // codebook size
    int code_dim = 16;     // low-dim lookup space
    int image_size = 32;
    int patch = 4;
    int enc_layers = 4;
    int enc_dim = 64;
    int enc_heads = 4;
    int dec_layers = 6;
    int dec_dim = 128;
    int dec_heads = 4;
    double ema_decay = 0.99;
    double commit_weight = 0.25;
    int dead_window = 256;  // steps an entry may stay unmatched
    int flow_steps = 32;    // detokenize Euler steps
    int time_feat_dim = 64;
    double init_std = 0.02;
    // Fraction of training samples forced to the full-noise level k=T.
    // 0 keeps the uniform level draw; positive values concentrate training
    // on the levels where the condition tokens carry all the information.
    double full_noise_bias = 0.0;
    // Extra reconstruction weight on bright ground-truth pixels:
    // w_p = 1 + recon_ball_weight * x0_p. 0 keeps the plain MSE objective.
    double recon_ball_weight = 0.0;

    int n_patches() const {
        const int side = image_size / patch;
        return side * side;
    }
    void validate() const {
        require(T >= 1, "TokenizerConfig: T must be >= 1");
        require(N >= 2, "TokenizerConfig: N must be >= 2");
        require(code_dim <= enc_dim && code_dim <= dec_dim,
                "TokenizerConfig: code_dim must not exceed model dims");
        require(image_size % patch == 0, "TokenizerConfig: patch must divide image_size");
        require(enc_dim % enc_heads == 0 && dec_dim % dec_heads == 0,
                "TokenizerConfig: heads must divide dims");
    }
};

// k = ceil(t*T) for t in (0,1]; t=0 maps to the empty prefix.
inline int prefix_length(double t, int T) {
    require(t >= 0.0 && t <= 1.0, "prefix_length: t must lie in [0,1]");
    if (t <= 0.0) return 0;
    const int k = static_cast<int>(std::ceil(t * T - 1e-9));
    return std::min(std::max(k, 1), T);
}

// x_t = t*eps + (1-t)*x0, exact at the endpoints.
template <class T>
Mat<T> noisy_interpolate(const Mat<T>& x0, const Mat<T>& eps, double t) {
    require(x0.same_shape(eps), "noisy_interpolate: shape mismatch");
    require(t >= 0.0 && t <= 1.0, "noisy_interpolate: t must lie in [0,1]");
    if (t == 0.0) return x0;
    if (t == 1.0) return eps;
    Mat<T> out(x0.rows, x0.cols);
    for (int64_t i = 0; i < x0.numel(); ++i)
        out.data[i] = static_cast<T>(t) * eps.data[i] + static_cast<T>(1.0 - t) * x0.data[i];
    return out;
}

struct TokenizerLosses {
    double reconstruction = 0;
    double commitment = 0;  // scaled per-element mean entering the objective
    double total = 0;
};

template <class T>
class Tokenizer {
public:
    TokenizerConfig cfg;
    ParamStore<T> store;

    // codebook state (EMA-updated, not gradient-trained)
    Mat<T> codebook;           // N x code_dim, unit rows
    Mat<double> ema_counts;    // 1 x N
    Mat<double> ema_sums;      // N x code_dim
    std::vector<int64_t> usage;
    int64_t maintain_steps = 0;

    explicit Tokenizer(TokenizerConfig c, Rng& rng) : cfg(c) {
        cfg.validate();
        const double sd = cfg.init_std;
        const int p2 = cfg.patch * cfg.patch;
        enc_patch_ = add_linear(store, "enc.patch", p2, cfg.enc_dim, sd, rng);
        enc_pos_ = store.add("enc.pos", Mat<T>::randn(cfg.n_patches(), cfg.enc_dim, sd, rng));
        enc_query_ = store.add("enc.query", Mat<T>::randn(cfg.T, cfg.enc_dim, sd, rng));
        for (int l = 0; l < cfg.enc_layers; ++l)
            enc_blocks_.push_back(
                add_two_stream_block(store, "enc.blk" + std::to_string(l), cfg.enc_dim, sd, rng));
        enc_ln_ = add_norm(store, "enc.ln", cfg.enc_dim);
        enc_proj_ = add_linear(store, "enc.proj", cfg.enc_dim, cfg.code_dim, sd, rng);

        dec_patch_ = add_linear(store, "dec.patch", p2, cfg.dec_dim, sd, rng);
        dec_pos_ = store.add("dec.pos", Mat<T>::randn(cfg.n_patches(), cfg.dec_dim, sd, rng));
        dec_code_up_ = add_linear(store, "dec.code_up", cfg.code_dim, cfg.dec_dim, sd, rng);
        dec_cond_pos_ = store.add("dec.cond_pos", Mat<T>::randn(cfg.T, cfg.dec_dim, sd, rng));
        t_fc1_ = add_linear(store, "dec.t_fc1", cfg.time_feat_dim, cfg.dec_dim, sd, rng);
        t_fc2_ = add_linear(store, "dec.t_fc2", cfg.dec_dim, cfg.dec_dim, sd, rng);
        for (int l = 0; l < cfg.dec_layers; ++l)
            dec_blocks_.push_back(
                add_two_stream_block(store, "dec.blk" + std::to_string(l), cfg.dec_dim, sd, rng));
        dec_ln_ = add_norm(store, "dec.ln", cfg.dec_dim);
        dec_unembed_ = add_linear(store, "dec.unembed", cfg.dec_dim, p2, 0.0, rng);  // zero init

        codebook = Mat<T>(cfg.N, cfg.code_dim);
        Rng crng = rng.child("codebook");
        for (int i = 0; i < cfg.N; ++i) {
            double sq = 0;
            for (int j = 0; j < cfg.code_dim; ++j) {
                const double v = crng.gauss();
                codebook.at(i, j) = static_cast<T>(v);
                sq += v * v;
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(std::max(sq, 1e-12)));
            for (int j = 0; j < cfg.code_dim; ++j) codebook.at(i, j) *= inv;
        }
        ema_counts = Mat<double>(1, cfg.N, 0.0);
        ema_sums = Mat<double>(cfg.N, cfg.code_dim, 0.0);
        for (int i = 0; i < cfg.N; ++i)
            for (int j = 0; j < cfg.code_dim; ++j)
                ema_sums.at(i, j) = static_cast<double>(codebook.at(i, j));
        usage.assign(static_cast<size_t>(cfg.N), 0);
        patch_index_ = build_patch_index();
        unpatch_index_ = build_unpatch_index();
    }

    // Internal flow latents are signed pixels: y = 2x - 1. The public frame
    // contracts stay in [0,1]; only the denoiser sees the signed space.
    static Mat<T> to_latent(const Mat<T>& frame) {
        Mat<T> out = frame;
        for (auto& v : out.data) v = T(2) * v - T(1);
        return out;
    }
    static Mat<T> from_latent(const Mat<T>& latent) {
        Mat<T> out = latent;
        for (auto& v : out.data) v = std::min(T(1), std::max(T(0), (v + T(1)) * T(0.5)));
        return out;
    }

    // --- graph builders -----------------------------------------------------

    // frame -> T x code_dim unit-norm latents
    typename Graph<T>::NodeId encode_node(Graph<T>& g, GradSinks<T>& sinks,
                                          const Mat<T>& frame) const {
        require(frame.rows == cfg.image_size && frame.cols == cfg.image_size,
                "encode: frame size mismatch");
        auto img = g.add(linear(g, store, sinks, enc_patch_, g.constant(patchify(frame))),
                         pnode(g, store, sinks, enc_pos_));
        auto qry = pnode(g, store, sinks, enc_query_);
        for (const auto& blk : enc_blocks_) {
            auto [a, b] = two_stream_forward(g, store, sinks, blk, img, qry, cfg.enc_dim,
                                             cfg.enc_heads);
            img = a;
            qry = b;
        }
        auto z = linear(g, store, sinks, enc_proj_, norm(g, store, sinks, enc_ln_, qry));
        return g.l2normalize_rows(z);
    }

    // noisy frame + k-token condition -> predicted clean frame
    typename Graph<T>::NodeId decode_node(Graph<T>& g, GradSinks<T>& sinks, const Mat<T>& x_t,
                                          double t, typename Graph<T>::NodeId cond_codes) const {
        const int k = g.val(cond_codes).rows;
        require(k >= 0 && k <= cfg.T, "decode: condition length out of range");
        require(g.val(cond_codes).cols == cfg.code_dim, "decode: condition dim mismatch");
        auto temb = linear(
            g, store, sinks, t_fc2_,
            g.gelu(linear(g, store, sinks, t_fc1_,
                          g.constant(time_features<T>(t, cfg.time_feat_dim)))));
        auto img = g.add_rowvec(
            g.add(linear(g, store, sinks, dec_patch_, g.constant(patchify(x_t))),
                  pnode(g, store, sinks, dec_pos_)),
            temb);
        auto cond = g.add_rowvec(
            g.add(linear(g, store, sinks, dec_code_up_, cond_codes),
                  g.slice_rows(pnode(g, store, sinks, dec_cond_pos_), 0, k)),
            temb);
        for (const auto& blk : dec_blocks_) {
            auto [a, b] =
                two_stream_forward(g, store, sinks, blk, img, cond, cfg.dec_dim, cfg.dec_heads);
            img = a;
            cond = b;
        }
        auto patches =
            linear(g, store, sinks, dec_unembed_, norm(g, store, sinks, dec_ln_, img));
        return g.gather_flat(patches, unpatch_index_, cfg.image_size, cfg.image_size);
    }

    // --- quantizer ----------------------------------------------------------

    // max-cosine lookup; ties resolve to the lowest index
    std::vector<int> lookup(const Mat<T>& latents) const {
        require(latents.cols == cfg.code_dim, "quantize: latent dim mismatch");
        std::vector<int> ids(static_cast<size_t>(latents.rows));
        for (int i = 0; i < latents.rows; ++i) {
            int best = 0;
            double best_sim = -2.0;
            for (int n = 0; n < cfg.N; ++n) {
                double sim = 0;
                for (int j = 0; j < cfg.code_dim; ++j)
                    sim += static_cast<double>(latents.at(i, j)) * codebook.at(n, j);
                if (sim > best_sim) {
                    best_sim = sim;
                    best = n;
                }
            }
            ids[static_cast<size_t>(i)] = best;
        }
        return ids;
    }

    Mat<T> gather_codes(const std::vector<int>& ids) const {
        Mat<T> q(static_cast<int>(ids.size()), cfg.code_dim);
        for (size_t i = 0; i < ids.size(); ++i) {
            require(ids[i] >= 0 && ids[i] < cfg.N, "token id out of range");
            std::copy(codebook.row(ids[i]), codebook.row(ids[i]) + cfg.code_dim,
                      q.row(static_cast<int>(i)));
        }
        return q;
    }

    // spec contract: ids + matched entries + raw commitment sum
    struct Quantized {
        std::vector<int> ids;
        Mat<T> codes;
        double commit_sum = 0;
    };

    Quantized quantize(const Mat<T>& latents) const {
        Quantized out;
        out.ids = lookup(latents);
        out.codes = gather_codes(out.ids);
        for (int i = 0; i < latents.rows; ++i)
            for (int j = 0; j < cfg.code_dim; ++j) {
                const double d =
                    static_cast<double>(latents.at(i, j)) - static_cast<double>(out.codes.at(i, j));
                out.commit_sum += d * d;
            }
        return out;
    }

    // --- EMA codebook maintenance -------------------------------------------

    void codebook_maintain(const std::vector<int>& ids, const Mat<T>& latents, Rng& rng) {
        require(static_cast<int>(ids.size()) == latents.rows, "maintain: id/latent mismatch");
        std::vector<double> n(static_cast<size_t>(cfg.N), 0.0);
        Mat<double> s(cfg.N, cfg.code_dim, 0.0);
        for (size_t i = 0; i < ids.size(); ++i) {
            n[static_cast<size_t>(ids[i])] += 1.0;
            for (int j = 0; j < cfg.code_dim; ++j)
                s.at(ids[i], j) += static_cast<double>(latents.at(static_cast<int>(i), j));
        }
        const double d = cfg.ema_decay;
        for (int e = 0; e < cfg.N; ++e) {
            ema_counts.at(0, e) = d * ema_counts.at(0, e) + (1.0 - d) * n[static_cast<size_t>(e)];
            for (int j = 0; j < cfg.code_dim; ++j)
                ema_sums.at(e, j) = d * ema_sums.at(e, j) + (1.0 - d) * s.at(e, j);
            usage[static_cast<size_t>(e)] += static_cast<int64_t>(n[static_cast<size_t>(e)]);
            if (ema_counts.at(0, e) > 1e-6) {
                double sq = 0;
                for (int j = 0; j < cfg.code_dim; ++j) {
                    const double v = ema_sums.at(e, j) / ema_counts.at(0, e);
                    codebook.at(e, j) = static_cast<T>(v);
                    sq += v * v;
                }
                const T inv = static_cast<T>(1.0 / std::sqrt(std::max(sq, 1e-18)));
                for (int j = 0; j < cfg.code_dim; ++j) codebook.at(e, j) *= inv;
            }
        }
        maintain_steps += 1;
        if (maintain_steps % cfg.dead_window == 0) {
            for (int e = 0; e < cfg.N; ++e) {
                if (usage[static_cast<size_t>(e)] == 0 && latents.rows > 0) {
                    const int pick =
                        static_cast<int>(rng.next_below(static_cast<uint64_t>(latents.rows)));
                    double sq = 0;
                    for (int j = 0; j < cfg.code_dim; ++j) {
                        const double v = static_cast<double>(latents.at(pick, j));
                        codebook.at(e, j) = static_cast<T>(v);
                        ema_sums.at(e, j) = v;
                        sq += v * v;
                    }
                    const T inv = static_cast<T>(1.0 / std::sqrt(std::max(sq, 1e-18)));
                    for (int j = 0; j < cfg.code_dim; ++j) codebook.at(e, j) *= inv;
                    ema_counts.at(0, e) = 1.0;
                }
                usage[static_cast<size_t>(e)] = 0;
            }
        }
    }

    // --- training -----------------------------------------------------------

    // builds the per-sample loss graph; returns loss node (recon + commit)
    struct SampleLoss {
        typename Graph<T>::NodeId loss;
        double recon = 0;
        double commit_scaled = 0;
        std::vector<int> ids;
        Mat<T> latents;  // normalized encoder projections (for EMA)
    };

    // frozen_ids pins the codebook assignment (used by the finite-difference
    // harness; the lookup itself is a step function)
    SampleLoss build_sample_loss(Graph<T>& g, GradSinks<T>& sinks, const Mat<T>& x0, int k,
                                 const Mat<T>& eps,
                                 const std::vector<int>* frozen_ids = nullptr) const {
        require(k >= 1 && k <= cfg.T, "train: prefix level out of range");
        const double t = static_cast<double>(k) / cfg.T;
        SampleLoss out;
        auto zp = encode_node(g, sinks, x0);
        out.latents = g.val(zp);
        Quantized q;
        if (frozen_ids) {
            q.ids = *frozen_ids;
            q.codes = gather_codes(q.ids);
        } else {
            q = quantize(out.latents);
        }
        out.ids = q.ids;
        Mat<T> qk(k, cfg.code_dim);
        for (int i = 0; i < k; ++i)
            std::copy(q.codes.row(i), q.codes.row(i) + cfg.code_dim, qk.row(i));
        auto cond = g.straight_through(g.slice_rows(zp, 0, k), std::move(qk));
        const Mat<T> x0_lat = to_latent(x0);
        const Mat<T> x_t = noisy_interpolate(x0_lat, eps, t);
        auto pred = decode_node(g, sinks, x_t, t, cond);
        typename Graph<T>::NodeId recon;
        if (cfg.recon_ball_weight > 0.0) {
            Mat<T> w(x0.rows, x0.cols);
            for (int64_t i = 0; i < x0.numel(); ++i)
                w.data[i] = T(1) + static_cast<T>(cfg.recon_ball_weight) * x0.data[i];
            recon = g.wmse_mean(pred, x0_lat, std::move(w));
        } else {
            recon = g.mse_mean(pred, x0_lat);
        }
        auto commit = g.scale(g.sum_sq_diff(zp, q.codes),
                              1.0 / (static_cast<double>(cfg.T) * cfg.code_dim));
        out.recon = g.scalar(recon);
        out.commit_scaled = g.scalar(commit);
        out.loss = g.add(recon, g.scale(commit, cfg.commit_weight));
        return out;
    }

    // one optimizer step over a batch; thread-parallel with ordered reduction
    TokenizerLosses train_step(const std::vector<const Mat<T>*>& batch, Rng& rng,
                               OptimizerState<T>& opt, const TrainHyper& hyper, double lr) {
        const int B = static_cast<int>(batch.size());
        require(B > 0, "train_step: empty batch");
        struct Slot {
            GradSinks<T> sinks;
            double recon = 0, commit = 0;
            std::vector<int> ids;
            Mat<T> latents;
        };
        std::vector<Slot> slots(static_cast<size_t>(B));
        std::vector<Rng> rngs;
        rngs.reserve(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) rngs.push_back(rng.child(static_cast<uint64_t>(b)));
        rng.next_u64();  // advance parent so successive steps differ

        parallel_for(B, [&](int64_t b) {
            Rng& r = rngs[static_cast<size_t>(b)];
            int k = 1 + static_cast<int>(r.next_below(static_cast<uint64_t>(cfg.T)));
            if (cfg.full_noise_bias > 0.0 && r.bernoulli(cfg.full_noise_bias)) k = cfg.T;
            Mat<T> eps(cfg.image_size, cfg.image_size);
            for (auto& v : eps.data) v = static_cast<T>(r.gauss());
            Graph<T> g;
            auto& slot = slots[static_cast<size_t>(b)];
            slot.sinks = make_sinks(store);
            zero_sinks(store, slot.sinks);
            auto sl = build_sample_loss(g, slot.sinks, *batch[static_cast<size_t>(b)], k, eps);
            g.backward(sl.loss);
            slot.recon = sl.recon;
            slot.commit = sl.commit_scaled;
            slot.ids = std::move(sl.ids);
            slot.latents = std::move(sl.latents);
        });

        GradSinks<T> grads = make_sinks(store);
        zero_sinks(store, grads);
        TokenizerLosses losses;
        std::vector<int> all_ids;
        Mat<T> all_latents(B * cfg.T, cfg.code_dim);
        for (int b = 0; b < B; ++b) {
            auto& slot = slots[static_cast<size_t>(b)];
            accumulate_sinks(grads, slot.sinks);
            losses.reconstruction += slot.recon / B;
            losses.commitment += slot.commit / B;
            all_ids.insert(all_ids.end(), slot.ids.begin(), slot.ids.end());
            for (int i = 0; i < cfg.T; ++i)
                std::copy(slot.latents.row(i), slot.latents.row(i) + cfg.code_dim,
                          all_latents.row(b * cfg.T + i));
        }
        for (auto& gm : grads)
            for (auto& v : gm.data) v = static_cast<T>(v / B);
        losses.total = losses.reconstruction + cfg.commit_weight * losses.commitment;
        if (hyper.grad_clip > 0) clip_grad_norm(grads, hyper.grad_clip);
        adamw_step(store, grads, opt, hyper, lr);
        Rng mrng = rng.child("maintain");
        codebook_maintain(all_ids, all_latents, mrng);
        return losses;
    }

    // --- inference ----------------------------------------------------------

    std::vector<int> tokenize(const Mat<T>& frame) const {
        Graph<T> g;
        GradSinks<T> sinks = make_sinks(store);
        auto zp = encode_node(g, sinks, frame);
        return lookup(g.val(zp));
    }

    Mat<T> decode_once(const Mat<T>& x_t, double t, const std::vector<int>& prefix) const {
        require(static_cast<int>(prefix.size()) == prefix_length(t, cfg.T),
                "decode: prefix length must equal prefix_length(t, T)");
        Graph<T> g;
        GradSinks<T> sinks = make_sinks(store);
        auto out = decode_node(g, sinks, x_t, t, g.constant(gather_codes(prefix)));
        return g.val(out);
    }

    // integrate the flow from pure noise, conditioning on at most
    // `prefix_budget` leading tokens (full sequence when budget == T)
    Mat<T> detokenize_prefix(const std::vector<int>& tokens, int prefix_budget, Rng& rng,
                             int steps) const {
        require(static_cast<int>(tokens.size()) == cfg.T, "detokenize: need exactly T ids");
        require(prefix_budget >= 0 && prefix_budget <= cfg.T, "detokenize: bad prefix budget");
        require(steps >= 1, "detokenize: steps must be >= 1");
        for (int id : tokens) require(id >= 0 && id < cfg.N, "detokenize: id out of range");
        Mat<T> x(cfg.image_size, cfg.image_size);
        for (auto& v : x.data) v = static_cast<T>(rng.gauss());
        const double dt = 1.0 / steps;
        for (int i = steps; i >= 1; --i) {
            const double t = static_cast<double>(i) / steps;
            const int k = std::min(prefix_budget, prefix_length(t, cfg.T));
            std::vector<int> prefix(tokens.begin(), tokens.begin() + k);
            Graph<T> g;
            GradSinks<T> sinks = make_sinks(store);
            auto pred = decode_node(g, sinks, x, t, g.constant(gather_codes(prefix)));
            const Mat<T>& x0hat = g.val(pred);
            for (int64_t j = 0; j < x.numel(); ++j) {
                const double v = (x.data[j] - x0hat.data[j]) / t;  // d x_t / dt
                x.data[j] = static_cast<T>(x.data[j] - dt * v);
            }
        }
        return from_latent(x);
    }

    Mat<T> detokenize(const std::vector<int>& tokens, Rng& rng, int steps = -1) const {
        return detokenize_prefix(tokens, cfg.T, rng, steps < 0 ? cfg.flow_steps : steps);
    }

    // --- persistence ----------------------------------------------------------

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.put_store(store, "tok.");
        ck.put_mat("tok.codebook", codebook, DType::f32);
        ck.put_mat("tok.ema_counts", ema_counts, DType::f64);
        ck.put_mat("tok.ema_sums", ema_sums, DType::f64);
        const std::vector<double> c = {
            static_cast<double>(cfg.T),          static_cast<double>(cfg.N),
            static_cast<double>(cfg.code_dim),   static_cast<double>(cfg.image_size),
            static_cast<double>(cfg.patch),      static_cast<double>(cfg.enc_layers),
            static_cast<double>(cfg.enc_dim),    static_cast<double>(cfg.enc_heads),
            static_cast<double>(cfg.dec_layers), static_cast<double>(cfg.dec_dim),
            static_cast<double>(cfg.dec_heads),  cfg.ema_decay,
            cfg.commit_weight,                   static_cast<double>(cfg.dead_window),
            static_cast<double>(cfg.flow_steps), static_cast<double>(cfg.time_feat_dim),
            cfg.full_noise_bias,                 cfg.recon_ball_weight};
        ck.put_vec("tok.cfg", c, DType::f64);
        ck.save(path);
    }

    static Tokenizer load(const std::string& path) {
        const Checkpoint ck = Checkpoint::load(path);
        const auto c = ck.get("tok.cfg").template as<double>();
        require(c.size() >= 16, "tokenizer checkpoint: bad config entry");
        TokenizerConfig cfg;
        cfg.T = static_cast<int>(c[0]);
        cfg.N = static_cast<int>(c[1]);
        cfg.code_dim = static_cast<int>(c[2]);
        cfg.image_size = static_cast<int>(c[3]);
        cfg.patch = static_cast<int>(c[4]);
        cfg.enc_layers = static_cast<int>(c[5]);
        cfg.enc_dim = static_cast<int>(c[6]);
        cfg.enc_heads = static_cast<int>(c[7]);
        cfg.dec_layers = static_cast<int>(c[8]);
        cfg.dec_dim = static_cast<int>(c[9]);
        cfg.dec_heads = static_cast<int>(c[10]);
        cfg.ema_decay = c[11];
        cfg.commit_weight = c[12];
        cfg.dead_window = static_cast<int>(c[13]);
        cfg.flow_steps = static_cast<int>(c[14]);
        cfg.time_feat_dim = static_cast<int>(c[15]);
        if (c.size() >= 17) cfg.full_noise_bias = c[16];
        if (c.size() >= 18) cfg.recon_ball_weight = c[17];
        Rng dummy(0);
        Tokenizer tok(cfg, dummy);
        ck.load_store(tok.store, "tok.");
        tok.codebook = ck.get_mat<T>("tok.codebook");
        tok.ema_counts = ck.get_mat<double>("tok.ema_counts");
        tok.ema_sums = ck.get_mat<double>("tok.ema_sums");
        return tok;
    }

    Mat<T> patchify(const Mat<T>& img) const {
        require(img.rows == cfg.image_size && img.cols == cfg.image_size,
                "patchify: image size mismatch");
        const int side = cfg.image_size / cfg.patch;
        Mat<T> out(cfg.n_patches(), cfg.patch * cfg.patch);
        for (int pr = 0; pr < side; ++pr)
            for (int pc = 0; pc < side; ++pc) {
                T* dst = out.row(pr * side + pc);
                for (int dy = 0; dy < cfg.patch; ++dy)
                    for (int dx = 0; dx < cfg.patch; ++dx)
                        dst[dy * cfg.patch + dx] = img.at(pr * cfg.patch + dy, pc * cfg.patch + dx);
            }
        return out;
    }

private:
    LinearIdx enc_patch_, enc_proj_;
    int enc_pos_ = -1, enc_query_ = -1;
    std::vector<TwoStreamBlockIdx> enc_blocks_;
    NormIdx enc_ln_;

    LinearIdx dec_patch_, dec_code_up_, t_fc1_, t_fc2_, dec_unembed_;
    int dec_pos_ = -1, dec_cond_pos_ = -1;
    std::vector<TwoStreamBlockIdx> dec_blocks_;
    NormIdx dec_ln_;

    std::shared_ptr<const std::vector<int64_t>> patch_index_;
    std::shared_ptr<const std::vector<int64_t>> unpatch_index_;

    std::shared_ptr<const std::vector<int64_t>> build_patch_index() const {
        auto idx = std::make_shared<std::vector<int64_t>>();
        const int side = cfg.image_size / cfg.patch;
        idx->reserve(static_cast<size_t>(cfg.image_size) * cfg.image_size);
        for (int pr = 0; pr < side; ++pr)
            for (int pc = 0; pc < side; ++pc)
                for (int dy = 0; dy < cfg.patch; ++dy)
                    for (int dx = 0; dx < cfg.patch; ++dx)
                        idx->push_back(static_cast<int64_t>(pr * cfg.patch + dy) * cfg.image_size +
                                       pc * cfg.patch + dx);
        return idx;
    }
    // inverse permutation: image flat index -> patches flat index
    std::shared_ptr<const std::vector<int64_t>> build_unpatch_index() const {
        const auto fwd = build_patch_index();
        auto inv = std::make_shared<std::vector<int64_t>>(fwd->size());
        for (size_t i = 0; i < fwd->size(); ++i)
            (*inv)[static_cast<size_t>((*fwd)[i])] = static_cast<int64_t>(i);
        return inv;
    }
};

}  // namespace physar
