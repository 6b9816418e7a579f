#pragma once

// Decoder-only autoregressive model over the extended visual vocabulary:
// visual codebook ids, then BOS / FRAME_SEP / scenario-kind control tokens.
// Streams flatten as [BOS, kind, (SEP, T visual ids) x frame_count].

#include <string>
#include <vector>

#include "physar/checkpoint.hpp"
#include "physar/graph.hpp"
#include "physar/nn.hpp"
#include "physar/rng.hpp"
#include "physar/world.hpp"

namespace physar {

struct VocabLayout {
    int n_visual = 256;

    int bos() const { return n_visual; }
    int frame_sep() const { return n_visual + 1; }
    int kind_token(world::Kind k) const { return n_visual + 2 + static_cast<int>(k); }
    int vocab() const { return n_visual + 5; }
    bool is_visual(int id) const { return id >= 0 && id < n_visual; }

    world::Kind kind_of(int id) const {
        require(id >= n_visual + 2 && id < vocab(), "VocabLayout: not a kind token");
        return static_cast<world::Kind>(id - n_visual - 2);
    }
};

enum class PosClass { bos, kind, sep, visual };

// Grammar position class within a flattened stream.
inline PosClass pos_class(int p, int T) {
    if (p == 0) return PosClass::bos;
    if (p == 1) return PosClass::kind;
    return (p - 2) % (T + 1) == 0 ? PosClass::sep : PosClass::visual;
}

struct ArConfig {
    int layers = 6;
    int dim = 256;
    int heads = 8;
    int n_visual = 256;
    int T = 16;            // visual tokens per frame
    int frame_count = 32;
    int condition_frames = 3;
    double init_std = 0.02;

    int max_seq() const { return 2 + frame_count * (T + 1); }
    int condition_len() const { return 2 + condition_frames * (T + 1); }
    int tokens_per_frame() const { return T + 1; }

    void validate() const {
        require(layers >= 1 && dim >= 8 && heads >= 1, "ArConfig: degenerate model shape");
        require(dim % heads == 0, "ArConfig: heads must divide dim");
        require(condition_frames >= 1 && condition_frames < frame_count,
                "ArConfig: condition frames must leave something to predict");
    }
};

struct SamplerConfig {
    int top_k = 50;
    double top_p = 0.95;

    void validate(int vocab) const {
        require(top_k >= 1 && top_k <= vocab, "SamplerConfig: top_k out of range");
        require(top_p > 0.0 && top_p <= 1.0, "SamplerConfig: top_p out of range");
    }
};

// --- stream layout ----------------------------------------------------------

inline std::vector<int> frames_to_stream(const std::vector<std::vector<int>>& frames,
                                         world::Kind kind, const VocabLayout& layout, int T) {
    std::vector<int> out;
    out.reserve(2 + frames.size() * (static_cast<size_t>(T) + 1));
    out.push_back(layout.bos());
    out.push_back(layout.kind_token(kind));
    for (const auto& f : frames) {
        require(static_cast<int>(f.size()) == T, "frames_to_stream: frame must have T ids");
        out.push_back(layout.frame_sep());
        for (int id : f) {
            require(layout.is_visual(id), "frames_to_stream: id outside the visual block");
            out.push_back(id);
        }
    }
    return out;
}

struct ParsedStream {
    world::Kind kind;
    std::vector<std::vector<int>> frames;
};

inline ParsedStream stream_to_frames(const std::vector<int>& stream, const VocabLayout& layout,
                                     int T) {
    require(stream.size() >= 2, "stream_to_frames: too short");
    require(stream[0] == layout.bos(), "stream_to_frames: missing BOS");
    ParsedStream out;
    out.kind = layout.kind_of(stream[1]);
    const size_t body = stream.size() - 2;
    require(body % (static_cast<size_t>(T) + 1) == 0, "stream_to_frames: ragged frame payload");
    size_t p = 2;
    while (p < stream.size()) {
        require(stream[p] == layout.frame_sep(), "stream_to_frames: missing frame separator");
        ++p;
        std::vector<int> f;
        f.reserve(static_cast<size_t>(T));
        for (int i = 0; i < T; ++i, ++p) {
            require(layout.is_visual(stream[p]), "stream_to_frames: non-visual payload id");
            f.push_back(stream[p]);
        }
        out.frames.push_back(std::move(f));
    }
    return out;
}

// --- model ------------------------------------------------------------------

template <class T>
class ArModel {
public:
    ArConfig cfg;
    VocabLayout layout;
    ParamStore<T> store;

    ArModel(ArConfig c, Rng& rng) : cfg(c) {
        cfg.validate();
        layout.n_visual = cfg.n_visual;
        const double sd = cfg.init_std;
        tok_emb_ = store.add("ar.tok_emb", Mat<T>::randn(layout.vocab(), cfg.dim, sd, rng));
        pos_emb_ = store.add("ar.pos_emb", Mat<T>::randn(cfg.max_seq(), cfg.dim, sd, rng));
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.push_back(add_block(store, "ar.blk" + std::to_string(l), cfg.dim, sd, rng));
        ln_f_ = add_norm(store, "ar.ln_f", cfg.dim);
        head_ = add_linear(store, "ar.head", cfg.dim, layout.vocab(), sd, rng);
    }

    typename Graph<T>::NodeId logits_node(Graph<T>& g, GradSinks<T>& sinks,
                                          const std::vector<int>& ids) const {
        require(!ids.empty() && static_cast<int>(ids.size()) <= cfg.max_seq(),
                "logits: stream length out of range");
        const int S = static_cast<int>(ids.size());
        auto x = g.add(g.embed_rows(pnode(g, store, sinks, tok_emb_), ids),
                       g.slice_rows(pnode(g, store, sinks, pos_emb_), 0, S));
        for (const auto& blk : blocks_)
            x = block_forward(g, store, sinks, blk, x, cfg.dim, cfg.heads, /*causal=*/true);
        return linear(g, store, sinks, head_, norm(g, store, sinks, ln_f_, x));
    }

    // Additive mask for a logits row predicting stream position p:
    // visual/sep positions renormalize over visual ids + FRAME_SEP.
    Mat<T> prediction_mask(int rows, int first_target_pos) const {
        Mat<T> mask(rows, layout.vocab(), T(0));
        for (int i = 0; i < rows; ++i) {
            const int p = first_target_pos + i;
            const PosClass c = pos_class(p, cfg.T);
            if (c == PosClass::visual || c == PosClass::sep) {
                for (int v = layout.bos(); v < layout.vocab(); ++v)
                    if (v != layout.frame_sep()) mask.at(i, v) = static_cast<T>(-1e30);
            }
        }
        return mask;
    }

    // Mean NLL over predicted positions (everything after BOS), causal,
    // with control-token logits masked at visual positions.
    typename Graph<T>::NodeId nll_node(Graph<T>& g, GradSinks<T>& sinks,
                                       const std::vector<int>& ids) const {
        const int S = static_cast<int>(ids.size());
        require(S >= 2, "nll: nothing to predict");
        auto logits = logits_node(g, sinks, ids);
        auto masked = g.add(logits, g.constant(prediction_mask(S, 1)));
        std::vector<int> targets(static_cast<size_t>(S), -1);
        for (int i = 0; i + 1 < S; ++i) targets[static_cast<size_t>(i)] = ids[static_cast<size_t>(i) + 1];
        return g.nll_mean(masked, targets);
    }

    double nll(const std::vector<int>& ids) const {
        Graph<T> g;
        GradSinks<T> sinks = make_sinks(store);
        return g.scalar(nll_node(g, sinks, ids));
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.put_store(store, "");
        const std::vector<double> c = {
            static_cast<double>(cfg.layers),       static_cast<double>(cfg.dim),
            static_cast<double>(cfg.heads),        static_cast<double>(cfg.n_visual),
            static_cast<double>(cfg.T),            static_cast<double>(cfg.frame_count),
            static_cast<double>(cfg.condition_frames)};
        ck.put_vec("ar.cfg", c, DType::f64);
        ck.save(path);
    }

    static ArModel load(const std::string& path) {
        const Checkpoint ck = Checkpoint::load(path);
        const auto c = ck.get("ar.cfg").template as<double>();
        require(c.size() >= 7, "ar checkpoint: bad config entry");
        ArConfig cfg;
        cfg.layers = static_cast<int>(c[0]);
        cfg.dim = static_cast<int>(c[1]);
        cfg.heads = static_cast<int>(c[2]);
        cfg.n_visual = static_cast<int>(c[3]);
        cfg.T = static_cast<int>(c[4]);
        cfg.frame_count = static_cast<int>(c[5]);
        cfg.condition_frames = static_cast<int>(c[6]);
        Rng dummy(0);
        ArModel m(cfg, dummy);
        ck.load_store(m.store, "");
        return m;
    }

    const Mat<T>& token_embeddings() const { return store[tok_emb_]; }

    // weight handles for the sampler
    template <class U>
    friend class ArSampler;

private:
    int tok_emb_ = -1, pos_emb_ = -1;
    std::vector<BlockIdx> blocks_;
    NormIdx ln_f_;
    LinearIdx head_;
};

// --- KV-cached incremental inference -----------------------------------------

template <class T>
class ArSampler {
public:
    explicit ArSampler(const ArModel<T>& m) : m_(m) {
        kcache_.assign(static_cast<size_t>(m.cfg.layers), Mat<T>(m.cfg.max_seq(), m.cfg.dim));
        vcache_.assign(static_cast<size_t>(m.cfg.layers), Mat<T>(m.cfg.max_seq(), m.cfg.dim));
        logits_ = Mat<T>(1, m.layout.vocab());
    }

    void reset() { pos_ = 0; }
    int position() const { return pos_; }

    // feeds one token; afterwards logits() predicts the next position
    void feed(int id) {
        const auto& st = m_.store;
        const int dim = m_.cfg.dim;
        const int heads = m_.cfg.heads;
        const int dh = dim / heads;
        require(pos_ < m_.cfg.max_seq(), "sampler: past max sequence length");
        require(id >= 0 && id < m_.layout.vocab(), "sampler: id out of range");

        Mat<T> x(1, dim);
        for (int j = 0; j < dim; ++j)
            x.data[j] = st[m_.tok_emb_].at(id, j) + st[m_.pos_emb_].at(pos_, j);

        Mat<T> t1(1, dim), qkv(1, 3 * dim), attn(1, dim), h(1, 4 * dim), h2(1, dim);
        for (size_t l = 0; l < m_.blocks_.size(); ++l) {
            const auto& blk = m_.blocks_[l];
            layer_norm_row(x, st[blk.ln1.gamma], st[blk.ln1.beta], t1);
            matvec(t1, st[blk.qkv.w], st[blk.qkv.b], qkv);
            T* krow = kcache_[l].row(pos_);
            T* vrow = vcache_[l].row(pos_);
            for (int j = 0; j < dim; ++j) {
                krow[j] = qkv.data[dim + j];
                vrow[j] = qkv.data[2 * dim + j];
            }
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            for (int hd = 0; hd < heads; ++hd) {
                const int off = hd * dh;
                // scores over cached rows 0..pos_
                scores_.resize(static_cast<size_t>(pos_) + 1);
                double mx = -1e300;
                for (int r = 0; r <= pos_; ++r) {
                    const T* kr = kcache_[l].row(r) + off;
                    double s = 0;
                    for (int j = 0; j < dh; ++j)
                        s += static_cast<double>(qkv.data[off + j]) * kr[j];
                    s *= sc;
                    scores_[static_cast<size_t>(r)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0;
                for (int r = 0; r <= pos_; ++r) {
                    scores_[static_cast<size_t>(r)] = std::exp(scores_[static_cast<size_t>(r)] - mx);
                    z += scores_[static_cast<size_t>(r)];
                }
                const double iz = 1.0 / z;
                for (int j = 0; j < dh; ++j) {
                    double acc = 0;
                    for (int r = 0; r <= pos_; ++r)
                        acc += scores_[static_cast<size_t>(r)] * iz *
                               static_cast<double>(vcache_[l].at(r, off + j));
                    attn.data[off + j] = static_cast<T>(acc);
                }
            }
            matvec(attn, st[blk.proj.w], st[blk.proj.b], t1);
            for (int j = 0; j < dim; ++j) x.data[j] += t1.data[j];
            layer_norm_row(x, st[blk.ln2.gamma], st[blk.ln2.beta], t1);
            matvec(t1, st[blk.fc1.w], st[blk.fc1.b], h);
            for (auto& v : h.data) {
                v = T(0.5) * v * (T(1) + g_erf(v * T(0.7071067811865475)));
            }
            matvec(h, st[blk.fc2.w], st[blk.fc2.b], h2);
            for (int j = 0; j < dim; ++j) x.data[j] += h2.data[j];
        }
        layer_norm_row(x, st[m_.ln_f_.gamma], st[m_.ln_f_.beta], t1);
        matvec(t1, st[m_.head_.w], st[m_.head_.b], logits_);
        pos_ += 1;
    }

    const Mat<T>& logits() const { return logits_; }

private:
    const ArModel<T>& m_;
    std::vector<Mat<T>> kcache_, vcache_;
    Mat<T> logits_;
    std::vector<double> scores_;
    int pos_ = 0;

    static void layer_norm_row(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta,
                               Mat<T>& out) {
        const int n = x.cols;
        double mu = 0;
        for (int j = 0; j < n; ++j) mu += x.data[j];
        mu /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) {
            const double d = x.data[j] - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + 1e-5);
        out = Mat<T>(1, n);
        for (int j = 0; j < n; ++j)
            out.data[j] = static_cast<T>((x.data[j] - mu) * is) * gamma.data[j] + beta.data[j];
    }

    static void matvec(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b, Mat<T>& out) {
        out = Mat<T>(1, w.cols);
        for (int j = 0; j < w.cols; ++j) out.data[j] = b.data[j];
        for (int p = 0; p < w.rows; ++p) {
            const T a = x.data[p];
            const T* wr = w.row(p);
            for (int j = 0; j < w.cols; ++j) out.data[j] += a * wr[j];
        }
    }
};

// --- sampling ----------------------------------------------------------------

// Draws from logits restricted to [id_lo, id_hi), top-k then top-p truncated;
// returns the id and the log-probability under the mask-renormalized softmax
// (truncation ignored, matching the training-side distribution).
template <class T>
int sample_restricted(const Mat<T>& logits, int id_lo, int id_hi, const SamplerConfig& sc,
                      Rng& rng, double* logp_out) {
    const int n = id_hi - id_lo;
    require(n >= 1, "sample_restricted: empty support");
    std::vector<std::pair<double, int>> items(static_cast<size_t>(n));
    double mx = -1e300;
    for (int i = 0; i < n; ++i) {
        const double l = static_cast<double>(logits.data[id_lo + i]);
        items[static_cast<size_t>(i)] = {l, id_lo + i};
        mx = std::max(mx, l);
    }
    double z = 0;
    for (auto& it : items) {
        it.first = std::exp(it.first - mx);
        z += it.first;
    }
    for (auto& it : items) it.first /= z;  // masked softmax probabilities

    // top-k (probability desc, id asc on ties), then top-p keeping the head
    const int k = std::min(sc.top_k, n);
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    items.resize(static_cast<size_t>(k));
    double cum = 0;
    size_t keep = 0;
    for (; keep < items.size(); ++keep) {
        cum += items[keep].first;
        if (cum >= sc.top_p) {
            ++keep;
            break;
        }
    }
    if (keep == 0) keep = 1;
    items.resize(std::min(keep, items.size()));
    double total = 0;
    for (const auto& it : items) total += it.first;
    const double u = rng.uniform01() * total;
    double acc = 0;
    int chosen = items.back().second;
    double chosen_p = items.back().first;
    for (const auto& it : items) {
        acc += it.first;
        if (u < acc) {
            chosen = it.second;
            chosen_p = it.first;
            break;
        }
    }
    if (logp_out) *logp_out = std::log(std::max(chosen_p, 1e-300));
    return chosen;
}

struct Continuation {
    std::vector<int> full_ids;   // condition + generated
    std::vector<int> gen_ids;    // generated tail only
    std::vector<double> logp;    // aligned to gen_ids; 0 for forced tokens
    std::vector<char> sampled;   // aligned to gen_ids; false for forced tokens
};

// Top-k/top-p continuation with structural FRAME_SEP positions forced.
template <class T>
Continuation sample_continuation(const ArModel<T>& model, const std::vector<int>& condition,
                                 int frames_to_generate, const SamplerConfig& sc, Rng& rng) {
    sc.validate(model.layout.vocab());
    require(!condition.empty(), "sample_continuation: empty condition");
    const int total =
        static_cast<int>(condition.size()) + frames_to_generate * model.cfg.tokens_per_frame();
    require(total <= model.cfg.max_seq(), "sample_continuation: exceeds max sequence");

    ArSampler<T> sampler(model);
    for (int id : condition) sampler.feed(id);

    Continuation out;
    out.full_ids = condition;
    for (int p = static_cast<int>(condition.size()); p < total; ++p) {
        const PosClass c = pos_class(p, model.cfg.T);
        int id;
        double lp = 0;
        bool sampled = false;
        if (c == PosClass::sep) {
            id = model.layout.frame_sep();
        } else {
            require(c == PosClass::visual, "sample_continuation: malformed layout position");
            id = sample_restricted(sampler.logits(), 0, model.layout.n_visual, sc, rng, &lp);
            sampled = true;
        }
        sampler.feed(id);
        out.full_ids.push_back(id);
        out.gen_ids.push_back(id);
        out.logp.push_back(lp);
        out.sampled.push_back(sampled ? 1 : 0);
    }
    return out;
}

}  // namespace physar
