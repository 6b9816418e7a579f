#include "physar/pipeline.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "physar/threadpool.hpp"

namespace physar {

Mat<float> read_frame_at(const std::string& path, int frame_index) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("frames open failed: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "PHYSAR01", 8) != 0)
        throw std::runtime_error("frames file: bad magic: " + path);
    uint32_t header[4];
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    require(frame_index >= 0 && frame_index < static_cast<int>(header[0]),
            "read_frame_at: frame index out of range");
    Mat<float> img(static_cast<int>(header[1]), static_cast<int>(header[2]));
    const std::streamoff off = 8 + 16 + static_cast<std::streamoff>(frame_index) *
                                            static_cast<std::streamoff>(img.numel()) * 4;
    f.seekg(off);
    f.read(reinterpret_cast<char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (!f) throw std::runtime_error("frames read failed: " + path);
    return img;
}

// ---------------------------------------------------------------------------

TokenizerLosses train_tokenizer(const TokenizerTrainOptions& opt) {
    const Manifest manifest = Manifest::load(opt.manifest_path);
    require(!manifest.records.empty(), "train_tokenizer: empty manifest");
    const std::string dir = dir_of(opt.manifest_path);

    Rng init_rng(opt.seed, hash_str("tokenizer-init"));
    Tokenizer<float> tok(opt.tok, init_rng);
    OptimizerState<float> optim(tok.store);
    TrainHyper hyper = opt.hyper;
    hyper.total_steps = opt.steps;
    hyper.validate();

    std::ofstream log;
    if (!opt.log_csv.empty()) {
        log.open(opt.log_csv, std::ios::trunc);
        log << "step,lr,reconstruction,commitment,total\n";
    }

    const auto probe = read_frames_file(join_path(dir, manifest.records[0].frames_path));
    const int frames_per_video = static_cast<int>(probe.size());
    require(probe[0].rows == opt.tok.image_size, "train_tokenizer: image size mismatch");

    Rng data_rng(opt.seed, hash_str("tokenizer-data"));
    Rng step_rng(opt.seed, hash_str("tokenizer-step"));
    TokenizerLosses avg{};
    double avg_n = 0;
    for (int64_t step = 0; step < opt.steps; ++step) {
        std::vector<Mat<float>> batch_frames;
        batch_frames.reserve(static_cast<size_t>(opt.batch));
        for (int b = 0; b < opt.batch; ++b) {
            const auto vi = data_rng.next_below(manifest.records.size());
            const auto fi = data_rng.next_below(static_cast<uint64_t>(frames_per_video));
            batch_frames.push_back(read_frame_at(
                join_path(dir, manifest.records[static_cast<size_t>(vi)].frames_path),
                static_cast<int>(fi)));
        }
        std::vector<const Mat<float>*> batch;
        for (const auto& fr : batch_frames) batch.push_back(&fr);
        Rng srng = step_rng.child(static_cast<uint64_t>(step));
        const double lr = cosine_lr(step, hyper);
        const auto losses = tok.train_step(batch, srng, optim, hyper, lr);
        const double w = std::min(avg_n + 1.0, 100.0);
        avg.reconstruction += (losses.reconstruction - avg.reconstruction) / w;
        avg.commitment += (losses.commitment - avg.commitment) / w;
        avg.total += (losses.total - avg.total) / w;
        avg_n += 1.0;
        if (log.is_open() && (step % opt.log_every == 0 || step + 1 == opt.steps)) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld,%.6g,%.6g,%.6g,%.6g\n",
                          static_cast<long long>(step), lr, losses.reconstruction,
                          losses.commitment, losses.total);
            log << buf;
            log.flush();
        }
    }
    tok.save(opt.out_checkpoint);
    return avg;
}

// ---------------------------------------------------------------------------

void dump_tokens(const TokenizeOptions& opt) {
    const Tokenizer<float> tok = Tokenizer<float>::load(opt.checkpoint);
    const Manifest manifest = Manifest::load(opt.manifest_path);
    const std::string dir = dir_of(opt.manifest_path);

    std::vector<std::string> chunks(manifest.records.size());
    parallel_for(
        static_cast<int64_t>(manifest.records.size()),
        [&](int64_t i) {
            const auto& rec = manifest.records[static_cast<size_t>(i)];
            const auto frames = read_frames_file(join_path(dir, rec.frames_path));
            std::ostringstream os;
            for (size_t f = 0; f < frames.size(); ++f) {
                const auto ids = tok.tokenize(frames[f]);
                os << rec.id << ':' << f;
                for (int id : ids) os << ',' << id;
                os << '\n';
            }
            chunks[static_cast<size_t>(i)] = os.str();
        },
        opt.jobs);

    std::ofstream out(opt.out_csv, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + opt.out_csv);
    out << "frame_id";
    for (int t = 0; t < tok.cfg.T; ++t) out << ",id" << t;
    out << '\n';
    for (const auto& c : chunks) out << c;
    if (!out) throw std::runtime_error("token csv write failed: " + opt.out_csv);
}

TokenTable load_token_csv(const std::string& path, const Manifest& manifest) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open tokens csv: " + path);
    std::map<std::string, size_t> index;
    for (size_t i = 0; i < manifest.records.size(); ++i) index[manifest.records[i].id] = i;

    TokenTable table;
    table.per_video.resize(manifest.records.size());
    std::string line;
    std::getline(f, line);  // header
    {
        int commas = 0;
        for (char c : line) commas += c == ',';
        table.T = commas;
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto colon = line.find(':');
        require(colon != std::string::npos, "tokens csv: missing frame separator");
        const auto comma = line.find(',', colon);
        const std::string id = line.substr(0, colon);
        const int frame = std::stoi(line.substr(colon + 1, comma - colon - 1));
        auto it = index.find(id);
        require(it != index.end(), "tokens csv: unknown sample id " + id);
        auto& video = table.per_video[it->second];
        if (static_cast<int>(video.size()) <= frame) video.resize(static_cast<size_t>(frame) + 1);
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(table.T));
        size_t pos = comma;
        while (pos != std::string::npos && pos < line.size()) {
            const size_t next = line.find(',', pos + 1);
            ids.push_back(std::stoi(line.substr(pos + 1,
                                                next == std::string::npos ? std::string::npos
                                                                          : next - pos - 1)));
            pos = next;
        }
        require(static_cast<int>(ids.size()) == table.T, "tokens csv: ragged row");
        video[static_cast<size_t>(frame)] = std::move(ids);
    }
    return table;
}

// ---------------------------------------------------------------------------

PretrainResult pretrain(const PretrainOptions& opt) {
    const Manifest manifest = Manifest::load(opt.manifest_path);
    const TokenTable tokens = load_token_csv(opt.tokens_csv, manifest);
    require(tokens.T == opt.model.T, "pretrain: token width mismatch with model config");

    std::vector<std::vector<int>> streams;
    VocabLayout layout;
    layout.n_visual = opt.model.n_visual;
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        require(!tokens.per_video[i].empty(),
                "pretrain: missing tokens for " + manifest.records[i].id);
        streams.push_back(
            frames_to_stream(tokens.per_video[i], manifest.records[i].kind, layout, opt.model.T));
    }
    require(streams.size() >= 4, "pretrain: need at least 4 videos");

    const int holdout =
        std::max(1, std::min<int>(opt.eval_streams,
                                  static_cast<int>(streams.size() * opt.holdout_fraction) + 1));
    std::vector<std::vector<int>> eval_streams(streams.end() - holdout, streams.end());
    streams.resize(streams.size() - static_cast<size_t>(holdout));

    Rng init_rng(opt.seed, hash_str("ar-init"));
    ArModel<float> model(opt.model, init_rng);
    OptimizerState<float> optim(model.store);
    TrainHyper hyper = opt.hyper;
    hyper.total_steps = opt.steps;
    hyper.validate();

    auto eval_nll = [&]() {
        std::vector<double> nll(eval_streams.size());
        parallel_for(
            static_cast<int64_t>(eval_streams.size()),
            [&](int64_t i) {
                nll[static_cast<size_t>(i)] = model.nll(eval_streams[static_cast<size_t>(i)]);
            },
            opt.jobs);
        double s = 0;
        for (double v : nll) s += v;
        return s / static_cast<double>(nll.size());
    };

    PretrainResult result;
    result.initial_eval_nll = eval_nll();

    std::ofstream log;
    if (!opt.log_csv.empty()) {
        log.open(opt.log_csv, std::ios::trunc);
        log << "step,lr,train_nll,eval_nll\n";
    }

    Rng order_rng(opt.seed, hash_str("ar-order"));
    std::vector<size_t> order;
    size_t cursor = 0;
    auto next_stream = [&]() -> const std::vector<int>& {
        if (cursor >= order.size()) {
            order.resize(streams.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[order_rng.next_below(i)]);
            cursor = 0;
        }
        return streams[order[cursor++]];
    };

    double last_eval = result.initial_eval_nll;
    for (int64_t step = 0; step < opt.steps; ++step) {
        std::vector<const std::vector<int>*> batch;
        for (int b = 0; b < opt.batch; ++b) batch.push_back(&next_stream());

        std::vector<GradSinks<float>> slots(static_cast<size_t>(opt.batch));
        std::vector<double> losses(static_cast<size_t>(opt.batch));
        parallel_for(
            opt.batch,
            [&](int64_t b) {
                Graph<float> g;
                auto& sinks = slots[static_cast<size_t>(b)];
                sinks = make_sinks(model.store);
                zero_sinks(model.store, sinks);
                auto loss = model.nll_node(g, sinks, *batch[static_cast<size_t>(b)]);
                losses[static_cast<size_t>(b)] = g.scalar(loss);
                g.backward(loss);
            },
            opt.jobs);

        GradSinks<float> grads = make_sinks(model.store);
        zero_sinks(model.store, grads);
        double train_nll = 0;
        for (int b = 0; b < opt.batch; ++b) {
            accumulate_sinks(grads, slots[static_cast<size_t>(b)]);
            train_nll += losses[static_cast<size_t>(b)] / opt.batch;
        }
        for (auto& gm : grads)
            for (auto& v : gm.data) v /= static_cast<float>(opt.batch);
        if (hyper.grad_clip > 0) clip_grad_norm(grads, hyper.grad_clip);
        const double lr = cosine_lr(step, hyper);
        adamw_step(model.store, grads, optim, hyper, lr);

        const bool last = step + 1 == opt.steps;
        if ((opt.eval_every > 0 && step % opt.eval_every == 0) || last) last_eval = eval_nll();
        if (log.is_open() && (step % opt.log_every == 0 || last)) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld,%.6g,%.6g,%.6g\n",
                          static_cast<long long>(step), lr, train_nll, last_eval);
            log << buf;
            log.flush();
        }
    }
    result.final_eval_nll = last_eval;
    model.save(opt.out_checkpoint);
    return result;
}

// ---------------------------------------------------------------------------

GrpoResult post_train(const GrpoOptions& opt) {
    opt.grpo.validate();
    ArModel<float> policy = ArModel<float>::load(opt.policy_checkpoint);
    const Tokenizer<float> tok = Tokenizer<float>::load(opt.tokenizer_checkpoint);
    const Manifest manifest = Manifest::load(opt.manifest_path);
    require(!manifest.records.empty(), "post_train: empty manifest");
    const std::string dir = dir_of(opt.manifest_path);

    world::WorldConfig wcfg;
    wcfg.image_size = tok.cfg.image_size;

    struct Condition {
        std::vector<int> stream;
        world::Trajectory truth;
        std::vector<Mat<float>> frames;  // ground-truth condition renders
    };
    std::vector<Condition> conditions(manifest.records.size());
    parallel_for(
        static_cast<int64_t>(manifest.records.size()),
        [&](int64_t i) {
            const auto& rec = manifest.records[static_cast<size_t>(i)];
            auto& c = conditions[static_cast<size_t>(i)];
            const auto frames = read_frames_file(join_path(dir, rec.frames_path));
            c.truth = read_trajectory_csv(join_path(dir, rec.traj_path));
            std::vector<std::vector<int>> cond_tokens;
            for (int f = 0; f < policy.cfg.condition_frames; ++f) {
                cond_tokens.push_back(tok.tokenize(frames[static_cast<size_t>(f)]));
                c.frames.push_back(frames[static_cast<size_t>(f)]);
            }
            c.stream = frames_to_stream(cond_tokens, rec.kind, policy.layout, policy.cfg.T);
        },
        opt.jobs);

    OptimizerState<float> optim(policy.store);
    TrainHyper hyper;
    hyper.peak_lr = opt.grpo.lr;
    hyper.total_steps = opt.grpo.steps;
    hyper.grad_clip = opt.grad_clip;
    hyper.weight_decay = 0.05;

    std::ofstream log;
    if (!opt.log_csv.empty()) {
        log.open(opt.log_csv, std::ios::trunc);
        log << "step,mean_reward,mean_v_error,mean_r_error,kl,loss\n";
    }

    Rng rng(opt.seed, hash_str("grpo"));
    std::vector<double> reward_history;
    for (int step = 0; step < opt.grpo.steps; ++step) {
        const auto& cond = conditions[static_cast<size_t>(rng.next_below(conditions.size()))];
        Rng group_rng = rng.child(static_cast<uint64_t>(step));
        RolloutGroup group = rollout_group(policy, tok, cond.stream, cond.truth, cond.frames,
                                           wcfg, opt.grpo, group_rng);

        GradSinks<float> grads = make_sinks(policy.store);
        zero_sinks(policy.store, grads);
        double kl_mean = 0;
        const double loss = grpo_loss(policy, group, opt.grpo, grads, true, &kl_mean);
        if (hyper.grad_clip > 0) clip_grad_norm(grads, hyper.grad_clip);
        adamw_step(policy.store, grads, optim, hyper, opt.grpo.lr);

        double mean_reward = 0, mean_v = 0, mean_r = 0;
        int scored = 0;
        for (const auto& ro : group.rollouts) {
            mean_reward += ro.reward.total / static_cast<double>(group.rollouts.size());
            if (!ro.reward.degenerate) {
                mean_v += ro.reward.v_error;
                mean_r += ro.reward.r_error;
                ++scored;
            }
        }
        if (scored > 0) {
            mean_v /= scored;
            mean_r /= scored;
        }
        reward_history.push_back(mean_reward);
        if (log.is_open()) {
            char buf[200];
            std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.6g\n", step, mean_reward,
                          mean_v, mean_r, kl_mean, loss);
            log << buf;
            log.flush();
        }
    }
    policy.save(opt.out_checkpoint);

    GrpoResult result;
    const size_t q = std::max<size_t>(1, reward_history.size() / 4);
    for (size_t i = 0; i < q; ++i) result.first_quartile_mean_reward += reward_history[i] / q;
    for (size_t i = reward_history.size() - q; i < reward_history.size(); ++i)
        result.last_quartile_mean_reward += reward_history[i] / q;
    return result;
}

}  // namespace physar
