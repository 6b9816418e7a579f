#include "physar/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "physar/threadpool.hpp"

namespace physar {

namespace {

std::string level_or_dash(const std::string& s) { return s.empty() ? "-" : s; }

EvalRecord record_from_reward(const ManifestRecord& rec, const metrics::RewardBreakdown& rb) {
    EvalRecord r;
    r.id = rec.id;
    r.scenario = world::to_string(rec.kind);
    r.split = world::to_string(rec.split);
    r.ood_level = level_or_dash(rec.ood_level);
    r.v_error = rb.v_error;
    r.r_error = rb.r_error;
    r.r_vel = rb.r_vel;
    r.r_mass = rb.r_mass;
    r.reward = rb.total;
    r.degenerate = rb.degenerate;
    return r;
}

}  // namespace

ErrorReport aggregate_records(const std::vector<EvalRecord>& records) {
    std::map<std::tuple<std::string, std::string, std::string>, ErrorReportRow> rows;
    int failures = 0;
    for (const auto& r : records) {
        if (r.degenerate || !std::isfinite(r.v_error) || !std::isfinite(r.r_error)) {
            ++failures;
            continue;
        }
        auto& row = rows[{r.scenario, r.split, r.ood_level}];
        row.scenario = r.scenario;
        row.split = r.split;
        row.ood_level = r.ood_level;
        row.n += 1;
        row.mean_v_error += r.v_error;
        row.mean_r_error += r.r_error;
    }
    ErrorReport rep;
    rep.failures = failures;
    for (auto& [key, row] : rows) {
        row.mean_v_error /= row.n;
        row.mean_r_error /= row.n;
        rep.rows.push_back(row);
    }
    return rep;
}

ErrorReport evaluate(const ArModel<float>& model, const Tokenizer<float>& tok,
                     const Manifest& manifest, const std::string& manifest_dir,
                     const world::WorldConfig& wcfg, const EvalConfig& cfg,
                     std::vector<EvalRecord>* records_out) {
    const int n = cfg.max_samples < 0
                      ? static_cast<int>(manifest.records.size())
                      : std::min<int>(cfg.max_samples, static_cast<int>(manifest.records.size()));
    std::vector<EvalRecord> records(static_cast<size_t>(n));
    const int cond = model.cfg.condition_frames;
    const int to_generate = model.cfg.frame_count - cond;

    parallel_for(
        n,
        [&](int64_t i) {
            const ManifestRecord& rec = manifest.records[static_cast<size_t>(i)];
            EvalRecord& out = records[static_cast<size_t>(i)];
            try {
                const auto frames = read_frames_file(join_path(manifest_dir, rec.frames_path));
                const auto truth = read_trajectory_csv(join_path(manifest_dir, rec.traj_path));
                require(static_cast<int>(frames.size()) >= cond, "eval: too few frames");

                std::vector<std::vector<int>> cond_tokens;
                for (int f = 0; f < cond; ++f)
                    cond_tokens.push_back(tok.tokenize(frames[static_cast<size_t>(f)]));
                const auto condition =
                    frames_to_stream(cond_tokens, rec.kind, model.layout, model.cfg.T);

                Rng rng(cfg.seed, hash_str(rec.id));
                const Continuation gen =
                    sample_continuation(model, condition, to_generate, cfg.sampler, rng);
                const ParsedStream parsed =
                    stream_to_frames(gen.full_ids, model.layout, model.cfg.T);

                std::vector<Mat<float>> video(frames.begin(), frames.begin() + cond);
                Rng drng = rng.child("detok");
                for (size_t f = static_cast<size_t>(cond); f < parsed.frames.size(); ++f) {
                    Rng frng = drng.child(static_cast<uint64_t>(f));
                    video.push_back(tok.detokenize(parsed.frames[f], frng, cfg.flow_steps));
                }
                const auto rb =
                    metrics::compute_reward(video, truth, wcfg, cfg.alpha, cfg.k, cond);
                out = record_from_reward(rec, rb);
            } catch (const std::exception&) {
                out = record_from_reward(rec, metrics::RewardBreakdown{});
                out.degenerate = true;
            }
        },
        cfg.jobs);

    if (records_out) *records_out = records;
    return aggregate_records(records);
}

ErrorReport evaluate_ground_truth(const Manifest& manifest, const std::string& manifest_dir,
                                  const world::WorldConfig& wcfg, int max_samples,
                                  std::vector<EvalRecord>* records_out, int jobs) {
    const int n = max_samples < 0
                      ? static_cast<int>(manifest.records.size())
                      : std::min<int>(max_samples, static_cast<int>(manifest.records.size()));
    std::vector<EvalRecord> records(static_cast<size_t>(n));
    parallel_for(
        n,
        [&](int64_t i) {
            const ManifestRecord& rec = manifest.records[static_cast<size_t>(i)];
            const auto frames = read_frames_file(join_path(manifest_dir, rec.frames_path));
            const auto truth = read_trajectory_csv(join_path(manifest_dir, rec.traj_path));
            records[static_cast<size_t>(i)] =
                record_from_reward(rec, metrics::compute_reward(frames, truth, wcfg));
        },
        jobs);
    if (records_out) *records_out = records;
    return aggregate_records(records);
}

void write_records_csv(const std::string& path, const std::vector<EvalRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write: " + path);
    f << "id,scenario,split,ood_level,v_error,r_error,r_vel,r_mass,reward\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.id.c_str(),
                      r.scenario.c_str(), r.split.c_str(), r.ood_level.c_str(),
                      r.degenerate ? std::nan("") : r.v_error,
                      r.degenerate ? std::nan("") : r.r_error, r.r_vel, r.r_mass, r.reward);
        f << buf;
    }
}

void write_report_csv(const std::string& path, const ErrorReport& report) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write: " + path);
    f << "scenario,split,ood_level,n,mean_v_error,mean_r_error\n";
    char buf[256];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%d,%.9g,%.9g\n", r.scenario.c_str(),
                      r.split.c_str(), r.ood_level.c_str(), r.n, r.mean_v_error, r.mean_r_error);
        f << buf;
    }
}

Mat<float> counterfactual_interpolate(const Tokenizer<float>& tok, const Mat<float>& frame_a,
                                      const Mat<float>& frame_b,
                                      const std::vector<int>& replace_indices, uint64_t seed,
                                      int steps) {
    std::vector<int> ids_a = tok.tokenize(frame_a);
    const std::vector<int> ids_b = tok.tokenize(frame_b);
    for (int idx : replace_indices) {
        require(idx >= 0 && idx < tok.cfg.T, "counterfactual: index out of range");
        ids_a[static_cast<size_t>(idx)] = ids_b[static_cast<size_t>(idx)];
    }
    Rng rng(seed, hash_str("counterfactual"));
    return tok.detokenize(ids_a, rng, steps);
}

SimilarityReport embedding_similarity_study(const ArModel<float>& model,
                                            const Tokenizer<float>& tok,
                                            const Manifest& manifest,
                                            const std::string& manifest_dir, int max_videos,
                                            int max_offset, uint64_t seed, int jobs) {
    const int n = max_videos < 0
                      ? static_cast<int>(manifest.records.size())
                      : std::min<int>(max_videos, static_cast<int>(manifest.records.size()));
    require(n >= 2, "similarity study: need at least 2 videos");
    const Mat<float>& table = model.token_embeddings();

    // frame embedding = mean token embedding
    std::vector<std::vector<std::vector<float>>> embs(static_cast<size_t>(n));
    parallel_for(
        n,
        [&](int64_t i) {
            const auto frames =
                read_frames_file(join_path(manifest_dir, manifest.records[static_cast<size_t>(i)].frames_path));
            auto& ve = embs[static_cast<size_t>(i)];
            for (const auto& fr : frames) {
                const auto ids = tok.tokenize(fr);
                std::vector<float> e(static_cast<size_t>(table.cols), 0.0f);
                for (int id : ids)
                    for (int j = 0; j < table.cols; ++j) e[static_cast<size_t>(j)] += table.at(id, j);
                for (auto& v : e) v /= static_cast<float>(ids.size());
                ve.push_back(std::move(e));
            }
        },
        jobs);

    auto cosine = [](const std::vector<float>& a, const std::vector<float>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t j = 0; j < a.size(); ++j) {
            dot += static_cast<double>(a[j]) * b[j];
            na += static_cast<double>(a[j]) * a[j];
            nb += static_cast<double>(b[j]) * b[j];
        }
        return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-30);
    };

    // shuffled-pair baseline: random frames from distinct videos
    Rng rng(seed, hash_str("similarity-baseline"));
    double baseline = 0;
    const int baseline_n = 2000;
    for (int i = 0; i < baseline_n; ++i) {
        const size_t v1 = rng.next_below(static_cast<uint64_t>(n));
        size_t v2 = rng.next_below(static_cast<uint64_t>(n));
        if (v2 == v1) v2 = (v2 + 1) % static_cast<size_t>(n);
        const auto& e1 = embs[v1][rng.next_below(embs[v1].size())];
        const auto& e2 = embs[v2][rng.next_below(embs[v2].size())];
        baseline += cosine(e1, e2);
    }
    baseline /= baseline_n;

    SimilarityReport rep;
    for (int off = 1; off <= max_offset; ++off) {
        SimilarityRow row;
        row.offset = off;
        row.baseline_cos = baseline;
        double sum = 0;
        int count = 0;
        for (const auto& ve : embs) {
            for (size_t f = 0; f + static_cast<size_t>(off) < ve.size(); ++f) {
                sum += cosine(ve[f], ve[f + static_cast<size_t>(off)]);
                ++count;
            }
        }
        row.mean_cos = count ? sum / count : 0;
        row.n = count;
        rep.rows.push_back(row);
    }
    return rep;
}

void write_similarity_csv(const std::string& path, const SimilarityReport& report) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write: " + path);
    f << "offset,mean_cos,baseline_cos,n\n";
    char buf[128];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%d\n", r.offset, r.mean_cos, r.baseline_cos,
                      r.n);
        f << buf;
    }
}

}  // namespace physar
