#pragma once

// Evaluation sweeps (condition -> sample -> detokenize -> score) and the
// token-analysis studies: counterfactual splicing and embedding similarity.

#include <string>
#include <vector>

#include "physar/ar_model.hpp"
#include "physar/frames_io.hpp"
#include "physar/metrics.hpp"
#include "physar/tokenizer.hpp"

namespace physar {

struct EvalConfig {
    uint64_t seed = 0;
    int flow_steps = 32;
    int max_samples = -1;  // <0: all
    SamplerConfig sampler;
    double alpha = 4.0;
    double k = 1.4;
    int jobs = 0;
};

struct EvalRecord {
    std::string id;
    std::string scenario;
    std::string split;
    std::string ood_level;  // "-" when none
    double v_error = 0;
    double r_error = 0;
    double r_vel = 0;
    double r_mass = 0;
    double reward = 0;
    bool degenerate = false;
};

struct ErrorReportRow {
    std::string scenario;
    std::string split;
    std::string ood_level;
    int n = 0;
    double mean_v_error = 0;
    double mean_r_error = 0;
};

struct ErrorReport {
    std::vector<ErrorReportRow> rows;  // sorted by (scenario, split, level)
    int failures = 0;                  // degenerate / failed samples (logged, not aborted)
};

ErrorReport aggregate_records(const std::vector<EvalRecord>& records);

ErrorReport evaluate(const ArModel<float>& model, const Tokenizer<float>& tok,
                     const Manifest& manifest, const std::string& manifest_dir,
                     const world::WorldConfig& wcfg, const EvalConfig& cfg,
                     std::vector<EvalRecord>* records_out = nullptr);

// Scores ground-truth renders as if they were predictions (detector fidelity).
ErrorReport evaluate_ground_truth(const Manifest& manifest, const std::string& manifest_dir,
                                  const world::WorldConfig& wcfg, int max_samples,
                                  std::vector<EvalRecord>* records_out = nullptr, int jobs = 0);

void write_records_csv(const std::string& path, const std::vector<EvalRecord>& records);
void write_report_csv(const std::string& path, const ErrorReport& report);

// Splice tokens of B into A at the given positions, then detokenize.
Mat<float> counterfactual_interpolate(const Tokenizer<float>& tok, const Mat<float>& frame_a,
                                      const Mat<float>& frame_b,
                                      const std::vector<int>& replace_indices, uint64_t seed,
                                      int steps = -1);

struct SimilarityRow {
    int offset = 0;
    double mean_cos = 0;
    double baseline_cos = 0;  // shuffled-pair baseline
    int n = 0;
};

struct SimilarityReport {
    std::vector<SimilarityRow> rows;
};

// Frame embedding = mean of its T token embeddings from the AR input table;
// reports adjacent-offset cosine similarity against a shuffled-pair baseline.
SimilarityReport embedding_similarity_study(const ArModel<float>& model,
                                            const Tokenizer<float>& tok,
                                            const Manifest& manifest,
                                            const std::string& manifest_dir, int max_videos,
                                            int max_offset, uint64_t seed, int jobs = 0);

void write_similarity_csv(const std::string& path, const SimilarityReport& report);

}  // namespace physar
