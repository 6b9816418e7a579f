#pragma once

// Phase drivers behind the CLI subcommands: tokenizer training, token dumps,
// AR pretraining, and GRPO post-training. Everything is deterministic in the
// provided seed.

#include <string>
#include <vector>

#include "physar/ar_model.hpp"
#include "physar/eval.hpp"
#include "physar/frames_io.hpp"
#include "physar/grpo.hpp"
#include "physar/tokenizer.hpp"

namespace physar {

struct TokenizerTrainOptions {
    TokenizerConfig tok;
    TrainHyper hyper;     // beta2 defaults to 0.99 for the tokenizer
    int64_t steps = 3000;
    int batch = 32;
    uint64_t seed = 0;
    std::string manifest_path;
    std::string out_checkpoint;
    std::string log_csv;       // optional
    int64_t log_every = 50;
    int jobs = 0;
};

// Trains on random (video, frame) pairs from the manifest; returns final
// moving-average losses (reconstruction, commitment, total).
TokenizerLosses train_tokenizer(const TokenizerTrainOptions& opt);

struct TokenizeOptions {
    std::string checkpoint;
    std::string manifest_path;
    std::string out_csv;
    int jobs = 0;
};

void dump_tokens(const TokenizeOptions& opt);

// frame_id -> ids rows, grouped per sample in manifest order
struct TokenTable {
    std::vector<std::vector<std::vector<int>>> per_video;  // [video][frame][T]
    int T = 0;
};

TokenTable load_token_csv(const std::string& path, const Manifest& manifest);

struct PretrainOptions {
    ArConfig model;
    TrainHyper hyper;
    int64_t steps = 3000;
    int batch = 8;
    uint64_t seed = 0;
    double holdout_fraction = 0.02;  // streams reserved for eval NLL
    std::string manifest_path;
    std::string tokens_csv;
    std::string out_checkpoint;
    std::string log_csv;
    int64_t log_every = 50;
    int64_t eval_every = 250;
    int eval_streams = 16;
    int jobs = 0;
};

struct PretrainResult {
    double initial_eval_nll = 0;
    double final_eval_nll = 0;
};

PretrainResult pretrain(const PretrainOptions& opt);

struct GrpoOptions {
    GrpoConfig grpo;
    uint64_t seed = 0;
    std::string policy_checkpoint;
    std::string tokenizer_checkpoint;
    std::string manifest_path;  // posttrain split
    std::string out_checkpoint;
    std::string log_csv;
    double grad_clip = 1.0;
    int jobs = 0;
};

struct GrpoResult {
    double first_quartile_mean_reward = 0;
    double last_quartile_mean_reward = 0;
};

GrpoResult post_train(const GrpoOptions& opt);

// Reads one frame without loading the whole file.
Mat<float> read_frame_at(const std::string& path, int frame_index);

}  // namespace physar
