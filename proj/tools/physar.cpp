// physar: desk-scale physics video generation pipeline.
//
// Subcommands: gen-data, render, train-tokenizer, tokenize, pretrain, grpo,
// eval, analyze. Every run is reproducible from (config file, flags, seed);
// a resolved-config dump is written alongside each run's outputs.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>

#include "physar/config.hpp"
#include "physar/eval.hpp"
#include "physar/pipeline.hpp"
#include "physar/threadpool.hpp"

using namespace physar;

namespace {

struct Common {
    std::string config_path;
    uint64_t seed = 0;
    int jobs = 0;
    KeyValueConfig file_cfg;
    KeyValueConfig resolved;

    void load() {
        if (!config_path.empty()) file_cfg = KeyValueConfig::load(config_path);
        if (jobs > 0) job_cap() = jobs;
        resolved.set("seed", std::to_string(seed));
        resolved.set("jobs", std::to_string(job_cap()));
    }

    // flag (when given) > config file > fallback
    double num(CLI::Option* opt, double flag_val, const std::string& key, double fallback) {
        const double v = opt->count() ? flag_val : file_cfg.get_double(key, fallback);
        resolved.set(key, std::to_string(v));
        return v;
    }
    int64_t integer(CLI::Option* opt, int64_t flag_val, const std::string& key, int64_t fallback) {
        const int64_t v = opt->count() ? flag_val : file_cfg.get_int(key, fallback);
        resolved.set(key, std::to_string(v));
        return v;
    }
};

world::WorldConfig world_from(Common& c, CLI::Option* img, int image_size) {
    world::WorldConfig w;
    w.grid_extent = c.file_cfg.get_double("world.grid_extent", 10.0);
    w.dt = c.file_cfg.get_double("world.dt", 0.1);
    w.frame_count = static_cast<int>(c.file_cfg.get_int("world.frame_count", 32));
    w.gravity = c.file_cfg.get_double("world.gravity", 9.8);
    w.restitution = c.file_cfg.get_double("world.restitution", 1.0);
    w.min_visible_frames = static_cast<int>(c.file_cfg.get_int("world.min_visible_frames", 10));
    w.image_size = static_cast<int>(c.integer(img, image_size, "world.image_size", 128));
    c.resolved.set("world.grid_extent", std::to_string(w.grid_extent));
    c.resolved.set("world.dt", std::to_string(w.dt));
    c.resolved.set("world.frame_count", std::to_string(w.frame_count));
    c.resolved.set("world.gravity", std::to_string(w.gravity));
    c.resolved.set("world.restitution", std::to_string(w.restitution));
    c.resolved.set("world.min_visible_frames", std::to_string(w.min_visible_frames));
    return w;
}

TokenizerConfig tokenizer_from(const Common& c) {
    TokenizerConfig t;
    t.T = static_cast<int>(c.file_cfg.get_int("tokenizer.T", 16));
    t.N = static_cast<int>(c.file_cfg.get_int("tokenizer.N", 256));
    t.code_dim = static_cast<int>(c.file_cfg.get_int("tokenizer.code_dim", 16));
    t.image_size = static_cast<int>(c.file_cfg.get_int("tokenizer.image_size", 32));
    t.patch = static_cast<int>(c.file_cfg.get_int("tokenizer.patch", 4));
    t.enc_layers = static_cast<int>(c.file_cfg.get_int("tokenizer.enc_layers", 4));
    t.enc_dim = static_cast<int>(c.file_cfg.get_int("tokenizer.enc_dim", 64));
    t.enc_heads = static_cast<int>(c.file_cfg.get_int("tokenizer.enc_heads", 4));
    t.dec_layers = static_cast<int>(c.file_cfg.get_int("tokenizer.dec_layers", 6));
    t.dec_dim = static_cast<int>(c.file_cfg.get_int("tokenizer.dec_dim", 128));
    t.dec_heads = static_cast<int>(c.file_cfg.get_int("tokenizer.dec_heads", 4));
    t.ema_decay = c.file_cfg.get_double("tokenizer.ema_decay", 0.99);
    t.commit_weight = c.file_cfg.get_double("tokenizer.commit_weight", 0.25);
    t.dead_window = static_cast<int>(c.file_cfg.get_int("tokenizer.dead_window", 256));
    t.flow_steps = static_cast<int>(c.file_cfg.get_int("tokenizer.flow_steps", 32));
    t.full_noise_bias = c.file_cfg.get_double("tokenizer.full_noise_bias", 0.0);
    t.recon_ball_weight = c.file_cfg.get_double("tokenizer.recon_ball_weight", 0.0);
    return t;
}

void dump_tokenizer(Common& c, const TokenizerConfig& t) {
    c.resolved.set("tokenizer.T", std::to_string(t.T));
    c.resolved.set("tokenizer.N", std::to_string(t.N));
    c.resolved.set("tokenizer.code_dim", std::to_string(t.code_dim));
    c.resolved.set("tokenizer.image_size", std::to_string(t.image_size));
    c.resolved.set("tokenizer.patch", std::to_string(t.patch));
    c.resolved.set("tokenizer.enc_layers", std::to_string(t.enc_layers));
    c.resolved.set("tokenizer.enc_dim", std::to_string(t.enc_dim));
    c.resolved.set("tokenizer.enc_heads", std::to_string(t.enc_heads));
    c.resolved.set("tokenizer.dec_layers", std::to_string(t.dec_layers));
    c.resolved.set("tokenizer.dec_dim", std::to_string(t.dec_dim));
    c.resolved.set("tokenizer.dec_heads", std::to_string(t.dec_heads));
    c.resolved.set("tokenizer.ema_decay", std::to_string(t.ema_decay));
    c.resolved.set("tokenizer.commit_weight", std::to_string(t.commit_weight));
    c.resolved.set("tokenizer.dead_window", std::to_string(t.dead_window));
    c.resolved.set("tokenizer.flow_steps", std::to_string(t.flow_steps));
    c.resolved.set("tokenizer.full_noise_bias", std::to_string(t.full_noise_bias));
    c.resolved.set("tokenizer.recon_ball_weight", std::to_string(t.recon_ball_weight));
}

int run(int argc, char** argv) {
    CLI::App app{"physics-consistent video generation pipeline"};
    app.require_subcommand(1);
    app.fallthrough();
    Common c;
    app.add_option("--config", c.config_path, "key=value config file");
    app.add_option("--seed", c.seed, "global random seed (no wall-clock entropy)");
    app.add_option("--jobs", c.jobs, "worker cap for parallel sections");

    // --- gen-data ---
    auto* gen = app.add_subcommand("gen-data", "simulate, render and write a dataset split");
    std::string gen_kind = "uniform", gen_split = "pretrain", gen_out = "data", gen_level;
    int64_t gen_count = 100;
    int gen_img = 128;
    gen->add_option("--kind", gen_kind, "uniform|parabola|collision")->required();
    gen->add_option("--split", gen_split, "pretrain|posttrain|iid_eval|ood_eval")->required();
    auto* gen_count_o = gen->add_option("--count", gen_count, "samples to generate");
    gen->add_option("--out", gen_out, "output directory")->required();
    auto* gen_img_o = gen->add_option("--image-size", gen_img, "pixels per side");
    gen->add_option("--ood-level", gen_level, "restrict ood_eval to one OOD level");

    // --- render ---
    auto* ren = app.add_subcommand("render", "convert a frames file to PGM images");
    std::string ren_in, ren_out = ".";
    ren->add_option("--frames-file", ren_in, "PHYSAR01 frames file")->required();
    ren->add_option("--out-dir", ren_out, "output directory");

    // --- train-tokenizer ---
    auto* tt = app.add_subcommand("train-tokenizer", "train the frame tokenizer");
    std::string tt_manifest, tt_out = "tokenizer.ckpt", tt_log;
    int64_t tt_steps = 3000, tt_batch = 64;
    double tt_lr = 1e-4;
    tt->add_option("--manifest", tt_manifest, "dataset manifest")->required();
    tt->add_option("--out", tt_out, "checkpoint path");
    auto* tt_steps_o = tt->add_option("--steps", tt_steps, "optimizer steps");
    auto* tt_batch_o = tt->add_option("--batch", tt_batch, "frames per step");
    auto* tt_lr_o = tt->add_option("--lr", tt_lr, "peak learning rate");
    tt->add_option("--log", tt_log, "training log CSV");

    // --- tokenize ---
    auto* tk = app.add_subcommand("tokenize", "dump token ids for every frame");
    std::string tk_ckpt, tk_manifest, tk_out = "tokens.csv";
    tk->add_option("--checkpoint", tk_ckpt, "tokenizer checkpoint")->required();
    tk->add_option("--manifest", tk_manifest, "dataset manifest")->required();
    tk->add_option("--out", tk_out, "output CSV");

    // --- pretrain ---
    auto* pt = app.add_subcommand("pretrain", "next-token pretraining of the AR model");
    std::string pt_manifest, pt_tokens, pt_out = "ar.ckpt", pt_log;
    int64_t pt_steps = 3000, pt_batch = 8, pt_layers = 6, pt_dim = 256, pt_heads = 8;
    double pt_lr = 1e-4;
    pt->add_option("--manifest", pt_manifest, "dataset manifest")->required();
    pt->add_option("--tokens", pt_tokens, "token CSV from `tokenize`")->required();
    pt->add_option("--out", pt_out, "checkpoint path");
    auto* pt_steps_o = pt->add_option("--steps", pt_steps, "optimizer steps");
    auto* pt_batch_o = pt->add_option("--batch", pt_batch, "streams per step");
    auto* pt_lr_o = pt->add_option("--lr", pt_lr, "peak learning rate");
    auto* pt_layers_o = pt->add_option("--layers", pt_layers, "transformer layers");
    auto* pt_dim_o = pt->add_option("--dim", pt_dim, "model width");
    auto* pt_heads_o = pt->add_option("--heads", pt_heads, "attention heads");
    pt->add_option("--log", pt_log, "training log CSV");

    // --- grpo ---
    auto* gr = app.add_subcommand("grpo", "post-train with group-relative policy optimization");
    std::string gr_ckpt, gr_tok, gr_manifest, gr_out = "ar_rl.ckpt", gr_log;
    int64_t gr_steps = 200, gr_group = 8, gr_topk = 50, gr_flow = 8;
    double gr_beta = 0.01, gr_clip = 0.2, gr_lr = 3e-6, gr_topp = 0.95;
    gr->add_option("--checkpoint", gr_ckpt, "pretrained AR checkpoint")->required();
    gr->add_option("--tokenizer", gr_tok, "tokenizer checkpoint")->required();
    gr->add_option("--manifest", gr_manifest, "posttrain dataset manifest")->required();
    gr->add_option("--out", gr_out, "checkpoint path");
    auto* gr_steps_o = gr->add_option("--steps", gr_steps, "GRPO steps");
    auto* gr_group_o = gr->add_option("--group", gr_group, "rollouts per condition");
    auto* gr_beta_o = gr->add_option("--beta", gr_beta, "KL coefficient");
    auto* gr_clip_o = gr->add_option("--clip", gr_clip, "importance-ratio clip (<=0 disables)");
    auto* gr_lr_o = gr->add_option("--lr", gr_lr, "learning rate");
    auto* gr_topk_o = gr->add_option("--top-k", gr_topk, "sampler top-k");
    auto* gr_topp_o = gr->add_option("--top-p", gr_topp, "sampler top-p");
    auto* gr_flow_o = gr->add_option("--flow-steps", gr_flow, "detokenize steps during scoring");
    gr->add_option("--log", gr_log, "training log CSV");

    // --- eval ---
    auto* ev = app.add_subcommand("eval", "condition, generate, detokenize, score");
    std::string ev_ckpt, ev_tok, ev_manifest, ev_prefix = "eval";
    int64_t ev_flow = 32, ev_max = -1, ev_topk = 50;
    double ev_topp = 0.95;
    bool ev_ground_truth = false;
    ev->add_option("--checkpoint", ev_ckpt, "AR checkpoint");
    ev->add_option("--tokenizer", ev_tok, "tokenizer checkpoint");
    ev->add_option("--manifest", ev_manifest, "eval manifest")->required();
    ev->add_option("--out-prefix", ev_prefix, "prefix for records/report CSVs");
    auto* ev_flow_o = ev->add_option("--flow-steps", ev_flow, "detokenize steps");
    auto* ev_max_o = ev->add_option("--max-samples", ev_max, "cap evaluated samples");
    auto* ev_topk_o = ev->add_option("--top-k", ev_topk, "sampler top-k");
    auto* ev_topp_o = ev->add_option("--top-p", ev_topp, "sampler top-p");
    ev->add_flag("--ground-truth", ev_ground_truth,
                 "score the ground-truth renders instead of model output");

    // --- analyze ---
    auto* an = app.add_subcommand("analyze", "token analyses: similarity, counterfactual");
    std::string an_mode = "similarity", an_ckpt, an_tok, an_manifest, an_out = "analysis.csv";
    std::string an_frames_a, an_frames_b, an_replace;
    int64_t an_frame_a = 0, an_frame_b = 0, an_videos = 200, an_offsets = 5, an_flow = 32;
    an->add_option("--mode", an_mode, "similarity|counterfactual")->required();
    an->add_option("--checkpoint", an_ckpt, "AR checkpoint (similarity)");
    an->add_option("--tokenizer", an_tok, "tokenizer checkpoint")->required();
    an->add_option("--manifest", an_manifest, "dataset manifest (similarity)");
    an->add_option("--out", an_out, "output CSV / PGM");
    an->add_option("--frames-file", an_frames_a, "frames file A (counterfactual)");
    an->add_option("--frame-index", an_frame_a, "frame index in A");
    an->add_option("--frames-file-b", an_frames_b, "frames file B (counterfactual)");
    an->add_option("--frame-index-b", an_frame_b, "frame index in B");
    an->add_option("--replace", an_replace, "comma-separated token positions to splice from B");
    an->add_option("--videos", an_videos, "videos for the similarity study");
    an->add_option("--offsets", an_offsets, "max frame offset");
    an->add_option("--flow-steps", an_flow, "detokenize steps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage/config errors
    }
    c.load();

    auto dump_resolved = [&](const std::string& target) {
        std::filesystem::path p(target);
        const std::string out = std::filesystem::is_directory(p)
                                    ? (p / "resolved.cfg").string()
                                    : target + ".resolved.cfg";
        c.resolved.dump(out);
    };

    if (*gen) {
        const auto kind = world::kind_from_string(gen_kind);
        const auto split = world::split_from_string(gen_split);
        auto wcfg = world_from(c, gen_img_o, gen_img);
        const int count = static_cast<int>(c.integer(gen_count_o, gen_count, "gen.count", 100));
        const std::string out_dir = resolve_data_path(gen_out);
        c.resolved.set("gen.kind", gen_kind);
        c.resolved.set("gen.split", gen_split);
        c.resolved.set("gen.ood_level", gen_level.empty() ? "-" : gen_level);
        std::filesystem::create_directories(out_dir);
        dump_resolved(out_dir);
        const Manifest m = generate_dataset(split, kind, count, c.seed, out_dir, wcfg, gen_level);
        std::printf("wrote %zu records to %s\n", m.records.size(),
                    join_path(out_dir, "manifest.txt").c_str());
        return 0;
    }

    if (*ren) {
        const auto frames = read_frames_file(resolve_data_path(ren_in));
        std::filesystem::create_directories(ren_out);
        for (size_t i = 0; i < frames.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "frame_%04zu.pgm", i);
            write_pgm(join_path(ren_out, name), frames[i]);
        }
        std::printf("wrote %zu frames to %s\n", frames.size(), ren_out.c_str());
        return 0;
    }

    if (*tt) {
        TokenizerTrainOptions opt;
        opt.tok = tokenizer_from(c);
        dump_tokenizer(c, opt.tok);
        opt.steps = c.integer(tt_steps_o, tt_steps, "tokenizer.steps", 3000);
        opt.batch = static_cast<int>(c.integer(tt_batch_o, tt_batch, "tokenizer.batch", 64));
        opt.hyper.peak_lr = c.num(tt_lr_o, tt_lr, "tokenizer.lr", 1e-4);
        opt.hyper.warmup_steps = c.file_cfg.get_int("tokenizer.warmup", opt.steps / 20);
        opt.hyper.weight_decay = c.file_cfg.get_double("tokenizer.weight_decay", 0.0);
        opt.hyper.grad_clip = c.file_cfg.get_double("tokenizer.grad_clip", 0.0);
        opt.hyper.beta2 = c.file_cfg.get_double("tokenizer.beta2", 0.99);
        opt.seed = c.seed;
        opt.manifest_path = resolve_data_path(tt_manifest);
        opt.out_checkpoint = resolve_data_path(tt_out);
        opt.log_csv = tt_log.empty() ? "" : resolve_data_path(tt_log);
        dump_resolved(opt.out_checkpoint);
        const auto losses = train_tokenizer(opt);
        std::printf("tokenizer trained: recon=%.6g commit=%.6g total=%.6g -> %s\n",
                    losses.reconstruction, losses.commitment, losses.total,
                    opt.out_checkpoint.c_str());
        return 0;
    }

    if (*tk) {
        TokenizeOptions opt;
        opt.checkpoint = resolve_data_path(tk_ckpt);
        opt.manifest_path = resolve_data_path(tk_manifest);
        opt.out_csv = resolve_data_path(tk_out);
        dump_resolved(opt.out_csv);
        dump_tokens(opt);
        std::printf("token dump -> %s\n", opt.out_csv.c_str());
        return 0;
    }

    if (*pt) {
        PretrainOptions opt;
        opt.model.layers =
            static_cast<int>(c.integer(pt_layers_o, pt_layers, "pretrain.layers", 6));
        opt.model.dim = static_cast<int>(c.integer(pt_dim_o, pt_dim, "pretrain.dim", 256));
        opt.model.heads = static_cast<int>(c.integer(pt_heads_o, pt_heads, "pretrain.heads", 8));
        opt.model.n_visual = static_cast<int>(c.file_cfg.get_int("pretrain.n_visual", 256));
        opt.model.T = static_cast<int>(c.file_cfg.get_int("tokenizer.T", 16));
        opt.model.frame_count = static_cast<int>(c.file_cfg.get_int("world.frame_count", 32));
        opt.model.condition_frames =
            static_cast<int>(c.file_cfg.get_int("pretrain.condition_frames", 3));
        opt.steps = c.integer(pt_steps_o, pt_steps, "pretrain.steps", 3000);
        opt.batch = static_cast<int>(c.integer(pt_batch_o, pt_batch, "pretrain.batch", 8));
        opt.hyper.peak_lr = c.num(pt_lr_o, pt_lr, "pretrain.lr", 1e-4);
        opt.hyper.warmup_steps = c.file_cfg.get_int("pretrain.warmup", opt.steps / 20);
        opt.hyper.weight_decay = c.file_cfg.get_double("pretrain.weight_decay", 0.05);
        opt.hyper.grad_clip = c.file_cfg.get_double("pretrain.grad_clip", 1.0);
        opt.hyper.beta2 = 0.95;
        opt.seed = c.seed;
        opt.manifest_path = resolve_data_path(pt_manifest);
        opt.tokens_csv = resolve_data_path(pt_tokens);
        opt.out_checkpoint = resolve_data_path(pt_out);
        opt.log_csv = pt_log.empty() ? "" : resolve_data_path(pt_log);
        opt.eval_every = c.file_cfg.get_int("pretrain.eval_every", 250);
        dump_resolved(opt.out_checkpoint);
        const auto res = pretrain(opt);
        std::printf("pretrain: eval NLL %.4f -> %.4f, checkpoint %s\n", res.initial_eval_nll,
                    res.final_eval_nll, opt.out_checkpoint.c_str());
        return 0;
    }

    if (*gr) {
        GrpoOptions opt;
        opt.grpo.steps = static_cast<int>(c.integer(gr_steps_o, gr_steps, "grpo.steps", 200));
        opt.grpo.group_size = static_cast<int>(c.integer(gr_group_o, gr_group, "grpo.group", 8));
        opt.grpo.beta = c.num(gr_beta_o, gr_beta, "grpo.beta", 0.01);
        opt.grpo.clip_eps = c.num(gr_clip_o, gr_clip, "grpo.clip", 0.2);
        opt.grpo.lr = c.num(gr_lr_o, gr_lr, "grpo.lr", 3e-6);
        opt.grpo.sampler.top_k = static_cast<int>(c.integer(gr_topk_o, gr_topk, "grpo.top_k", 50));
        opt.grpo.sampler.top_p = c.num(gr_topp_o, gr_topp, "grpo.top_p", 0.95);
        opt.grpo.flow_steps =
            static_cast<int>(c.integer(gr_flow_o, gr_flow, "grpo.flow_steps", 8));
        opt.grpo.alpha = c.file_cfg.get_double("reward.alpha", 4.0);
        opt.grpo.k = c.file_cfg.get_double("reward.k", 1.4);
        opt.grad_clip = c.file_cfg.get_double("grpo.grad_clip", 1.0);
        opt.seed = c.seed;
        opt.policy_checkpoint = resolve_data_path(gr_ckpt);
        opt.tokenizer_checkpoint = resolve_data_path(gr_tok);
        opt.manifest_path = resolve_data_path(gr_manifest);
        opt.out_checkpoint = resolve_data_path(gr_out);
        opt.log_csv = gr_log.empty() ? "" : resolve_data_path(gr_log);
        dump_resolved(opt.out_checkpoint);
        const auto res = post_train(opt);
        std::printf("grpo: mean reward %.4f (first quartile) -> %.4f (last quartile), %s\n",
                    res.first_quartile_mean_reward, res.last_quartile_mean_reward,
                    opt.out_checkpoint.c_str());
        return 0;
    }

    if (*ev) {
        const std::string manifest_path = resolve_data_path(ev_manifest);
        const Manifest manifest = Manifest::load(manifest_path);
        const std::string dir = dir_of(manifest_path);
        world::WorldConfig wcfg;
        const std::string prefix = resolve_data_path(ev_prefix);
        std::vector<EvalRecord> records;
        ErrorReport report;
        if (ev_ground_truth) {
            const auto probe =
                read_frames_file(join_path(dir, manifest.records.at(0).frames_path));
            wcfg.image_size = probe[0].rows;
            c.resolved.set("eval.ground_truth", "1");
            dump_resolved(prefix + ".report.csv");
            report = evaluate_ground_truth(
                manifest, dir, wcfg,
                static_cast<int>(c.integer(ev_max_o, ev_max, "eval.max_samples", -1)), &records);
        } else {
            require(!ev_ckpt.empty() && !ev_tok.empty(),
                    "eval: --checkpoint and --tokenizer are required without --ground-truth");
            const auto model = ArModel<float>::load(resolve_data_path(ev_ckpt));
            const auto tok = Tokenizer<float>::load(resolve_data_path(ev_tok));
            wcfg.image_size = tok.cfg.image_size;
            EvalConfig ecfg;
            ecfg.seed = c.seed;
            ecfg.flow_steps =
                static_cast<int>(c.integer(ev_flow_o, ev_flow, "eval.flow_steps", 32));
            ecfg.max_samples =
                static_cast<int>(c.integer(ev_max_o, ev_max, "eval.max_samples", -1));
            ecfg.sampler.top_k = static_cast<int>(c.integer(ev_topk_o, ev_topk, "eval.top_k", 50));
            ecfg.sampler.top_p = c.num(ev_topp_o, ev_topp, "eval.top_p", 0.95);
            ecfg.alpha = c.file_cfg.get_double("reward.alpha", 4.0);
            ecfg.k = c.file_cfg.get_double("reward.k", 1.4);
            dump_resolved(prefix + ".report.csv");
            report = evaluate(model, tok, manifest, dir, wcfg, ecfg, &records);
        }
        write_records_csv(prefix + ".records.csv", records);
        write_report_csv(prefix + ".report.csv", report);
        for (const auto& row : report.rows)
            std::printf("%s %s %s n=%d v_error=%.6g r_error=%.6g\n", row.scenario.c_str(),
                        row.split.c_str(), row.ood_level.c_str(), row.n, row.mean_v_error,
                        row.mean_r_error);
        if (report.failures > 0) std::printf("failed/degenerate samples: %d\n", report.failures);
        return 0;
    }

    if (*an) {
        const auto tok = Tokenizer<float>::load(resolve_data_path(an_tok));
        if (an_mode == "similarity") {
            require(!an_ckpt.empty() && !an_manifest.empty(),
                    "analyze similarity: --checkpoint and --manifest required");
            const auto model = ArModel<float>::load(resolve_data_path(an_ckpt));
            const std::string manifest_path = resolve_data_path(an_manifest);
            const Manifest manifest = Manifest::load(manifest_path);
            dump_resolved(resolve_data_path(an_out));
            const auto rep = embedding_similarity_study(
                model, tok, manifest, dir_of(manifest_path), static_cast<int>(an_videos),
                static_cast<int>(an_offsets), c.seed);
            write_similarity_csv(resolve_data_path(an_out), rep);
            for (const auto& r : rep.rows)
                std::printf("offset=%d mean_cos=%.4f baseline=%.4f n=%d\n", r.offset, r.mean_cos,
                            r.baseline_cos, r.n);
        } else if (an_mode == "counterfactual") {
            require(!an_frames_a.empty() && !an_frames_b.empty(),
                    "analyze counterfactual: --frames-file and --frames-file-b required");
            const auto frame_a =
                read_frame_at(resolve_data_path(an_frames_a), static_cast<int>(an_frame_a));
            const auto frame_b =
                read_frame_at(resolve_data_path(an_frames_b), static_cast<int>(an_frame_b));
            std::vector<int> replace;
            std::stringstream ss(an_replace);
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (!item.empty()) replace.push_back(std::stoi(item));
            }
            dump_resolved(resolve_data_path(an_out));
            const auto img = counterfactual_interpolate(tok, frame_a, frame_b, replace, c.seed,
                                                        static_cast<int>(an_flow));
            write_pgm(resolve_data_path(an_out), img);
            std::printf("counterfactual frame -> %s\n", resolve_data_path(an_out).c_str());
        } else {
            throw std::invalid_argument("analyze: unknown mode " + an_mode);
        }
        return 0;
    }

    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::ParseError&) {
        return 2;  // unreachable: CLI11_PARSE handles it, kept for safety
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
