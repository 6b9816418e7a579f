#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "physar/checkpoint.hpp"
#include "physar/config.hpp"
#include "physar/eval.hpp"
#include "physar/pipeline.hpp"

using namespace physar;

TEST_CASE("checkpoint container round-trips entries bit-exactly") {
    Checkpoint ck;
    Rng rng(3);
    const auto m = Mat<float>::randn(7, 5, 1.0, rng);
    const auto d = Mat<double>::randn(3, 4, 1.0, rng);
    std::vector<double> vec = {1.5, -2.25, 1e-8};
    ck.put_mat("weights", m, DType::f32);
    ck.put_mat("accum", d, DType::f64);
    ck.put_vec("cfg", vec, DType::f64);
    ck.save("build_test_ck.bin");

    const auto loaded = Checkpoint::load("build_test_ck.bin");
    const auto m2 = loaded.get_mat<float>("weights");
    REQUIRE(m2.same_shape(m));
    for (int64_t i = 0; i < m.numel(); ++i) CHECK(m2.data[i] == m.data[i]);
    const auto d2 = loaded.get_mat<double>("accum");
    for (int64_t i = 0; i < d.numel(); ++i) CHECK(d2.data[i] == d.data[i]);
    const auto v2 = loaded.get("cfg").as<double>();
    REQUIRE(v2.size() == vec.size());
    for (size_t i = 0; i < vec.size(); ++i) CHECK(v2[i] == vec[i]);
    CHECK_THROWS(loaded.get("missing"));

    // header magic enforced
    std::ofstream bad("build_test_bad.bin", std::ios::binary);
    bad << "NOTMAGIC" << std::string(32, '\0');
    bad.close();
    CHECK_THROWS(Checkpoint::load("build_test_bad.bin"));
    std::remove("build_test_ck.bin");
    std::remove("build_test_bad.bin");
}

TEST_CASE("config files parse, override, and dump deterministically") {
    {
        std::ofstream f("build_test.cfg");
        f << "# comment line\n";
        f << "world.image_size = 64\n";
        f << "tokenizer.T=8\n";
        f << "grpo.beta = 0.02  # trailing comment\n";
        f << "flag.on = true\n";
    }
    auto cfg = KeyValueConfig::load("build_test.cfg");
    CHECK(cfg.get_int("world.image_size", 0) == 64);
    CHECK(cfg.get_int("tokenizer.T", 0) == 8);
    CHECK(cfg.get_double("grpo.beta", 0) == doctest::Approx(0.02));
    CHECK(cfg.get_bool("flag.on", false));
    CHECK(cfg.get_int("absent.key", 41) == 41);
    cfg.set("world.image_size", "128");
    CHECK(cfg.get_int("world.image_size", 0) == 128);

    cfg.dump("build_test_dump1.cfg");
    cfg.dump("build_test_dump2.cfg");
    auto slurp = [](const std::string& p) {
        std::ifstream f(p);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(slurp("build_test_dump1.cfg") == slurp("build_test_dump2.cfg"));

    std::ofstream bad("build_test_bad.cfg");
    bad << "keyonly\n";
    bad.close();
    CHECK_THROWS(KeyValueConfig::load("build_test_bad.cfg"));
    for (const char* p : {"build_test.cfg", "build_test_dump1.cfg", "build_test_dump2.cfg",
                          "build_test_bad.cfg"})
        std::remove(p);
}

TEST_CASE("relative data paths resolve against the data-root variable") {
    setenv("PHYSAR_DATA_DIR", "/tmp/physar_root", 1);
    CHECK(resolve_data_path("sub/file.bin") == "/tmp/physar_root/sub/file.bin");
    CHECK(resolve_data_path("/abs/file.bin") == "/abs/file.bin");
    unsetenv("PHYSAR_DATA_DIR");
    CHECK(resolve_data_path("sub/file.bin") == "sub/file.bin");
}

TEST_CASE("report aggregation equals the mean of emitted records") {
    std::vector<EvalRecord> records;
    for (int i = 0; i < 7; ++i) {
        EvalRecord r;
        r.id = "x" + std::to_string(i);
        r.scenario = "uniform";
        r.split = "iid_eval";
        r.ood_level = "-";
        r.v_error = 0.1 * i;
        r.r_error = 0.05 * i;
        records.push_back(r);
    }
    EvalRecord bad;
    bad.id = "bad";
    bad.scenario = "uniform";
    bad.split = "iid_eval";
    bad.ood_level = "-";
    bad.degenerate = true;
    records.push_back(bad);

    const auto rep = aggregate_records(records);
    REQUIRE(rep.rows.size() == 1u);
    CHECK(rep.rows[0].n == 7);
    CHECK(rep.failures == 1);
    double mv = 0, mr = 0;
    for (int i = 0; i < 7; ++i) {
        mv += 0.1 * i / 7;
        mr += 0.05 * i / 7;
    }
    CHECK(std::fabs(rep.rows[0].mean_v_error - mv) < 1e-9);
    CHECK(std::fabs(rep.rows[0].mean_r_error - mr) < 1e-9);
}

namespace {

TokenizerConfig tiny_tok_cfg() {
    TokenizerConfig cfg;
    cfg.T = 4;
    cfg.N = 16;
    cfg.code_dim = 4;
    cfg.image_size = 16;
    cfg.patch = 4;
    cfg.enc_layers = 1;
    cfg.enc_dim = 8;
    cfg.enc_heads = 2;
    cfg.dec_layers = 1;
    cfg.dec_dim = 8;
    cfg.dec_heads = 2;
    cfg.time_feat_dim = 4;
    return cfg;
}

}  // namespace

TEST_CASE("counterfactual splicing: identity at the extremes, positional composition") {
    Rng rng(7);
    Tokenizer<float> tok(tiny_tok_cfg(), rng);
    world::WorldConfig w;
    w.image_size = 16;
    const auto a = world::render_frame({{{5.0, 5.0}, {0, 0}, 1.5}}, w);
    const auto b = world::render_frame({{{11.0, 9.0}, {0, 0}, 2.5}}, w);

    // empty set reconstructs A; full set reconstructs B (same seed, same path)
    const auto empty = counterfactual_interpolate(tok, a, b, {}, 99, 3);
    Rng ra(99 ^ 0);  // reference via direct detokenize with the library's seed scheme
    const auto ids_a = tok.tokenize(a);
    const auto ids_b = tok.tokenize(b);
    Rng ref_rng(99, hash_str("counterfactual"));
    const auto ref_a = tok.detokenize(ids_a, ref_rng, 3);
    for (int64_t i = 0; i < empty.numel(); ++i) CHECK(empty.data[i] == ref_a.data[i]);

    const auto full = counterfactual_interpolate(tok, a, b, {0, 1, 2, 3}, 99, 3);
    Rng ref_rng2(99, hash_str("counterfactual"));
    const auto ref_b = tok.detokenize(ids_b, ref_rng2, 3);
    for (int64_t i = 0; i < full.numel(); ++i) CHECK(full.data[i] == ref_b.data[i]);

    // disjoint splices compose positionally
    const auto s12 = counterfactual_interpolate(tok, a, b, {0, 2}, 7, 3);
    std::vector<int> manual = ids_a;
    manual[0] = ids_b[0];
    manual[2] = ids_b[2];
    Rng ref_rng3(7, hash_str("counterfactual"));
    const auto ref_manual = tok.detokenize(manual, ref_rng3, 3);
    for (int64_t i = 0; i < s12.numel(); ++i) CHECK(s12.data[i] == ref_manual.data[i]);

    CHECK_THROWS(counterfactual_interpolate(tok, a, b, {99}, 1, 3));
}

TEST_CASE("similarity study: identical frames score one, everything in [-1, 1]") {
    Rng rng(11);
    Tokenizer<float> tok(tiny_tok_cfg(), rng);
    ArConfig acfg;
    acfg.layers = 1;
    acfg.dim = 16;
    acfg.heads = 2;
    acfg.n_visual = 16;
    acfg.T = 4;
    acfg.frame_count = 4;
    acfg.condition_frames = 1;
    Rng arng(13);
    ArModel<float> model(acfg, arng);

    // two tiny "videos": one static (identical frames), one moving
    const std::string dir = "build_test_sim";
    std::filesystem::create_directories(dir);
    world::WorldConfig w;
    w.image_size = 16;
    std::vector<Mat<float>> static_video(4, world::render_frame({{{8.0, 8.0}, {0, 0}, 2.0}}, w));
    std::vector<Mat<float>> moving_video;
    for (int f = 0; f < 4; ++f)
        moving_video.push_back(world::render_frame({{{3.0 + 2.5 * f, 5.0}, {0, 0}, 2.0}}, w));
    write_frames_file(dir + "/a.frames", static_video);
    write_frames_file(dir + "/b.frames", moving_video);
    Manifest m;
    for (const char* id : {"a", "b"}) {
        ManifestRecord r;
        r.id = id;
        r.kind = world::Kind::uniform;
        r.split = world::Split::iid_eval;
        r.initial = {{{0, 0}, {0, 0}, 1.0}};
        r.frames_path = std::string(id) + ".frames";
        r.traj_path = std::string(id) + ".traj.csv";
        m.records.push_back(r);
    }
    m.save(dir + "/manifest.txt");

    const auto rep = embedding_similarity_study(model, tok, m, dir, -1, 3, 17);
    REQUIRE(rep.rows.size() == 3u);
    for (const auto& row : rep.rows) {
        CHECK(row.mean_cos >= -1.0 - 1e-9);
        CHECK(row.mean_cos <= 1.0 + 1e-9);
        CHECK(row.baseline_cos >= -1.0 - 1e-9);
        CHECK(row.baseline_cos <= 1.0 + 1e-9);
        CHECK(row.n > 0);
    }
    // study over only the static video: similarity exactly 1
    Manifest ms;
    ms.records = {m.records[0], m.records[0]};
    ms.records[1].id = "a2";
    const auto rep2 = embedding_similarity_study(model, tok, ms, dir, -1, 2, 19);
    for (const auto& row : rep2.rows) CHECK(row.mean_cos == doctest::Approx(1.0).epsilon(1e-6));
    std::filesystem::remove_all(dir);
}

TEST_CASE("frame-level random access matches whole-file reads") {
    const std::string dir = "build_test_fr";
    std::filesystem::create_directories(dir);
    world::WorldConfig w;
    w.image_size = 16;
    std::vector<Mat<float>> video;
    for (int f = 0; f < 5; ++f)
        video.push_back(world::render_frame({{{2.0 + f, 6.0}, {0, 0}, 1.5}}, w));
    write_frames_file(dir + "/v.frames", video);
    for (int f = 0; f < 5; ++f) {
        const auto one = read_frame_at(dir + "/v.frames", f);
        for (int64_t i = 0; i < one.numel(); ++i) CHECK(one.data[i] == video[static_cast<size_t>(f)].data[i]);
    }
    CHECK_THROWS(read_frame_at(dir + "/v.frames", 5));
    std::filesystem::remove_all(dir);
}
