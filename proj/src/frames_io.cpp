#include "physar/frames_io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "physar/threadpool.hpp"

namespace physar {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void io_fail(const std::string& op, const std::string& path) {
    throw std::runtime_error(op + " failed: " + path);
}

}  // namespace

std::string dir_of(const std::string& path) {
    const auto p = std::filesystem::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

std::string join_path(const std::string& dir, const std::string& rel) {
    return (std::filesystem::path(dir) / rel).string();
}

void Manifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) io_fail("manifest open", path);
    for (const auto& r : records) {
        f << r.id << ' ' << world::to_string(r.kind) << ' ' << world::to_string(r.split) << ' '
          << (r.ood_level.empty() ? "-" : r.ood_level) << ' ' << r.initial.size();
        for (const auto& b : r.initial)
            f << ' ' << fmt_double(b.radius) << ' ' << fmt_double(b.velocity.x) << ' '
              << fmt_double(b.velocity.y);
        f << ' ' << r.collision_frame << ' ' << r.frames_path << ' ' << r.traj_path << '\n';
    }
    if (!f) io_fail("manifest write", path);
}

Manifest Manifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) io_fail("manifest open", path);
    Manifest m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestRecord r;
        std::string kind, split, level;
        size_t nballs = 0;
        is >> r.id >> kind >> split >> level >> nballs;
        r.kind = world::kind_from_string(kind);
        r.split = world::split_from_string(split);
        r.ood_level = level == "-" ? "" : level;
        for (size_t i = 0; i < nballs; ++i) {
            world::BallState b;
            is >> b.radius >> b.velocity.x >> b.velocity.y;
            r.initial.push_back(b);
        }
        is >> r.collision_frame >> r.frames_path >> r.traj_path;
        if (!is) io_fail("manifest parse", path + " (line: " + line + ")");
        m.records.push_back(std::move(r));
    }
    return m;
}

void write_frames_file(const std::string& path, const std::vector<Mat<float>>& frames) {
    require(!frames.empty(), "write_frames_file: no frames");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) io_fail("frames open", path);
    f.write("PHYSAR01", 8);
    const uint32_t header[4] = {static_cast<uint32_t>(frames.size()),
                                static_cast<uint32_t>(frames[0].rows),
                                static_cast<uint32_t>(frames[0].cols), 1u};
    f.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const auto& fr : frames) {
        require(fr.rows == frames[0].rows && fr.cols == frames[0].cols,
                "write_frames_file: inconsistent frame shapes");
        f.write(reinterpret_cast<const char*>(fr.data.data()),
                static_cast<std::streamsize>(fr.data.size() * sizeof(float)));
    }
    if (!f) io_fail("frames write", path);
}

std::vector<Mat<float>> read_frames_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail("frames open", path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "PHYSAR01", 8) != 0)
        throw std::runtime_error("frames file: bad magic: " + path);
    uint32_t header[4];
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!f || header[3] != 1) throw std::runtime_error("frames file: bad header: " + path);
    std::vector<Mat<float>> frames(header[0], Mat<float>(static_cast<int>(header[1]),
                                                         static_cast<int>(header[2])));
    for (auto& fr : frames) {
        f.read(reinterpret_cast<char*>(fr.data.data()),
               static_cast<std::streamsize>(fr.data.size() * sizeof(float)));
        if (!f) io_fail("frames read", path);
    }
    return frames;
}

void write_trajectory_csv(const std::string& path, const world::Trajectory& traj) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) io_fail("trajectory open", path);
    f << "frame,ball,cx,cy,vx,vy,r\n";
    for (size_t fr = 0; fr < traj.frames.size(); ++fr)
        for (size_t b = 0; b < traj.frames[fr].size(); ++b) {
            const auto& s = traj.frames[fr][b];
            f << fr << ',' << b << ',' << fmt_double(s.center.x) << ',' << fmt_double(s.center.y)
              << ',' << fmt_double(s.velocity.x) << ',' << fmt_double(s.velocity.y) << ','
              << fmt_double(s.radius) << '\n';
        }
    if (!f) io_fail("trajectory write", path);
}

world::Trajectory read_trajectory_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) io_fail("trajectory open", path);
    world::Trajectory traj;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        size_t fr = 0, b = 0;
        char comma;
        world::BallState s;
        is >> fr >> comma >> b >> comma >> s.center.x >> comma >> s.center.y >> comma >>
            s.velocity.x >> comma >> s.velocity.y >> comma >> s.radius;
        if (!is) io_fail("trajectory parse", path);
        if (traj.frames.size() <= fr) traj.frames.resize(fr + 1);
        if (traj.frames[fr].size() <= b) traj.frames[fr].resize(b + 1);
        traj.frames[fr][b] = s;
    }
    return traj;
}

void write_pgm(const std::string& path, const Mat<float>& img) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) io_fail("pgm open", path);
    f << "P5\n" << img.cols << ' ' << img.rows << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(img.cols));
    for (int i = 0; i < img.rows; ++i) {
        for (int j = 0; j < img.cols; ++j) {
            const float v = std::min(1.0f, std::max(0.0f, img.at(i, j)));
            row[static_cast<size_t>(j)] = static_cast<uint8_t>(v * 255.0f + 0.5f);
        }
        f.write(reinterpret_cast<const char*>(row.data()), img.cols);
    }
    if (!f) io_fail("pgm write", path);
}

Manifest generate_dataset(world::Split split, world::Kind kind, int count, uint64_t seed,
                          const std::string& out_dir, const world::WorldConfig& cfg,
                          const std::string& forced_ood_level, int jobs) {
    require(count > 0, "generate_dataset: count must be positive");
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    struct Result {
        ManifestRecord rec;
    };
    std::vector<Result> results(static_cast<size_t>(count));
    const uint64_t dataset_tag =
        mix_u64(hash_str(world::to_string(split)), hash_str(world::to_string(kind)));

    parallel_for(
        count,
        [&](int64_t i) {
            Rng rng(seed, mix_u64(dataset_tag, static_cast<uint64_t>(i)));
            auto [spec, traj] = world::sample_accepted(split, kind, rng, cfg, forced_ood_level);
            std::vector<Mat<float>> frames;
            frames.reserve(traj.frames.size());
            for (const auto& st : traj.frames) frames.push_back(world::render_frame(st, cfg));

            char idbuf[96];
            std::snprintf(idbuf, sizeof(idbuf), "%s_%s_%06" PRId64, world::to_string(kind),
                          world::to_string(split), i);
            ManifestRecord rec;
            rec.id = idbuf;
            rec.kind = kind;
            rec.split = split;
            rec.ood_level = spec.ood_level;
            rec.initial = spec.balls;
            rec.collision_frame = traj.collision_frame ? *traj.collision_frame : -1;
            rec.frames_path = rec.id + ".frames";
            rec.traj_path = rec.id + ".traj.csv";
            write_frames_file(join_path(out_dir, rec.frames_path), frames);
            write_trajectory_csv(join_path(out_dir, rec.traj_path), traj);
            results[static_cast<size_t>(i)].rec = std::move(rec);
        },
        jobs);

    Manifest m;
    m.records.reserve(static_cast<size_t>(count));
    for (auto& r : results) m.records.push_back(std::move(r.rec));
    m.save(join_path(out_dir, "manifest.txt"));
    return m;
}

}  // namespace physar
