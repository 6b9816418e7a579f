#pragma once

// On-disk formats: PHYSAR01 frames files, line-oriented dataset manifests,
// trajectory sidecar CSVs, and PGM dumps for eyeballing.

#include <string>
#include <vector>

#include "physar/mat.hpp"
#include "physar/world.hpp"

namespace physar {

struct ManifestRecord {
    std::string id;
    world::Kind kind = world::Kind::uniform;
    world::Split split = world::Split::pretrain;
    std::string ood_level;                      // empty when none
    std::vector<world::BallState> initial;      // r and v per ball
    int collision_frame = -1;                   // -1 when none
    std::string frames_path;                    // relative to manifest dir
    std::string traj_path;                      // relative to manifest dir
};

struct Manifest {
    std::vector<ManifestRecord> records;

    void save(const std::string& path) const;
    static Manifest load(const std::string& path);
};

void write_frames_file(const std::string& path, const std::vector<Mat<float>>& frames);
std::vector<Mat<float>> read_frames_file(const std::string& path);

void write_trajectory_csv(const std::string& path, const world::Trajectory& traj);
world::Trajectory read_trajectory_csv(const std::string& path);

void write_pgm(const std::string& path, const Mat<float>& img);

// Directory of the file a manifest-relative path hangs off.
std::string dir_of(const std::string& path);
std::string join_path(const std::string& dir, const std::string& rel);

// Dataset generation: exactly `count` accepted samples, deterministic in
// (split, kind, count, seed). Returns the manifest (also written to
// out_dir/manifest.txt).
Manifest generate_dataset(world::Split split, world::Kind kind, int count, uint64_t seed,
                          const std::string& out_dir, const world::WorldConfig& cfg,
                          const std::string& forced_ood_level = "", int jobs = 0);

}  // namespace physar
