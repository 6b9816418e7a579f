#pragma once

// Exact 2D ball physics, disc rasterization with analytic pixel coverage,
// and split-aware scenario sampling / dataset generation.
//
// Conventions: world y points down (same direction as image rows), gravity
// acts in +y. World (x, y) maps to pixel (col, row) = (x, y) * image_size /
// grid_extent.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "physar/mat.hpp"
#include "physar/rng.hpp"

namespace physar::world {

struct WorldConfig {
    double grid_extent = 10.0;
    double dt = 0.1;
    int frame_count = 32;
    double gravity = 9.8;
    int image_size = 128;
    double restitution = 1.0;
    int min_visible_frames = 10;  // premature-exit acceptance threshold

    double pixels_per_unit() const { return image_size / grid_extent; }

    void validate() const {
        require(grid_extent > 0, "WorldConfig: grid_extent must be positive");
        require(dt > 0, "WorldConfig: dt must be positive");
        require(frame_count >= 4, "WorldConfig: frame_count must be at least 4");
        require(image_size >= 16, "WorldConfig: image_size must be at least 16");
        require(min_visible_frames >= 4 && min_visible_frames <= frame_count,
                "WorldConfig: min_visible_frames out of range");
    }
};

struct Vec2 {
    double x = 0;
    double y = 0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double norm() const;
};

struct BallState {
    Vec2 center;
    Vec2 velocity;
    double radius = 1.0;

    double mass() const { return radius * radius; }  // uniform-density disc
};

enum class Kind { uniform, parabola, collision };
enum class Split { pretrain, posttrain, iid_eval, ood_eval };

const char* to_string(Kind k);
const char* to_string(Split s);
Kind kind_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct ScenarioSpec {
    Kind kind = Kind::uniform;
    std::vector<BallState> balls;
    Split split = Split::pretrain;
    std::string ood_level;  // empty unless split == ood_eval

    int expected_balls() const { return kind == Kind::collision ? 2 : 1; }
};

struct Trajectory {
    std::vector<std::vector<BallState>> frames;  // frame-major, then ball
    std::optional<int> collision_frame;
};

// Thrown when a spec is dynamically invalid and should be resampled.
struct SpecRejected : std::runtime_error {
    explicit SpecRejected(const std::string& what) : std::runtime_error(what) {}
};

bool ball_inside_grid(const BallState& b, const WorldConfig& cfg);

Trajectory simulate(const ScenarioSpec& spec, const WorldConfig& cfg);

std::pair<BallState, BallState> resolve_elastic_collision(const BallState& a, const BallState& b,
                                                          double restitution = 1.0);

// First frame index at which any ball is not fully inside the grid;
// frame_count when every frame is fully visible.
int first_exit_frame(const Trajectory& traj, const WorldConfig& cfg);

Mat<float> render_frame(const std::vector<BallState>& states, const WorldConfig& cfg);

// Exact area of the disc/axis-aligned-box intersection (analytic).
double disc_box_coverage(double cx, double cy, double r, double x0, double x1, double y0,
                         double y1);

// Parameter ranges per split (speed and radius); OOD split draws per-level.
IntervalUnion radius_range(Split split, bool ood_dim);
IntervalUnion speed_range(Split split, bool ood_dim);
std::vector<std::string> ood_levels(Kind kind);

// Draws a statically valid spec (ranges + inside walls); dynamic acceptance
// (exit window, collision window) is generate_dataset's rejection loop.
ScenarioSpec sample_scenario(Split split, Kind kind, Rng& rng, const WorldConfig& cfg,
                             const std::string& forced_ood_level = "");

// Samples until `simulate` + acceptance pass; returns spec and trajectory.
std::pair<ScenarioSpec, Trajectory> sample_accepted(Split split, Kind kind, Rng& rng,
                                                    const WorldConfig& cfg,
                                                    const std::string& forced_ood_level = "");

bool trajectory_accepted(const ScenarioSpec& spec, const Trajectory& traj,
                         const WorldConfig& cfg);

}  // namespace physar::world
