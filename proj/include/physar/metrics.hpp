#pragma once

// Physical-quantity extraction from frames and the error/reward closed forms.

#include <optional>
#include <vector>

#include "physar/mat.hpp"
#include "physar/world.hpp"

namespace physar::metrics {

struct BallDetection {
    world::Vec2 center_px;     // continuous pixel coordinates
    world::Vec2 center_world;  // pixel / (image_size/grid_extent)
    double radius_world = 0;
    bool visible = false;
};

struct Detection {
    std::vector<BallDetection> balls;  // expected_n entries, slot-stable
    bool merged_blob = false;          // two balls fused into one component
};

// Threshold at 0.5, 8-connected components, intensity-weighted centroid over
// the component plus its anti-aliased skirt, radius from integrated area.
// `prev` keeps ball identity across frames (nearest-assignment matching).
Detection detect_balls(const Mat<float>& frame, int expected_n, const world::WorldConfig& cfg,
                       const Detection* prev = nullptr);

struct VelocitySeries {
    // velocity[t][i] defined for t >= 1; valid[t][i] true when both endpoint
    // detections are visible
    std::vector<std::vector<world::Vec2>> velocity;
    std::vector<std::vector<bool>> valid;
};

VelocitySeries track_velocities(const std::vector<Detection>& detections, double dt);

struct VelocityErrorReport {
    double v_error = 0;
    int valid_terms = 0;  // N * |T| style count of (ball, frame) terms
    bool degenerate = false;
};

struct RadiusErrorReport {
    double r_error = 0;
    int valid_terms = 0;
    bool degenerate = false;
};

// Mean Euclidean deviation between detected velocities and finite differences
// of the exact simulator centers, over generated frames (t >= condition) where
// both endpoints are visible.
VelocityErrorReport velocity_error(const std::vector<Detection>& detections,
                                   const world::Trajectory& truth,
                                   const world::WorldConfig& cfg, int condition_frames = 3);

// Mean |r_detected - r_true| / r_true over visible generated frames.
RadiusErrorReport radius_error(const std::vector<Detection>& detections,
                               const world::Trajectory& truth, int condition_frames = 3);

struct RewardBreakdown {
    double r_vel = 0;
    double r_mass = 0;
    double total = 0;
    double v_error = 0;
    double r_error = 0;
    double alpha = 4.0;
    double k = 1.4;
    bool degenerate = false;
};

double reward_velocity(double v_error, double alpha = 4.0, double k = 1.4);
double reward_mass(double r_error);

// Detects over all frames (prev-matched), scores against the trajectory.
RewardBreakdown compute_reward(const std::vector<Mat<float>>& predicted,
                               const world::Trajectory& truth, const world::WorldConfig& cfg,
                               double alpha = 4.0, double k = 1.4, int condition_frames = 3);

std::vector<Detection> detect_video(const std::vector<Mat<float>>& frames, int expected_n,
                                    const world::WorldConfig& cfg);

}  // namespace physar::metrics
