#include "physar/world.hpp"

#include <algorithm>
#include <cmath>

namespace physar::world {

double Vec2::norm() const { return std::sqrt(x * x + y * y); }

const char* to_string(Kind k) {
    switch (k) {
        case Kind::uniform: return "uniform";
        case Kind::parabola: return "parabola";
        case Kind::collision: return "collision";
    }
    return "?";
}

const char* to_string(Split s) {
    switch (s) {
        case Split::pretrain: return "pretrain";
        case Split::posttrain: return "posttrain";
        case Split::iid_eval: return "iid_eval";
        case Split::ood_eval: return "ood_eval";
    }
    return "?";
}

Kind kind_from_string(const std::string& s) {
    if (s == "uniform") return Kind::uniform;
    if (s == "parabola") return Kind::parabola;
    if (s == "collision") return Kind::collision;
    throw std::invalid_argument("unknown scenario kind: " + s);
}

Split split_from_string(const std::string& s) {
    if (s == "pretrain") return Split::pretrain;
    if (s == "posttrain") return Split::posttrain;
    if (s == "iid_eval") return Split::iid_eval;
    if (s == "ood_eval") return Split::ood_eval;
    throw std::invalid_argument("unknown split: " + s);
}

bool ball_inside_grid(const BallState& b, const WorldConfig& cfg) {
    return b.center.x - b.radius >= 0.0 && b.center.x + b.radius <= cfg.grid_extent &&
           b.center.y - b.radius >= 0.0 && b.center.y + b.radius <= cfg.grid_extent;
}

std::pair<BallState, BallState> resolve_elastic_collision(const BallState& a, const BallState& b,
                                                          double restitution) {
    Vec2 n = b.center - a.center;
    const double dist = n.norm();
    if (dist <= 0.0) return {a, b};
    n = n * (1.0 / dist);
    const double van = a.velocity.dot(n);
    const double vbn = b.velocity.dot(n);
    if (van - vbn <= 0.0) return {a, b};  // not approaching: no impulse
    const double ma = a.mass();
    const double mb = b.mass();
    const double inv = 1.0 / (ma + mb);
    const double van_new = (ma * van + mb * vbn + mb * restitution * (vbn - van)) * inv;
    const double vbn_new = (ma * van + mb * vbn + ma * restitution * (van - vbn)) * inv;
    BallState a2 = a;
    BallState b2 = b;
    a2.velocity = a.velocity + n * (van_new - van);
    b2.velocity = b.velocity + n * (vbn_new - vbn);
    return {a2, b2};
}

Trajectory simulate(const ScenarioSpec& spec, const WorldConfig& cfg) {
    cfg.validate();
    require(static_cast<int>(spec.balls.size()) == spec.expected_balls(),
            "simulate: ball count does not match scenario kind");
    for (const auto& b : spec.balls) {
        require(b.radius > 0, "simulate: radius must be positive");
        require(std::isfinite(b.center.x) && std::isfinite(b.center.y),
                "simulate: center must be finite");
        if (!ball_inside_grid(b, cfg))
            throw SpecRejected("ball overlaps walls at t=0");
    }

    Trajectory traj;
    traj.frames.reserve(cfg.frame_count);
    std::vector<BallState> cur = spec.balls;
    traj.frames.push_back(cur);

    const double g = spec.kind == Kind::parabola ? cfg.gravity : 0.0;
    for (int f = 1; f < cfg.frame_count; ++f) {
        for (auto& b : cur) {
            // velocity-Verlet under constant acceleration: exact closed form
            b.center.x += b.velocity.x * cfg.dt;
            b.center.y += b.velocity.y * cfg.dt + 0.5 * g * cfg.dt * cfg.dt;
            b.velocity.y += g * cfg.dt;
        }
        if (spec.kind == Kind::collision && !traj.collision_frame) {
            const Vec2 d = cur[1].center - cur[0].center;
            const double sum_r = cur[0].radius + cur[1].radius;
            if (d.norm() <= sum_r &&
                (cur[1].velocity - cur[0].velocity).dot(d) < 0.0) {
                auto [a2, b2] = resolve_elastic_collision(cur[0], cur[1], cfg.restitution);
                cur[0] = a2;
                cur[1] = b2;
                traj.collision_frame = f;
            }
        }
        traj.frames.push_back(cur);
    }

    if (spec.kind == Kind::collision && traj.collision_frame && *traj.collision_frame <= 3)
        throw SpecRejected("collision at or before frame 3");
    return traj;
}

int first_exit_frame(const Trajectory& traj, const WorldConfig& cfg) {
    for (size_t f = 0; f < traj.frames.size(); ++f)
        for (const auto& b : traj.frames[f])
            if (!ball_inside_grid(b, cfg)) return static_cast<int>(f);
    return static_cast<int>(traj.frames.size());
}

// ---------------------------------------------------------------------------
// Rasterization

namespace {

// Integral of sqrt(r^2 - u^2) du.
inline double circ_antideriv(double u, double r) {
    u = std::clamp(u, -r, r);
    const double q = std::sqrt(std::max(0.0, r * r - u * u));
    return 0.5 * (u * q + r * r * std::asin(u / r));
}

}  // namespace

double disc_box_coverage(double cx, double cy, double r, double x0, double x1, double y0,
                         double y1) {
    // Shift so the disc is centered at the origin.
    const double a = x0 - cx, b = x1 - cx;
    const double c = y0 - cy, d = y1 - cy;
    if (a >= r || b <= -r || c >= r || d <= -r) return 0.0;

    // Column heights exist only while q(u) > t, t = max(c, -d, 0).
    const double t = std::max({c, -d, 0.0});
    if (t >= r) return 0.0;
    const double umax = std::sqrt(r * r - t * t);
    const double lo = std::max(a, -umax);
    const double hi = std::min(b, umax);
    if (lo >= hi) return 0.0;

    // Breakpoints where the clipped chord changes branch.
    std::vector<double> bp = {lo, hi};
    auto add_break = [&](double w) {
        if (w > -r && w < r) {
            const double u = std::sqrt(r * r - w * w);
            if (-u > lo && -u < hi) bp.push_back(-u);
            if (u > lo && u < hi) bp.push_back(u);
        }
    };
    if (d < r) add_break(d);   // top clipped by box above this |u|
    if (c > -r) add_break(c);  // bottom clipped by box above this |u|
    std::sort(bp.begin(), bp.end());

    double area = 0.0;
    for (size_t i = 0; i + 1 < bp.size(); ++i) {
        const double u0 = bp[i], u1 = bp[i + 1];
        if (u1 - u0 <= 0) continue;
        const double um = 0.5 * (u0 + u1);
        const double q = std::sqrt(std::max(0.0, r * r - um * um));
        const double top_is_box = d < q ? 1.0 : 0.0;
        const double bot_is_box = c > -q ? 1.0 : 0.0;
        double top = top_is_box != 0.0 ? d * (u1 - u0)
                                       : circ_antideriv(u1, r) - circ_antideriv(u0, r);
        double bot = bot_is_box != 0.0 ? c * (u1 - u0)
                                       : -(circ_antideriv(u1, r) - circ_antideriv(u0, r));
        area += top - bot;
    }
    return std::max(0.0, area);
}

Mat<float> render_frame(const std::vector<BallState>& states, const WorldConfig& cfg) {
    const int S = cfg.image_size;
    Mat<float> img(S, S, 0.0f);
    const double s = cfg.pixels_per_unit();
    for (const auto& b : states) {
        require(std::isfinite(b.center.x) && std::isfinite(b.center.y) &&
                    std::isfinite(b.velocity.x) && std::isfinite(b.velocity.y),
                "render_frame: state must be finite");
        const double px = b.center.x * s;
        const double py = b.center.y * s;
        const double pr = b.radius * s;
        const int r0 = std::max(0, static_cast<int>(std::floor(py - pr)) - 1);
        const int r1 = std::min(S - 1, static_cast<int>(std::ceil(py + pr)) + 1);
        const int c0 = std::max(0, static_cast<int>(std::floor(px - pr)) - 1);
        const int c1 = std::min(S - 1, static_cast<int>(std::ceil(px + pr)) + 1);
        for (int i = r0; i <= r1; ++i) {
            float* row = img.row(i);
            for (int j = c0; j <= c1; ++j) {
                // fast classify: fully inside / fully outside
                const double nx = std::max(std::fabs(px - (j + 0.5)) - 0.5, 0.0);
                const double ny = std::max(std::fabs(py - (i + 0.5)) - 0.5, 0.0);
                if (nx * nx + ny * ny >= pr * pr) continue;
                const double fx = std::fabs(px - (j + 0.5)) + 0.5;
                const double fy = std::fabs(py - (i + 0.5)) + 0.5;
                double cov;
                if (fx * fx + fy * fy <= pr * pr) {
                    cov = 1.0;  // all four corners inside the disc
                } else {
                    cov = disc_box_coverage(px, py, pr, j, j + 1, i, i + 1);
                }
                row[j] = static_cast<float>(std::min(1.0, row[j] + cov));
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Scenario sampling

IntervalUnion radius_range(Split split, bool ood_dim) {
    if (ood_dim) return IntervalUnion::pair(0.3, 0.6, 1.5, 2.0);
    switch (split) {
        case Split::posttrain: return IntervalUnion::pair(0.7, 0.8, 1.4, 1.5);
        default: return IntervalUnion::single(0.8, 1.4);
    }
}

IntervalUnion speed_range(Split split, bool ood_dim) {
    if (ood_dim) return IntervalUnion::pair(0.0, 0.8, 4.5, 6.0);
    switch (split) {
        case Split::posttrain: return IntervalUnion::pair(1.0, 1.5, 3.5, 4.0);
        default: return IntervalUnion::single(1.5, 3.5);
    }
}

std::vector<std::string> ood_levels(Kind kind) {
    if (kind == Kind::collision)
        return {"r1", "v1", "r1r2", "v1v2", "r1v1", "all"};
    return {"r", "v", "rv"};
}

namespace {

bool level_has(const std::string& level, const std::string& dof) {
    if (level == "all") return true;
    // single-ball levels: "r", "v", "rv" refer to the only ball's DoFs
    if (level == "rv") return dof == "r1" || dof == "v1";
    if (level == "r") return dof == "r1";
    if (level == "v") return dof == "v1";
    // collision levels
    if (level == "r1r2") return dof == "r1" || dof == "r2";
    if (level == "v1v2") return dof == "v1" || dof == "v2";
    if (level == "r1v1") return dof == "r1" || dof == "v1";
    return level == dof;
}

}  // namespace

ScenarioSpec sample_scenario(Split split, Kind kind, Rng& rng, const WorldConfig& cfg,
                             const std::string& forced_ood_level) {
    ScenarioSpec spec;
    spec.kind = kind;
    spec.split = split;
    if (split == Split::ood_eval) {
        if (!forced_ood_level.empty()) {
            const auto levels = ood_levels(kind);
            require(std::find(levels.begin(), levels.end(), forced_ood_level) != levels.end(),
                    "sample_scenario: unknown OOD level '" + forced_ood_level + "'");
            spec.ood_level = forced_ood_level;
        } else {
            const auto levels = ood_levels(kind);
            spec.ood_level = levels[rng.next_below(levels.size())];
        }
    }
    auto draw_r = [&](const std::string& dof) {
        const bool ood = split == Split::ood_eval && level_has(spec.ood_level, dof);
        return radius_range(split, ood).sample(rng);
    };
    auto draw_v = [&](const std::string& dof) {
        const bool ood = split == Split::ood_eval && level_has(spec.ood_level, dof);
        return speed_range(split, ood).sample(rng);
    };

    if (kind == Kind::uniform) {
        BallState b;
        b.radius = draw_r("r1");
        const double v = draw_v("v1");
        const double th = rng.uniform(0.0, 6.283185307179586);
        b.velocity = {v * std::cos(th), v * std::sin(th)};
        b.center.x = rng.uniform(b.radius, cfg.grid_extent - b.radius);
        b.center.y = rng.uniform(b.radius, cfg.grid_extent - b.radius);
        spec.balls.push_back(b);
    } else if (kind == Kind::parabola) {
        BallState b;
        b.radius = draw_r("r1");
        const double v = draw_v("v1");
        b.velocity = {rng.bernoulli(0.5) ? v : -v, 0.0};  // horizontal launch
        b.center.x = rng.uniform(b.radius, cfg.grid_extent - b.radius);
        const double band_hi = std::max(b.radius + 1e-9, 0.35 * cfg.grid_extent);
        b.center.y = rng.uniform(b.radius, std::min(band_hi, cfg.grid_extent - b.radius));
        spec.balls.push_back(b);
    } else {
        // head-on pair on a horizontal line; contact time constructed, then
        // re-verified against the simulated trajectory by the acceptance loop
        BallState b1, b2;
        b1.radius = draw_r("r1");
        b2.radius = draw_r("r2");
        const double v1 = draw_v("v1");
        const double v2 = draw_v("v2");
        b1.velocity = {v1, 0.0};
        b2.velocity = {-v2, 0.0};
        const double y = cfg.grid_extent * 0.5;
        b1.center.y = y;
        b2.center.y = y;
        const double t_c = rng.uniform(4.5, 7.5) * cfg.dt;
        const double gap = std::max(v1 + v2, 1e-6) * t_c + b1.radius + b2.radius;
        const double lo = b1.radius;
        const double hi = cfg.grid_extent - b2.radius - gap;
        b1.center.x = hi > lo ? rng.uniform(lo, hi) : lo;
        b2.center.x = b1.center.x + gap;
        spec.balls = {b1, b2};
    }
    return spec;
}

bool trajectory_accepted(const ScenarioSpec& spec, const Trajectory& traj,
                         const WorldConfig& cfg) {
    if (first_exit_frame(traj, cfg) < cfg.min_visible_frames) return false;
    if (spec.kind == Kind::collision) {
        if (!traj.collision_frame) return false;
        if (*traj.collision_frame <= 3) return false;
        if (*traj.collision_frame > cfg.min_visible_frames - 2) return false;
    }
    return true;
}

std::pair<ScenarioSpec, Trajectory> sample_accepted(Split split, Kind kind, Rng& rng,
                                                    const WorldConfig& cfg,
                                                    const std::string& forced_ood_level) {
    for (int attempt = 0; attempt < 100000; ++attempt) {
        ScenarioSpec spec = sample_scenario(split, kind, rng, cfg, forced_ood_level);
        try {
            Trajectory traj = simulate(spec, cfg);
            if (trajectory_accepted(spec, traj, cfg)) return {std::move(spec), std::move(traj)};
        } catch (const SpecRejected&) {
            // resample
        }
    }
    throw std::runtime_error("sample_accepted: no acceptable spec found (check config ranges)");
}

}  // namespace physar::world
