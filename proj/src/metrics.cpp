#include "physar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace physar::metrics {

namespace {

struct Component {
    std::vector<int> pixels;  // flat indices of core (> threshold) pixels
    double area_core = 0;
    int min_row = 1 << 30, max_row = -1, min_col = 1 << 30, max_col = -1;
};

constexpr float kThreshold = 0.5f;

std::vector<Component> connected_components(const Mat<float>& frame) {
    const int S = frame.rows;
    std::vector<int> label(static_cast<size_t>(S) * S, -1);
    std::vector<Component> comps;
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            const int idx = i * S + j;
            if (label[idx] >= 0 || frame.data[idx] <= kThreshold) continue;
            Component comp;
            std::queue<int> q;
            q.push(idx);
            label[idx] = static_cast<int>(comps.size());
            while (!q.empty()) {
                const int cur = q.front();
                q.pop();
                comp.pixels.push_back(cur);
                const int ci = cur / S, cj = cur % S;
                comp.area_core += frame.data[cur];
                comp.min_row = std::min(comp.min_row, ci);
                comp.max_row = std::max(comp.max_row, ci);
                comp.min_col = std::min(comp.min_col, cj);
                comp.max_col = std::max(comp.max_col, cj);
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        if (di == 0 && dj == 0) continue;
                        const int ni = ci + di, nj = cj + dj;
                        if (ni < 0 || nj < 0 || ni >= S || nj >= S) continue;
                        const int nidx = ni * S + nj;
                        if (label[nidx] < 0 && frame.data[nidx] > kThreshold) {
                            label[nidx] = static_cast<int>(comps.size());
                            q.push(nidx);
                        }
                    }
            }
            comps.push_back(std::move(comp));
        }
    }
    return comps;
}

struct Moments {
    double mass = 0, mx = 0, my = 0;
    bool touches_border = false;
};

// Core-only centroid, used to route the anti-aliased support pixels.
Moments core_moments(const Mat<float>& frame, const Component& comp) {
    const int S = frame.rows;
    Moments m;
    for (int idx : comp.pixels) {
        const int ci = idx / S, cj = idx % S;
        const double v = frame.data[idx];
        m.mass += v;
        m.mx += v * (cj + 0.5);
        m.my += v * (ci + 0.5);
    }
    return m;
}

// Full-support moments: every pixel above a small floor contributes to the
// component whose core centroid is nearest, provided it lies within the
// component's plausible coverage ring. The floor and the distance cap keep
// low-level generation noise from polluting centroids or visibility.
constexpr float kSupportFloor = 0.02f;

std::vector<Moments> support_moments(const Mat<float>& frame,
                                     const std::vector<Component>& comps) {
    const int S = frame.rows;
    std::vector<Moments> core(comps.size());
    std::vector<double> reach(comps.size(), 0.0);
    for (size_t c = 0; c < comps.size(); ++c) {
        core[c] = core_moments(frame, comps[c]);
        const double r_core =
            std::sqrt(std::max(core[c].mass, 1e-9) / 3.14159265358979323846);
        reach[c] = r_core + 3.0;
    }
    std::vector<Moments> out(comps.size());
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            const double v = frame.data[static_cast<size_t>(i) * S + j];
            if (v < kSupportFloor) continue;
            size_t best = 0;
            double best_d = 1e300;
            for (size_t c = 0; c < comps.size(); ++c) {
                if (core[c].mass <= 0) continue;
                const double cx = core[c].mx / core[c].mass;
                const double cy = core[c].my / core[c].mass;
                const double d =
                    (cx - (j + 0.5)) * (cx - (j + 0.5)) + (cy - (i + 0.5)) * (cy - (i + 0.5));
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (best_d >= 1e300 || best_d > reach[best] * reach[best]) continue;
            out[best].mass += v;
            out[best].mx += v * (j + 0.5);
            out[best].my += v * (i + 0.5);
            if (i == 0 || j == 0 || i == S - 1 || j == S - 1) out[best].touches_border = true;
        }
    }
    return out;
}

}  // namespace

Detection detect_balls(const Mat<float>& frame, int expected_n, const world::WorldConfig& cfg,
                       const Detection* prev) {
    auto comps = connected_components(frame);
    // keep the expected_n largest components by integrated core area
    std::sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
        return a.area_core > b.area_core;
    });
    if (static_cast<int>(comps.size()) > expected_n)
        comps.resize(static_cast<size_t>(expected_n));

    std::vector<BallDetection> found;
    const double scale = cfg.pixels_per_unit();
    const auto moments = support_moments(frame, comps);
    for (const Moments& m : moments) {
        if (m.mass <= 0) continue;
        BallDetection d;
        d.center_px = {m.mx / m.mass, m.my / m.mass};
        d.center_world = {d.center_px.x / scale, d.center_px.y / scale};
        d.radius_world = std::sqrt(m.mass / 3.14159265358979323846) / scale;
        d.visible = !m.touches_border;
        found.push_back(d);
    }

    Detection out;
    out.balls.assign(static_cast<size_t>(expected_n), BallDetection{});
    if (found.empty()) return out;

    // Two expected balls collapsing into one component means they are in
    // visual contact; the blob centroid describes neither ball, so the frame
    // is undetectable rather than half-detected.
    if (expected_n == 2 && found.size() == 1 && prev) {
        if (prev->merged_blob) {
            out.merged_blob = true;
            return out;
        }
        double prev_r = 0;
        int prev_visible = 0;
        for (const auto& p : prev->balls)
            if (p.visible) {
                prev_r = std::max(prev_r, p.radius_world);
                ++prev_visible;
            }
        if (prev_visible == 2 && found[0].radius_world > 1.12 * prev_r) {
            out.merged_blob = true;
            return out;
        }
    }

    if (expected_n == 1 || !prev) {
        for (size_t i = 0; i < found.size() && i < out.balls.size(); ++i) out.balls[i] = found[i];
        return out;
    }

    // assign found components to slots minimizing total displacement from prev
    const size_t n = out.balls.size();
    std::vector<int> slots(n);
    for (size_t i = 0; i < n; ++i) slots[i] = static_cast<int>(i);
    std::vector<int> best;
    double best_cost = 1e300;
    std::vector<int> order(found.size());
    for (size_t i = 0; i < found.size(); ++i) order[i] = static_cast<int>(i);
    // expected_n is at most 2 in this world; brute-force the assignment
    std::sort(slots.begin(), slots.end());
    do {
        double cost = 0;
        for (size_t f = 0; f < found.size(); ++f) {
            const int slot = slots[f];
            const auto& p = prev->balls[static_cast<size_t>(slot)];
            if (p.visible) {
                cost += (found[f].center_px - p.center_px).norm();
            } else {
                cost += 1e3;  // unseen slot: weak preference
            }
        }
        if (cost < best_cost) {
            best_cost = cost;
            best.assign(slots.begin(), slots.begin() + static_cast<long>(found.size()));
        }
    } while (std::next_permutation(slots.begin(), slots.end()));
    for (size_t f = 0; f < found.size(); ++f)
        out.balls[static_cast<size_t>(best[f])] = found[f];
    return out;
}

std::vector<Detection> detect_video(const std::vector<Mat<float>>& frames, int expected_n,
                                    const world::WorldConfig& cfg) {
    std::vector<Detection> out;
    out.reserve(frames.size());
    // track the last visible state per slot so identities survive merged or
    // missing frames; the merged flag itself follows the immediate previous
    // frame
    Detection memory;
    memory.balls.assign(static_cast<size_t>(expected_n), BallDetection{});
    bool have_memory = false;
    for (const auto& f : frames) {
        Detection det = detect_balls(f, expected_n, cfg, have_memory ? &memory : nullptr);
        memory.merged_blob = det.merged_blob;
        for (size_t i = 0; i < det.balls.size(); ++i) {
            if (det.balls[i].visible) {
                memory.balls[i] = det.balls[i];
                have_memory = true;
            }
        }
        out.push_back(std::move(det));
    }
    return out;
}

VelocitySeries track_velocities(const std::vector<Detection>& detections, double dt) {
    require(detections.size() >= 2, "track_velocities: need at least 2 frames");
    const size_t F = detections.size();
    const size_t N = detections[0].balls.size();
    VelocitySeries s;
    s.velocity.assign(F, std::vector<world::Vec2>(N));
    s.valid.assign(F, std::vector<bool>(N, false));
    for (size_t t = 1; t < F; ++t) {
        for (size_t i = 0; i < N; ++i) {
            const auto& a = detections[t - 1].balls[i];
            const auto& b = detections[t].balls[i];
            if (a.visible && b.visible) {
                s.velocity[t][i] = (b.center_world - a.center_world) * (1.0 / dt);
                s.valid[t][i] = true;
            }
        }
    }
    return s;
}

// Detection slots are ordered by blob size, ground-truth balls by scene
// construction; fix one slot->ball map for the whole video from the earliest
// frame where detections are visible.
static std::vector<int> align_slots(const std::vector<Detection>& detections,
                                    const world::Trajectory& truth) {
    const size_t N = truth.frames.empty() ? 0 : truth.frames[0].size();
    std::vector<int> perm(N);
    for (size_t i = 0; i < N; ++i) perm[i] = static_cast<int>(i);
    if (N < 2) return perm;
    for (size_t f = 0; f < detections.size() && f < truth.frames.size(); ++f) {
        bool any = false;
        for (const auto& b : detections[f].balls) any = any || b.visible;
        if (!any) continue;
        std::vector<int> best = perm;
        double best_cost = 1e300;
        std::vector<int> cur = perm;
        std::sort(cur.begin(), cur.end());
        do {
            double cost = 0;
            for (size_t i = 0; i < N; ++i) {
                if (!detections[f].balls[i].visible) continue;
                cost += (detections[f].balls[i].center_world -
                         truth.frames[f][static_cast<size_t>(cur[i])].center)
                            .norm();
            }
            if (cost < best_cost) {
                best_cost = cost;
                best = cur;
            }
        } while (std::next_permutation(cur.begin(), cur.end()));
        return best;
    }
    return perm;
}

VelocityErrorReport velocity_error(const std::vector<Detection>& detections,
                                   const world::Trajectory& truth,
                                   const world::WorldConfig& cfg, int condition_frames) {
    VelocityErrorReport rep;
    const size_t F = std::min(detections.size(), truth.frames.size());
    if (F < 2) {
        rep.degenerate = true;
        return rep;
    }
    const size_t N = truth.frames[0].size();
    const VelocitySeries s = track_velocities(detections, cfg.dt);
    const std::vector<int> perm = align_slots(detections, truth);
    double sum = 0;
    int terms = 0;
    for (size_t t = std::max<size_t>(1, static_cast<size_t>(condition_frames)); t < F; ++t) {
        for (size_t i = 0; i < N && i < s.valid[t].size(); ++i) {
            if (!s.valid[t][i]) continue;
            // ground-truth velocity from the same adjacent-frame rule, on
            // exact simulator centers
            const size_t gi = static_cast<size_t>(perm[i]);
            const world::Vec2 gt =
                (truth.frames[t][gi].center - truth.frames[t - 1][gi].center) * (1.0 / cfg.dt);
            sum += (s.velocity[t][i] - gt).norm();
            ++terms;
        }
    }
    if (terms == 0) {
        rep.degenerate = true;
        return rep;
    }
    rep.v_error = sum / terms;
    rep.valid_terms = terms;
    return rep;
}

RadiusErrorReport radius_error(const std::vector<Detection>& detections,
                               const world::Trajectory& truth, int condition_frames) {
    RadiusErrorReport rep;
    const size_t F = std::min(detections.size(), truth.frames.size());
    const size_t N = truth.frames.empty() ? 0 : truth.frames[0].size();
    const std::vector<int> perm = align_slots(detections, truth);
    double sum = 0;
    int terms = 0;
    for (size_t t = static_cast<size_t>(condition_frames); t < F; ++t) {
        for (size_t i = 0; i < N && i < detections[t].balls.size(); ++i) {
            if (!detections[t].balls[i].visible) continue;
            const double r_true = truth.frames[t][static_cast<size_t>(perm[i])].radius;
            sum += std::fabs(detections[t].balls[i].radius_world - r_true) / r_true;
            ++terms;
        }
    }
    if (terms == 0) {
        rep.degenerate = true;
        return rep;
    }
    rep.r_error = sum / terms;
    rep.valid_terms = terms;
    return rep;
}

double reward_velocity(double v_error, double alpha, double k) {
    return alpha * std::exp(-k * v_error);
}

double reward_mass(double r_error) { return 1.0 - r_error; }

RewardBreakdown compute_reward(const std::vector<Mat<float>>& predicted,
                               const world::Trajectory& truth, const world::WorldConfig& cfg,
                               double alpha, double k, int condition_frames) {
    RewardBreakdown out;
    out.alpha = alpha;
    out.k = k;
    const int expected_n = truth.frames.empty() ? 1 : static_cast<int>(truth.frames[0].size());
    const auto detections = detect_video(predicted, expected_n, cfg);
    const auto ve = velocity_error(detections, truth, cfg, condition_frames);
    const auto re = radius_error(detections, truth, condition_frames);
    if (ve.degenerate || re.degenerate) {
        out.degenerate = true;
        out.v_error = ve.degenerate ? std::numeric_limits<double>::infinity() : ve.v_error;
        out.r_error = re.degenerate ? std::numeric_limits<double>::infinity() : re.r_error;
        out.r_vel = 0;
        out.r_mass = 0;
        out.total = 0;
        return out;
    }
    out.v_error = ve.v_error;
    out.r_error = re.r_error;
    out.r_vel = reward_velocity(ve.v_error, alpha, k);
    out.r_mass = reward_mass(re.r_error);
    out.total = out.r_vel + out.r_mass;
    return out;
}

}  // namespace physar::metrics
