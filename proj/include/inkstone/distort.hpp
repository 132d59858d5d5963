// Trajectory distortion for training-time sample synthesis: global affine
// transforms (scale, shear, rotation) plus a smooth local deformation, all in
// the row-vector convention [x', y'] = [x, y] * M.
#pragma once

#include <cmath>
#include <cstdint>

#include "inkstone/common.hpp"
#include "inkstone/ink.hpp"

namespace inkstone::distort {

struct degenerate_scale : numeric_error {
    degenerate_scale(double ax, double ay)
        : numeric_error("degenerate scale factors (1+ax=" + std::to_string(1 + ax) +
                        ", 1+ay=" + std::to_string(1 + ay) + ")") {}
};

struct distortion_config {
    double alpha = 0.2;  // every enabled affine parameter is drawn from (-alpha, alpha)
    bool enable_scale = true;
    bool enable_shear_x = true;
    bool enable_shear_y = true;
    bool enable_rotation = true;
    bool enable_local = true;
    double local_amplitude = 0.1;
    std::uint64_t seed = 0;
};

namespace detail {

template <class F>
ink::trajectory map_points(const ink::trajectory& t, F&& f) {
    ink::trajectory out;
    out.label = t.label;
    out.strokes.reserve(t.strokes.size());
    for (const auto& s : t.strokes) {
        ink::stroke so;
        so.reserve(s.size());
        for (const auto& p : s) so.push_back(f(p));
        out.strokes.push_back(std::move(so));
    }
    return out;
}

}  // namespace detail

// [x,y] * diag(1+ax, 1+ay)
inline ink::trajectory scale_transform(const ink::trajectory& t, double ax, double ay) {
    if (1.0 + ax <= 0.0 || 1.0 + ay <= 0.0) throw degenerate_scale(ax, ay);
    return detail::map_points(t, [&](ink::point p) { return ink::point{p.x * (1.0 + ax), p.y * (1.0 + ay)}; });
}

// [x,y] * [[1,a],[0,1]]  ->  (x, y + a*x)
inline ink::trajectory shear_x_transform(const ink::trajectory& t, double a) {
    return detail::map_points(t, [&](ink::point p) { return ink::point{p.x, p.y + a * p.x}; });
}

// [x,y] * [[1,0],[a,1]]  ->  (x + a*y, y)
inline ink::trajectory shear_y_transform(const ink::trajectory& t, double a) {
    return detail::map_points(t, [&](ink::point p) { return ink::point{p.x + a * p.y, p.y}; });
}

// [x,y] * [[cos,-sin],[sin,cos]]  ->  (x cos a + y sin a, -x sin a + y cos a)
inline ink::trajectory rotate_transform(const ink::trajectory& t, double a) {
    const double c = std::cos(a), s = std::sin(a);
    return detail::map_points(t, [&](ink::point p) { return ink::point{p.x * c + p.y * s, -p.x * s + p.y * c}; });
}

namespace detail {

// Monotone sinusoidal warp on [-1,1]: w(t) = t + A * sum_k c_k sin(k pi (t+1)/2),
// with the coefficient vector rescaled so that w' >= 0.1 everywhere. Endpoints
// are fixed (w(-1)=-1, w(1)=1).
struct axis_warp {
    static constexpr int order = 3;
    double coeff[order] = {0, 0, 0};
    double amplitude = 0.0;

    static axis_warp draw(double amplitude, rng& r) {
        constexpr double pi = 3.14159265358979323846;
        axis_warp w;
        w.amplitude = amplitude;
        double slope_bound = 0.0;
        for (int k = 0; k < order; ++k) {
            w.coeff[k] = r.uniform(-1.0, 1.0);
            slope_bound += std::abs(w.coeff[k]) * (k + 1) * pi / 2.0;
        }
        // |w'(t) - 1| <= amplitude * slope_bound; clamp to keep w' >= 0.1
        const double limit = 0.9;
        if (amplitude * slope_bound > limit && slope_bound > 0.0) {
            const double shrink = limit / (amplitude * slope_bound);
            for (double& c : w.coeff) c *= shrink;
        }
        return w;
    }

    double operator()(double t) const {
        constexpr double pi = 3.14159265358979323846;
        double v = t;
        for (int k = 0; k < order; ++k) v += amplitude * coeff[k] * std::sin((k + 1) * pi * (t + 1.0) / 2.0);
        return v;
    }
};

}  // namespace detail

// Smooth strictly monotone remap of x and y, drawn deterministically from seed.
// amplitude = 0 is an exact identity.
inline ink::trajectory local_deform(const ink::trajectory& t, double amplitude, std::uint64_t seed) {
    if (amplitude == 0.0) return t;
    rng rx = rng::from(seed, {hash_str("warp-x")});
    rng ry = rng::from(seed, {hash_str("warp-y")});
    const auto wx = detail::axis_warp::draw(amplitude, rx);
    const auto wy = detail::axis_warp::draw(amplitude, ry);
    return detail::map_points(t, [&](ink::point p) { return ink::point{wx(p.x), wy(p.y)}; });
}

// Draws each enabled transform's parameter uniformly from (-alpha, alpha) and
// applies, in order: scale, shear_x, shear_y, rotate, local deformation, then
// re-normalizes into [-1,1]^2. Parameters are consumed only by enabled
// transforms, in that fixed order. A degenerate scale draw (possible only when
// alpha >= 1) is redrawn up to 10 times, after which scaling is skipped.
inline ink::trajectory sample_distortion(const ink::trajectory& t, const distortion_config& cfg) {
    rng r = rng::from(cfg.seed, {hash_str("sample-distortion")});
    ink::trajectory out = t;
    if (cfg.enable_scale) {
        double ax = 0.0, ay = 0.0;
        bool ok = false;
        for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
            ax = r.uniform(-cfg.alpha, cfg.alpha);
            ay = r.uniform(-cfg.alpha, cfg.alpha);
            ok = (1.0 + ax > 0.0) && (1.0 + ay > 0.0);
        }
        if (ok) out = scale_transform(out, ax, ay);
    }
    if (cfg.enable_shear_x) out = shear_x_transform(out, r.uniform(-cfg.alpha, cfg.alpha));
    if (cfg.enable_shear_y) out = shear_y_transform(out, r.uniform(-cfg.alpha, cfg.alpha));
    if (cfg.enable_rotation) out = rotate_transform(out, r.uniform(-cfg.alpha, cfg.alpha));
    if (cfg.enable_local) out = local_deform(out, cfg.local_amplitude, r.next_u64());
    return ink::normalize(out);
}

}  // namespace inkstone::distort
