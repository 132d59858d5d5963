// Truncated path signatures (levels 0..2) over pen strokes, and rasterization
// of trailing-window signatures into the 7-channel feature stack consumed by
// the CNN.
//
// For a 2-d path X on [s,t], level k of the signature is the k-th iterated
// integral over the ordered simplex s < u_1 < ... < u_k < t. Level 0 is the
// constant 1, level 1 the displacement X_t - X_s, and level 2 the 2x2
// iterated-integral tensor; its symmetric part is determined by level 1
// (shuffle identity S2 + S2^T = S1 (x) S1) and its antisymmetric part is the
// signed (Levy) area. For a straight segment with displacement D the closed
// forms are S1 = D, S2 = D (x) D / 2, and signatures of concatenated paths
// combine by Chen's identity, which is how piecewise-linear paths are folded
// here.
//
// FeatureStack export format ("FMAP"): little-endian, magic "FMAP",
// u16 version=1, u16 H, u16 W, u16 C, float32 data in C-then-row-major order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/ink.hpp"

namespace inkstone::sig {

struct index_out_of_range : error {
    index_out_of_range(std::size_t i, std::size_t j, std::size_t n)
        : error("path_signature indices [" + std::to_string(i) + "," + std::to_string(j) +
                "] out of range for " + std::to_string(n) + " points") {}
};

struct signature2 {
    double level0 = 1.0;
    double level1[2] = {0.0, 0.0};
    double level2[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
};

inline signature2 identity_signature() { return signature2{}; }

// Signature of the straight segment p -> q: S1 = D, S2 = D (x) D / 2.
inline signature2 segment_signature(ink::point p, ink::point q) {
    signature2 s;
    const double d[2] = {q.x - p.x, q.y - p.y};
    s.level1[0] = d[0];
    s.level1[1] = d[1];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) s.level2[i][j] = d[i] * d[j] / 2.0;
    return s;
}

// Chen's identity truncated at level 2:
//   S1 = a1 + b1,  S2 = a2 + b2 + a1 (x) b1.
inline signature2 chen_concat(const signature2& a, const signature2& b) {
    signature2 s;
    for (int i = 0; i < 2; ++i) s.level1[i] = a.level1[i] + b.level1[i];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            s.level2[i][j] = a.level2[i][j] + b.level2[i][j] + a.level1[i] * b.level1[j];
    return s;
}

// Signature of the polyline points[i..j]; i == j yields the identity signature.
inline signature2 path_signature(std::span<const ink::point> points, std::size_t i, std::size_t j) {
    if (i > j || j >= points.size()) throw index_out_of_range(i, j, points.size());
    signature2 s;
    for (std::size_t k = i; k < j; ++k) s = chen_concat(s, segment_signature(points[k], points[k + 1]));
    return s;
}

// --- rasterization ------------------------------------------------------------

struct raster_config {
    int image_size = 64;        // square output, >= 8
    int window_steps = 4;       // trailing window length (segments) for local signatures
    double line_thickness = 1.5;  // pixels

    void check() const {
        if (image_size < 8) throw config_error("raster: image_size must be >= 8");
        if (window_steps < 1) throw config_error("raster: window_steps must be >= 1");
        if (!(line_thickness > 0)) throw config_error("raster: line_thickness must be > 0");
    }
};

// 7 channels: [0] anti-aliased ink coverage in [0,1]; [1..2] trailing-window
// level-1 signature; [3..6] trailing-window level-2 signature (row-major).
// Data layout is channel-major: data[c*H*W + y*W + x].
struct feature_stack {
    static constexpr int kChannels = 7;  // coverage + 6 signature components

    int height = 0;
    int width = 0;
    int channels = kChannels;
    std::vector<float> data;

    float& at(int c, int y, int x) { return data[std::size_t(c) * height * width + std::size_t(y) * width + x]; }
    float at(int c, int y, int x) const { return data[std::size_t(c) * height * width + std::size_t(y) * width + x]; }
    std::size_t size() const { return data.size(); }
};

namespace detail {

// Normalized [-1,1] coordinates to pixel coordinates, with a fixed 2 px margin
// so stroke thickness stays inside the grid. +y points up, row 0 is the top.
struct pixel_map {
    double scale, off_x, off_y;
    explicit pixel_map(int size) {
        const double margin = 2.0;
        scale = (size - 1 - 2 * margin) / 2.0;
        off_x = margin + scale;
        off_y = margin + scale;
    }
    double px(double x) const { return off_x + x * scale; }
    double py(double y) const { return off_y - y * scale; }
};

inline double dist_point_segment(double x, double y, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double u = 0.0;
    if (len2 > 0.0) u = std::clamp(((x - ax) * dx + (y - ay) * dy) / len2, 0.0, 1.0);
    const double cx = ax + u * dx, cy = ay + u * dy;
    return std::hypot(x - cx, y - cy);
}

// Visits every pixel within `radius` of segment a->b (pixel coords), calling
// f(x, y, distance). Pixels are visited in fixed row-major order.
template <class F>
void for_pixels_near_segment(int w, int h, double ax, double ay, double bx, double by, double radius, F&& f) {
    int x0 = std::max(0, int(std::floor(std::min(ax, bx) - radius)));
    int x1 = std::min(w - 1, int(std::ceil(std::max(ax, bx) + radius)));
    int y0 = std::max(0, int(std::floor(std::min(ay, by) - radius)));
    int y1 = std::min(h - 1, int(std::ceil(std::max(ay, by) + radius)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double d = dist_point_segment(double(x), double(y), ax, ay, bx, by);
            if (d <= radius) f(x, y, d);
        }
}

}  // namespace detail

// Rasterizes a normalized trajectory. Channel 0 takes the max anti-aliased
// coverage over all segments; signature channels are painted along each
// segment with last-writer-wins at overlaps (strokes and points in order).
// Signature windows never span a pen lift. Deterministic.
inline feature_stack rasterize(const ink::trajectory& traj, const raster_config& cfg) {
    cfg.check();
    feature_stack fs;
    fs.height = fs.width = cfg.image_size;
    fs.channels = 7;
    fs.data.assign(std::size_t(fs.channels) * fs.height * fs.width, 0.0f);

    const detail::pixel_map map(cfg.image_size);
    const double half = cfg.line_thickness / 2.0;
    const double cover_radius = half + 0.5;

    for (const auto& s : traj.strokes) {
        if (s.size() == 1) {
            // nearest-pixel fallback for a degenerate stroke
            int x = std::clamp(int(std::lround(map.px(s[0].x))), 0, fs.width - 1);
            int y = std::clamp(int(std::lround(map.py(s[0].y))), 0, fs.height - 1);
            fs.at(0, y, x) = 1.0f;
            continue;
        }
        for (std::size_t pi = 1; pi < s.size(); ++pi) {
            const double ax = map.px(s[pi - 1].x), ay = map.py(s[pi - 1].y);
            const double bx = map.px(s[pi].x), by = map.py(s[pi].y);

            detail::for_pixels_near_segment(fs.width, fs.height, ax, ay, bx, by, cover_radius,
                                            [&](int x, int y, double d) {
                                                float cov = float(std::clamp(cover_radius - d, 0.0, 1.0));
                                                fs.at(0, y, x) = std::max(fs.at(0, y, x), cov);
                                            });

            const std::size_t w0 = pi > std::size_t(cfg.window_steps) ? pi - cfg.window_steps : 0;
            const signature2 sg = path_signature(s, w0, pi);
            const float ch[6] = {float(sg.level1[0]), float(sg.level1[1]),
                                 float(sg.level2[0][0]), float(sg.level2[0][1]),
                                 float(sg.level2[1][0]), float(sg.level2[1][1])};
            detail::for_pixels_near_segment(fs.width, fs.height, ax, ay, bx, by, half,
                                            [&](int x, int y, double) {
                                                for (int c = 0; c < 6; ++c) fs.at(c + 1, y, x) = ch[c];
                                            });
        }
    }
    return fs;
}

// --- FMAP io -------------------------------------------------------------------

struct fmap_format_error : data_error {
    using data_error::data_error;
};

inline std::vector<std::uint8_t> write_fmap(const feature_stack& fs) {
    byte_writer w;
    w.str("FMAP");
    w.u16(1);
    w.u16(std::uint16_t(fs.height));
    w.u16(std::uint16_t(fs.width));
    w.u16(std::uint16_t(fs.channels));
    for (float v : fs.data) w.f32(v);
    return w.take();
}

inline feature_stack read_fmap(std::span<const std::uint8_t> bytes) {
    byte_reader r(bytes);
    try {
        if (r.str(4) != "FMAP") throw fmap_format_error("bad FMAP magic");
        std::uint16_t version = r.u16();
        if (version != 1) throw fmap_format_error("unsupported FMAP version " + std::to_string(version));
        feature_stack fs;
        fs.height = r.u16();
        fs.width = r.u16();
        fs.channels = r.u16();
        const std::size_t n = std::size_t(fs.height) * fs.width * fs.channels;
        fs.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) fs.data[i] = r.f32();
        return fs;
    } catch (const truncated_input& e) {
        throw fmap_format_error("truncated FMAP file at byte " + std::to_string(e.offset));
    }
}

}  // namespace inkstone::sig
