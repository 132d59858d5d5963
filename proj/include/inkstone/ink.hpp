// Pen-trajectory data model, the ink-json / ink-bin file formats,
// coordinate normalization, and a synthetic glyph dataset generator.
//
// File formats (stable, consumable by other tools):
//   ink-json  UTF-8, one JSON object per line:
//             {"label": int, "strokes": [[[x,y],...],...]}
//   ink-bin   little-endian; magic "INKB", u16 version=1, u32 record count;
//             per record: u32 label, u16 stroke count; per stroke:
//             u32 point count, then float32 x,y pairs.
//
// ink-bin stores float32 coordinates, so the serialize/parse roundtrip is
// bit-exact only for float32-representable values; everything this toolkit
// generates is rounded to float32 up front.
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inkstone/common.hpp"

namespace inkstone::ink {

struct point {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const point&) const = default;
};

using stroke = std::vector<point>;

struct trajectory {
    std::vector<stroke> strokes;
    int label = -1;  // -1 = unlabeled
    bool operator==(const trajectory&) const = default;
};

struct dataset {
    std::vector<trajectory> items;
    int class_count = 0;
    bool operator==(const dataset&) const = default;
};

// --- errors -----------------------------------------------------------------

struct malformed_record : data_error {
    malformed_record(std::size_t off, const std::string& why)
        : data_error("malformed record at byte " + std::to_string(off) + ": " + why), offset(off) {}
    std::size_t offset;
};

struct empty_stroke : data_error {
    explicit empty_stroke(std::size_t off)
        : data_error("empty stroke at byte " + std::to_string(off)), offset(off) {}
    std::size_t offset;
};

struct label_out_of_range : data_error {
    label_out_of_range(std::size_t off, long long label, long long limit)
        : data_error("label " + std::to_string(label) + " out of range (class_count " +
                     std::to_string(limit) + ") at byte " + std::to_string(off)),
          offset(off) {}
    std::size_t offset;
};

enum class format_tag { ink_json, ink_bin };

inline format_tag format_from_name(std::string_view name) {
    if (name == "ink-json") return format_tag::ink_json;
    if (name == "ink-bin") return format_tag::ink_bin;
    throw config_error("unknown trajectory format: " + std::string(name));
}

// --- validation --------------------------------------------------------------

inline void validate(const trajectory& t, std::size_t offset = 0) {
    if (t.strokes.empty()) throw empty_stroke(offset);
    for (const auto& s : t.strokes) {
        if (s.empty()) throw empty_stroke(offset);
        for (const auto& p : s)
            if (!is_finite(p.x) || !is_finite(p.y))
                throw malformed_record(offset, "non-finite coordinate");
    }
}

// --- parse / serialize --------------------------------------------------------

namespace detail {

inline trajectory parse_json_record(std::string_view line, std::size_t offset) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw malformed_record(offset, "invalid JSON");
    if (!j.is_object()) throw malformed_record(offset, "record is not an object");
    if (!j.contains("label") || !j["label"].is_number_integer())
        throw malformed_record(offset, "missing integer 'label'");
    if (!j.contains("strokes") || !j["strokes"].is_array())
        throw malformed_record(offset, "missing 'strokes' array");
    trajectory t;
    long long label = j["label"].get<long long>();
    if (label < 0 || label > std::numeric_limits<int>::max())
        throw malformed_record(offset, "label must be a non-negative int");
    t.label = int(label);
    for (const auto& js : j["strokes"]) {
        if (!js.is_array()) throw malformed_record(offset, "stroke is not an array");
        stroke s;
        for (const auto& jp : js) {
            if (!jp.is_array() || jp.size() != 2 || !jp[0].is_number() || !jp[1].is_number())
                throw malformed_record(offset, "point is not [x, y]");
            s.push_back({jp[0].get<double>(), jp[1].get<double>()});
        }
        t.strokes.push_back(std::move(s));
    }
    validate(t, offset);
    return t;
}

}  // namespace detail

// Parses a whole file. class_count, when given, bounds the labels; otherwise it
// is inferred as max(label)+1.
inline dataset parse_trajectory_file(std::span<const std::uint8_t> bytes, format_tag fmt,
                                     std::optional<int> class_count = std::nullopt) {
    dataset d;
    if (fmt == format_tag::ink_json) {
        std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            if (!line.empty()) d.items.push_back(detail::parse_json_record(line, pos));
            if (eol == std::string_view::npos) break;
            pos = eol + 1;
        }
    } else {
        byte_reader r(bytes);
        try {
            if (r.str(4) != "INKB") throw malformed_record(0, "bad magic");
            std::uint16_t version = r.u16();
            if (version != 1) throw malformed_record(4, "unsupported version " + std::to_string(version));
            std::uint32_t count = r.u32();
            d.items.reserve(count);
            for (std::uint32_t i = 0; i < count; ++i) {
                std::size_t rec_off = r.pos();
                trajectory t;
                std::uint32_t label = r.u32();
                if (label > std::uint32_t(std::numeric_limits<int>::max()))
                    throw malformed_record(rec_off, "label overflows int");
                t.label = int(label);
                std::uint16_t nstrokes = r.u16();
                if (nstrokes == 0) throw empty_stroke(rec_off);
                for (std::uint16_t s = 0; s < nstrokes; ++s) {
                    std::uint32_t npoints = r.u32();
                    if (npoints == 0) throw empty_stroke(rec_off);
                    stroke st;
                    st.reserve(npoints);
                    for (std::uint32_t p = 0; p < npoints; ++p) {
                        double x = r.f32();
                        double y = r.f32();
                        st.push_back({x, y});
                    }
                    t.strokes.push_back(std::move(st));
                }
                validate(t, rec_off);
                d.items.push_back(std::move(t));
            }
        } catch (const truncated_input& e) {
            throw malformed_record(e.offset, "truncated file");
        }
    }
    int max_label = -1;
    for (std::size_t i = 0; i < d.items.size(); ++i) {
        const auto& t = d.items[i];
        if (t.label < 0) throw malformed_record(0, "record " + std::to_string(i) + " has no label");
        if (class_count && t.label >= *class_count) throw label_out_of_range(0, t.label, *class_count);
        max_label = std::max(max_label, t.label);
    }
    d.class_count = class_count ? *class_count : max_label + 1;
    return d;
}

inline std::vector<std::uint8_t> serialize_trajectory_file(const dataset& d, format_tag fmt) {
    if (fmt == format_tag::ink_json) {
        std::string out;
        for (const auto& t : d.items) {
            validate(t);
            if (t.label < 0) throw data_error("cannot serialize unlabeled trajectory");
            nlohmann::json j;
            j["label"] = t.label;
            auto& strokes = j["strokes"] = nlohmann::json::array();
            for (const auto& s : t.strokes) {
                nlohmann::json js = nlohmann::json::array();
                for (const auto& p : s) js.push_back({p.x, p.y});
                strokes.push_back(std::move(js));
            }
            out += j.dump();
            out += '\n';
        }
        return std::vector<std::uint8_t>(out.begin(), out.end());
    }
    byte_writer w;
    w.str("INKB");
    w.u16(1);
    w.u32(std::uint32_t(d.items.size()));
    for (const auto& t : d.items) {
        validate(t);
        if (t.label < 0) throw data_error("cannot serialize unlabeled trajectory");
        w.u32(std::uint32_t(t.label));
        w.u16(std::uint16_t(t.strokes.size()));
        for (const auto& s : t.strokes) {
            w.u32(std::uint32_t(s.size()));
            for (const auto& p : s) {
                w.f32(float(p.x));
                w.f32(float(p.y));
            }
        }
    }
    return w.take();
}

// --- normalization -------------------------------------------------------------

// Aspect-preserving map into [-1,1]^2, centered at the bounding-box center.
// The longer bbox side spans exactly [-1,1]; a single repeated point maps to
// the origin. Idempotent.
inline trajectory normalize(const trajectory& t) {
    double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
    double min_y = min_x, max_y = max_x;
    for (const auto& s : t.strokes)
        for (const auto& p : s) {
            min_x = std::min(min_x, p.x);
            max_x = std::max(max_x, p.x);
            min_y = std::min(min_y, p.y);
            max_y = std::max(max_y, p.y);
        }
    const double cx = (min_x + max_x) / 2, cy = (min_y + max_y) / 2;
    const double extent = std::max(max_x - min_x, max_y - min_y);
    const double scale = extent > 0 ? 2.0 / extent : 0.0;
    trajectory out = t;
    for (auto& s : out.strokes)
        for (auto& p : s) {
            p.x = (p.x - cx) * scale;
            p.y = (p.y - cy) * scale;
        }
    return out;
}

// --- resampling ------------------------------------------------------------------

// Uniform arc-length resampling to n points per stroke (n >= 2). Strokes of a
// single point or zero total length collapse to n copies of the first point.
inline stroke resample_stroke(const stroke& s, int n) {
    stroke out;
    out.reserve(std::size_t(n));
    std::vector<double> cum(s.size(), 0.0);
    for (std::size_t i = 1; i < s.size(); ++i) {
        double dx = s[i].x - s[i - 1].x, dy = s[i].y - s[i - 1].y;
        cum[i] = cum[i - 1] + std::hypot(dx, dy);
    }
    const double total = cum.back();
    if (s.size() < 2 || total == 0.0) {
        out.assign(std::size_t(n), s.front());
        return out;
    }
    std::size_t seg = 1;
    for (int i = 0; i < n; ++i) {
        double target = total * double(i) / double(n - 1);
        while (seg < s.size() - 1 && cum[seg] < target) ++seg;
        double seg_len = cum[seg] - cum[seg - 1];
        double u = seg_len > 0 ? (target - cum[seg - 1]) / seg_len : 0.0;
        out.push_back({s[seg - 1].x + u * (s[seg].x - s[seg - 1].x),
                       s[seg - 1].y + u * (s[seg].y - s[seg - 1].y)});
    }
    return out;
}

inline trajectory resample(const trajectory& t, int points_per_stroke) {
    trajectory out;
    out.label = t.label;
    out.strokes.reserve(t.strokes.size());
    for (const auto& s : t.strokes) out.strokes.push_back(resample_stroke(s, points_per_stroke));
    return out;
}

// Uniform resampling at a fixed arc-length step: each stroke gets
// max(2, round(len/step) + 1) points, so point spacing is close to `step`.
inline trajectory resample_step(const trajectory& t, double step) {
    if (step <= 0.0) throw config_error("resample step must be > 0");
    trajectory out;
    out.label = t.label;
    out.strokes.reserve(t.strokes.size());
    for (const auto& s : t.strokes) {
        double len = 0.0;
        for (std::size_t i = 1; i < s.size(); ++i)
            len += std::hypot(s[i].x - s[i - 1].x, s[i].y - s[i - 1].y);
        const int n = std::max(2, int(std::llround(len / step)) + 1);
        out.strokes.push_back(resample_stroke(s, n));
    }
    return out;
}

// --- synthetic glyph generator ----------------------------------------------------

namespace detail {

inline stroke polyline(std::initializer_list<point> pts, int points_per_seg = 12) {
    stroke s;
    auto it = pts.begin();
    point prev = *it++;
    s.push_back(prev);
    for (; it != pts.end(); ++it) {
        for (int k = 1; k <= points_per_seg; ++k) {
            double u = double(k) / points_per_seg;
            s.push_back({prev.x + u * (it->x - prev.x), prev.y + u * (it->y - prev.y)});
        }
        prev = *it;
    }
    return s;
}

inline stroke arc(double cx, double cy, double r, double a0, double a1, int n = 32) {
    stroke s;
    for (int i = 0; i < n; ++i) {
        double a = a0 + (a1 - a0) * double(i) / (n - 1);
        s.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    return s;
}

// 16 base glyph prototypes, each visually distinct under small jitter.
inline std::vector<stroke> glyph_prototype(int k) {
    constexpr double pi = 3.14159265358979323846;
    switch (k % 16) {
        case 0: return {polyline({{-0.8, 0.0}, {0.8, 0.0}})};
        case 1: return {polyline({{0.0, -0.8}, {0.0, 0.8}})};
        case 2: return {polyline({{-0.8, -0.8}, {0.8, 0.8}})};
        case 3: return {polyline({{-0.8, 0.8}, {0.8, -0.8}})};
        case 4: return {polyline({{-0.8, 0.8}, {0.0, -0.8}, {0.8, 0.8}})};
        case 5: return {polyline({{-0.8, -0.8}, {0.0, 0.8}, {0.8, -0.8}})};
        case 6: return {polyline({{-0.6, 0.8}, {-0.6, -0.8}, {0.8, -0.8}})};
        case 7: return {polyline({{-0.8, 0.6}, {-0.27, -0.6}, {0.27, 0.6}, {0.8, -0.6}})};
        case 8: return {arc(0.0, -0.2, 0.8, pi, 0.0)};
        case 9: return {arc(0.0, 0.0, 0.8, 0.0, 2.0 * pi, 48)};
        case 10: {
            auto top = arc(0.0, 0.4, 0.4, pi / 2, 3 * pi / 2, 20);
            auto bottom = arc(0.0, -0.4, 0.4, pi / 2, -pi / 2, 20);
            top.insert(top.end(), bottom.begin(), bottom.end());
            return {top};
        }
        case 11: return {polyline({{-0.8, 0.0}, {0.8, 0.0}}), polyline({{0.0, -0.8}, {0.0, 0.8}})};
        case 12: return {polyline({{-0.8, 0.8}, {0.8, 0.8}}), polyline({{0.0, 0.8}, {0.0, -0.8}})};
        case 13: return {polyline({{-0.8, -0.8}, {0.8, -0.8}, {0.0, 0.8}, {-0.8, -0.8}})};
        case 14: return {polyline({{-0.7, -0.7}, {0.7, -0.7}, {0.7, 0.7}, {-0.7, 0.7}, {-0.7, -0.7}}, 8)};
        default: {  // 15: spiral, 1.5 turns
            stroke s;
            for (int i = 0; i < 48; ++i) {
                double t = double(i) / 47.0;
                double a = 3.0 * pi * t;
                double r = 0.15 + 0.65 * t;
                s.push_back({r * std::cos(a), r * std::sin(a)});
            }
            return {s};
        }
    }
}

}  // namespace detail

// Deterministic parametric glyph dataset: class k is prototype k%16 rotated by
// a class-dependent angle once k exceeds the prototype pool, with per-sample
// jitter (rotation, per-axis scale, point noise). Coordinates are rounded to
// float32 so ink-bin serialization is lossless. Separability degrades beyond
// 16 classes; the toolkit's own pipelines use 10.
inline dataset gen_toy_dataset(int class_count, int per_class, std::uint64_t seed) {
    if (class_count < 2) throw config_error("gen_toy_dataset: class_count must be >= 2");
    constexpr double golden_angle = 2.39996322972865332;
    dataset d;
    d.class_count = class_count;
    d.items.reserve(std::size_t(class_count) * std::size_t(per_class));
    for (int c = 0; c < class_count; ++c) {
        const double class_rot = (c / 16) * golden_angle;
        for (int i = 0; i < per_class; ++i) {
            rng r = rng::from(seed, {std::uint64_t(c), std::uint64_t(i)});
            const double rot = class_rot + r.uniform(-0.12, 0.12);
            const double sx = r.uniform(0.88, 1.12), sy = r.uniform(0.88, 1.12);
            const double ca = std::cos(rot), sa = std::sin(rot);
            trajectory t;
            t.label = c;
            for (const auto& proto : detail::glyph_prototype(c)) {
                stroke s;
                s.reserve(proto.size());
                for (const auto& p : proto) {
                    double x = p.x * sx, y = p.y * sy;
                    double xr = x * ca - y * sa, yr = x * sa + y * ca;
                    xr += r.normal() * 0.02;
                    yr += r.normal() * 0.02;
                    s.push_back({snap_to_float(xr), snap_to_float(yr)});
                }
                t.strokes.push_back(std::move(s));
            }
            t = normalize(t);
            for (auto& s : t.strokes)
                for (auto& p : s) {
                    p.x = snap_to_float(p.x);
                    p.y = snap_to_float(p.y);
                }
            d.items.push_back(std::move(t));
        }
    }
    return d;
}

}  // namespace inkstone::ink
