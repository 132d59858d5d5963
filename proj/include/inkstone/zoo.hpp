// Network builders: three convolutional families over 3x3 primitives, each
// with a choice of classifier head.
//
//   streamlined  plain conv stack:
//                in-128C3-MP3-160C3-160C3-MP3-256C3-256C3-MP3-384C3-384C3-
//                [MP3-1024FC | GAP]-out, every conv followed by BN + PReLU.
//   residual     18-layer basic-block residual net at half width
//                (32/64/128/256), stride-2 3x3 projection shortcuts.
//   inception    branch-and-concat topology built from 3x3 convs only: a
//                small stem, two reduction modules and three inception
//                modules (four parallel branches each). Per-branch channel
//                counts are listed next to each module below.
//
// The `width` multiplier rescales every conv width; results are rounded to
// the nearest even count with a floor of 2. Heads: `fc` flattens into a
// 1024-wide hidden layer (BN + PReLU) before the classifier, `gap` averages
// each channel map and classifies directly — same backbone, far fewer
// parameters.
#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/nn.hpp"

namespace inkstone::zoo {

enum class family { streamlined, residual, inception };
enum class head_kind { fc, gap };

inline family family_from_name(const std::string& s) {
    if (s == "streamlined") return family::streamlined;
    if (s == "residual") return family::residual;
    if (s == "inception") return family::inception;
    throw config_error("unknown model family: " + s + " (expected streamlined|residual|inception)");
}

inline const char* family_name(family f) {
    switch (f) {
        case family::streamlined: return "streamlined";
        case family::residual: return "residual";
        case family::inception: return "inception";
    }
    return "?";
}

inline head_kind head_from_name(const std::string& s) {
    if (s == "fc") return head_kind::fc;
    if (s == "gap") return head_kind::gap;
    throw config_error("unknown head: " + s + " (expected fc|gap)");
}

inline const char* head_name(head_kind h) { return h == head_kind::fc ? "fc" : "gap"; }

// Nearest even channel count, floor 2.
inline int scale_channels(int base, double width) {
    if (width <= 0.0) throw config_error("width multiplier must be > 0");
    const long long half = std::llround(double(base) * width / 2.0);
    return int(std::max(1LL, half) * 2);
}

namespace detail {

template <class T>
struct builder {
    nn::model_graph<T> g;

    int add(nn::node<T> n) {
        g.nodes.push_back(std::move(n));
        return int(g.nodes.size()) - 1;
    }
    int input(int c, int h, int w) {
        g.in_channels = c;
        g.in_h = h;
        g.in_w = w;
        nn::node<T> n;
        n.kind = nn::op_kind::input;
        n.name = "in";
        return add(std::move(n));
    }
    int conv(int from, int oc, int stride, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::conv3x3;
        n.name = name;
        n.inputs = {from};
        n.out_channels = oc;
        n.stride = stride;
        return add(std::move(n));
    }
    int bn(int from, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::batchnorm;
        n.name = name;
        n.inputs = {from};
        return add(std::move(n));
    }
    int act(int from, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::prelu;
        n.name = name;
        n.inputs = {from};
        return add(std::move(n));
    }
    // conv + BN + PReLU
    int cba(int from, int oc, int stride, const std::string& name) {
        return act(bn(conv(from, oc, stride, name), name + ".bn"), name + ".act");
    }
    int pool(int from, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::maxpool3x3s2;
        n.name = name;
        n.inputs = {from};
        return add(std::move(n));
    }
    int gap(int from, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::gap;
        n.name = name;
        n.inputs = {from};
        return add(std::move(n));
    }
    int fc(int from, int oc, bool bias, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::fc;
        n.name = name;
        n.inputs = {from};
        n.out_channels = oc;
        n.has_bias = bias;
        return add(std::move(n));
    }
    int sum(int a, int b, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::add;
        n.name = name;
        n.inputs = {a, b};
        return add(std::move(n));
    }
    int concat(std::vector<int> from, const std::string& name) {
        nn::node<T> n;
        n.kind = nn::op_kind::concat;
        n.name = name;
        n.inputs = std::move(from);
        return add(std::move(n));
    }
    void finish(int logits_node, int class_count) {
        nn::node<T> n;
        n.kind = nn::op_kind::softmax_ce;
        n.name = "loss";
        n.inputs = {logits_node};
        n.out_channels = class_count;
        g.logits = logits_node;
        g.loss = add(std::move(n));
        nn::shape_check(g);
    }
};

// Flatten-FC-1024 head vs GAP head, shared across families.
template <class T>
int attach_head(builder<T>& b, int from, head_kind head, int class_count) {
    if (head == head_kind::gap) return b.fc(b.gap(from, "head.gap"), class_count, true, "head.out");
    const int h = b.act(b.bn(b.fc(from, 1024, false, "head.fc"), "head.fc.bn"), "head.fc.act");
    return b.fc(h, class_count, true, "head.out");
}

}  // namespace detail

template <class T>
nn::model_graph<T> build_streamlined(head_kind head, double width, int in_c, int in_h, int in_w,
                                     int class_count) {
    detail::builder<T> b;
    auto ch = [&](int c) { return scale_channels(c, width); };
    int x = b.input(in_c, in_h, in_w);
    x = b.cba(x, ch(128), 1, "conv1");
    x = b.pool(x, "pool1");
    x = b.cba(x, ch(160), 1, "conv2");
    x = b.cba(x, ch(160), 1, "conv3");
    x = b.pool(x, "pool2");
    x = b.cba(x, ch(256), 1, "conv4");
    x = b.cba(x, ch(256), 1, "conv5");
    x = b.pool(x, "pool3");
    x = b.cba(x, ch(384), 1, "conv6");
    x = b.cba(x, ch(384), 1, "conv7");
    int logits;
    if (head == head_kind::fc) {
        x = b.pool(x, "pool4");
        logits = detail::attach_head(b, x, head, class_count);
    } else {
        logits = detail::attach_head(b, x, head, class_count);
    }
    b.finish(logits, class_count);
    return std::move(b.g);
}

template <class T>
nn::model_graph<T> build_residual(head_kind head, double width, int in_c, int in_h, int in_w,
                                  int class_count) {
    detail::builder<T> b;
    auto ch = [&](int c) { return scale_channels(c, width); };
    const int stage_ch[4] = {ch(32), ch(64), ch(128), ch(256)};
    int x = b.input(in_c, in_h, in_w);
    x = b.cba(x, stage_ch[0], 1, "stem");
    for (int s = 0; s < 4; ++s) {
        for (int blk = 0; blk < 2; ++blk) {
            const std::string base = "s" + std::to_string(s + 1) + "b" + std::to_string(blk + 1);
            const int stride = (s > 0 && blk == 0) ? 2 : 1;
            const int oc = stage_ch[s];
            int skip = x;
            if (stride != 1 || b.g.nodes[std::size_t(x)].out_c != oc)
                skip = b.bn(b.conv(x, oc, stride, base + ".proj"), base + ".proj.bn");
            int y = b.cba(x, oc, stride, base + ".conv1");
            y = b.bn(b.conv(y, oc, 1, base + ".conv2"), base + ".conv2.bn");
            x = b.act(b.sum(y, skip, base + ".add"), base + ".out");
        }
    }
    const int logits = detail::attach_head(b, x, head, class_count);
    b.finish(logits, class_count);
    return std::move(b.g);
}

// Inception-style modules from 3x3 convs only. Four branches per module:
// single conv, two stacked, three stacked, and a parallel single conv; each
// branch emits width/4 of the module's output channels.
template <class T>
nn::model_graph<T> build_inception(head_kind head, double width, int in_c, int in_h, int in_w,
                                   int class_count) {
    detail::builder<T> b;
    auto ch = [&](int c) { return scale_channels(c, width); };
    int x = b.input(in_c, in_h, in_w);

    // stem: two convs, then pooled + strided-conv mix (16, 24 | pool + 24)
    x = b.cba(x, ch(16), 1, "stem1");
    x = b.cba(x, ch(24), 1, "stem2");
    x = b.concat({b.pool(x, "stem.pool"), b.cba(x, ch(24), 2, "stem3")}, "stem.mix");

    // reduction 1 (pool | 96 s2 | 48-56-64 s2)
    {
        const int p = b.pool(x, "red1.pool");
        const int c1 = b.cba(x, ch(96), 2, "red1.b2");
        int c2 = b.cba(x, ch(48), 1, "red1.b3a");
        c2 = b.cba(c2, ch(56), 1, "red1.b3b");
        c2 = b.cba(c2, ch(64), 2, "red1.b3c");
        x = b.concat({p, c1, c2}, "red1.mix");
    }

    auto inception_module = [&](int from, int branch_ch, const std::string& base) {
        const int b1 = b.cba(from, branch_ch, 1, base + ".b1");
        int b2 = b.cba(from, branch_ch, 1, base + ".b2a");
        b2 = b.cba(b2, branch_ch, 1, base + ".b2b");
        int b3 = b.cba(from, branch_ch, 1, base + ".b3a");
        b3 = b.cba(b3, branch_ch, 1, base + ".b3b");
        b3 = b.cba(b3, branch_ch, 1, base + ".b3c");
        const int b4 = b.cba(from, branch_ch, 1, base + ".b4");
        return b.concat({b1, b2, b3, b4}, base + ".mix");
    };

    // module A at 1/4 scale: 4 x 24 -> 96
    x = inception_module(x, ch(24), "incA");

    // reduction 2 (pool | 96 s2 | 48-64 s2)
    {
        const int p = b.pool(x, "red2.pool");
        const int c1 = b.cba(x, ch(96), 2, "red2.b2");
        int c2 = b.cba(x, ch(48), 1, "red2.b3a");
        c2 = b.cba(c2, ch(64), 2, "red2.b3b");
        x = b.concat({p, c1, c2}, "red2.mix");
    }

    // modules B and C at 1/8 scale: 4 x 64 -> 256, then 4 x 96 -> 384
    x = inception_module(x, ch(64), "incB");
    x = inception_module(x, ch(96), "incC");

    const int logits = detail::attach_head(b, x, head, class_count);
    b.finish(logits, class_count);
    return std::move(b.g);
}

template <class T>
nn::model_graph<T> build_model(family f, head_kind head, double width, int in_c, int in_h, int in_w,
                               int class_count) {
    if (class_count < 2) throw config_error("class_count must be >= 2");
    nn::model_graph<T> g;
    switch (f) {
        case family::streamlined: g = build_streamlined<T>(head, width, in_c, in_h, in_w, class_count); break;
        case family::residual: g = build_residual<T>(head, width, in_c, in_h, in_w, class_count); break;
        case family::inception: g = build_inception<T>(head, width, in_c, in_h, in_w, class_count); break;
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s-%s-w%g-%dx%dx%d-c%d", family_name(f), head_name(head), width,
                  in_c, in_h, in_w, class_count);
    g.fingerprint = buf;
    return g;
}

// Architecture id of the form "<family>-<head>-w<width>-<C>x<H>x<W>-c<K>",
// e.g. "streamlined-gap-w0.25-7x64x64-c10". Round-trips with build_model.
struct model_spec {
    family f = family::streamlined;
    head_kind head = head_kind::gap;
    double width = 1.0;
    int in_c = 0, in_h = 0, in_w = 0;
    int class_count = 0;
};

inline model_spec parse_fingerprint(const std::string& fp) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= fp.size()) {
        const std::size_t dash = fp.find('-', start);
        parts.push_back(fp.substr(start, dash == std::string::npos ? std::string::npos : dash - start));
        if (dash == std::string::npos) break;
        start = dash + 1;
    }
    if (parts.size() != 5) throw data_error("unparseable architecture id: " + fp);
    model_spec s;
    s.f = family_from_name(parts[0]);
    s.head = head_from_name(parts[1]);
    char extra = 0;
    if (std::sscanf(parts[2].c_str(), "w%lf%c", &s.width, &extra) != 1 || s.width <= 0.0)
        throw data_error("bad width in architecture id: " + fp);
    if (std::sscanf(parts[3].c_str(), "%dx%dx%d%c", &s.in_c, &s.in_h, &s.in_w, &extra) != 3)
        throw data_error("bad input shape in architecture id: " + fp);
    if (std::sscanf(parts[4].c_str(), "c%d%c", &s.class_count, &extra) != 1 || s.class_count < 2)
        throw data_error("bad class count in architecture id: " + fp);
    return s;
}

template <class T>
nn::model_graph<T> build_from_fingerprint(const std::string& fp) {
    const model_spec s = parse_fingerprint(fp);
    return build_model<T>(s.f, s.head, s.width, s.in_c, s.in_h, s.in_w, s.class_count);
}

}  // namespace inkstone::zoo
