// Deterministic layer-graph engine with reverse-mode gradients.
//
// Supported ops: 3x3 convolution (pad 1, stride 1 or 2), 3x3/stride-2 max
// pooling (ceil mode, implicit -inf padding), batch normalization, PReLU,
// global average pooling, fully connected, softmax cross-entropy, residual
// add, channel concat. Training is SGD with momentum.
//
// Everything is single-threaded by design: fixed iteration order makes
// forward, backward and updates bitwise reproducible for fixed weights and
// batches. Memory layout is NCHW row-major throughout.
//
// Max-pool sizing rule (ceil mode): out = ceil((in - 3)/2) + 1, windows
// clipped at the borders. Worked examples: 64->32, 32->16, 16->8, 8->4, 5->2,
// 4->2, 3->1.
//
// Dense checkpoint format ("DNSE"): little-endian, magic "DNSE",
// u16 version=1, u32 tensor count; per tensor: u16 name length + UTF-8 name,
// u8 rank, u32 dims, float32 data. BN running statistics and PReLU slopes are
// stored as ordinary named tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/tensor.hpp"

namespace inkstone::nn {

struct no_forward_state : error {
    using error::error;
};

struct empty_dataset : error {
    using error::error;
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.9;   // running = m*running + (1-m)*batch
inline constexpr double kPreluInit = 0.25;

enum class op_kind : std::uint8_t {
    input,
    conv3x3,
    maxpool3x3s2,
    batchnorm,
    prelu,
    gap,
    fc,
    softmax_ce,
    add,
    concat,
};

inline const char* op_name(op_kind k) {
    switch (k) {
        case op_kind::input: return "input";
        case op_kind::conv3x3: return "conv3x3";
        case op_kind::maxpool3x3s2: return "maxpool3x3s2";
        case op_kind::batchnorm: return "batchnorm";
        case op_kind::prelu: return "prelu";
        case op_kind::gap: return "gap";
        case op_kind::fc: return "fc";
        case op_kind::softmax_ce: return "softmax_ce";
        case op_kind::add: return "add";
        case op_kind::concat: return "concat";
    }
    return "?";
}

enum class slot : int { weight = 0, bias, gamma, beta, slope };

template <class T>
struct node {
    op_kind kind = op_kind::input;
    std::string name;
    std::vector<int> inputs;

    int out_channels = 0;  // conv/fc: requested output width
    int stride = 1;        // conv only
    bool has_bias = false; // fc only

    tensor<T> weight, bias, gamma, beta, slope;
    tensor<T> running_mean, running_var;  // batchnorm

    // filled by shape_check; out_h == 0 means a flat [N, out_c] output
    int out_c = 0, out_h = 0, out_w = 0;

    std::size_t spatial() const { return out_h > 0 ? std::size_t(out_h) * out_w : 1; }
    std::size_t act_elems() const { return std::size_t(out_c) * spatial(); }
};

template <class T>
struct model_graph {
    int in_channels = 0, in_h = 0, in_w = 0;
    std::vector<node<T>> nodes;  // topological order, nodes[0] is the input
    int logits = -1;             // node producing classifier logits
    int loss = -1;               // softmax_ce node, or -1
    std::string fingerprint;     // architecture id embedded in packed files
};

// Visits every trainable tensor as f(node_index, slot, name, tensor&) in a
// fixed order (graph order, then slot order).
template <class T, class F>
void for_each_param(model_graph<T>& m, F&& f) {
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        auto& n = m.nodes[i];
        if (!n.weight.empty()) f(int(i), slot::weight, n.name + ".w", n.weight);
        if (!n.bias.empty()) f(int(i), slot::bias, n.name + ".b", n.bias);
        if (!n.gamma.empty()) f(int(i), slot::gamma, n.name + ".gamma", n.gamma);
        if (!n.beta.empty()) f(int(i), slot::beta, n.name + ".beta", n.beta);
        if (!n.slope.empty()) f(int(i), slot::slope, n.name + ".slope", n.slope);
    }
}

template <class T, class F>
void for_each_param(const model_graph<T>& m, F&& f) {
    for_each_param(const_cast<model_graph<T>&>(m),
                   [&](int i, slot s, const std::string& name, tensor<T>& t) {
                       f(i, s, name, static_cast<const tensor<T>&>(t));
                   });
}

template <class T>
std::size_t count_parameters(const model_graph<T>& m) {
    std::size_t n = 0;
    for_each_param(m, [&](int, slot, const std::string&, const tensor<T>& t) { n += t.numel(); });
    return n;
}

// Trainables plus BN running statistics: everything a dense checkpoint stores.
template <class T>
std::size_t count_stored_floats(const model_graph<T>& m) {
    std::size_t n = count_parameters(m);
    for (const auto& nd : m.nodes) n += nd.running_mean.numel() + nd.running_var.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Shape inference and parameter allocation
// ---------------------------------------------------------------------------

template <class T>
void shape_check(model_graph<T>& m) {
    if (m.nodes.empty() || m.nodes[0].kind != op_kind::input)
        throw shape_mismatch("graph must start with an input node");
    std::set<std::string> names;
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        auto& n = m.nodes[i];
        if (!names.insert(n.name).second) throw shape_mismatch("duplicate node name: " + n.name);
        for (int in : n.inputs)
            if (in < 0 || std::size_t(in) >= i)
                throw shape_mismatch(n.name + ": input index out of order");
        auto in0 = [&]() -> node<T>& {
            if (n.inputs.size() != 1) throw shape_mismatch(n.name + ": expects exactly one input");
            return m.nodes[n.inputs[0]];
        };
        switch (n.kind) {
            case op_kind::input:
                if (i != 0) throw shape_mismatch("input node must be first");
                n.out_c = m.in_channels;
                n.out_h = m.in_h;
                n.out_w = m.in_w;
                break;
            case op_kind::conv3x3: {
                auto& p = in0();
                if (p.out_h <= 0) throw shape_mismatch(n.name + ": conv needs a spatial input");
                if (n.stride != 1 && n.stride != 2) throw shape_mismatch(n.name + ": conv stride must be 1 or 2");
                const std::vector<int> wshape{n.out_channels, p.out_c, 3, 3};
                if (n.weight.empty()) n.weight = tensor<T>(wshape);
                else if (n.weight.shape != wshape)
                    throw shape_mismatch(n.name + ": weight is " + shape_str(n.weight.shape) +
                                         ", expected " + shape_str(wshape));
                n.out_c = n.out_channels;
                n.out_h = kernels::conv_out_dim(p.out_h, n.stride);
                n.out_w = kernels::conv_out_dim(p.out_w, n.stride);
                break;
            }
            case op_kind::maxpool3x3s2: {
                auto& p = in0();
                if (p.out_h < 3 || p.out_w < 3)
                    throw shape_mismatch(n.name + ": input " + std::to_string(p.out_h) + "x" +
                                         std::to_string(p.out_w) + " too small for 3x3 pooling");
                n.out_c = p.out_c;
                n.out_h = (p.out_h - 2) / 2 + 1;  // == ceil((h-3)/2)+1
                n.out_w = (p.out_w - 2) / 2 + 1;
                break;
            }
            case op_kind::batchnorm: {
                auto& p = in0();
                n.out_c = p.out_c;
                n.out_h = p.out_h;
                n.out_w = p.out_w;
                const std::vector<int> cshape{n.out_c};
                auto ensure = [&](tensor<T>& t, T init) {
                    if (t.empty()) {
                        t = tensor<T>(cshape);
                        t.fill(init);
                    } else if (t.shape != cshape)
                        throw shape_mismatch(n.name + ": BN parameter shape mismatch");
                };
                ensure(n.gamma, T(1));
                ensure(n.beta, T(0));
                ensure(n.running_mean, T(0));
                ensure(n.running_var, T(1));
                break;
            }
            case op_kind::prelu: {
                auto& p = in0();
                n.out_c = p.out_c;
                n.out_h = p.out_h;
                n.out_w = p.out_w;
                if (n.slope.empty()) {
                    n.slope = tensor<T>({n.out_c});
                    n.slope.fill(T(kPreluInit));
                } else if (n.slope.shape != std::vector<int>{n.out_c})
                    throw shape_mismatch(n.name + ": slope shape mismatch");
                break;
            }
            case op_kind::gap: {
                auto& p = in0();
                if (p.out_h <= 0) throw shape_mismatch(n.name + ": gap needs a spatial input");
                n.out_c = p.out_c;
                n.out_h = n.out_w = 0;
                break;
            }
            case op_kind::fc: {
                auto& p = in0();
                const int in_dim = int(p.act_elems());
                const std::vector<int> wshape{in_dim, n.out_channels};
                if (n.weight.empty()) n.weight = tensor<T>(wshape);
                else if (n.weight.shape != wshape)
                    throw shape_mismatch(n.name + ": weight is " + shape_str(n.weight.shape) +
                                         ", expected " + shape_str(wshape));
                if (n.has_bias) {
                    if (n.bias.empty()) n.bias = tensor<T>({n.out_channels});
                    else if (n.bias.shape != std::vector<int>{n.out_channels})
                        throw shape_mismatch(n.name + ": bias shape mismatch");
                }
                n.out_c = n.out_channels;
                n.out_h = n.out_w = 0;
                break;
            }
            case op_kind::softmax_ce: {
                auto& p = in0();
                if (p.out_h != 0) throw shape_mismatch(n.name + ": loss expects flat logits");
                n.out_c = p.out_c;
                n.out_h = n.out_w = 0;
                break;
            }
            case op_kind::add: {
                if (n.inputs.size() != 2) throw shape_mismatch(n.name + ": add expects two inputs");
                auto& a = m.nodes[n.inputs[0]];
                auto& b = m.nodes[n.inputs[1]];
                if (a.out_c != b.out_c || a.out_h != b.out_h || a.out_w != b.out_w)
                    throw shape_mismatch(n.name + ": add operands differ in shape");
                n.out_c = a.out_c;
                n.out_h = a.out_h;
                n.out_w = a.out_w;
                break;
            }
            case op_kind::concat: {
                if (n.inputs.size() < 2) throw shape_mismatch(n.name + ": concat expects >= 2 inputs");
                auto& a = m.nodes[n.inputs[0]];
                if (a.out_h <= 0) throw shape_mismatch(n.name + ": concat expects spatial inputs");
                int c = 0;
                for (int in : n.inputs) {
                    auto& p = m.nodes[in];
                    if (p.out_h != a.out_h || p.out_w != a.out_w)
                        throw shape_mismatch(n.name + ": concat operands differ in spatial size");
                    c += p.out_c;
                }
                n.out_c = c;
                n.out_h = a.out_h;
                n.out_w = a.out_w;
                break;
            }
        }
    }
}

// Kaiming fan-in init for conv/fc, 0.25 PReLU slopes, identity BN. Each tensor
// draws from its own name-keyed generator, so init is independent of node
// ordering.
template <class T>
void init_params(model_graph<T>& m, std::uint64_t seed) {
    for_each_param(m, [&](int ni, slot s, const std::string& name, tensor<T>& t) {
        auto& n = m.nodes[ni];
        switch (s) {
            case slot::weight: {
                rng r = rng::from(seed, {hash_str("init"), hash_str(name)});
                const std::size_t fan_in =
                    n.kind == op_kind::conv3x3 ? std::size_t(n.weight.shape[1]) * 9 : std::size_t(n.weight.shape[0]);
                const double std_dev = std::sqrt(2.0 / double(fan_in));
                for (auto& v : t.data) v = T(r.normal() * std_dev);
                break;
            }
            case slot::bias: t.fill(T(0)); break;
            case slot::gamma: t.fill(T(1)); break;
            case slot::beta: t.fill(T(0)); break;
            case slot::slope: t.fill(T(kPreluInit)); break;
        }
    });
    for (auto& n : m.nodes) {
        if (!n.running_mean.empty()) n.running_mean.fill(T(0));
        if (!n.running_var.empty()) n.running_var.fill(T(1));
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class T>
struct forward_state {
    int batch = 0;
    bool training = false;
    bool has_loss = false;
    double loss_value = 0.0;
    std::vector<tensor<T>> act;          // per node
    std::vector<tensor<T>> bn_xhat;      // per bn node
    std::vector<std::vector<T>> bn_istd; // per bn node, [C]
    std::vector<std::vector<int>> pool_arg;  // per pool node, in-plane argmax
    std::vector<int> labels;
};

namespace detail {

template <class T>
std::vector<int> act_shape(const node<T>& n, int batch) {
    if (n.out_h > 0) return {batch, n.out_c, n.out_h, n.out_w};
    return {batch, n.out_c};
}

}  // namespace detail

template <class T>
void forward(model_graph<T>& m, const tensor<T>& input, bool training,
             std::span<const int> labels, forward_state<T>& st) {
    const auto& in0 = m.nodes[0];
    if (input.shape.size() != 4 || input.shape[1] != in0.out_c || input.shape[2] != in0.out_h ||
        input.shape[3] != in0.out_w)
        throw shape_mismatch("input batch is " + shape_str(input.shape) + ", model expects [N," +
                             std::to_string(in0.out_c) + "," + std::to_string(in0.out_h) + "," +
                             std::to_string(in0.out_w) + "]");
    const int N = input.shape[0];
    st.batch = N;
    st.training = training;
    st.has_loss = false;
    st.loss_value = 0.0;
    st.act.assign(m.nodes.size(), tensor<T>{});
    st.bn_xhat.assign(m.nodes.size(), tensor<T>{});
    st.bn_istd.assign(m.nodes.size(), {});
    st.pool_arg.assign(m.nodes.size(), {});
    st.labels.assign(labels.begin(), labels.end());

    st.act[0] = input;

    std::vector<T> col;  // conv workspace, reused across nodes

    for (std::size_t i = 1; i < m.nodes.size(); ++i) {
        auto& n = m.nodes[i];
        tensor<T>& y = st.act[i];
        y = tensor<T>(detail::act_shape(n, N));
        switch (n.kind) {
            case op_kind::input: break;
            case op_kind::conv3x3: {
                const auto& p = m.nodes[n.inputs[0]];
                const tensor<T>& x = st.act[n.inputs[0]];
                const int ic = p.out_c, h = p.out_h, w = p.out_w;
                const std::size_t opix = std::size_t(n.out_h) * n.out_w;
                col.resize(std::size_t(ic) * 9 * opix);
                for (int b = 0; b < N; ++b) {
                    kernels::im2col_3x3(x.ptr() + std::size_t(b) * p.act_elems(), ic, h, w, n.stride, col.data());
                    kernels::gemm_acc(n.out_c, int(opix), ic * 9, n.weight.ptr(), col.data(),
                                      y.ptr() + std::size_t(b) * n.act_elems());
                }
                break;
            }
            case op_kind::maxpool3x3s2: {
                const auto& p = m.nodes[n.inputs[0]];
                const tensor<T>& x = st.act[n.inputs[0]];
                const int h = p.out_h, w = p.out_w;
                auto& arg = st.pool_arg[i];
                arg.resize(std::size_t(N) * n.out_c * n.out_h * n.out_w);
                std::size_t o = 0;
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < n.out_c; ++c) {
                        const T* xp = x.ptr() + (std::size_t(b) * p.out_c + c) * h * w;
                        for (int oy = 0; oy < n.out_h; ++oy)
                            for (int ox = 0; ox < n.out_w; ++ox, ++o) {
                                T best{};
                                int besti = -1;
                                for (int ky = 0; ky < 3; ++ky) {
                                    const int iy = oy * 2 + ky;
                                    if (iy >= h) break;
                                    for (int kx = 0; kx < 3; ++kx) {
                                        const int ix = ox * 2 + kx;
                                        if (ix >= w) break;
                                        const T v = xp[std::size_t(iy) * w + ix];
                                        if (besti < 0 || v > best) {
                                            best = v;
                                            besti = iy * w + ix;
                                        }
                                    }
                                }
                                y.data[o] = best;
                                arg[o] = besti;
                            }
                    }
                break;
            }
            case op_kind::batchnorm: {
                const tensor<T>& x = st.act[n.inputs[0]];
                const int C = n.out_c;
                const std::size_t S = n.spatial();
                const std::size_t stride_n = std::size_t(C) * S;
                auto& istd_v = st.bn_istd[i];
                istd_v.resize(C);
                if (training) {
                    auto& xhat = st.bn_xhat[i];
                    xhat = tensor<T>(y.shape);
                    const double inv_m = 1.0 / (double(N) * double(S));
                    for (int c = 0; c < C; ++c) {
                        double sum = 0.0;
                        for (int b = 0; b < N; ++b) {
                            const T* xp = x.ptr() + std::size_t(b) * stride_n + c * S;
                            for (std::size_t s = 0; s < S; ++s) sum += double(xp[s]);
                        }
                        const double mean = sum * inv_m;
                        double var_sum = 0.0;
                        for (int b = 0; b < N; ++b) {
                            const T* xp = x.ptr() + std::size_t(b) * stride_n + c * S;
                            for (std::size_t s = 0; s < S; ++s) {
                                const double d = double(xp[s]) - mean;
                                var_sum += d * d;
                            }
                        }
                        const double var = var_sum * inv_m;
                        const double istd = 1.0 / std::sqrt(var + kBnEpsilon);
                        istd_v[c] = T(istd);
                        const T g = n.gamma.data[c], bt = n.beta.data[c];
                        for (int b = 0; b < N; ++b) {
                            const T* xp = x.ptr() + std::size_t(b) * stride_n + c * S;
                            T* xh = xhat.ptr() + std::size_t(b) * stride_n + c * S;
                            T* yp = y.ptr() + std::size_t(b) * stride_n + c * S;
                            for (std::size_t s = 0; s < S; ++s) {
                                const T v = T((double(xp[s]) - mean) * istd);
                                xh[s] = v;
                                yp[s] = g * v + bt;
                            }
                        }
                        n.running_mean.data[c] = T(kBnMomentum * double(n.running_mean.data[c]) + (1.0 - kBnMomentum) * mean);
                        n.running_var.data[c] = T(kBnMomentum * double(n.running_var.data[c]) + (1.0 - kBnMomentum) * var);
                    }
                } else {
                    for (int c = 0; c < C; ++c) {
                        const double istd = 1.0 / std::sqrt(double(n.running_var.data[c]) + kBnEpsilon);
                        const double mean = double(n.running_mean.data[c]);
                        const T g = n.gamma.data[c], bt = n.beta.data[c];
                        for (int b = 0; b < N; ++b) {
                            const T* xp = x.ptr() + std::size_t(b) * stride_n + c * S;
                            T* yp = y.ptr() + std::size_t(b) * stride_n + c * S;
                            for (std::size_t s = 0; s < S; ++s) yp[s] = T(g * ((double(xp[s]) - mean) * istd) + bt);
                        }
                    }
                }
                break;
            }
            case op_kind::prelu: {
                const tensor<T>& x = st.act[n.inputs[0]];
                const int C = n.out_c;
                const std::size_t S = n.spatial();
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < C; ++c) {
                        const T a = n.slope.data[c];
                        const T* xp = x.ptr() + (std::size_t(b) * C + c) * S;
                        T* yp = y.ptr() + (std::size_t(b) * C + c) * S;
                        for (std::size_t s = 0; s < S; ++s) yp[s] = xp[s] > T(0) ? xp[s] : a * xp[s];
                    }
                break;
            }
            case op_kind::gap: {
                const auto& p = m.nodes[n.inputs[0]];
                const tensor<T>& x = st.act[n.inputs[0]];
                const std::size_t S = std::size_t(p.out_h) * p.out_w;
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < n.out_c; ++c) {
                        const T* xp = x.ptr() + (std::size_t(b) * n.out_c + c) * S;
                        double sum = 0.0;
                        for (std::size_t s = 0; s < S; ++s) sum += double(xp[s]);
                        y.data[std::size_t(b) * n.out_c + c] = T(sum / double(S));
                    }
                break;
            }
            case op_kind::fc: {
                const tensor<T>& x = st.act[n.inputs[0]];
                const int in_dim = n.weight.shape[0], out_dim = n.weight.shape[1];
                if (n.has_bias)
                    for (int b = 0; b < N; ++b)
                        std::copy(n.bias.data.begin(), n.bias.data.end(), y.ptr() + std::size_t(b) * out_dim);
                kernels::gemm_acc(N, out_dim, in_dim, x.ptr(), n.weight.ptr(), y.ptr());
                break;
            }
            case op_kind::softmax_ce: {
                const tensor<T>& x = st.act[n.inputs[0]];
                const int K = n.out_c;
                double total = 0.0;
                for (int b = 0; b < N; ++b) {
                    const T* lp = x.ptr() + std::size_t(b) * K;
                    T* pp = y.ptr() + std::size_t(b) * K;
                    T mx = lp[0];
                    for (int k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
                    double denom = 0.0;
                    for (int k = 0; k < K; ++k) denom += std::exp(double(lp[k] - mx));
                    for (int k = 0; k < K; ++k) pp[k] = T(std::exp(double(lp[k] - mx)) / denom);
                    if (!labels.empty()) {
                        const int lbl = labels[std::size_t(b)];
                        if (lbl < 0 || lbl >= K) throw shape_mismatch("label out of range for loss");
                        total += -std::log(std::max(double(pp[lbl]), 1e-300));
                    }
                }
                if (!labels.empty()) {
                    st.loss_value = total / double(N);
                    st.has_loss = true;
                }
                break;
            }
            case op_kind::add: {
                const tensor<T>& a = st.act[n.inputs[0]];
                const tensor<T>& b2 = st.act[n.inputs[1]];
                for (std::size_t k = 0; k < y.numel(); ++k) y.data[k] = a.data[k] + b2.data[k];
                break;
            }
            case op_kind::concat: {
                const std::size_t S = n.spatial();
                for (int b = 0; b < N; ++b) {
                    std::size_t coff = 0;
                    for (int in : n.inputs) {
                        const auto& p = m.nodes[in];
                        const tensor<T>& x = st.act[in];
                        const std::size_t chunk = std::size_t(p.out_c) * S;
                        std::copy(x.ptr() + std::size_t(b) * chunk, x.ptr() + std::size_t(b + 1) * chunk,
                                  y.ptr() + std::size_t(b) * n.act_elems() + coff);
                        coff += chunk;
                    }
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// One tensor per trainable slot, mirroring a model's shapes. Used for both
// gradients and momentum velocities.
template <class T>
struct node_params {
    tensor<T> w, b, gamma, beta, slope;
    tensor<T>& at(slot s) {
        switch (s) {
            case slot::weight: return w;
            case slot::bias: return b;
            case slot::gamma: return gamma;
            case slot::beta: return beta;
            case slot::slope: return slope;
        }
        return w;
    }
};

template <class T>
struct param_set {
    std::vector<node_params<T>> nodes;

    static param_set like(const model_graph<T>& m) {
        param_set ps;
        ps.nodes.resize(m.nodes.size());
        for_each_param(m, [&](int i, slot s, const std::string&, const tensor<T>& t) {
            ps.nodes[std::size_t(i)].at(s) = tensor<T>(t.shape);
        });
        return ps;
    }

    void zero() {
        for (auto& n : nodes) {
            n.w.fill(T(0));
            n.b.fill(T(0));
            n.gamma.fill(T(0));
            n.beta.fill(T(0));
            n.slope.fill(T(0));
        }
    }
};

template <class T>
void backward(model_graph<T>& m, const forward_state<T>& st, param_set<T>& grads) {
    if (!st.training || !st.has_loss)
        throw no_forward_state("backward requires a train-mode forward pass with labels");
    if (grads.nodes.size() != m.nodes.size()) grads = param_set<T>::like(m);

    const int N = st.batch;
    std::vector<tensor<T>> dact(m.nodes.size());
    for (std::size_t i = 0; i < m.nodes.size(); ++i) dact[i] = tensor<T>(st.act[i].shape);

    // Loss seed: dlogits = (probs - onehot) / N
    {
        const auto& loss_node = m.nodes[std::size_t(m.loss)];
        const int K = loss_node.out_c;
        const tensor<T>& probs = st.act[std::size_t(m.loss)];
        tensor<T>& dl = dact[std::size_t(loss_node.inputs[0])];
        for (int b = 0; b < N; ++b)
            for (int k = 0; k < K; ++k) {
                T v = probs.data[std::size_t(b) * K + k];
                if (k == st.labels[std::size_t(b)]) v -= T(1);
                dl.data[std::size_t(b) * K + k] = v / T(N);
            }
    }

    std::vector<T> scratch_a, scratch_b;

    for (std::size_t ri = m.nodes.size(); ri-- > 1;) {
        auto& n = m.nodes[ri];
        if (n.kind == op_kind::softmax_ce) continue;  // handled by the seed
        const tensor<T>& dy = dact[ri];
        switch (n.kind) {
            case op_kind::input:
            case op_kind::softmax_ce: break;
            case op_kind::conv3x3: {
                const auto& p = m.nodes[n.inputs[0]];
                const tensor<T>& x = st.act[n.inputs[0]];
                const int ic = p.out_c, h = p.out_h, w = p.out_w;
                const int taps = ic * 9;
                const std::size_t opix = std::size_t(n.out_h) * n.out_w;
                // dW: per-sample im2row GEMMs accumulated in sample order
                tensor<T>& gw = grads.nodes[ri].w;
                scratch_a.resize(opix * std::size_t(taps));
                for (int b = 0; b < N; ++b) {
                    kernels::im2row_3x3(x.ptr() + std::size_t(b) * p.act_elems(), ic, h, w, n.stride,
                                        scratch_a.data());
                    kernels::gemm_acc(n.out_c, taps, int(opix), dy.ptr() + std::size_t(b) * n.act_elems(),
                                      scratch_a.data(), gw.ptr());
                }
                // dX: skip when the producer is the input node (no consumer)
                if (m.nodes[n.inputs[0]].kind != op_kind::input) {
                    scratch_a.resize(std::size_t(taps) * n.out_c);
                    kernels::transpose(n.out_c, taps, n.weight.ptr(), scratch_a.data());
                    scratch_b.resize(std::size_t(taps) * opix);
                    tensor<T>& dx = dact[n.inputs[0]];
                    for (int b = 0; b < N; ++b) {
                        std::fill(scratch_b.begin(), scratch_b.end(), T(0));
                        kernels::gemm_acc(taps, int(opix), n.out_c, scratch_a.data(),
                                          dy.ptr() + std::size_t(b) * n.act_elems(), scratch_b.data());
                        kernels::col2im_3x3(scratch_b.data(), ic, h, w, n.stride,
                                            dx.ptr() + std::size_t(b) * p.act_elems());
                    }
                }
                break;
            }
            case op_kind::maxpool3x3s2: {
                const auto& p = m.nodes[n.inputs[0]];
                tensor<T>& dx = dact[n.inputs[0]];
                const auto& arg = st.pool_arg[ri];
                const std::size_t plane = std::size_t(p.out_h) * p.out_w;
                const std::size_t opix = std::size_t(n.out_h) * n.out_w;
                std::size_t o = 0;
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < n.out_c; ++c) {
                        T* dxp = dx.ptr() + (std::size_t(b) * p.out_c + c) * plane;
                        const T* dyp = dy.ptr() + (std::size_t(b) * n.out_c + c) * opix;
                        for (std::size_t s = 0; s < opix; ++s, ++o) dxp[arg[o]] += dyp[s];
                    }
                break;
            }
            case op_kind::batchnorm: {
                if (st.bn_xhat[ri].empty())
                    throw no_forward_state("BN backward requires train-mode statistics");
                const tensor<T>& xhat = st.bn_xhat[ri];
                const auto& istd = st.bn_istd[ri];
                tensor<T>& dx = dact[n.inputs[0]];
                const int C = n.out_c;
                const std::size_t S = n.spatial();
                const std::size_t stride_n = std::size_t(C) * S;
                const double mtot = double(N) * double(S);
                for (int c = 0; c < C; ++c) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int b = 0; b < N; ++b) {
                        const T* dyp = dy.ptr() + std::size_t(b) * stride_n + c * S;
                        const T* xh = xhat.ptr() + std::size_t(b) * stride_n + c * S;
                        for (std::size_t s = 0; s < S; ++s) {
                            sum_dy += double(dyp[s]);
                            sum_dy_xhat += double(dyp[s]) * double(xh[s]);
                        }
                    }
                    grads.nodes[ri].gamma.data[c] += T(sum_dy_xhat);
                    grads.nodes[ri].beta.data[c] += T(sum_dy);
                    const double g_istd_m = double(n.gamma.data[c]) * double(istd[c]) / mtot;
                    for (int b = 0; b < N; ++b) {
                        const T* dyp = dy.ptr() + std::size_t(b) * stride_n + c * S;
                        const T* xh = xhat.ptr() + std::size_t(b) * stride_n + c * S;
                        T* dxp = dx.ptr() + std::size_t(b) * stride_n + c * S;
                        for (std::size_t s = 0; s < S; ++s)
                            dxp[s] += T(g_istd_m * (mtot * double(dyp[s]) - sum_dy - double(xh[s]) * sum_dy_xhat));
                    }
                }
                break;
            }
            case op_kind::prelu: {
                const tensor<T>& x = st.act[n.inputs[0]];
                tensor<T>& dx = dact[n.inputs[0]];
                const int C = n.out_c;
                const std::size_t S = n.spatial();
                for (int c = 0; c < C; ++c) {
                    const T a = n.slope.data[c];
                    double dslope = 0.0;
                    for (int b = 0; b < N; ++b) {
                        const std::size_t off = (std::size_t(b) * C + c) * S;
                        const T* xp = x.ptr() + off;
                        const T* dyp = dy.ptr() + off;
                        T* dxp = dx.ptr() + off;
                        for (std::size_t s = 0; s < S; ++s) {
                            if (xp[s] > T(0)) {
                                dxp[s] += dyp[s];
                            } else {
                                dxp[s] += a * dyp[s];
                                dslope += double(dyp[s]) * double(xp[s]);
                            }
                        }
                    }
                    grads.nodes[ri].slope.data[c] += T(dslope);
                }
                break;
            }
            case op_kind::gap: {
                const auto& p = m.nodes[n.inputs[0]];
                tensor<T>& dx = dact[n.inputs[0]];
                const std::size_t S = std::size_t(p.out_h) * p.out_w;
                const T inv = T(1) / T(S);
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < n.out_c; ++c) {
                        const T g = dy.data[std::size_t(b) * n.out_c + c] * inv;
                        T* dxp = dx.ptr() + (std::size_t(b) * n.out_c + c) * S;
                        for (std::size_t s = 0; s < S; ++s) dxp[s] += g;
                    }
                break;
            }
            case op_kind::fc: {
                const tensor<T>& x = st.act[n.inputs[0]];
                const int in_dim = n.weight.shape[0], out_dim = n.weight.shape[1];
                // dW = X^T * dY
                scratch_a.resize(std::size_t(in_dim) * N);
                kernels::transpose(N, in_dim, x.ptr(), scratch_a.data());
                kernels::gemm_acc(in_dim, out_dim, N, scratch_a.data(), dy.ptr(), grads.nodes[ri].w.ptr());
                if (n.has_bias) {
                    tensor<T>& gb = grads.nodes[ri].b;
                    for (int b = 0; b < N; ++b)
                        for (int o = 0; o < out_dim; ++o) gb.data[o] += dy.data[std::size_t(b) * out_dim + o];
                }
                // dX = dY * W^T
                if (m.nodes[n.inputs[0]].kind != op_kind::input) {
                    scratch_b.resize(std::size_t(out_dim) * in_dim);
                    kernels::transpose(in_dim, out_dim, n.weight.ptr(), scratch_b.data());
                    kernels::gemm_acc(N, in_dim, out_dim, dy.ptr(), scratch_b.data(), dact[n.inputs[0]].ptr());
                }
                break;
            }
            case op_kind::add: {
                for (int side = 0; side < 2; ++side) {
                    tensor<T>& dx = dact[n.inputs[std::size_t(side)]];
                    for (std::size_t k = 0; k < dy.numel(); ++k) dx.data[k] += dy.data[k];
                }
                break;
            }
            case op_kind::concat: {
                const std::size_t S = n.spatial();
                for (int b = 0; b < N; ++b) {
                    std::size_t coff = 0;
                    for (int in : n.inputs) {
                        const auto& p = m.nodes[in];
                        tensor<T>& dx = dact[in];
                        const std::size_t chunk = std::size_t(p.out_c) * S;
                        const T* src = dy.ptr() + std::size_t(b) * n.act_elems() + coff;
                        T* dst = dx.ptr() + std::size_t(b) * chunk;
                        for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
                        coff += chunk;
                    }
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class T>
struct optim_state {
    double learning_rate = 0.1;
    double momentum = 0.9;
    param_set<T> velocity;
    std::int64_t iteration = 0;

    static optim_state like(const model_graph<T>& m, double lr, double mu) {
        optim_state o;
        o.learning_rate = lr;
        o.momentum = mu;
        o.velocity = param_set<T>::like(m);
        return o;
    }
};

// Called after every update; re-zeroes pruned weights and their velocities.
template <class T>
using mask_hook = std::function<void(model_graph<T>&, optim_state<T>&)>;

// v <- mu*v - lr*g; w <- w + v; then the mask hook, if any.
template <class T>
void sgd_momentum_step(model_graph<T>& m, const param_set<T>& grads, optim_state<T>& opt,
                       const mask_hook<T>& hook = {}) {
    const T lr = T(opt.learning_rate), mu = T(opt.momentum);
    for_each_param(m, [&](int i, slot s, const std::string&, tensor<T>& w) {
        auto& g = const_cast<param_set<T>&>(grads).nodes[std::size_t(i)].at(s);
        auto& v = opt.velocity.nodes[std::size_t(i)].at(s);
        for (std::size_t k = 0; k < w.numel(); ++k) {
            v.data[k] = mu * v.data[k] - lr * g.data[k];
            w.data[k] += v.data[k];
        }
    });
    opt.iteration++;
    if (hook) hook(m, opt);
}

// base_lr * factor^floor(iteration / step)
inline double lr_schedule(std::int64_t iteration, double base_lr, std::int64_t step, double factor) {
    if (step <= 0) throw config_error("lr schedule step must be > 0");
    double lr = base_lr;
    for (std::int64_t k = iteration / step; k > 0; --k) lr *= factor;
    return lr;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Top-1 accuracy over a pre-rasterized input set, shape [N,C,H,W]. Ties pick
// the lowest class index. Optionally dumps raw logits (N x class_count).
template <class T>
double evaluate(model_graph<T>& m, const tensor<T>& inputs, std::span<const int> labels,
                int batch_size = 128, std::vector<T>* logits_dump = nullptr) {
    const int N = inputs.shape.empty() ? 0 : inputs.shape[0];
    if (N == 0) throw empty_dataset("evaluate: empty dataset");
    if (std::size_t(N) != labels.size()) throw shape_mismatch("evaluate: labels do not match inputs");
    const std::size_t sample = inputs.numel() / std::size_t(N);
    const int K = m.nodes[std::size_t(m.logits)].out_c;
    if (logits_dump) logits_dump->clear();

    forward_state<T> st;
    std::size_t correct = 0;
    for (int start = 0; start < N; start += batch_size) {
        const int nb = std::min(batch_size, N - start);
        tensor<T> batch({nb, inputs.shape[1], inputs.shape[2], inputs.shape[3]});
        std::copy(inputs.ptr() + std::size_t(start) * sample, inputs.ptr() + std::size_t(start + nb) * sample,
                  batch.ptr());
        forward(m, batch, false, {}, st);
        const tensor<T>& logits = st.act[std::size_t(m.logits)];
        for (int b = 0; b < nb; ++b) {
            const T* lp = logits.ptr() + std::size_t(b) * K;
            int arg = 0;
            for (int k = 1; k < K; ++k)
                if (lp[k] > lp[arg]) arg = k;
            if (arg == labels[std::size_t(start + b)]) ++correct;
            if (logits_dump) logits_dump->insert(logits_dump->end(), lp, lp + K);
        }
    }
    return double(correct) / double(N);
}

template <class T>
bool has_nonfinite(const model_graph<T>& m) {
    bool bad = false;
    for_each_param(m, [&](int, slot, const std::string&, const tensor<T>& t) {
        for (T v : t.data)
            if (!std::isfinite(double(v))) bad = true;
    });
    return bad;
}

// ---------------------------------------------------------------------------
// Dense checkpoint (DNSE)
// ---------------------------------------------------------------------------

struct checkpoint_error : data_error {
    using data_error::data_error;
};

struct named_tensors {
    std::vector<std::pair<std::string, tensor<float>>> items;

    tensor<float>* find(std::string_view name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
    const tensor<float>* find(std::string_view name) const {
        return const_cast<named_tensors*>(this)->find(name);
    }
    void add(std::string name, tensor<float> t) { items.emplace_back(std::move(name), std::move(t)); }
};

inline std::vector<std::uint8_t> write_dnse(const named_tensors& ts) {
    byte_writer w;
    w.str("DNSE");
    w.u16(1);
    w.u32(std::uint32_t(ts.items.size()));
    for (const auto& [name, t] : ts.items) {
        w.u16(std::uint16_t(name.size()));
        w.str(name);
        w.u8(std::uint8_t(t.shape.size()));
        for (int d : t.shape) w.u32(std::uint32_t(d));
        for (float v : t.data) w.f32(v);
    }
    return w.take();
}

inline named_tensors read_dnse(std::span<const std::uint8_t> bytes) {
    byte_reader r(bytes);
    try {
        if (r.str(4) != "DNSE") throw checkpoint_error("bad checkpoint magic");
        const std::uint16_t version = r.u16();
        if (version != 1) throw checkpoint_error("unsupported checkpoint version " + std::to_string(version));
        named_tensors ts;
        const std::uint32_t count = r.u32();
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name = r.str(r.u16());
            const int rank = r.u8();
            std::vector<int> shape(static_cast<std::size_t>(rank));
            for (auto& d : shape) d = int(r.u32());
            tensor<float> t(shape);
            for (auto& v : t.data) v = r.f32();
            ts.add(std::move(name), std::move(t));
        }
        return ts;
    } catch (const truncated_input& e) {
        throw checkpoint_error("truncated checkpoint at byte " + std::to_string(e.offset));
    }
}

// Model tensors in deterministic order: graph order, trainables first, then BN
// running statistics (".rmean"/".rvar").
template <class T>
named_tensors collect_model_tensors(const model_graph<T>& m) {
    named_tensors ts;
    for (const auto& n : m.nodes) {
        if (!n.weight.empty()) ts.add(n.name + ".w", n.weight.template cast<float>());
        if (!n.bias.empty()) ts.add(n.name + ".b", n.bias.template cast<float>());
        if (!n.gamma.empty()) ts.add(n.name + ".gamma", n.gamma.template cast<float>());
        if (!n.beta.empty()) ts.add(n.name + ".beta", n.beta.template cast<float>());
        if (!n.slope.empty()) ts.add(n.name + ".slope", n.slope.template cast<float>());
        if (!n.running_mean.empty()) ts.add(n.name + ".rmean", n.running_mean.template cast<float>());
        if (!n.running_var.empty()) ts.add(n.name + ".rvar", n.running_var.template cast<float>());
    }
    return ts;
}

// Loads tensors by name; every model tensor must be present (extra entries,
// e.g. optimizer state, are ignored).
template <class T>
void apply_model_tensors(model_graph<T>& m, const named_tensors& ts) {
    auto load = [&](const std::string& name, tensor<T>& dst) {
        const tensor<float>* src = ts.find(name);
        if (!src) throw checkpoint_error("checkpoint is missing tensor " + name);
        if (src->shape != dst.shape)
            throw checkpoint_error("checkpoint tensor " + name + " is " + shape_str(src->shape) +
                                   ", model expects " + shape_str(dst.shape));
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] = T(src->data[i]);
    };
    for (auto& n : m.nodes) {
        if (!n.weight.empty()) load(n.name + ".w", n.weight);
        if (!n.bias.empty()) load(n.name + ".b", n.bias);
        if (!n.gamma.empty()) load(n.name + ".gamma", n.gamma);
        if (!n.beta.empty()) load(n.name + ".beta", n.beta);
        if (!n.slope.empty()) load(n.name + ".slope", n.slope);
        if (!n.running_mean.empty()) load(n.name + ".rmean", n.running_mean);
        if (!n.running_var.empty()) load(n.name + ".rvar", n.running_var);
    }
}

}  // namespace inkstone::nn
