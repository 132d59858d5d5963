// Weight-sharing quantization: each prunable layer's surviving weights are
// replaced by a small codebook of shared values (2^bits centroids) plus one
// index per survivor.
//
// Codebooks come from 1-D k-means: centroids start evenly spaced over
// [min, max] and are refined by Lloyd iterations (assignment ties pick the
// lower index, cluster means accumulate in double in flat order, empty
// clusters keep their centroid). When a layer has no more distinct surviving
// values than centroids the codebook is exactly those values, sorted — the
// quantization is lossless.
//
// Fine-tuning trains the codebook itself: every survivor's weight gradient is
// summed into its centroid's slot and the centroid takes one plain SGD step,
// so m tied weights with gradient g move their shared value by lr*m*g.
// Pruned weights stay zero and take no part in any of this.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/dropweight.hpp"
#include "inkstone/nn.hpp"

namespace inkstone::quant {

using nn::shape_mismatch;
using nn::tensor;

inline void check_bits(int bits) {
    if (bits < 1 || bits > 16) throw config_error("codebook bits must be in [1,16]");
}

// Index of the nearest centroid; exact distance ties pick the lower index.
inline std::uint32_t nearest_centroid(std::span<const float> codebook, float v) {
    std::uint32_t best = 0;
    double best_d = std::abs(double(v) - double(codebook[0]));
    for (std::uint32_t j = 1; j < codebook.size(); ++j) {
        const double d = std::abs(double(v) - double(codebook[j]));
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return best;
}

// 1-D k-means codebook with 2^bits entries, sorted ascending. The seed is
// accepted for interface stability but unused: linear-range init makes the
// procedure fully deterministic.
inline std::vector<float> kmeans_codebook(std::span<const float> values, int bits,
                                          std::uint64_t /*seed*/ = 0, int max_iters = 100) {
    check_bits(bits);
    if (values.empty()) throw data_error("kmeans_codebook: no values to quantize");
    const std::size_t K = std::size_t(1) << bits;

    // Saturation: few enough distinct values -> represent them exactly.
    std::vector<float> distinct(values.begin(), values.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() <= K) {
        std::vector<float> cb = distinct;
        cb.resize(K, distinct.back());
        return cb;
    }

    const float lo = distinct.front(), hi = distinct.back();
    std::vector<float> cb(K);
    for (std::size_t j = 0; j < K; ++j)
        cb[j] = float(double(lo) + (double(hi) - double(lo)) * double(j) / double(K - 1));

    std::vector<std::uint32_t> assign(values.size(), 0);
    for (int it = 0; it < max_iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::uint32_t a = nearest_centroid(cb, values[i]);
            if (a != assign[i]) {
                assign[i] = a;
                changed = true;
            }
        }
        if (!changed && it > 0) break;
        std::vector<double> sum(K, 0.0);
        std::vector<std::size_t> cnt(K, 0);
        for (std::size_t i = 0; i < values.size(); ++i) {
            sum[assign[i]] += double(values[i]);
            cnt[assign[i]]++;
        }
        for (std::size_t j = 0; j < K; ++j)
            if (cnt[j] > 0) cb[j] = float(sum[j] / double(cnt[j]));
        if (!changed) break;
    }
    std::sort(cb.begin(), cb.end());
    return cb;
}

struct quant_layer {
    int node = -1;
    std::string name;                 // weight tensor name ("<node>.w")
    std::vector<float> codebook;      // 2^bits entries, ascending
    std::vector<std::uint32_t> index; // one per survivor, ascending flat order
};

struct quant_state {
    int bits = 6;
    std::vector<quant_layer> layers;

    const quant_layer* find(int node) const {
        for (const auto& l : layers)
            if (l.node == node) return &l;
        return nullptr;
    }
};

// Rewrites each quantized layer's weights from its codebook; masked weights
// become exactly zero.
template <class T>
void expand_weights(nn::model_graph<T>& m, const dropweight::dropweight_state<T>& dw, const quant_state& q) {
    for (const auto& l : q.layers) {
        auto& w = m.nodes[std::size_t(l.node)].weight;
        const auto& mk = dw.mask[std::size_t(l.node)];
        std::size_t k = 0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            if (mk.data[i])
                w.data[i] = T(l.codebook[l.index[k++]]);
            else
                w.data[i] = T(0);
        }
        if (k != l.index.size()) throw shape_mismatch("expand_weights: survivor count mismatch in " + l.name);
    }
}

// Builds a codebook per prunable layer from its surviving weights and snaps
// the weights onto it. Layers whose survivors all vanished are skipped.
template <class T>
quant_state quantize_model(nn::model_graph<T>& m, const dropweight::dropweight_state<T>& dw, int bits,
                           std::uint64_t seed = 0) {
    check_bits(bits);
    quant_state q;
    q.bits = bits;
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        if (dw.mask[i].empty()) continue;
        const auto& w = m.nodes[i].weight;
        const auto& mk = dw.mask[i];
        std::vector<float> vals;
        vals.reserve(w.numel());
        for (std::size_t k = 0; k < w.numel(); ++k)
            if (mk.data[k]) vals.push_back(float(w.data[k]));
        if (vals.empty()) continue;
        quant_layer l;
        l.node = int(i);
        l.name = m.nodes[i].name + ".w";
        l.codebook = kmeans_codebook(vals, bits, seed);
        l.index.resize(vals.size());
        for (std::size_t k = 0; k < vals.size(); ++k) l.index[k] = nearest_centroid(l.codebook, vals[k]);
        q.layers.push_back(std::move(l));
    }
    expand_weights(m, dw, q);
    return q;
}

// Shared-gradient centroid step: g_c = sum of the weight gradients of every
// survivor assigned to centroid c; c -= lr * g_c. Weights are re-expanded
// afterwards so they stay exactly on the codebook.
template <class T>
void finetune_step(nn::model_graph<T>& m, const nn::param_set<T>& grads,
                   const dropweight::dropweight_state<T>& dw, quant_state& q, double lr) {
    for (auto& l : q.layers) {
        const auto& g = grads.nodes[std::size_t(l.node)].w;
        const auto& mk = dw.mask[std::size_t(l.node)];
        std::vector<double> gc(l.codebook.size(), 0.0);
        std::size_t k = 0;
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (mk.data[i]) gc[l.index[k++]] += double(g.data[i]);
        for (std::size_t c = 0; c < l.codebook.size(); ++c)
            l.codebook[c] = float(double(l.codebook[c]) - lr * gc[c]);
    }
    expand_weights(m, dw, q);
}

// Checkpoint carriage: codebooks and indices ride in the dense container as
// "quant.<tensor>.codebook" / "quant.<tensor>.index" (indices stored as
// float32, exact for up to 2^24). "quant.bits" is a 1-element tensor.
template <class T>
void append_quant_tensors(const nn::model_graph<T>& m, const quant_state& q, nn::named_tensors& ts) {
    if (q.layers.empty()) return;
    tensor<float> bits({1});
    bits.data[0] = float(q.bits);
    ts.add("quant.bits", std::move(bits));
    for (const auto& l : q.layers) {
        (void)m;
        tensor<float> cb({int(l.codebook.size())});
        std::copy(l.codebook.begin(), l.codebook.end(), cb.data.begin());
        ts.add("quant." + l.name + ".codebook", std::move(cb));
        tensor<float> idx({int(l.index.size())});
        for (std::size_t k = 0; k < l.index.size(); ++k) idx.data[k] = float(l.index[k]);
        ts.add("quant." + l.name + ".index", std::move(idx));
    }
}

template <class T>
quant_state load_quant_tensors(const nn::model_graph<T>& m, const nn::named_tensors& ts) {
    quant_state q;
    const tensor<float>* bits = ts.find("quant.bits");
    if (!bits) return q;  // not a quantized checkpoint
    q.bits = int(bits->data.at(0));
    check_bits(q.bits);
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        const std::string name = m.nodes[i].name + ".w";
        const tensor<float>* cb = ts.find("quant." + name + ".codebook");
        const tensor<float>* idx = ts.find("quant." + name + ".index");
        if (!cb || !idx) continue;
        quant_layer l;
        l.node = int(i);
        l.name = name;
        l.codebook.assign(cb->data.begin(), cb->data.end());
        if (l.codebook.size() != (std::size_t(1) << q.bits))
            throw nn::checkpoint_error("codebook size mismatch for " + name);
        l.index.reserve(idx->numel());
        for (float v : idx->data) {
            if (v < 0.0f || v >= float(l.codebook.size()))
                throw nn::checkpoint_error("codebook index out of range for " + name);
            l.index.push_back(std::uint32_t(v));
        }
        q.layers.push_back(std::move(l));
    }
    return q;
}

}  // namespace inkstone::quant
