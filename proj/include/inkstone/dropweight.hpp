// Incremental magnitude pruning ("drop-weight") for conv/fc weight tensors.
//
// Every `interval` optimizer steps a prune event fires. During the ramp the
// cumulative number of weights to remove per layer follows a linear or cubic
// schedule toward `target_fraction`; each event removes the smallest-magnitude
// survivors (ties resolved by ascending flat index) and records the largest
// magnitude it removed as that event's threshold. Once the ramp completes the
// final threshold is frozen per layer; later events keep claiming any survivor
// whose magnitude drifts to or below it (disable with
// `freeze_prunes_drifters=false`).
//
// Masked weights are pinned to exactly zero: the mask hook re-zeroes both the
// weight and its momentum after every optimizer step.
//
// `fixed_threshold` is the one-shot baseline for comparison: a single cutoff
//   eta * mean(|w|) + beta * stddev(w) + lambda
// computed over a full weight tensor.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/nn.hpp"

namespace inkstone::dropweight {

using nn::shape_mismatch;
using nn::tensor;

enum class ramp_kind { linear, cubic };

inline ramp_kind ramp_from_name(const std::string& s) {
    if (s == "linear") return ramp_kind::linear;
    if (s == "cubic") return ramp_kind::cubic;
    throw config_error("unknown ramp kind: " + s + " (expected linear|cubic)");
}

inline const char* ramp_name(ramp_kind r) { return r == ramp_kind::linear ? "linear" : "cubic"; }

struct prune_config {
    double target_fraction = 0.9;  // fraction of each layer's weights to remove
    int interval = 10;             // optimizer steps between prune events
    int ramp_events = 100;         // events taken to reach the target
    ramp_kind ramp = ramp_kind::linear;
    bool freeze_prunes_drifters = true;

    void check() const {
        if (target_fraction < 0.0 || target_fraction >= 1.0)
            throw config_error("target_fraction must be in [0,1)");
        if (interval <= 0) throw config_error("prune interval must be > 0");
        if (ramp_events <= 0) throw config_error("ramp_events must be > 0");
    }
};

// One-shot threshold baseline: eta * mean|w| + beta * stddev(w) + lambda.
template <class T>
double fixed_threshold(std::span<const T> w, double eta, double beta, double lambda) {
    if (w.empty()) throw data_error("fixed_threshold: empty weight tensor");
    const double n = double(w.size());
    double abs_sum = 0.0, sum = 0.0;
    for (const T v : w) {
        abs_sum += std::abs(double(v));
        sum += double(v);
    }
    const double mean = sum / n;
    double var_sum = 0.0;
    for (const T v : w) {
        const double d = double(v) - mean;
        var_sum += d * d;
    }
    return eta * (abs_sum / n) + beta * std::sqrt(var_sum / n) + lambda;
}

// Cumulative number of weights pruned by the end of event `event_index`
// (1-based). Linear ramps proportionally; cubic follows 1-(1-t)^3, which
// prunes aggressively early and tapers off.
inline std::size_t schedule_count(std::size_t total_weights, double target_fraction, int event_index,
                                  int total_events, ramp_kind ramp) {
    if (total_events <= 0) throw config_error("total_events must be > 0");
    if (event_index <= 0) return 0;
    const double t = std::min(1.0, double(event_index) / double(total_events));
    const double frac = ramp == ramp_kind::linear ? t : 1.0 - (1.0 - t) * (1.0 - t) * (1.0 - t);
    return std::size_t(std::llround(double(total_weights) * target_fraction * frac));
}

struct event_result {
    std::size_t newly_pruned = 0;
    double threshold = 0.0;  // largest magnitude removed this event (0 if none)
};

// Masks the `count` smallest-magnitude surviving weights. Ties go to the
// lowest flat index. Does not zero the weights; apply_masks does that.
template <class T>
event_result prune_event(std::span<const T> w, std::span<std::uint8_t> mask, std::size_t count) {
    if (w.size() != mask.size()) throw shape_mismatch("prune_event: mask size mismatch");
    std::vector<std::size_t> surv;
    surv.reserve(w.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        if (mask[i]) surv.push_back(i);
    count = std::min(count, surv.size());
    event_result res;
    if (count == 0) return res;
    std::stable_sort(surv.begin(), surv.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(double(w[a])), mb = std::abs(double(w[b]));
        if (ma != mb) return ma < mb;
        return a < b;
    });
    for (std::size_t k = 0; k < count; ++k) {
        mask[surv[k]] = 0;
        res.threshold = std::max(res.threshold, std::abs(double(w[surv[k]])));
    }
    res.newly_pruned = count;
    return res;
}

// Masks every survivor with |w| <= threshold (the frozen-threshold rule).
template <class T>
event_result prune_below(std::span<const T> w, std::span<std::uint8_t> mask, double threshold) {
    if (w.size() != mask.size()) throw shape_mismatch("prune_below: mask size mismatch");
    event_result res;
    res.threshold = threshold;
    for (std::size_t i = 0; i < w.size(); ++i)
        if (mask[i] && std::abs(double(w[i])) <= threshold) {
            mask[i] = 0;
            ++res.newly_pruned;
        }
    return res;
}

template <class T>
bool is_prunable(const nn::node<T>& n) {
    return (n.kind == nn::op_kind::conv3x3 || n.kind == nn::op_kind::fc) && !n.weight.empty();
}

template <class T>
struct dropweight_state {
    prune_config cfg;
    std::vector<tensor<std::uint8_t>> mask;  // per node; empty if not prunable
    std::vector<double> frozen;              // per node; NaN until the ramp ends
    int events_done = 0;

    static dropweight_state init(const nn::model_graph<T>& m, const prune_config& cfg) {
        cfg.check();
        dropweight_state st;
        st.cfg = cfg;
        st.mask.resize(m.nodes.size());
        st.frozen.assign(m.nodes.size(), std::numeric_limits<double>::quiet_NaN());
        for (std::size_t i = 0; i < m.nodes.size(); ++i)
            if (is_prunable(m.nodes[i])) {
                st.mask[i] = tensor<std::uint8_t>(m.nodes[i].weight.shape);
                st.mask[i].fill(1);
            }
        return st;
    }

    std::size_t total_prunable() const {
        std::size_t n = 0;
        for (const auto& t : mask) n += t.numel();
        return n;
    }
    std::size_t survivors() const {
        std::size_t n = 0;
        for (const auto& t : mask)
            for (auto v : t.data) n += v != 0;
        return n;
    }
    // surviving / prunable weight fraction (1.0 when nothing is prunable)
    double density() const {
        const std::size_t tot = total_prunable();
        return tot == 0 ? 1.0 : double(survivors()) / double(tot);
    }
    std::size_t pruned_in(std::size_t node_idx) const {
        std::size_t n = 0;
        for (auto v : mask[node_idx].data) n += v == 0;
        return n;
    }
};

// Zeroes masked weights, and their velocities when optimizer state is given.
template <class T>
void apply_masks(nn::model_graph<T>& m, const dropweight_state<T>& st, nn::optim_state<T>* opt = nullptr) {
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        const auto& mk = st.mask[i];
        if (mk.empty()) continue;
        auto& w = m.nodes[i].weight;
        for (std::size_t k = 0; k < w.numel(); ++k)
            if (!mk.data[k]) {
                w.data[k] = T(0);
                if (opt) opt->velocity.nodes[i].w.data[k] = T(0);
            }
    }
}

template <class T>
nn::mask_hook<T> make_mask_hook(const dropweight_state<T>& st) {
    return [&st](nn::model_graph<T>& m, nn::optim_state<T>& opt) { apply_masks(m, st, &opt); };
}

struct event_record {
    std::string layer;
    std::size_t newly_pruned = 0;
    std::size_t total_pruned = 0;
    double threshold = 0.0;
    double layer_density = 1.0;
    bool frozen_rule = false;
};

// Runs one prune event over every prunable layer and re-applies masks.
// During the ramp the cumulative schedule decides how many weights each layer
// loses; afterwards the frozen per-layer threshold claims drifting survivors.
template <class T>
std::vector<event_record> dropweight_event(nn::model_graph<T>& m, dropweight_state<T>& st,
                                           nn::optim_state<T>* opt = nullptr) {
    st.events_done++;
    std::vector<event_record> records;
    std::vector<double> last_threshold(m.nodes.size(), 0.0);
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        if (st.mask[i].empty()) continue;
        auto& n = m.nodes[i];
        const std::span<const T> w(n.weight.data.data(), n.weight.numel());
        const std::span<std::uint8_t> mk(st.mask[i].data.data(), st.mask[i].numel());
        event_record rec;
        rec.layer = n.name;
        if (st.events_done <= st.cfg.ramp_events) {
            const std::size_t want =
                schedule_count(w.size(), st.cfg.target_fraction, st.events_done, st.cfg.ramp_events, st.cfg.ramp);
            const std::size_t have = st.pruned_in(i);
            const auto res = prune_event(w, mk, want > have ? want - have : 0);
            rec.newly_pruned = res.newly_pruned;
            rec.threshold = res.threshold;
            if (res.newly_pruned > 0) st.frozen[i] = res.threshold;  // latest ramp threshold
        } else if (st.cfg.freeze_prunes_drifters && std::isfinite(st.frozen[i])) {
            const auto res = prune_below(w, mk, st.frozen[i]);
            rec.newly_pruned = res.newly_pruned;
            rec.threshold = st.frozen[i];
            rec.frozen_rule = true;
        }
        rec.total_pruned = st.pruned_in(i);
        rec.layer_density = 1.0 - double(rec.total_pruned) / double(w.size());
        records.push_back(std::move(rec));
    }
    apply_masks(m, st, opt);
    return records;
}

// Mask tensors serialized alongside checkpoints, named "mask.<tensor name>".
template <class T>
void append_mask_tensors(const nn::model_graph<T>& m, const dropweight_state<T>& st, nn::named_tensors& ts) {
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        if (st.mask[i].empty()) continue;
        tensor<float> f(st.mask[i].shape);
        for (std::size_t k = 0; k < f.numel(); ++k) f.data[k] = float(st.mask[i].data[k]);
        ts.add("mask." + m.nodes[i].name + ".w", std::move(f));
    }
}

template <class T>
bool load_mask_tensors(const nn::model_graph<T>& m, dropweight_state<T>& st, const nn::named_tensors& ts) {
    bool found_any = false;
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        if (st.mask[i].empty()) continue;
        const tensor<float>* f = ts.find("mask." + m.nodes[i].name + ".w");
        if (!f) continue;
        if (f->shape != st.mask[i].shape) throw nn::checkpoint_error("mask shape mismatch for " + m.nodes[i].name);
        for (std::size_t k = 0; k < f->numel(); ++k) st.mask[i].data[k] = f->data[k] != 0.0f ? 1 : 0;
        found_any = true;
    }
    return found_any;
}

}  // namespace inkstone::dropweight
