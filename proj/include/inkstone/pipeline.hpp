// End-to-end stages shared by the command-line tool and the test suite:
// toy-data generation, feature rasterization, the dense / pruning /
// quantization training phases, evaluation, and checkpoint plumbing.
//
// Determinism contract: given the same config, seed and build, every stage
// produces bitwise-identical artifacts and logs.
//  - Batch composition depends only on the global step: sample j of step g in
//    epoch e = floor((g*B+j)/N) is perm_e[(g*B+j) mod N], with perm_e drawn
//    from a counter-based generator keyed (seed, "shuffle", e).
//  - Training-time distortion of a sample is keyed (seed, "distort", epoch,
//    sample index): re-running or resuming replays the identical stream.
//  - The math engine runs on one thread with fixed reduction order; the
//    `threads` setting only sizes the rasterization worker pool, whose
//    workers write disjoint output slices.
//
// Checkpoints are dense containers holding the model tensors plus optimizer
// velocities ("opt.vel.<tensor>"), the step counter ("opt.iter"), prune masks
// ("mask.<tensor>") and codebooks ("quant.*"), so a resumed run continues
// bit-for-bit where it stopped.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "inkstone/common.hpp"
#include "inkstone/config.hpp"
#include "inkstone/distort.hpp"
#include "inkstone/dropweight.hpp"
#include "inkstone/ink.hpp"
#include "inkstone/nn.hpp"
#include "inkstone/pack.hpp"
#include "inkstone/quant.hpp"
#include "inkstone/sig.hpp"
#include "inkstone/zoo.hpp"

namespace inkstone::pipeline {

using nn::tensor;

using progress_fn = std::function<void(const std::string&)>;  // one JSON line per call

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw data_error("short write to " + path);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct dataset_pair {
    ink::dataset train, test;
};

// Train and test draws come from independently keyed streams of the same
// generator family, so they never share samples.
inline dataset_pair make_toy_data(const pipeline_config& cfg) {
    dataset_pair d;
    d.train = ink::gen_toy_dataset(cfg.classes, cfg.train_per_class, cfg.seed);
    d.test = ink::gen_toy_dataset(cfg.classes, cfg.test_per_class, mix64(cfg.seed ^ hash_str("test-split")));
    return d;
}

// Stroke resampling step in normalized units: about two device pixels.
inline double resample_spacing(const sig::raster_config& rc) { return 4.0 / double(rc.image_size); }

// Normalize + smooth + rasterize one trajectory (normalize is idempotent, so
// pre-normalized data passes through unchanged).
inline sig::feature_stack render_features(const ink::trajectory& t, const sig::raster_config& rc) {
    const ink::trajectory smooth = ink::resample_step(ink::normalize(t), resample_spacing(rc));
    return sig::rasterize(smooth, rc);
}

inline void rasterize_into(const ink::trajectory& t, const sig::raster_config& rc, float* dst) {
    const sig::feature_stack fs = render_features(t, rc);
    std::copy(fs.data.begin(), fs.data.end(), dst);
}

struct raster_set {
    tensor<float> x;  // [N, channels, S, S]
    std::vector<int> labels;
};

// Rasterizes a whole dataset without augmentation. Workers cover disjoint
// index stripes, so the result is independent of the thread count.
inline raster_set rasterize_set(const ink::dataset& ds, const sig::raster_config& rc, int threads = 1) {
    const int n = int(ds.items.size());
    raster_set out;
    out.x = tensor<float>({n, sig::feature_stack::kChannels, rc.image_size, rc.image_size});
    out.labels.resize(std::size_t(n));
    const std::size_t sample_elems = out.x.numel() / std::size_t(std::max(1, n));
    auto work = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            rasterize_into(ds.items[std::size_t(i)], rc, out.x.ptr() + std::size_t(i) * sample_elems);
            out.labels[std::size_t(i)] = ds.items[std::size_t(i)].label;
        }
    };
    const int nthreads = std::max(1, std::min(threads, n));
    if (nthreads == 1) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + nthreads - 1) / nthreads;
        for (int t = 0; t < nthreads; ++t)
            pool.emplace_back(work, std::min(n, t * chunk), std::min(n, (t + 1) * chunk));
        for (auto& th : pool) th.join();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic batch indexing
// ---------------------------------------------------------------------------

// Caches the two most recent epoch permutations (a batch can straddle an
// epoch boundary).
class batch_indexer {
  public:
    batch_indexer(std::uint64_t seed, std::size_t dataset_size) : seed_(seed), n_(dataset_size) {
        if (n_ == 0) throw nn::empty_dataset("cannot train on an empty dataset");
    }

    struct pick {
        std::size_t index;
        std::int64_t epoch;
    };

    pick at(std::int64_t global_sample) {
        const std::int64_t epoch = global_sample / std::int64_t(n_);
        const std::size_t offset = std::size_t(global_sample % std::int64_t(n_));
        return {perm(epoch)[offset], epoch};
    }

  private:
    const std::vector<std::size_t>& perm(std::int64_t epoch) {
        for (auto& [e, p] : cache_)
            if (e == epoch) return p;
        auto& slot = cache_[next_];
        next_ ^= 1;
        slot.first = epoch;
        slot.second.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) slot.second[i] = i;
        rng r = rng::from(seed_, {hash_str("shuffle"), std::uint64_t(epoch)});
        r.shuffle(slot.second);
        return slot.second;
    }

    std::uint64_t seed_;
    std::size_t n_;
    std::array<std::pair<std::int64_t, std::vector<std::size_t>>, 2> cache_{
        std::pair<std::int64_t, std::vector<std::size_t>>{-1, {}},
        std::pair<std::int64_t, std::vector<std::size_t>>{-1, {}}};
    int next_ = 0;
};

// ---------------------------------------------------------------------------
// Training phases
// ---------------------------------------------------------------------------

struct phase_options {
    std::string name = "train";
    std::int64_t iterations = 0;
    double base_lr = 0.1;
    bool use_lr_schedule = false;                    // stepped decay vs constant
    dropweight::dropweight_state<float>* dw = nullptr;  // masks enforced if set
    bool prune_active = false;                       // fire prune events
    quant::quant_state* q = nullptr;                 // codebook fine-tuning if set
};

// Runs `iterations` optimizer steps, continuing from opt.iteration. One
// JSON line per log_every steps; prune events add one line per layer.
inline void run_phase(const pipeline_config& cfg, nn::model_graph<float>& model,
                      nn::optim_state<float>& opt, const ink::dataset& train,
                      const phase_options& ph, const progress_fn& log = {}) {
    batch_indexer indexer(cfg.seed, train.items.size());
    const int B = cfg.batch_size;
    const int S = cfg.raster.image_size;
    const std::size_t sample_elems = std::size_t(sig::feature_stack::kChannels) * S * S;

    nn::forward_state<float> st;
    nn::param_set<float> grads = nn::param_set<float>::like(model);
    const nn::mask_hook<float> hook = ph.dw ? dropweight::make_mask_hook(*ph.dw) : nn::mask_hook<float>{};

    tensor<float> batch({B, sig::feature_stack::kChannels, S, S});
    std::vector<int> labels(static_cast<std::size_t>(B));
    std::vector<ink::trajectory> picked(static_cast<std::size_t>(B));

    const std::int64_t stop = opt.iteration + ph.iterations;
    while (opt.iteration < stop) {
        const std::int64_t it = opt.iteration;
        opt.learning_rate = ph.use_lr_schedule
                                ? nn::lr_schedule(it, ph.base_lr, cfg.lr_step, cfg.lr_factor)
                                : ph.base_lr;

        // assemble the batch (sample picks, optional distortion, rasterize)
        for (int j = 0; j < B; ++j) {
            const auto p = indexer.at(it * B + j);
            const ink::trajectory& base = train.items[p.index];
            labels[std::size_t(j)] = base.label;
            if (cfg.augment) {
                distort::distortion_config dc;
                dc.alpha = cfg.augment_alpha;
                dc.local_amplitude = cfg.augment_local_amplitude;
                dc.seed = rng::from(cfg.seed, {hash_str("distort"), std::uint64_t(p.epoch), p.index}).next_u64();
                picked[std::size_t(j)] = distort::sample_distortion(base, dc);
            } else {
                picked[std::size_t(j)] = base;
            }
        }
        auto raster_work = [&](int begin, int end) {
            for (int j = begin; j < end; ++j)
                rasterize_into(picked[std::size_t(j)], cfg.raster, batch.ptr() + std::size_t(j) * sample_elems);
        };
        const int nthreads = std::max(1, std::min(cfg.threads, B));
        if (nthreads == 1) {
            raster_work(0, B);
        } else {
            std::vector<std::thread> pool;
            const int chunk = (B + nthreads - 1) / nthreads;
            for (int t = 0; t < nthreads; ++t)
                pool.emplace_back(raster_work, std::min(B, t * chunk), std::min(B, (t + 1) * chunk));
            for (auto& th : pool) th.join();
        }

        grads.zero();
        nn::forward(model, batch, true, labels, st);
        if (!std::isfinite(st.loss_value))
            throw numeric_error("training diverged: non-finite loss at step " + std::to_string(it));
        nn::backward(model, st, grads);
        nn::sgd_momentum_step(model, grads, opt, hook);
        if (ph.q) quant::finetune_step(model, grads, *ph.dw, *ph.q, opt.learning_rate);

        if (ph.dw && ph.prune_active && opt.iteration % ph.dw->cfg.interval == 0) {
            const auto records = dropweight::dropweight_event(model, *ph.dw, &opt);
            if (log)
                for (const auto& rec : records) {
                    nlohmann::json j{{"phase", ph.name},          {"iter", opt.iteration},
                                     {"event", "prune"},          {"layer", rec.layer},
                                     {"pruned", rec.newly_pruned},{"total_pruned", rec.total_pruned},
                                     {"threshold", rec.threshold},{"layer_density", rec.layer_density},
                                     {"frozen_rule", rec.frozen_rule}};
                    log(j.dump());
                }
        }

        if (log && (opt.iteration % cfg.log_every == 0 || opt.iteration == stop)) {
            nlohmann::json j{{"phase", ph.name},
                             {"iter", opt.iteration},
                             {"loss", st.loss_value},
                             {"lr", opt.learning_rate}};
            if (ph.dw) j["density"] = ph.dw->density();
            log(j.dump());
        }
    }
    if (nn::has_nonfinite(model))
        throw numeric_error("training diverged: non-finite parameter after step " +
                            std::to_string(opt.iteration));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct checkpoint {
    nn::model_graph<float> model;
    nn::optim_state<float> opt;
    dropweight::dropweight_state<float> dw;  // masks all-ones if never pruned
    quant::quant_state q;                    // empty if never quantized
    bool has_masks = false;
};

inline std::vector<std::uint8_t> save_checkpoint(const checkpoint& ck) {
    nn::named_tensors ts = nn::collect_model_tensors(ck.model);
    nn::for_each_param(ck.model, [&](int i, nn::slot s, const std::string& name, const tensor<float>&) {
        const auto& v = const_cast<checkpoint&>(ck).opt.velocity.nodes[std::size_t(i)].at(s);
        ts.add("opt.vel." + name, v);
    });
    // step counter split into 16-bit chunks, each exactly representable
    tensor<float> it({4});
    for (int k = 0; k < 4; ++k)
        it.data[std::size_t(k)] = float((std::uint64_t(ck.opt.iteration) >> (16 * k)) & 0xffffu);
    ts.add("opt.iter", std::move(it));
    if (ck.has_masks) dropweight::append_mask_tensors(ck.model, ck.dw, ts);
    quant::append_quant_tensors(ck.model, ck.q, ts);
    return nn::write_dnse(ts);
}

// `cfg` must describe the same architecture the checkpoint was saved from.
inline checkpoint load_checkpoint(const pipeline_config& cfg, std::span<const std::uint8_t> bytes) {
    const nn::named_tensors ts = nn::read_dnse(bytes);
    checkpoint ck;
    ck.model = zoo::build_model<float>(cfg.model_family, cfg.model_head, cfg.model_width,
                                       sig::feature_stack::kChannels, cfg.raster.image_size,
                                       cfg.raster.image_size, cfg.classes);
    nn::apply_model_tensors(ck.model, ts);
    ck.opt = nn::optim_state<float>::like(ck.model, cfg.learning_rate, cfg.momentum);
    nn::for_each_param(ck.model, [&](int i, nn::slot s, const std::string& name, const tensor<float>& t) {
        const tensor<float>* v = ts.find("opt.vel." + name);
        if (!v) return;
        if (v->shape != t.shape) throw nn::checkpoint_error("velocity shape mismatch for " + name);
        ck.opt.velocity.nodes[std::size_t(i)].at(s) = *v;
    });
    if (const tensor<float>* it = ts.find("opt.iter"); it && it->numel() == 4) {
        std::uint64_t v = 0;
        for (int k = 0; k < 4; ++k) v |= std::uint64_t(it->data[std::size_t(k)]) << (16 * k);
        ck.opt.iteration = std::int64_t(v);
    }
    ck.dw = dropweight::dropweight_state<float>::init(ck.model, cfg.prune);
    ck.has_masks = dropweight::load_mask_tensors(ck.model, ck.dw, ts);
    ck.q = quant::load_quant_tensors(ck.model, ts);
    return ck;
}

// ---------------------------------------------------------------------------
// Whole stages
// ---------------------------------------------------------------------------

inline checkpoint train_stage(const pipeline_config& cfg, const ink::dataset& train,
                              const progress_fn& log = {}, const checkpoint* resume_from = nullptr) {
    checkpoint ck;
    if (resume_from) {
        ck = *resume_from;
    } else {
        ck.model = zoo::build_model<float>(cfg.model_family, cfg.model_head, cfg.model_width,
                                           sig::feature_stack::kChannels, cfg.raster.image_size,
                                           cfg.raster.image_size, cfg.classes);
        nn::init_params(ck.model, cfg.seed);
        ck.opt = nn::optim_state<float>::like(ck.model, cfg.learning_rate, cfg.momentum);
        ck.dw = dropweight::dropweight_state<float>::init(ck.model, cfg.prune);
    }
    phase_options ph;
    ph.name = "train";
    ph.iterations = cfg.iterations - ck.opt.iteration;  // train up to the configured step count
    if (ph.iterations < 0) ph.iterations = 0;
    ph.base_lr = cfg.learning_rate;
    ph.use_lr_schedule = true;
    run_phase(cfg, ck.model, ck.opt, train, ph, log);
    return ck;
}

inline void prune_stage(const pipeline_config& cfg, checkpoint& ck, const ink::dataset& train,
                        const progress_fn& log = {}) {
    if (!ck.has_masks) {
        ck.dw = dropweight::dropweight_state<float>::init(ck.model, cfg.prune);
        ck.has_masks = true;
    } else {
        ck.dw.cfg = cfg.prune;
    }
    phase_options ph;
    ph.name = "prune";
    ph.iterations = cfg.prune_iterations;
    ph.base_lr = cfg.prune_lr;
    ph.dw = &ck.dw;
    ph.prune_active = true;
    run_phase(cfg, ck.model, ck.opt, train, ph, log);
}

inline void quantize_stage(const pipeline_config& cfg, checkpoint& ck, const ink::dataset& train,
                           const progress_fn& log = {}) {
    if (!ck.has_masks) {
        ck.dw = dropweight::dropweight_state<float>::init(ck.model, cfg.prune);
        ck.has_masks = true;
    }
    ck.q = quant::quantize_model(ck.model, ck.dw, cfg.quant_bits, cfg.seed);
    phase_options ph;
    ph.name = "quant";
    ph.iterations = cfg.quant_iterations;
    ph.base_lr = cfg.quant_lr;
    ph.dw = &ck.dw;
    ph.q = &ck.q;
    run_phase(cfg, ck.model, ck.opt, train, ph, log);
}

inline std::vector<std::uint8_t> pack_stage(const checkpoint& ck) {
    return pack::pack_model(ck.model, ck.has_masks ? &ck.dw : nullptr,
                            ck.q.layers.empty() ? nullptr : &ck.q);
}

inline double eval_stage(const pipeline_config& cfg, nn::model_graph<float>& model,
                         const ink::dataset& test, std::vector<float>* logits_dump = nullptr) {
    raster_set rs = rasterize_set(test, cfg.raster, cfg.threads);
    return nn::evaluate(model, rs.x, rs.labels, cfg.batch_size, logits_dump);
}

}  // namespace inkstone::pipeline
