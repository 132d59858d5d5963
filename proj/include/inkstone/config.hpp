// Pipeline configuration: one JSON document drives every stage. Unknown keys
// are rejected (with their full path) so typos fail loudly instead of
// silently falling back to defaults.
//
// All keys are optional; defaults are the struct initializers below.
// Example:
//
// {
//   "seed": 1,
//   "threads": 1,
//   "data":    { "classes": 10, "train_per_class": 200, "test_per_class": 50 },
//   "raster":  { "image_size": 64, "window_steps": 4, "line_thickness": 1.5 },
//   "augment": { "enabled": true, "alpha": 0.2, "local_amplitude": 0.1 },
//   "model":   { "family": "streamlined", "head": "gap", "width": 0.25 },
//   "train":   { "batch_size": 128, "momentum": 0.9, "learning_rate": 0.1,
//                "lr_step": 70000, "lr_factor": 0.1, "iterations": 300000,
//                "log_every": 10 },
//   "prune":   { "target_density": 0.1, "interval": 10, "ramp_events": 30,
//                "ramp": "linear", "iterations": 400, "learning_rate": 0.02,
//                "freeze_prunes_drifters": true },
//   "quant":   { "bits": 6, "iterations": 50, "learning_rate": 0.001 }
// }
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "inkstone/common.hpp"
#include "inkstone/distort.hpp"
#include "inkstone/dropweight.hpp"
#include "inkstone/quant.hpp"
#include "inkstone/sig.hpp"
#include "inkstone/zoo.hpp"

namespace inkstone {

struct pipeline_config {
    std::uint64_t seed = 1;
    int threads = 1;
    bool deterministic = true;

    // data
    int classes = 10;
    int train_per_class = 200;
    int test_per_class = 50;

    // raster
    sig::raster_config raster;  // 64, 4 window steps, 1.5 px lines

    // augmentation (training-time distortion)
    bool augment = true;
    double augment_alpha = 0.2;
    double augment_local_amplitude = 0.1;

    // model
    zoo::family model_family = zoo::family::streamlined;
    zoo::head_kind model_head = zoo::head_kind::gap;
    double model_width = 1.0;

    // dense training
    int batch_size = 128;
    double momentum = 0.9;
    double learning_rate = 0.1;
    std::int64_t lr_step = 70000;
    double lr_factor = 0.1;
    std::int64_t iterations = 300000;
    int log_every = 10;

    // pruning phase
    dropweight::prune_config prune;  // target 0.9 removed, interval 10
    std::int64_t prune_iterations = 400;
    double prune_lr = 0.02;

    // quantization fine-tune phase
    int quant_bits = 6;
    std::int64_t quant_iterations = 50;
    double quant_lr = 0.001;

    void check() const {
        if (classes < 2) throw config_error("data.classes must be >= 2");
        if (train_per_class < 1 || test_per_class < 1)
            throw config_error("data per-class counts must be >= 1");
        raster.check();
        if (model_width <= 0.0) throw config_error("model.width must be > 0");
        if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) throw config_error("train.momentum must be in [0,1)");
        if (learning_rate <= 0.0) throw config_error("train.learning_rate must be > 0");
        if (lr_step <= 0) throw config_error("train.lr_step must be > 0");
        if (lr_factor <= 0.0) throw config_error("train.lr_factor must be > 0");
        if (iterations < 0 || prune_iterations < 0 || quant_iterations < 0)
            throw config_error("iteration counts must be >= 0");
        if (log_every < 1) throw config_error("train.log_every must be >= 1");
        prune.check();
        if (prune_lr <= 0.0 || quant_lr <= 0.0) throw config_error("phase learning rates must be > 0");
        quant::check_bits(quant_bits);
        if (threads < 1) throw config_error("threads must be >= 1");
        if (augment_alpha < 0.0 || augment_local_amplitude < 0.0)
            throw config_error("augment parameters must be >= 0");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& path,
                                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw config_error("config section " + path + " must be an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items())
        if (!ok.count(key)) throw config_error("unknown config key: " + path + "." + key);
}

}  // namespace detail

inline pipeline_config config_from_json(const nlohmann::json& j) {
    pipeline_config c;
    try {
        detail::reject_unknown_keys(j, "$", {"seed", "threads", "deterministic", "data", "raster",
                                             "augment", "model", "train", "prune", "quant"});
        c.seed = j.value("seed", c.seed);
        c.threads = j.value("threads", c.threads);
        c.deterministic = j.value("deterministic", c.deterministic);
        if (j.contains("data")) {
            const auto& d = j.at("data");
            detail::reject_unknown_keys(d, "$.data", {"classes", "train_per_class", "test_per_class"});
            c.classes = d.value("classes", c.classes);
            c.train_per_class = d.value("train_per_class", c.train_per_class);
            c.test_per_class = d.value("test_per_class", c.test_per_class);
        }
        if (j.contains("raster")) {
            const auto& r = j.at("raster");
            detail::reject_unknown_keys(r, "$.raster", {"image_size", "window_steps", "line_thickness"});
            c.raster.image_size = r.value("image_size", c.raster.image_size);
            c.raster.window_steps = r.value("window_steps", c.raster.window_steps);
            c.raster.line_thickness = r.value("line_thickness", c.raster.line_thickness);
        }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            detail::reject_unknown_keys(a, "$.augment", {"enabled", "alpha", "local_amplitude"});
            c.augment = a.value("enabled", c.augment);
            c.augment_alpha = a.value("alpha", c.augment_alpha);
            c.augment_local_amplitude = a.value("local_amplitude", c.augment_local_amplitude);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            detail::reject_unknown_keys(m, "$.model", {"family", "head", "width"});
            if (m.contains("family")) c.model_family = zoo::family_from_name(m.at("family").get<std::string>());
            if (m.contains("head")) c.model_head = zoo::head_from_name(m.at("head").get<std::string>());
            c.model_width = m.value("width", c.model_width);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::reject_unknown_keys(t, "$.train",
                                        {"batch_size", "momentum", "learning_rate", "lr_step", "lr_factor",
                                         "iterations", "log_every"});
            c.batch_size = t.value("batch_size", c.batch_size);
            c.momentum = t.value("momentum", c.momentum);
            c.learning_rate = t.value("learning_rate", c.learning_rate);
            c.lr_step = t.value("lr_step", c.lr_step);
            c.lr_factor = t.value("lr_factor", c.lr_factor);
            c.iterations = t.value("iterations", c.iterations);
            c.log_every = t.value("log_every", c.log_every);
        }
        if (j.contains("prune")) {
            const auto& p = j.at("prune");
            detail::reject_unknown_keys(p, "$.prune",
                                        {"target_density", "interval", "ramp_events", "ramp", "iterations",
                                         "learning_rate", "freeze_prunes_drifters"});
            if (p.contains("target_density")) {
                const double density = p.at("target_density").get<double>();
                if (density <= 0.0 || density > 1.0) throw config_error("prune.target_density must be in (0,1]");
                c.prune.target_fraction = 1.0 - density;
            }
            c.prune.interval = p.value("interval", c.prune.interval);
            c.prune.ramp_events = p.value("ramp_events", c.prune.ramp_events);
            if (p.contains("ramp")) c.prune.ramp = dropweight::ramp_from_name(p.at("ramp").get<std::string>());
            c.prune_iterations = p.value("iterations", c.prune_iterations);
            c.prune_lr = p.value("learning_rate", c.prune_lr);
            c.prune.freeze_prunes_drifters = p.value("freeze_prunes_drifters", c.prune.freeze_prunes_drifters);
        }
        if (j.contains("quant")) {
            const auto& q = j.at("quant");
            detail::reject_unknown_keys(q, "$.quant", {"bits", "iterations", "learning_rate"});
            c.quant_bits = q.value("bits", c.quant_bits);
            c.quant_iterations = q.value("iterations", c.quant_iterations);
            c.quant_lr = q.value("learning_rate", c.quant_lr);
        }
    } catch (const config_error&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("malformed config: ") + e.what());
    }
    c.check();
    return c;
}

inline pipeline_config load_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline pipeline_config load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_config_text(ss.str());
}

}  // namespace inkstone
