// Command-line front end for the ink recognition toolkit.
//
// Subcommands: gen-data, render, train, prune, quantize, pack, eval,
// size-report. Every subcommand takes --config/--seed/--threads/
// --deterministic; --seed and --threads override the config file.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data error
// (unreadable/malformed files), 4 numeric failure (divergence, degenerate
// transforms).

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "inkstone/config.hpp"
#include "inkstone/ink.hpp"
#include "inkstone/pack.hpp"
#include "inkstone/pipeline.hpp"

namespace {

using namespace inkstone;

struct common_opts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool deterministic = true;
};

void add_common(CLI::App* sub, common_opts& c) {
    sub->add_option("--config", c.config_path, "pipeline config JSON file");
    sub->add_option("--seed", c.seed, "override the config seed");
    sub->add_option("--threads", c.threads, "rasterization worker threads");
    sub->add_flag("--deterministic,!--no-deterministic", c.deterministic,
                  "bit-reproducible mode (always on; flag kept for interface stability)");
}

pipeline_config make_config(const common_opts& c) {
    pipeline_config cfg = c.config_path.empty() ? pipeline_config{} : load_config_file(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    cfg.deterministic = c.deterministic;
    cfg.check();
    return cfg;
}

ink::format_tag resolve_format(const std::string& fmt, const std::string& path) {
    if (fmt == "auto") {
        if (path.size() >= 5 && (path.ends_with(".json") || path.ends_with(".jsonl")))
            return ink::format_tag::ink_json;
        return ink::format_tag::ink_bin;
    }
    return ink::format_from_name(fmt);
}

ink::dataset load_dataset(const std::string& path, const std::string& fmt, std::optional<int> classes) {
    return ink::parse_trajectory_file(pipeline::read_file(path), resolve_format(fmt, path), classes);
}

// Writes JSON lines to a file when given, stdout otherwise.
struct log_sink {
    std::ofstream file;
    bool to_file = false;

    explicit log_sink(const std::string& path) {
        if (!path.empty()) {
            file.open(path, std::ios::trunc);
            if (!file) throw data_error("cannot open log file: " + path);
            to_file = true;
        }
    }
    pipeline::progress_fn fn() {
        return [this](const std::string& line) {
            if (to_file)
                file << line << '\n';
            else
                std::cout << line << '\n';
        };
    }
};

pipeline::checkpoint load_ckpt(const pipeline_config& cfg, const std::string& path) {
    return pipeline::load_checkpoint(cfg, pipeline::read_file(path));
}

void save_ckpt(const pipeline::checkpoint& ck, const std::string& path) {
    pipeline::write_file(path, pipeline::save_checkpoint(ck));
}

ink::dataset training_data(const pipeline_config& cfg, const std::string& data_path,
                           const std::string& data_format) {
    if (!data_path.empty()) return load_dataset(data_path, data_format, cfg.classes);
    return pipeline::make_toy_data(cfg).train;
}

int run(int argc, char** argv) {
    CLI::App app{"ink recognition toolkit: data, training, pruning, quantization, packing"};
    app.require_subcommand(1);

    common_opts com;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic glyph datasets");
    std::string gen_train, gen_test, gen_format = "ink-bin";
    gen->add_option("--out-train", gen_train, "training set output path")->required();
    gen->add_option("--out-test", gen_test, "test set output path")->required();
    gen->add_option("--format", gen_format, "ink-json | ink-bin")->default_str("ink-bin");
    add_common(gen, com);

    // render
    auto* render = app.add_subcommand("render", "rasterize a dataset into feature-map files");
    std::string ren_in, ren_format = "auto", ren_dir;
    render->add_option("--in", ren_in, "dataset file")->required();
    render->add_option("--format", ren_format, "ink-json | ink-bin | auto");
    render->add_option("--out-dir", ren_dir, "output directory for .fmap files + manifest")->required();
    add_common(render, com);

    // train / prune / quantize share data options
    std::string data_path, data_format = "auto";

    auto* train = app.add_subcommand("train", "train a dense model");
    std::string train_out, train_log, train_resume;
    train->add_option("--out", train_out, "checkpoint output path")->required();
    train->add_option("--log", train_log, "JSON-lines training log (default stdout)");
    train->add_option("--resume", train_resume, "checkpoint to continue from");
    train->add_option("--data", data_path, "training dataset file (default: generated)");
    train->add_option("--data-format", data_format, "ink-json | ink-bin | auto");
    add_common(train, com);

    auto* prune = app.add_subcommand("prune", "incrementally prune a trained checkpoint");
    std::string pr_in, pr_out, pr_log;
    prune->add_option("--in", pr_in, "input checkpoint")->required();
    prune->add_option("--out", pr_out, "output checkpoint")->required();
    prune->add_option("--log", pr_log, "JSON-lines log (default stdout)");
    prune->add_option("--data", data_path, "training dataset file (default: generated)");
    prune->add_option("--data-format", data_format, "ink-json | ink-bin | auto");
    add_common(prune, com);

    auto* quant_cmd = app.add_subcommand("quantize", "codebook-quantize a pruned checkpoint");
    std::string qt_in, qt_out, qt_log;
    quant_cmd->add_option("--in", qt_in, "input checkpoint")->required();
    quant_cmd->add_option("--out", qt_out, "output checkpoint")->required();
    quant_cmd->add_option("--log", qt_log, "JSON-lines log (default stdout)");
    quant_cmd->add_option("--data", data_path, "training dataset file (default: generated)");
    quant_cmd->add_option("--data-format", data_format, "ink-json | ink-bin | auto");
    add_common(quant_cmd, com);

    auto* pack_cmd = app.add_subcommand("pack", "write the packed model container");
    std::string pk_in, pk_out;
    pack_cmd->add_option("--in", pk_in, "input checkpoint")->required();
    pack_cmd->add_option("--out", pk_out, "packed model output path")->required();
    add_common(pack_cmd, com);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or packed model");
    std::string ev_model, ev_logits;
    eval_cmd->add_option("--model", ev_model, "checkpoint or packed model file")->required();
    eval_cmd->add_option("--data", data_path, "dataset file (default: generated test split)");
    eval_cmd->add_option("--data-format", data_format, "ink-json | ink-bin | auto");
    eval_cmd->add_option("--dump-logits", ev_logits, "write raw logits as little-endian float32");
    add_common(eval_cmd, com);

    auto* size_cmd = app.add_subcommand("size-report", "itemize a packed model's bytes");
    std::string sz_in;
    size_cmd->add_option("--in", sz_in, "packed model file")->required();
    add_common(size_cmd, com);

    CLI11_PARSE(app, argc, argv);

    const pipeline_config cfg = make_config(com);

    if (gen->parsed()) {
        const auto fmt = ink::format_from_name(gen_format);
        const pipeline::dataset_pair d = pipeline::make_toy_data(cfg);
        pipeline::write_file(gen_train, ink::serialize_trajectory_file(d.train, fmt));
        pipeline::write_file(gen_test, ink::serialize_trajectory_file(d.test, fmt));
        nlohmann::json out{{"train", gen_train},
                           {"train_records", d.train.items.size()},
                           {"test", gen_test},
                           {"test_records", d.test.items.size()},
                           {"classes", cfg.classes}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (render->parsed()) {
        const ink::dataset ds = load_dataset(ren_in, ren_format, std::nullopt);
        std::filesystem::create_directories(ren_dir);
        std::ofstream manifest(std::filesystem::path(ren_dir) / "manifest.jsonl", std::ios::trunc);
        if (!manifest) throw data_error("cannot write manifest in " + ren_dir);
        for (std::size_t i = 0; i < ds.items.size(); ++i) {
            const sig::feature_stack fs = pipeline::render_features(ds.items[i], cfg.raster);
            char name[32];
            std::snprintf(name, sizeof name, "%06zu.fmap", i);
            pipeline::write_file((std::filesystem::path(ren_dir) / name).string(), sig::write_fmap(fs));
            nlohmann::json line{{"index", i}, {"label", ds.items[i].label}, {"file", name}};
            manifest << line.dump() << '\n';
        }
        nlohmann::json out{{"rendered", ds.items.size()}, {"dir", ren_dir}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (train->parsed()) {
        const ink::dataset data = training_data(cfg, data_path, data_format);
        log_sink sink(train_log);
        std::optional<pipeline::checkpoint> resume;
        if (!train_resume.empty()) resume = load_ckpt(cfg, train_resume);
        const pipeline::checkpoint ck =
            pipeline::train_stage(cfg, data, sink.fn(), resume ? &*resume : nullptr);
        save_ckpt(ck, train_out);
        nlohmann::json out{{"checkpoint", train_out}, {"iterations", ck.opt.iteration}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (prune->parsed()) {
        const ink::dataset data = training_data(cfg, data_path, data_format);
        log_sink sink(pr_log);
        pipeline::checkpoint ck = load_ckpt(cfg, pr_in);
        pipeline::prune_stage(cfg, ck, data, sink.fn());
        save_ckpt(ck, pr_out);
        nlohmann::json out{{"checkpoint", pr_out}, {"density", ck.dw.density()}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (quant_cmd->parsed()) {
        const ink::dataset data = training_data(cfg, data_path, data_format);
        log_sink sink(qt_log);
        pipeline::checkpoint ck = load_ckpt(cfg, qt_in);
        pipeline::quantize_stage(cfg, ck, data, sink.fn());
        save_ckpt(ck, qt_out);
        nlohmann::json out{{"checkpoint", qt_out}, {"bits", ck.q.bits}, {"layers", ck.q.layers.size()}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (pack_cmd->parsed()) {
        const pipeline::checkpoint ck = load_ckpt(cfg, pk_in);
        const auto bytes = pipeline::pack_stage(ck);
        pipeline::write_file(pk_out, bytes);
        nlohmann::json out{{"packed", pk_out}, {"bytes", bytes.size()}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (eval_cmd->parsed()) {
        const auto bytes = pipeline::read_file(ev_model);
        nn::model_graph<float> model;
        if (bytes.size() >= 4 && std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) == "DWPK")
            model = pack::unpack_model<float>(bytes);
        else
            model = pipeline::load_checkpoint(cfg, bytes).model;
        const ink::dataset data = data_path.empty()
                                      ? pipeline::make_toy_data(cfg).test
                                      : load_dataset(data_path, data_format, cfg.classes);
        std::vector<float> logits;
        const double acc = pipeline::eval_stage(cfg, model, data, ev_logits.empty() ? nullptr : &logits);
        if (!ev_logits.empty()) {
            byte_writer w;
            for (float v : logits) w.f32(v);
            pipeline::write_file(ev_logits, w.take());
        }
        nlohmann::json out{{"accuracy", acc}, {"records", data.items.size()}};
        std::cout << out.dump() << '\n';
        return 0;
    }

    if (size_cmd->parsed()) {
        const auto bytes = pipeline::read_file(sz_in);
        const pack::size_report_t rep = pack::size_report(bytes);
        nlohmann::json blocks = nlohmann::json::array();
        for (const auto& b : rep.blocks) {
            nlohmann::json jb{{"name", b.name},
                              {"kind", b.kind == pack::kBlockSparseQuant ? "sparse-quant" : "dense"},
                              {"bytes", b.block_bytes}};
            if (b.kind == pack::kBlockSparseQuant) {
                jb["survivors"] = b.survivors;
                jb["entries"] = b.entries;
                jb["bits"] = b.bits;
                jb["delta_bytes"] = b.delta_bytes;
                jb["index_bytes"] = b.index_bytes;
                jb["codebook_bytes"] = b.codebook_bytes;
            }
            blocks.push_back(std::move(jb));
        }
        nlohmann::json out{{"file_bytes", rep.file_bytes},
                           {"header_bytes", rep.header_bytes},
                           {"architecture", rep.fingerprint},
                           {"blocks", blocks}};
        std::cout << out.dump(2) << '\n';
        return 0;
    }

    return 2;  // unreachable: require_subcommand enforces one
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const inkstone::config_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const inkstone::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const inkstone::error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}
