#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inkstone/config.hpp"
#include "inkstone/pipeline.hpp"

using namespace inkstone;
namespace pl = inkstone::pipeline;

namespace {

pipeline_config tiny_config() {
    return load_config_text(R"({
        "seed": 7,
        "data":    { "classes": 3, "train_per_class": 12, "test_per_class": 4 },
        "raster":  { "image_size": 16, "window_steps": 4, "line_thickness": 1.5 },
        "model":   { "family": "streamlined", "head": "gap", "width": 0.05 },
        "train":   { "batch_size": 8, "learning_rate": 0.05, "lr_step": 100000,
                     "iterations": 40, "log_every": 5 },
        "prune":   { "target_density": 0.25, "interval": 2, "ramp_events": 5,
                     "iterations": 14, "learning_rate": 0.01 },
        "quant":   { "bits": 4, "iterations": 6, "learning_rate": 0.001 }
    })");
}

struct log_capture {
    std::vector<std::string> lines;
    pl::progress_fn fn() {
        return [this](const std::string& l) { lines.push_back(l); };
    }
};

}  // namespace

TEST_CASE("rendered features are non-blank for every toy sample") {
    const auto cfg = tiny_config();
    const pl::dataset_pair data = pl::make_toy_data(cfg);
    REQUIRE(data.train.items.size() == 36);
    REQUIRE(data.test.items.size() == 12);

    for (const auto& item : data.train.items) {
        const sig::feature_stack fs = pl::render_features(item, cfg.raster);
        double cover = 0.0;
        for (int y = 0; y < fs.height; ++y)
            for (int x = 0; x < fs.width; ++x) cover += fs.at(0, y, x);
        CHECK(cover > 3.0);  // a real glyph paints many pixels
    }
}

TEST_CASE("train and test splits differ") {
    const auto cfg = tiny_config();
    const pl::dataset_pair data = pl::make_toy_data(cfg);
    CHECK_FALSE(data.train.items[0] == data.test.items[0]);
}

TEST_CASE("rasterizing a set is thread-count invariant") {
    const auto cfg = tiny_config();
    const pl::dataset_pair data = pl::make_toy_data(cfg);
    const pl::raster_set one = pl::rasterize_set(data.train, cfg.raster, 1);
    const pl::raster_set four = pl::rasterize_set(data.train, cfg.raster, 4);
    CHECK(one.labels == four.labels);
    CHECK(one.x.data == four.x.data);
    CHECK(one.x.shape == std::vector<int>{36, 7, 16, 16});
}

TEST_CASE("batch indexing is a per-epoch permutation") {
    pl::batch_indexer idx(3, 10);
    std::set<std::size_t> seen;
    for (int i = 0; i < 10; ++i) {
        const auto p = idx.at(i);
        CHECK(p.epoch == 0);
        seen.insert(p.index);
    }
    CHECK(seen.size() == 10);  // full coverage of the dataset

    const auto p10 = idx.at(10);
    CHECK(p10.epoch == 1);

    // revisiting an earlier epoch reproduces the same picks
    pl::batch_indexer again(3, 10);
    CHECK(again.at(17).index == idx.at(17).index);
    CHECK(again.at(3).index == idx.at(3).index);
    CHECK_THROWS_AS(pl::batch_indexer(3, 0), nn::empty_dataset);
}

TEST_CASE("training on the toy set reduces the loss and beats chance") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);
    log_capture log;
    pl::checkpoint ck = pl::train_stage(cfg, data.train, log.fn());

    REQUIRE_FALSE(log.lines.empty());
    const auto first = nlohmann::json::parse(log.lines.front());
    const auto last = nlohmann::json::parse(log.lines.back());
    CHECK(first.at("phase") == "train");
    CHECK(first.at("iter").get<int>() == 5);
    CHECK(last.at("iter").get<int>() == 40);
    CHECK(last.at("loss").get<double>() < first.at("loss").get<double>());
    CHECK(ck.opt.iteration == 40);

    const double acc = pl::eval_stage(cfg, ck.model, data.test);
    CHECK(acc > 0.5);  // 3 classes, chance is 0.33
}

TEST_CASE("identical runs produce byte-identical checkpoints and logs") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);

    log_capture log_a, log_b;
    pl::checkpoint a = pl::train_stage(cfg, data.train, log_a.fn());
    pl::checkpoint b = pl::train_stage(cfg, data.train, log_b.fn());
    CHECK(pl::save_checkpoint(a) == pl::save_checkpoint(b));
    CHECK(log_a.lines == log_b.lines);

    auto cfg2 = cfg;
    cfg2.seed = 8;
    pl::checkpoint c = pl::train_stage(cfg2, data.train);
    CHECK_FALSE(pl::save_checkpoint(a) == pl::save_checkpoint(c));
}

TEST_CASE("resuming from a checkpoint is bit-exact") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);

    pl::checkpoint straight = pl::train_stage(cfg, data.train);

    auto cfg_half = cfg;
    cfg_half.iterations = 20;
    pl::checkpoint half = pl::train_stage(cfg_half, data.train);
    const auto bytes = pl::save_checkpoint(half);
    pl::checkpoint reloaded = pl::load_checkpoint(cfg, bytes);
    CHECK(reloaded.opt.iteration == 20);
    pl::checkpoint resumed = pl::train_stage(cfg, data.train, {}, &reloaded);

    CHECK(pl::save_checkpoint(resumed) == pl::save_checkpoint(straight));
}

TEST_CASE("checkpoints restore model, optimizer, masks, and codebooks") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);
    pl::checkpoint ck = pl::train_stage(cfg, data.train);
    pl::prune_stage(cfg, ck, data.train);
    pl::quantize_stage(cfg, ck, data.train);

    const auto bytes = pl::save_checkpoint(ck);
    pl::checkpoint back = pl::load_checkpoint(cfg, bytes);
    CHECK(back.has_masks);
    CHECK(back.opt.iteration == ck.opt.iteration);
    CHECK(back.q.bits == ck.q.bits);
    REQUIRE(back.q.layers.size() == ck.q.layers.size());
    for (std::size_t i = 0; i < ck.q.layers.size(); ++i) {
        CHECK(back.q.layers[i].codebook == ck.q.layers[i].codebook);
        CHECK(back.q.layers[i].index == ck.q.layers[i].index);
    }
    for (std::size_t i = 0; i < ck.dw.mask.size(); ++i)
        CHECK(back.dw.mask[i].data == ck.dw.mask[i].data);

    const auto again = pl::save_checkpoint(back);
    CHECK(again == bytes);
}

TEST_CASE("the prune stage reaches the configured density and logs events") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);
    pl::checkpoint ck = pl::train_stage(cfg, data.train);

    log_capture log;
    pl::prune_stage(cfg, ck, data.train, log.fn());
    CHECK(ck.has_masks);
    // 14 iterations at interval 2 fire 7 events; the ramp needs 5
    CHECK(ck.dw.events_done == 7);
    CHECK(ck.dw.density() == Catch::Approx(0.25).margin(0.02));

    bool saw_event = false;
    for (const auto& line : log.lines) {
        const auto j = nlohmann::json::parse(line);
        if (j.value("event", "") == "prune") {
            saw_event = true;
            CHECK(j.at("phase") == "prune");
            CHECK(j.contains("layer"));
            CHECK(j.contains("pruned"));
            CHECK(j.contains("total_pruned"));
            CHECK(j.contains("threshold"));
            CHECK(j.contains("layer_density"));
        }
    }
    CHECK(saw_event);

    // masked weights are zero in the stored model
    for (std::size_t i = 0; i < ck.dw.mask.size(); ++i) {
        if (ck.dw.mask[i].empty()) continue;
        for (std::size_t k = 0; k < ck.dw.mask[i].numel(); ++k)
            if (!ck.dw.mask[i].data[k]) CHECK(ck.model.nodes[i].weight.data[k] == 0.0f);
    }
}

TEST_CASE("the quantize stage snaps survivors onto per-layer codebooks") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);
    pl::checkpoint ck = pl::train_stage(cfg, data.train);
    pl::prune_stage(cfg, ck, data.train);
    pl::quantize_stage(cfg, ck, data.train);

    CHECK(ck.q.bits == 4);
    REQUIRE_FALSE(ck.q.layers.empty());
    for (const auto& l : ck.q.layers) {
        const auto& w = ck.model.nodes[std::size_t(l.node)].weight;
        const auto& mk = ck.dw.mask[std::size_t(l.node)];
        std::size_t k = 0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            if (mk.data[i])
                CHECK(w.data[i] == l.codebook[l.index[k++]]);
            else
                CHECK(w.data[i] == 0.0f);
        }
    }
}

TEST_CASE("packing after the full pipeline preserves accuracy bit for bit") {
    const auto cfg = tiny_config();
    const auto data = pl::make_toy_data(cfg);
    pl::checkpoint ck = pl::train_stage(cfg, data.train);
    pl::prune_stage(cfg, ck, data.train);
    pl::quantize_stage(cfg, ck, data.train);

    const auto packed = pl::pack_stage(ck);
    auto unpacked = pack::unpack_model<float>(packed);

    std::vector<float> logits_ck, logits_up;
    const double acc_ck = pl::eval_stage(cfg, ck.model, data.test, &logits_ck);
    const double acc_up = pl::eval_stage(cfg, unpacked, data.test, &logits_up);
    CHECK(acc_ck == acc_up);
    CHECK(logits_ck == logits_up);

    // the packed file is far smaller than the dense checkpoint encoding
    const auto dense = nn::write_dnse(nn::collect_model_tensors(ck.model));
    CHECK(packed.size() < dense.size() / 2);
}

TEST_CASE("a non-finite loss aborts the phase with a numeric error") {
    auto cfg = tiny_config();
    cfg.learning_rate = 1e18;  // guaranteed blow-up
    cfg.iterations = 30;
    const auto data = pl::make_toy_data(cfg);
    CHECK_THROWS_AS(pl::train_stage(cfg, data.train), numeric_error);
}
