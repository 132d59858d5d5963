#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "inkstone/quant.hpp"
#include "inkstone/zoo.hpp"
#include "oracles.hpp"

using namespace inkstone;
using nn::tensor;
namespace dw = inkstone::dropweight;

namespace {

nn::model_graph<float> small_model() {
    zoo::detail::builder<float> b;
    int x = b.input(2, 12, 12);
    x = b.cba(x, 8, 1, "c1");
    x = b.pool(x, "p1");
    x = b.cba(x, 8, 1, "c2");
    b.finish(b.fc(b.gap(x, "g"), 4, true, "out"), 4);
    nn::init_params(b.g, 5);
    return std::move(b.g);
}

double codebook_mse(std::span<const float> values, std::span<const float> cb) {
    double e = 0.0;
    for (float v : values) {
        const double d = double(v) - double(cb[quant::nearest_centroid(cb, v)]);
        e += d * d;
    }
    return e / double(values.size());
}

}  // namespace

TEST_CASE("bit widths outside [1,16] are rejected") {
    CHECK_THROWS_AS(quant::check_bits(0), config_error);
    CHECK_THROWS_AS(quant::check_bits(17), config_error);
    CHECK_NOTHROW(quant::check_bits(1));
    CHECK_NOTHROW(quant::check_bits(16));
    CHECK_THROWS_AS(quant::kmeans_codebook(std::vector<float>{}, 4), data_error);
}

TEST_CASE("nearest centroid lookup breaks ties toward the lower index") {
    const std::vector<float> cb{-1.0f, 0.0f, 1.0f};
    CHECK(quant::nearest_centroid(cb, -0.9f) == 0);
    CHECK(quant::nearest_centroid(cb, 0.2f) == 1);
    CHECK(quant::nearest_centroid(cb, 2.0f) == 2);
    CHECK(quant::nearest_centroid(cb, -0.5f) == 0);  // exactly between 0 and 1
    CHECK(quant::nearest_centroid(cb, 0.5f) == 1);
}

TEST_CASE("few distinct values saturate the codebook exactly") {
    const std::vector<float> vals{0.5f, -0.25f, 0.5f, 0.75f, -0.25f};
    const auto cb = quant::kmeans_codebook(vals, 2);  // 4 entries, 3 distinct
    REQUIRE(cb.size() == 4);
    CHECK(cb[0] == -0.25f);
    CHECK(cb[1] == 0.5f);
    CHECK(cb[2] == 0.75f);
    CHECK(cb[3] == 0.75f);  // padded with the largest value
    // every input is represented exactly
    for (float v : vals) CHECK(cb[quant::nearest_centroid(cb, v)] == v);
}

TEST_CASE("codebooks are sorted, deterministic, and ignore the seed") {
    auto vals = oracles::random_tensor<float>({4096}, 3, -0.2, 0.2).data;
    const auto a = quant::kmeans_codebook(vals, 4, 1);
    const auto b = quant::kmeans_codebook(vals, 4, 999);
    CHECK(a == b);
    REQUIRE(a.size() == 16);
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i] >= a[i - 1]);
}

TEST_CASE("iterating k-means improves on the linear-init codebook") {
    // skew the distribution so linear init is clearly suboptimal
    auto vals = oracles::random_tensor<float>({4096}, 7, -0.2, 0.2).data;
    for (auto& v : vals) v = v * v * (v > 0 ? 1.0f : -1.0f);

    const std::size_t K = 16;
    std::vector<float> lin(K);
    float lo = *std::min_element(vals.begin(), vals.end());
    float hi = *std::max_element(vals.begin(), vals.end());
    for (std::size_t j = 0; j < K; ++j)
        lin[j] = lo + (hi - lo) * float(j) / float(K - 1);

    const auto cb = quant::kmeans_codebook(vals, 4);
    CHECK(codebook_mse(vals, cb) < codebook_mse(vals, lin));
}

TEST_CASE("more bits never hurt the fit") {
    auto vals = oracles::random_tensor<float>({2048}, 9, -1.0, 1.0).data;
    double prev = 1e9;
    for (int bits : {2, 3, 4, 5, 6}) {
        const double mse = codebook_mse(vals, quant::kmeans_codebook(vals, bits));
        CHECK(mse <= prev + 1e-12);
        prev = mse;
    }
}

TEST_CASE("quantizing a model snaps survivors onto the codebook and keeps zeros") {
    auto m = small_model();
    dw::prune_config pc;
    pc.target_fraction = 0.5;
    pc.ramp_events = 1;
    auto st = dw::dropweight_state<float>::init(m, pc);
    dw::dropweight_event(m, st);

    const auto q = quant::quantize_model(m, st, 4);
    CHECK(q.bits == 4);
    CHECK(q.layers.size() == 3);  // c1, c2, out weights

    for (const auto& l : q.layers) {
        const auto& w = m.nodes[std::size_t(l.node)].weight;
        const auto& mk = st.mask[std::size_t(l.node)];
        REQUIRE(l.codebook.size() == 16);
        std::set<float> allowed(l.codebook.begin(), l.codebook.end());
        std::size_t k = 0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            if (mk.data[i]) {
                CHECK(allowed.count(w.data[i]) == 1);
                CHECK(w.data[i] == l.codebook[l.index[k]]);
                ++k;
            } else {
                CHECK(w.data[i] == 0.0f);
            }
        }
        CHECK(k == l.index.size());
    }

    // unpruned tensors (BN, bias, slope) are untouched by quantization
    CHECK(q.find(0) == nullptr);
}

TEST_CASE("a fine-tune step moves each centroid by the summed gradient") {
    auto m = small_model();
    auto st = dw::dropweight_state<float>::init(m, dw::prune_config{.target_fraction = 0.5, .ramp_events = 1});
    dw::dropweight_event(m, st);
    auto q = quant::quantize_model(m, st, 3);

    // gradient of 1 on every weight entry: g_c = survivor count of centroid c
    auto grads = nn::param_set<float>::like(m);
    for (auto& n : grads.nodes)
        if (!n.w.empty()) n.w.fill(1.0f);

    const auto& l0 = q.layers[0];
    std::vector<std::size_t> cnt(l0.codebook.size(), 0);
    for (auto idx : l0.index) cnt[idx]++;
    const std::vector<float> before = l0.codebook;

    quant::finetune_step(m, grads, st, q, 0.01);
    for (std::size_t c = 0; c < before.size(); ++c)
        CHECK(q.layers[0].codebook[c] ==
              Catch::Approx(double(before[c]) - 0.01 * double(cnt[c])).margin(1e-7));

    // weights follow the moved codebook exactly and masked entries stay zero
    const auto& w = m.nodes[std::size_t(l0.node)].weight;
    const auto& mk = st.mask[std::size_t(l0.node)];
    std::size_t k = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        if (mk.data[i])
            CHECK(w.data[i] == q.layers[0].codebook[l0.index[k++]]);
        else
            CHECK(w.data[i] == 0.0f);
    }
}

TEST_CASE("fine-tuning reduces the training loss on a fixed batch") {
    auto m = small_model();
    auto st = dw::dropweight_state<float>::init(m, dw::prune_config{.target_fraction = 0.3, .ramp_events = 1});
    dw::dropweight_event(m, st);
    auto q = quant::quantize_model(m, st, 4);

    const auto x = oracles::random_tensor<float>({8, 2, 12, 12}, 21);
    const auto labels = oracles::random_labels(8, 4, 22);

    auto loss_now = [&]() {
        nn::forward_state<float> fs;
        nn::forward(m, x, true, labels, fs);
        return fs.loss_value;
    };
    const double before = loss_now();
    for (int i = 0; i < 10; ++i) {
        nn::forward_state<float> fs;
        nn::forward(m, x, true, labels, fs);
        auto grads = nn::param_set<float>::like(m);
        nn::backward(m, fs, grads);
        quant::finetune_step(m, grads, st, q, 0.05);
    }
    CHECK(loss_now() < before);
}

TEST_CASE("quantization state rides in checkpoints and round-trips") {
    auto m = small_model();
    auto st = dw::dropweight_state<float>::init(m, dw::prune_config{.target_fraction = 0.4, .ramp_events = 1});
    dw::dropweight_event(m, st);
    auto q = quant::quantize_model(m, st, 5);

    nn::named_tensors ts;
    quant::append_quant_tensors(m, q, ts);
    REQUIRE(ts.find("quant.bits") != nullptr);
    CHECK(ts.find("quant.bits")->data[0] == 5.0f);
    CHECK(ts.find("quant.c1.w.codebook") != nullptr);
    CHECK(ts.find("quant.c1.w.index") != nullptr);

    const auto bytes = nn::write_dnse(ts);
    const auto q2 = quant::load_quant_tensors(m, nn::read_dnse(bytes));
    REQUIRE(q2.layers.size() == q.layers.size());
    CHECK(q2.bits == 5);
    for (std::size_t i = 0; i < q.layers.size(); ++i) {
        CHECK(q2.layers[i].node == q.layers[i].node);
        CHECK(q2.layers[i].name == q.layers[i].name);
        CHECK(q2.layers[i].codebook == q.layers[i].codebook);
        CHECK(q2.layers[i].index == q.layers[i].index);
    }

    // no quant tensors -> empty state
    const auto q3 = quant::load_quant_tensors(m, nn::named_tensors{});
    CHECK(q3.layers.empty());
}
