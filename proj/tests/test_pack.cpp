#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <vector>

#include "inkstone/pack.hpp"
#include "inkstone/quant.hpp"
#include "inkstone/zoo.hpp"
#include "oracles.hpp"

using namespace inkstone;
using nn::tensor;
namespace dw = inkstone::dropweight;

namespace {

struct packed_model {
    nn::model_graph<float> model;
    dw::dropweight_state<float> st;
    quant::quant_state q;
    std::vector<std::uint8_t> bytes;
};

packed_model make_packed(std::uint64_t seed, double prune_fraction = 0.6, int bits = 4) {
    packed_model p;
    p.model = zoo::build_model<float>(zoo::family::streamlined, zoo::head_kind::gap, 0.05, 7, 32, 32, 3);
    nn::init_params(p.model, seed);
    dw::prune_config pc;
    pc.target_fraction = prune_fraction;
    pc.ramp_events = 2;
    p.st = dw::dropweight_state<float>::init(p.model, pc);
    dw::dropweight_event(p.model, p.st);
    dw::dropweight_event(p.model, p.st);
    p.q = quant::quantize_model(p.model, p.st, bits, seed);
    p.bytes = pack::pack_model(p.model, &p.st, &p.q);
    return p;
}

void check_models_equal(const nn::model_graph<float>& a, const nn::model_graph<float>& b) {
    REQUIRE(a.nodes.size() == b.nodes.size());
    const auto ta = nn::collect_model_tensors(a);
    const auto tb = nn::collect_model_tensors(b);
    REQUIRE(ta.items.size() == tb.items.size());
    for (std::size_t i = 0; i < ta.items.size(); ++i) {
        CHECK(ta.items[i].first == tb.items[i].first);
        CHECK(ta.items[i].second.shape == tb.items[i].second.shape);
        REQUIRE(ta.items[i].second.data.size() == tb.items[i].second.data.size());
        // bit-exact, including signed zeros
        CHECK(std::memcmp(ta.items[i].second.data.data(), tb.items[i].second.data.data(),
                          ta.items[i].second.data.size() * sizeof(float)) == 0);
    }
}

}  // namespace

TEST_CASE("delta coding round-trips survivor positions") {
    const std::vector<std::uint32_t> positions{0, 1, 5, 260, 515, 1000};
    std::vector<std::uint8_t> deltas;
    std::vector<bool> fillers;
    pack::encode_deltas(positions, deltas, fillers);
    CHECK(pack::decode_deltas(deltas, 1001) == positions);
}

TEST_CASE("gaps wider than 255 produce fillers") {
    const std::vector<std::uint32_t> positions{0, 300};
    std::vector<std::uint8_t> deltas;
    std::vector<bool> fillers;
    pack::encode_deltas(positions, deltas, fillers);
    REQUIRE(deltas.size() == 3);  // survivor, filler, survivor
    CHECK(deltas[0] == 0);
    CHECK(deltas[1] == 255);      // advances 255 without emitting
    CHECK(deltas[2] == 300 - 255 - 0 - 1);
    CHECK(fillers == std::vector<bool>{false, true, false});
    CHECK(pack::decode_deltas(deltas, 301) == positions);

    // a gap of exactly 255 still fits one byte (delta 254)
    const std::vector<std::uint32_t> tight{0, 255};
    pack::encode_deltas(tight, deltas, fillers);
    CHECK(deltas.size() == 2);
    CHECK(deltas[1] == 254);
}

TEST_CASE("delta coding rejects non-ascending positions and range overflow") {
    std::vector<std::uint8_t> deltas;
    std::vector<bool> fillers;
    CHECK_THROWS_AS(pack::encode_deltas(std::vector<std::uint32_t>{5, 5}, deltas, fillers),
                    pack::inconsistent_state);
    CHECK_THROWS_AS(pack::encode_deltas(std::vector<std::uint32_t>{5, 2}, deltas, fillers),
                    pack::inconsistent_state);

    pack::encode_deltas(std::vector<std::uint32_t>{0, 300}, deltas, fillers);
    CHECK_THROWS_AS(pack::decode_deltas(deltas, 300), pack::inconsistent_state);  // 300 outside [0,300)
}

TEST_CASE("bit packing is LSB-first and round-trips") {
    const std::vector<std::uint32_t> vals{1, 2, 3, 0, 7, 5};
    const auto bytes = pack::pack_bits(vals, 3);
    CHECK(bytes.size() == (6 * 3 + 7) / 8);
    CHECK(pack::unpack_bits(bytes, vals.size(), 3) == vals);

    // first value occupies the lowest bits of byte 0
    CHECK((bytes[0] & 0x7u) == 1u);

    CHECK_THROWS_AS(pack::unpack_bits(std::vector<std::uint8_t>{0xFF}, 9, 3), pack::inconsistent_state);
}

TEST_CASE("section sizes follow the documented formulas") {
    // 1000 weights, the first 100 surviving, 6-bit codebook
    std::vector<std::uint32_t> positions(100);
    for (std::uint32_t i = 0; i < 100; ++i) positions[i] = i;
    std::vector<std::uint8_t> deltas;
    std::vector<bool> fillers;
    pack::encode_deltas(positions, deltas, fillers);
    CHECK(deltas.size() == 100);  // contiguous survivors: one byte each, no fillers

    const auto idx = pack::pack_bits(std::vector<std::uint32_t>(100, 0), 6);
    CHECK(idx.size() == 75);  // 100 * 6 bits = 600 bits

    CHECK((std::size_t(1) << 6) * 4 == 256);  // codebook bytes
}

TEST_CASE("packed models round-trip bit-exactly") {
    auto p = make_packed(42);
    auto back = pack::unpack_model<float>(p.bytes);
    CHECK(back.fingerprint == p.model.fingerprint);
    check_models_equal(p.model, back);
}

TEST_CASE("dense-only packs (no prune, no quant state) round-trip too") {
    auto m = zoo::build_model<float>(zoo::family::inception, zoo::head_kind::gap, 0.1, 7, 32, 32, 4);
    nn::init_params(m, 8);
    const auto bytes = pack::pack_model(m);
    auto back = pack::unpack_model<float>(bytes);
    check_models_equal(m, back);

    const auto rep = pack::size_report(bytes);
    for (const auto& blk : rep.blocks) CHECK(blk.kind == pack::kBlockDense);
}

TEST_CASE("sparse blocks appear exactly for quantized prunable tensors") {
    auto p = make_packed(7);
    const auto rep = pack::size_report(p.bytes);
    std::size_t sparse = 0, dense = 0;
    for (const auto& blk : rep.blocks) {
        if (blk.kind == pack::kBlockSparseQuant) {
            ++sparse;
            CHECK(blk.bits == 4);
            CHECK(blk.codebook_bytes == 16 * 4);
            CHECK(blk.survivors > 0);
            CHECK(blk.entries >= blk.survivors);
            CHECK(blk.payload_bytes == 13 + blk.delta_bytes + blk.index_bytes + blk.codebook_bytes);
        } else {
            ++dense;
        }
    }
    CHECK(sparse == p.q.layers.size());
    CHECK(dense == rep.blocks.size() - sparse);
}

TEST_CASE("the size report accounts for every byte in the file") {
    auto p = make_packed(3);
    const auto rep = pack::size_report(p.bytes);
    CHECK(rep.file_bytes == p.bytes.size());
    CHECK(rep.fingerprint == p.model.fingerprint);
    std::size_t total = rep.header_bytes;
    for (const auto& blk : rep.blocks) total += blk.block_bytes;
    CHECK(total == rep.file_bytes);
}

TEST_CASE("harder pruning never enlarges the file") {
    const auto light = make_packed(5, 0.3);
    const auto heavy = make_packed(5, 0.9);
    CHECK(heavy.bytes.size() < light.bytes.size());
}

TEST_CASE("each kind of damage raises its own error") {
    auto p = make_packed(11);
    const auto& good = p.bytes;

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(pack::unpack_model<float>(bad_magic), pack::bad_magic);

    auto bad_version = good;
    bad_version[4] = 3;
    CHECK_THROWS_AS(pack::unpack_model<float>(bad_version), pack::version_mismatch);

    auto truncated = good;
    truncated.resize(truncated.size() - 7);
    CHECK_THROWS_AS(pack::unpack_model<float>(truncated), pack::truncated_block);

    // flip the last byte of the first block (inside its crc field): the
    // content no longer matches the stored checksum
    const auto rep = pack::size_report(good);
    auto flipped = good;
    flipped[rep.header_bytes + rep.blocks[0].block_bytes - 1] ^= 0x40;
    CHECK_THROWS_AS(pack::unpack_model<float>(flipped), pack::checksum_fail);

    // and a flip inside the payload itself is caught the same way
    auto payload_flip = good;
    payload_flip[rep.header_bytes + rep.blocks[0].block_bytes - 6] ^= 0x40;
    CHECK_THROWS_AS(pack::unpack_model<float>(payload_flip), pack::checksum_fail);

    auto trailing = good;
    trailing.push_back(0);
    CHECK_THROWS_AS(pack::unpack_model<float>(trailing), pack::inconsistent_state);

    // damage confined to one block's payload is caught by that block's crc
    // even when the length fields still parse
    CHECK_NOTHROW(pack::unpack_model<float>(good));
}

TEST_CASE("unknown architecture ids are rejected on unpack") {
    auto m = zoo::build_model<float>(zoo::family::streamlined, zoo::head_kind::gap, 0.05, 7, 32, 32, 3);
    nn::init_params(m, 2);
    m.fingerprint = "streamlined-gap-w0.05-7x32x32-c3";
    auto good = pack::pack_model(m);
    CHECK_NOTHROW(pack::unpack_model<float>(good));

    m.fingerprint = "mystery-gap-w0.05-7x32x32-c3";
    auto bad = pack::pack_model(m);
    CHECK_THROWS_AS(pack::unpack_model<float>(bad), config_error);
}

TEST_CASE("many random models survive the pack/unpack cycle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const double fraction = 0.2 + 0.07 * double(seed);
        const int bits = 2 + int(seed % 6);
        auto p = make_packed(seed, fraction, bits);
        auto back = pack::unpack_model<float>(p.bytes);
        check_models_equal(p.model, back);
    }
}
