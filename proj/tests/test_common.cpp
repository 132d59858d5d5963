#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <vector>

#include "inkstone/common.hpp"

using namespace inkstone;

TEST_CASE("mix64 and hash_str are deterministic and spread inputs") {
    CHECK(mix64(0) == mix64(0));
    CHECK(mix64(1) != mix64(2));
    CHECK(hash_str("alpha") == hash_str("alpha"));
    CHECK(hash_str("alpha") != hash_str("beta"));
    CHECK(hash_str("") != hash_str("a"));
}

TEST_CASE("rng streams are keyed, reproducible, and independent") {
    rng a = rng::from(42, {1, 2});
    rng b = rng::from(42, {1, 2});
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());

    rng c = rng::from(42, {1, 3});
    rng d = rng::from(42, {1, 2});
    bool differs = false;
    for (int i = 0; i < 16; ++i) differs |= (c.next_u64() != d.next_u64());
    CHECK(differs);

    rng e = rng::from(43, {1, 2});
    rng f = rng::from(42, {1, 2});
    differs = false;
    for (int i = 0; i < 16; ++i) differs |= (e.next_u64() != f.next_u64());
    CHECK(differs);

    // id order matters
    rng g = rng::from(42, {2, 1});
    rng h = rng::from(42, {1, 2});
    differs = false;
    for (int i = 0; i < 16; ++i) differs |= (g.next_u64() != h.next_u64());
    CHECK(differs);
}

TEST_CASE("rng draws stay inside their documented ranges") {
    rng r(123);
    for (int i = 0; i < 1000; ++i) {
        const double d = r.next_double();
        CHECK(d >= 0.0);
        CHECK(d < 1.0);
        const double u = r.uniform(-2.5, 4.0);
        CHECK(u >= -2.5);
        CHECK(u < 4.0);
        CHECK(r.below(7) < 7);
    }
}

TEST_CASE("rng normal has roughly standard moments") {
    rng r(7);
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("rng shuffle permutes deterministically") {
    std::vector<int> v(20);
    std::iota(v.begin(), v.end(), 0);
    std::vector<int> w = v;
    rng r1(5), r2(5);
    r1.shuffle(v);
    r2.shuffle(w);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> expect(20);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(sorted == expect);  // still a permutation
    CHECK(v != expect);       // and almost surely not identity for 20 elements
}

TEST_CASE("byte writer/reader round-trip every field type") {
    byte_writer w;
    w.u8(0xAB);
    w.u16(0xBEEF);
    w.u32(0xDEADBEEFu);
    w.u64(0x0123456789ABCDEFull);
    w.f32(3.25f);
    w.f32(-0.0f);
    w.str("hello");
    const std::vector<std::uint8_t> extra{9, 8, 7};
    w.raw(extra);
    CHECK(w.size() == 1 + 2 + 4 + 8 + 4 + 4 + 5 + 3);

    const auto bytes = w.take();
    byte_reader r(bytes);
    CHECK(r.u8() == 0xAB);
    CHECK(r.u16() == 0xBEEF);
    CHECK(r.u32() == 0xDEADBEEFu);
    CHECK(r.u64() == 0x0123456789ABCDEFull);
    CHECK(r.f32() == 3.25f);
    const float nz = r.f32();
    CHECK(nz == 0.0f);
    CHECK(std::signbit(nz));
    CHECK(r.str(5) == "hello");
    const auto tail = r.raw(3);
    CHECK(std::vector<std::uint8_t>(tail.begin(), tail.end()) == extra);
    CHECK(r.remaining() == 0);
}

TEST_CASE("byte_writer is little-endian") {
    byte_writer w;
    w.u32(0x01020304u);
    const auto& b = w.bytes();
    REQUIRE(b.size() == 4);
    CHECK(b[0] == 0x04);
    CHECK(b[1] == 0x03);
    CHECK(b[2] == 0x02);
    CHECK(b[3] == 0x01);
}

TEST_CASE("byte_reader reports the truncation offset") {
    std::vector<std::uint8_t> bytes{1, 2, 3};
    byte_reader r(bytes);
    r.u16();
    try {
        r.u32();
        FAIL("expected truncated_input");
    } catch (const truncated_input& e) {
        CHECK(e.offset == 2);  // read position when the short field started
    }

    byte_reader r2(bytes);
    CHECK_THROWS_AS(r2.u64(), truncated_input);
    CHECK_THROWS_AS(byte_reader(std::span<const std::uint8_t>{}).u8(), truncated_input);
}

TEST_CASE("crc32 matches the standard reference value") {
    const std::string s = "123456789";
    std::vector<std::uint8_t> bytes(s.begin(), s.end());
    CHECK(crc32(bytes) == 0xCBF43926u);
    CHECK(crc32(std::span<const std::uint8_t>{}) == 0u);

    // different data, different checksum
    bytes[0] ^= 1;
    CHECK(crc32(bytes) != 0xCBF43926u);
}

TEST_CASE("error hierarchy preserves messages") {
    CHECK_THROWS_WITH(throw config_error("bad knob"), "bad knob");
    try {
        throw truncated_input(17);
    } catch (const data_error& e) {
        CHECK(std::string(e.what()).find("17") != std::string::npos);
    }
    CHECK(is_finite(1.0));
    CHECK_FALSE(is_finite(std::nan("")));
    CHECK_FALSE(is_finite(INFINITY));
}
