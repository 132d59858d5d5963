#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "inkstone/ink.hpp"
#include "oracles.hpp"

using namespace inkstone;
using ink::dataset;
using ink::point;
using ink::stroke;
using ink::trajectory;

namespace {

dataset tiny_dataset() {
    dataset d;
    d.class_count = 3;
    trajectory a;
    a.label = 0;
    a.strokes = {{{0.0, 0.0}, {0.5, 0.25}, {1.0, 1.0}}, {{-1.0, 0.5}, {0.0, -0.5}}};
    trajectory b;
    b.label = 2;
    b.strokes = {{{0.25, -0.75}, {-0.125, 0.5}}};
    d.items = {a, b};
    return d;
}

}  // namespace

TEST_CASE("format names resolve") {
    CHECK(ink::format_from_name("ink-json") == ink::format_tag::ink_json);
    CHECK(ink::format_from_name("ink-bin") == ink::format_tag::ink_bin);
    CHECK_THROWS_AS(ink::format_from_name("csv"), config_error);
}

TEST_CASE("json lines round-trip a dataset exactly") {
    const dataset d = tiny_dataset();
    const auto bytes = ink::serialize_trajectory_file(d, ink::format_tag::ink_json);
    const dataset back = ink::parse_trajectory_file(bytes, ink::format_tag::ink_json, d.class_count);
    REQUIRE(back.items.size() == d.items.size());
    CHECK(back.items[0] == d.items[0]);
    CHECK(back.items[1] == d.items[1]);
}

TEST_CASE("binary format round-trips float32 coordinates exactly") {
    dataset d = tiny_dataset();  // all coordinates chosen float32-representable
    const auto bytes = ink::serialize_trajectory_file(d, ink::format_tag::ink_bin);
    const dataset back = ink::parse_trajectory_file(bytes, ink::format_tag::ink_bin, d.class_count);
    REQUIRE(back.items.size() == d.items.size());
    CHECK(back.items[0] == d.items[0]);
    CHECK(back.items[1] == d.items[1]);
}

TEST_CASE("malformed json records report the offending line offset") {
    const std::string text =
        "{\"label\":0,\"strokes\":[[[0,0],[1,1]]]}\n"
        "this is not json\n";
    const std::vector<std::uint8_t> bytes(text.begin(), text.end());
    try {
        ink::parse_trajectory_file(bytes, ink::format_tag::ink_json, {});
        FAIL("expected malformed_record");
    } catch (const ink::malformed_record& e) {
        CHECK(e.offset == 38);  // byte where the bad line starts
    }
}

TEST_CASE("json parser rejects structural mistakes") {
    auto parse_one = [](const std::string& line) {
        std::vector<std::uint8_t> b(line.begin(), line.end());
        return ink::parse_trajectory_file(b, ink::format_tag::ink_json, {});
    };
    CHECK_THROWS_AS(parse_one("[1,2,3]\n"), ink::malformed_record);                          // not an object
    CHECK_THROWS_AS(parse_one("{\"strokes\":[[[0,0],[1,1]]]}\n"), ink::malformed_record);    // no label
    CHECK_THROWS_AS(parse_one("{\"label\":0}\n"), ink::malformed_record);                    // no strokes
    CHECK_THROWS_AS(parse_one("{\"label\":-1,\"strokes\":[[[0,0]]]}\n"), ink::malformed_record);
    CHECK_THROWS_AS(parse_one("{\"label\":0,\"strokes\":[[[0,0],[1]]]}\n"), ink::malformed_record);
    CHECK_THROWS_AS(parse_one("{\"label\":0,\"strokes\":[[]]}\n"), ink::empty_stroke);
    CHECK_THROWS_AS(parse_one("{\"label\":0,\"strokes\":[]}\n"), ink::empty_stroke);
}

TEST_CASE("binary parser flags truncation and bad headers") {
    dataset d = tiny_dataset();
    auto bytes = ink::serialize_trajectory_file(d, ink::format_tag::ink_bin);

    auto cut = bytes;
    cut.resize(bytes.size() - 5);
    CHECK_THROWS_AS(ink::parse_trajectory_file(cut, ink::format_tag::ink_bin, {}), ink::malformed_record);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(ink::parse_trajectory_file(bad_magic, ink::format_tag::ink_bin, {}), ink::malformed_record);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(ink::parse_trajectory_file(bad_version, ink::format_tag::ink_bin, {}), ink::malformed_record);
}

TEST_CASE("labels outside the class range are rejected") {
    dataset d = tiny_dataset();  // contains label 2
    const auto bytes = ink::serialize_trajectory_file(d, ink::format_tag::ink_bin);
    CHECK_THROWS_AS(ink::parse_trajectory_file(bytes, ink::format_tag::ink_bin, 2), ink::label_out_of_range);
    CHECK_NOTHROW(ink::parse_trajectory_file(bytes, ink::format_tag::ink_bin, 3));
}

TEST_CASE("normalize maps a known box to known coordinates") {
    trajectory t;
    t.label = 0;
    t.strokes = {{{0.0, 0.0}, {20.0, 10.0}}};
    const trajectory n = ink::normalize(t);
    // bbox center (10,5), longer side 20 spans [-1,1]
    CHECK(n.strokes[0][0].x == Catch::Approx(-1.0));
    CHECK(n.strokes[0][0].y == Catch::Approx(-0.5));
    CHECK(n.strokes[0][1].x == Catch::Approx(1.0));
    CHECK(n.strokes[0][1].y == Catch::Approx(0.5));
}

TEST_CASE("normalize is idempotent and handles degenerate input") {
    const trajectory t = oracles::random_trajectory(2, 12, 99);
    const trajectory once = ink::normalize(t);
    const trajectory twice = ink::normalize(once);
    REQUIRE(once.strokes.size() == twice.strokes.size());
    for (std::size_t s = 0; s < once.strokes.size(); ++s)
        for (std::size_t i = 0; i < once.strokes[s].size(); ++i) {
            CHECK(twice.strokes[s][i].x == Catch::Approx(once.strokes[s][i].x).margin(1e-12));
            CHECK(twice.strokes[s][i].y == Catch::Approx(once.strokes[s][i].y).margin(1e-12));
        }

    trajectory single;
    single.label = 0;
    single.strokes = {{{3.0, 4.0}}};
    const trajectory ns = ink::normalize(single);
    CHECK(ns.strokes[0][0].x == 0.0);
    CHECK(ns.strokes[0][0].y == 0.0);
}

TEST_CASE("normalized output always fits the unit box") {
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        trajectory t = oracles::random_trajectory(3, 10, seed);
        for (auto& s : t.strokes)
            for (auto& p : s) {
                p.x = p.x * 37.0 - 11.0;
                p.y = p.y * 0.01 + 5.0;
            }
        const trajectory n = ink::normalize(t);
        double mx = 0.0;
        for (const auto& s : n.strokes)
            for (const auto& p : s) mx = std::max({mx, std::abs(p.x), std::abs(p.y)});
        CHECK(mx <= 1.0 + 1e-12);
        CHECK(mx == Catch::Approx(1.0));  // longest side touches the box
    }
}

TEST_CASE("resample_stroke spaces points uniformly along the path") {
    stroke s{{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}};  // length 2 "L"
    const stroke r = ink::resample_stroke(s, 5);
    REQUIRE(r.size() == 5);
    CHECK(r.front().x == Catch::Approx(0.0));
    CHECK(r.back().y == Catch::Approx(1.0));
    // half the path ends exactly at the corner
    CHECK(r[2].x == Catch::Approx(1.0));
    CHECK(r[2].y == Catch::Approx(0.0).margin(1e-12));
    // uniform spacing: each gap is 0.5 long
    for (std::size_t i = 1; i < r.size(); ++i) {
        const double d = std::hypot(r[i].x - r[i - 1].x, r[i].y - r[i - 1].y);
        CHECK(d == Catch::Approx(0.5));
    }
}

TEST_CASE("resample_stroke handles degenerate strokes") {
    const stroke one{{0.25, -0.5}};
    const stroke r = ink::resample_stroke(one, 4);
    REQUIRE(r.size() == 4);
    for (const auto& p : r) {
        CHECK(p.x == 0.25);
        CHECK(p.y == -0.5);
    }
}

TEST_CASE("resample_step targets the requested spacing") {
    trajectory t;
    t.label = 0;
    t.strokes = {{{0.0, 0.0}, {1.0, 0.0}}};  // length 1
    const trajectory r = ink::resample_step(t, 0.1);
    REQUIRE(r.strokes.size() == 1);
    CHECK(r.strokes[0].size() == 11);  // round(1/0.1)+1
    for (std::size_t i = 1; i < r.strokes[0].size(); ++i) {
        const double d = r.strokes[0][i].x - r.strokes[0][i - 1].x;
        CHECK(d == Catch::Approx(0.1));
    }
    CHECK_THROWS_AS(ink::resample_step(t, 0.0), config_error);
    CHECK_THROWS_AS(ink::resample_step(t, -1.0), config_error);
}

TEST_CASE("validate rejects empty and non-finite trajectories") {
    trajectory t;
    t.label = 0;
    CHECK_THROWS_AS(ink::validate(t), ink::empty_stroke);
    t.strokes = {{}};
    CHECK_THROWS_AS(ink::validate(t), ink::empty_stroke);
    t.strokes = {{{0.0, std::nan("")}}};
    CHECK_THROWS_AS(ink::validate(t), ink::malformed_record);
    t.strokes = {{{0.0, 1.0}}};
    CHECK_NOTHROW(ink::validate(t));
}

TEST_CASE("toy dataset generation is deterministic and well-formed") {
    const dataset a = ink::gen_toy_dataset(5, 3, 77);
    const dataset b = ink::gen_toy_dataset(5, 3, 77);
    REQUIRE(a.items.size() == 15);
    REQUIRE(b.items.size() == 15);
    for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i] == b.items[i]);

    // labels run class-major
    for (int c = 0; c < 5; ++c)
        for (int i = 0; i < 3; ++i) CHECK(a.items[std::size_t(c * 3 + i)].label == c);

    // coordinates are normalized and exactly float32-representable,
    // so the binary format round-trips the generator output losslessly
    for (const auto& t : a.items)
        for (const auto& s : t.strokes)
            for (const auto& p : s) {
                CHECK(std::abs(p.x) <= 1.0);
                CHECK(std::abs(p.y) <= 1.0);
                CHECK(p.x == double(float(p.x)));
                CHECK(p.y == double(float(p.y)));
            }
    const auto bytes = ink::serialize_trajectory_file(a, ink::format_tag::ink_bin);
    const dataset back = ink::parse_trajectory_file(bytes, ink::format_tag::ink_bin, a.class_count);
    for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(back.items[i] == a.items[i]);
}

TEST_CASE("toy dataset differs across seeds and samples") {
    const dataset a = ink::gen_toy_dataset(3, 2, 1);
    const dataset b = ink::gen_toy_dataset(3, 2, 2);
    CHECK_FALSE(a.items[0] == b.items[0]);
    CHECK_FALSE(a.items[0] == a.items[1]);  // per-sample jitter
}
