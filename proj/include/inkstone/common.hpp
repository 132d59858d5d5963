// Shared plumbing: error hierarchy, deterministic RNG, little-endian byte IO, CRC32.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace inkstone {

// ---------------------------------------------------------------------------
// Errors. Three broad categories map onto CLI exit codes (config=2, data=3,
// numeric=4); concrete error types live in the module that raises them.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : error {
    using error::error;
};

struct data_error : error {
    using error::error;
};

struct numeric_error : error {
    using error::error;
};

// Raised by byte_reader when input ends mid-field.
struct truncated_input : data_error {
    explicit truncated_input(std::size_t at)
        : data_error("input truncated at byte " + std::to_string(at)), offset(at) {}
    std::size_t offset;
};

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// splitmix64 keyed by (seed, stream ids...). Every stochastic choice in the
// toolkit derives its own generator from a seed plus a handful of ids
// (epoch, sample index, tensor name hash, ...) instead of consuming one
// global sequential stream. That makes runs reproducible bit-for-bit and
// lets training resume from a checkpoint without replaying RNG history.
// ---------------------------------------------------------------------------

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
    // FNV-1a, then one mix round to spread short strings.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return mix64(h);
}

class rng {
  public:
    explicit rng(std::uint64_t seed) : state_(mix64(seed)) {}

    static rng from(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
        std::uint64_t s = mix64(seed);
        for (std::uint64_t id : ids) s = mix64(s ^ mix64(id));
        rng r(0);
        r.state_ = s;
        return r;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1), 53-bit resolution
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // standard normal via Box-Muller (fully specified, no libstdc++ dependence)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = next_double();
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, n); n > 0
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

  private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Little-endian byte IO
// ---------------------------------------------------------------------------

class byte_writer {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        buf_.push_back(std::uint8_t(v));
        buf_.push_back(std::uint8_t(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void str(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& bytes() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

  private:
    std::vector<std::uint8_t> buf_;
};

class byte_reader {
  public:
    explicit byte_reader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(data_[pos_]) | std::uint16_t(data_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw truncated_input(pos_);
    }
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// CRC32 (zlib polynomial)
// ---------------------------------------------------------------------------

namespace detail {
inline const std::uint32_t* crc32_table() {
    static const auto table = [] {
        static std::uint32_t t[256];
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}
}  // namespace detail

inline std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t seed = 0) {
    const std::uint32_t* t = detail::crc32_table();
    std::uint32_t c = seed ^ 0xffffffffu;
    for (std::uint8_t b : data) c = t[(c ^ b) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

inline bool is_finite(double v) { return std::isfinite(v); }

// Round a double to its nearest float32 value and widen it back. The float is
// materialized through a volatile so the round-trip survives optimizers that
// fold (double)(float)x to x (GCC 11's SLP vectorizer does this at -O3);
// callers rely on the result being exactly float32-representable.
inline double snap_to_float(double v) {
    volatile float f = static_cast<float>(v);
    return double(f);
}

}  // namespace inkstone
