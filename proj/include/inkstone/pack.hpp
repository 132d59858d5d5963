// Packed model container ("DWPK"): a self-describing, CRC-checked file that
// stores a pruned + quantized network losslessly and small.
//
// Layout (little-endian):
//   magic "DWPK", u16 version=1,
//   u16 id_len + architecture id (see zoo fingerprints),
//   u32 block_count, then blocks.
//
// Block: u8 kind (0 dense, 1 sparse-quant), u16 name_len + tensor name,
// u8 rank, u32 dims[rank], u32 payload_len, payload, u32 crc32 over the block
// bytes from `kind` through the payload.
//
// Dense payload: float32 values, row-major.
//
// Sparse-quant payload: u32 total_weights, u32 survivor_count,
// u32 entry_count, u8 bits, then three sections:
//   deltas    entry_count bytes. Positions start at -1; delta d in 0..254
//             places a survivor at prev+d+1; d == 255 is a filler that only
//             advances the position by 255 (its index field is written as 0
//             and ignored). Fillers bridge gaps longer than 255.
//   indices   entry_count fields of `bits` bits each, packed LSB-first;
//             ceil(entry_count*bits/8) bytes.
//   codebook  2^bits float32 centroids.
// Survivor i takes the value codebook[index_i]; masked weights are zero.
//
// Readers fail with bad_magic, version_mismatch, truncated_block,
// checksum_fail or inconsistent_state; a file that loads is bit-exact.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inkstone/common.hpp"
#include "inkstone/dropweight.hpp"
#include "inkstone/nn.hpp"
#include "inkstone/quant.hpp"
#include "inkstone/zoo.hpp"

namespace inkstone::pack {

using nn::tensor;

struct pack_error : data_error {
    using data_error::data_error;
};
struct bad_magic : pack_error {
    bad_magic() : pack_error("not a packed model file (bad magic)") {}
};
struct version_mismatch : pack_error {
    explicit version_mismatch(int got)
        : pack_error("unsupported packed model version " + std::to_string(got)) {}
};
struct truncated_block : pack_error {
    explicit truncated_block(std::size_t offset)
        : pack_error("packed model truncated at byte " + std::to_string(offset)) {}
};
struct checksum_fail : pack_error {
    explicit checksum_fail(const std::string& block)
        : pack_error("checksum mismatch in block " + block) {}
};
struct inconsistent_state : pack_error {
    using pack_error::pack_error;
};

inline constexpr std::uint8_t kBlockDense = 0;
inline constexpr std::uint8_t kBlockSparseQuant = 1;
inline constexpr std::uint8_t kFillerDelta = 255;

// --------------------------------------------------------------------------
// Survivor-position delta coding
// --------------------------------------------------------------------------

// Encodes ascending survivor positions into delta bytes; returns the number of
// filler entries inserted.
inline std::size_t encode_deltas(std::span<const std::uint32_t> positions, std::vector<std::uint8_t>& deltas,
                                 std::vector<bool>& is_filler) {
    deltas.clear();
    is_filler.clear();
    std::size_t fillers = 0;
    std::int64_t prev = -1;
    for (const std::uint32_t pos : positions) {
        std::int64_t gap = std::int64_t(pos) - prev;
        if (gap <= 0) throw inconsistent_state("survivor positions must be strictly ascending");
        while (gap > 255) {
            deltas.push_back(kFillerDelta);
            is_filler.push_back(true);
            gap -= 255;
            ++fillers;
        }
        deltas.push_back(std::uint8_t(gap - 1));
        is_filler.push_back(false);
        prev = pos;
    }
    return fillers;
}

inline std::vector<std::uint32_t> decode_deltas(std::span<const std::uint8_t> deltas, std::size_t total_weights) {
    std::vector<std::uint32_t> positions;
    std::int64_t prev = -1;
    for (const std::uint8_t d : deltas) {
        if (d == kFillerDelta) {
            prev += 255;
            continue;
        }
        prev += std::int64_t(d) + 1;
        if (prev < 0 || std::uint64_t(prev) >= total_weights)
            throw inconsistent_state("survivor position " + std::to_string(prev) + " out of range");
        positions.push_back(std::uint32_t(prev));
    }
    return positions;
}

// --------------------------------------------------------------------------
// LSB-first bit packing for codebook indices
// --------------------------------------------------------------------------

inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> values, int bits) {
    const std::size_t total_bits = values.size() * std::size_t(bits);
    std::vector<std::uint8_t> out((total_bits + 7) / 8, 0);
    std::size_t bitpos = 0;
    for (const std::uint32_t v : values) {
        for (int b = 0; b < bits; ++b, ++bitpos)
            if ((v >> b) & 1u) out[bitpos >> 3] |= std::uint8_t(1u << (bitpos & 7));
    }
    return out;
}

inline std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
    if (bytes.size() < (count * std::size_t(bits) + 7) / 8)
        throw inconsistent_state("index section shorter than entry count requires");
    std::vector<std::uint32_t> out(count, 0);
    std::size_t bitpos = 0;
    for (std::size_t i = 0; i < count; ++i)
        for (int b = 0; b < bits; ++b, ++bitpos)
            if (bytes[bitpos >> 3] & (1u << (bitpos & 7))) out[i] |= 1u << b;
    return out;
}

// --------------------------------------------------------------------------
// Writing
// --------------------------------------------------------------------------

namespace detail {

inline void append_block(byte_writer& w, std::uint8_t kind, const std::string& name,
                         std::span<const int> shape, std::span<const std::uint8_t> payload) {
    byte_writer blk;
    blk.u8(kind);
    blk.u16(std::uint16_t(name.size()));
    blk.str(name);
    blk.u8(std::uint8_t(shape.size()));
    for (int d : shape) blk.u32(std::uint32_t(d));
    blk.u32(std::uint32_t(payload.size()));
    blk.raw(payload);
    const std::vector<std::uint8_t> bytes = blk.take();
    const std::uint32_t crc = crc32(bytes);
    w.raw(bytes);
    w.u32(crc);
}

inline std::vector<std::uint8_t> dense_payload(const tensor<float>& t) {
    byte_writer p;
    for (float v : t.data) p.f32(v);
    return p.take();
}

}  // namespace detail

// Packs a model: prunable layers with both a mask and a codebook become
// sparse-quant blocks; every other stored tensor is a dense block. Pass null
// state to write an all-dense pack.
template <class T>
std::vector<std::uint8_t> pack_model(const nn::model_graph<T>& m,
                                     const dropweight::dropweight_state<T>* dw = nullptr,
                                     const quant::quant_state* q = nullptr) {
    const nn::named_tensors ts = nn::collect_model_tensors(m);
    byte_writer w;
    w.str("DWPK");
    w.u16(1);
    if (m.fingerprint.size() > 0xffff) throw inconsistent_state("architecture id too long");
    w.u16(std::uint16_t(m.fingerprint.size()));
    w.str(m.fingerprint);
    w.u32(std::uint32_t(ts.items.size()));

    for (const auto& [name, t] : ts.items) {
        const quant::quant_layer* ql = nullptr;
        int node_idx = -1;
        if (q && dw)
            for (const auto& l : q->layers)
                if (l.name == name && !dw->mask[std::size_t(l.node)].empty()) {
                    ql = &l;
                    node_idx = l.node;
                    break;
                }
        if (!ql) {
            detail::append_block(w, kBlockDense, name, t.shape, detail::dense_payload(t));
            continue;
        }
        const auto& mask = dw->mask[std::size_t(node_idx)];
        std::vector<std::uint32_t> positions;
        positions.reserve(ql->index.size());
        for (std::size_t i = 0; i < mask.numel(); ++i)
            if (mask.data[i]) positions.push_back(std::uint32_t(i));
        if (positions.size() != ql->index.size())
            throw inconsistent_state("mask survivors disagree with codebook indices in " + name);

        std::vector<std::uint8_t> deltas;
        std::vector<bool> is_filler;
        encode_deltas(positions, deltas, is_filler);
        // one index field per entry; fillers carry index 0
        std::vector<std::uint32_t> fields(deltas.size(), 0);
        for (std::size_t e = 0, s = 0; e < deltas.size(); ++e)
            if (!is_filler[e]) fields[e] = ql->index[s++];

        byte_writer p;
        p.u32(std::uint32_t(t.numel()));
        p.u32(std::uint32_t(positions.size()));
        p.u32(std::uint32_t(deltas.size()));
        p.u8(std::uint8_t(q->bits));
        p.raw(deltas);
        const std::vector<std::uint8_t> idx_bytes = pack_bits(fields, q->bits);
        p.raw(idx_bytes);
        for (float c : ql->codebook) p.f32(c);
        detail::append_block(w, kBlockSparseQuant, name, t.shape, p.take());
    }
    return w.take();
}

// --------------------------------------------------------------------------
// Reading
// --------------------------------------------------------------------------

struct block_info {
    std::string name;
    std::uint8_t kind = kBlockDense;
    std::vector<int> shape;
    std::size_t block_bytes = 0;    // whole block including crc
    std::size_t payload_bytes = 0;
    // sparse-quant breakdown (zero for dense blocks)
    std::size_t delta_bytes = 0, index_bytes = 0, codebook_bytes = 0;
    std::size_t survivors = 0, entries = 0;
    int bits = 0;
};

struct size_report_t {
    std::size_t file_bytes = 0;
    std::size_t header_bytes = 0;
    std::string fingerprint;
    std::vector<block_info> blocks;
};

namespace detail {

struct parsed_pack {
    size_report_t report;
    nn::named_tensors tensors;  // sparse blocks already expanded to dense
};

inline parsed_pack parse(std::span<const std::uint8_t> bytes) {
    byte_reader r(bytes);
    parsed_pack out;
    try {
        if (r.remaining() < 4 || r.str(4) != "DWPK") throw bad_magic();
        const std::uint16_t version = r.u16();
        if (version != 1) throw version_mismatch(version);
        out.report.fingerprint = r.str(r.u16());
        const std::uint32_t block_count = r.u32();
        out.report.header_bytes = r.pos();
        out.report.file_bytes = bytes.size();

        for (std::uint32_t bi = 0; bi < block_count; ++bi) {
            const std::size_t block_start = r.pos();
            block_info info;
            info.kind = r.u8();
            info.name = r.str(r.u16());
            const int rank = r.u8();
            info.shape.resize(std::size_t(rank));
            std::size_t numel = 1;
            for (auto& d : info.shape) {
                d = int(r.u32());
                numel *= std::size_t(d);
            }
            info.payload_bytes = r.u32();
            if (r.remaining() < info.payload_bytes + 4) throw truncated_block(r.pos());
            const std::size_t payload_start = r.pos();
            const std::uint32_t crc_expect =
                crc32(bytes.subspan(block_start, payload_start + info.payload_bytes - block_start));

            tensor<float> t(info.shape);
            if (info.kind == kBlockDense) {
                if (info.payload_bytes != numel * 4)
                    throw inconsistent_state("dense block " + info.name + " has wrong payload size");
                for (auto& v : t.data) v = r.f32();
            } else if (info.kind == kBlockSparseQuant) {
                const std::uint32_t total = r.u32();
                const std::uint32_t survivors = r.u32();
                const std::uint32_t entries = r.u32();
                info.bits = r.u8();
                if (info.bits < 1 || info.bits > 16)
                    throw inconsistent_state("block " + info.name + " has invalid bit width");
                if (total != numel)
                    throw inconsistent_state("block " + info.name + " dims disagree with weight count");
                if (entries < survivors)
                    throw inconsistent_state("block " + info.name + " has fewer entries than survivors");
                info.survivors = survivors;
                info.entries = entries;
                info.delta_bytes = entries;
                info.index_bytes = (std::size_t(entries) * info.bits + 7) / 8;
                info.codebook_bytes = (std::size_t(1) << info.bits) * 4;
                if (info.payload_bytes != 13 + info.delta_bytes + info.index_bytes + info.codebook_bytes)
                    throw inconsistent_state("block " + info.name + " has wrong payload size");
                std::vector<std::uint8_t> deltas(entries);
                for (auto& d : deltas) d = r.u8();
                std::vector<std::uint8_t> idx_bytes(info.index_bytes);
                for (auto& b : idx_bytes) b = r.u8();
                std::vector<float> codebook(std::size_t(1) << info.bits);
                for (auto& c : codebook) c = r.f32();

                const std::vector<std::uint32_t> positions = decode_deltas(deltas, numel);
                if (positions.size() != survivors)
                    throw inconsistent_state("block " + info.name + " decodes to " +
                                             std::to_string(positions.size()) + " survivors, header says " +
                                             std::to_string(survivors));
                const std::vector<std::uint32_t> fields = unpack_bits(idx_bytes, entries, info.bits);
                std::size_t s = 0;
                for (std::size_t e = 0; e < deltas.size(); ++e) {
                    if (deltas[e] == kFillerDelta) continue;
                    t.data[positions[s]] = codebook[fields[e]];
                    ++s;
                }
            } else {
                throw inconsistent_state("unknown block kind " + std::to_string(info.kind) + " in " + info.name);
            }
            const std::uint32_t crc_got = r.u32();
            if (crc_got != crc_expect) throw checksum_fail(info.name);
            info.block_bytes = r.pos() - block_start;
            out.report.blocks.push_back(std::move(info));
            out.tensors.add(out.report.blocks.back().name, std::move(t));
        }
        if (r.remaining() != 0) throw inconsistent_state("trailing bytes after final block");
    } catch (const truncated_input& e) {
        throw truncated_block(e.offset);
    }
    return out;
}

}  // namespace detail

// Rebuilds the full model from a packed file. The result is bit-exact: every
// stored tensor equals the packed representation.
template <class T>
nn::model_graph<T> unpack_model(std::span<const std::uint8_t> bytes) {
    detail::parsed_pack p = detail::parse(bytes);
    nn::model_graph<T> m = zoo::build_from_fingerprint<T>(p.report.fingerprint);
    try {
        nn::apply_model_tensors(m, p.tensors);
    } catch (const nn::checkpoint_error& e) {
        throw inconsistent_state(e.what());
    }
    return m;
}

// Itemized sizes; the section totals add up to exactly the file length.
inline size_report_t size_report(std::span<const std::uint8_t> bytes) {
    return detail::parse(bytes).report;
}

}  // namespace inkstone::pack
