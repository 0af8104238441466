// SPDX-License-Identifier: Apache-2.0
#pragma once

// Named parameter sets, per-parameter statistics, and the MATSCKPT container.
//
// File layout (all integers little-endian):
//   [0,8)    magic "MATSCKPT"
//   [8]      version (1)
//   [9]      kind (0 = checkpoint, 1 = stats)
//   [10,18)  u64 header length H
//   [18,18+H) UTF-8 JSON header, keys sorted
//   payload  row-major IEEE-754 binary64 values, entries in header-key order
//   trailer  u32 CRC-32 of the payload

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mats/error.hpp"
#include "mats/tensor.hpp"

namespace mats {

enum class Role { linear_weight, vector };

inline const char* to_string(Role r) { return r == Role::linear_weight ? "linear_weight" : "vector"; }

// A parameter tensor. Vectors are stored as a single row (1×n).
struct Param {
    Role role = Role::linear_weight;
    Matrix value;

    static Param weight(Matrix w) { return {Role::linear_weight, std::move(w)}; }
    static Param vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return {Role::vector, Matrix(1, n, std::move(v))};
    }

    std::vector<std::size_t> shape() const {
        if (role == Role::vector) return {value.size()};
        return {value.rows(), value.cols()};
    }

    friend bool operator==(const Param&, const Param&) = default;
};

struct Checkpoint {
    std::map<std::string, Param> entries;
    std::map<std::string, std::string> provenance;

    const Param& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ContractError("checkpoint has no parameter '" + name + "'");
        return it->second;
    }
    Param& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ContractError("checkpoint has no parameter '" + name + "'");
        return it->second;
    }

    std::string task() const {
        auto it = provenance.find("task");
        return it == provenance.end() ? std::string() : it->second;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : entries) n += p.value.size();
        return n;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

enum class FisherMode { empirical, true_fisher };

inline const char* to_string(FisherMode m) {
    return m == FisherMode::empirical ? "empirical" : "true";
}

inline FisherMode parse_fisher_mode(const std::string& s) {
    if (s == "empirical") return FisherMode::empirical;
    if (s == "true") return FisherMode::true_fisher;
    throw ConfigError("unknown fisher mode '" + s + "' (expected empirical|true)");
}

struct LayerStats {
    Matrix diag_fisher;                 // shaped like the parameter
    std::optional<Matrix> input_gram;   // d×d, linear weights only
    std::optional<Matrix> outgrad_gram; // k×k, linear weights only
    std::optional<Matrix> exact_fisher; // n×n, vector parameters only
    std::uint64_t n_examples = 0;

    friend bool operator==(const LayerStats&, const LayerStats&) = default;
};

struct StatsBundle {
    std::map<std::string, LayerStats> layers;
    FisherMode fisher_mode = FisherMode::empirical;
    std::string split = "validation";
    std::uint64_t example_count = 0;
    std::map<std::string, std::string> provenance;

    const LayerStats* find(const std::string& name) const {
        auto it = layers.find(name);
        return it == layers.end() ? nullptr : &it->second;
    }

    friend bool operator==(const StatsBundle&, const StatsBundle&) = default;
};

// Throws MergeabilityError naming the first parameter whose presence, role or
// shape differs from the first checkpoint.
inline void assert_mergeable(std::span<const Checkpoint> models) {
    if (models.empty()) throw MergeabilityError("assert_mergeable: empty model list");
    const Checkpoint& ref = models.front();
    for (std::size_t m = 1; m < models.size(); ++m) {
        const Checkpoint& other = models[m];
        auto a = ref.entries.begin();
        auto b = other.entries.begin();
        while (a != ref.entries.end() || b != other.entries.end()) {
            if (a == ref.entries.end() || (b != other.entries.end() && b->first < a->first))
                throw MergeabilityError("parameter '" + b->first + "' missing from model 0");
            if (b == other.entries.end() || a->first < b->first)
                throw MergeabilityError("parameter '" + a->first + "' missing from model " +
                                        std::to_string(m));
            if (a->second.role != b->second.role || a->second.shape() != b->second.shape())
                throw MergeabilityError("parameter '" + a->first + "' has shape " +
                                        a->second.value.shape_string() + " in model 0 but " +
                                        b->second.value.shape_string() + " in model " +
                                        std::to_string(m));
            ++a;
            ++b;
        }
    }
}

namespace detail {

inline constexpr char kMagic[8] = {'M', 'A', 'T', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kPreamble = 18;

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
    return v;
}
inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
    return v;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < bytes.size()) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
        crc = ::crc32(crc, bytes.data() + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

struct Blob {
    std::string role;
    std::vector<std::size_t> shape;
    const Matrix* data;
};

inline std::vector<std::uint8_t> encode_container(std::uint8_t kind,
                                                  const std::map<std::string, Blob>& blobs,
                                                  nlohmann::json header) {
    nlohmann::json entries = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, blob] : blobs) {
        const std::uint64_t length = 8ull * blob.data->size();
        entries[name] = {{"shape", blob.shape},
                         {"role", blob.role},
                         {"offset", offset},
                         {"length", length}};
        offset += length;
    }
    header["entries"] = std::move(entries);
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.reserve(kPreamble + text.size() + offset + 4);
    out.push_back(kVersion);
    out.push_back(kind);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t payload_start = out.size();
    for (const auto& [_, blob] : blobs)
        for (double v : blob.data->values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    const std::uint32_t crc =
        crc32_of(std::span<const std::uint8_t>(out).subspan(payload_start));
    put_u32(out, crc);
    return out;
}

struct DecodedBlob {
    std::string role;
    std::vector<std::size_t> shape;
    Matrix value;
};

struct DecodedContainer {
    std::uint8_t kind = 0;
    nlohmann::json header;
    std::map<std::string, DecodedBlob> blobs;
};

inline DecodedContainer decode_container(std::span<const std::uint8_t> in) {
    if (in.size() < kPreamble) throw FormatError("file shorter than the fixed preamble", in.size());
    if (!std::equal(std::begin(kMagic), std::end(kMagic), in.begin()))
        throw FormatError("bad magic", 0);
    if (in[8] != kVersion)
        throw FormatError("unknown version " + std::to_string(in[8]), 8);
    DecodedContainer out;
    out.kind = in[9];
    if (out.kind > 1) throw FormatError("unknown kind " + std::to_string(out.kind), 9);
    const std::uint64_t hlen = get_u64(in, 10);
    if (hlen > in.size() - kPreamble) throw FormatError("truncated header", in.size());
    const std::size_t payload_start = kPreamble + hlen;
    if (in.size() - payload_start < 4) throw FormatError("truncated payload", in.size());
    const std::size_t payload_len = in.size() - payload_start - 4;

    try {
        out.header = nlohmann::json::parse(in.begin() + kPreamble, in.begin() + payload_start);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed JSON header: ") + e.what(), kPreamble);
    }
    if (!out.header.is_object() || !out.header.contains("entries") ||
        !out.header["entries"].is_object())
        throw FormatError("header lacks an entries object", kPreamble);

    std::uint64_t expected = 0;
    try {
        for (const auto& [name, e] : out.header["entries"].items()) {
            DecodedBlob blob;
            blob.role = e.at("role").get<std::string>();
            blob.shape = e.at("shape").get<std::vector<std::size_t>>();
            const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
            const std::uint64_t length = e.at("length").get<std::uint64_t>();
            if (blob.shape.empty() || blob.shape.size() > 2)
                throw FormatError("entry '" + name + "' has unsupported rank", kPreamble);
            std::uint64_t count = 1;
            for (auto s : blob.shape) count *= s;
            if (length != 8 * count)
                throw FormatError("entry '" + name + "' length disagrees with shape", kPreamble);
            if (offset > payload_len || length > payload_len - offset)
                throw FormatError("truncated payload for entry '" + name + "'",
                                  payload_start + std::min<std::uint64_t>(offset, payload_len));
            std::vector<double> values(count);
            for (std::uint64_t i = 0; i < count; ++i)
                values[i] = std::bit_cast<double>(get_u64(in, payload_start + offset + 8 * i));
            const std::size_t rows = blob.shape.size() == 2 ? blob.shape[0] : 1;
            const std::size_t cols = blob.shape.size() == 2 ? blob.shape[1] : blob.shape[0];
            blob.value = Matrix(rows, cols, std::move(values));
            expected += length;
            out.blobs.emplace(name, std::move(blob));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed entry: ") + e.what(), kPreamble);
    }
    if (expected != payload_len)
        throw FormatError("payload length " + std::to_string(payload_len) +
                              " does not match entries (" + std::to_string(expected) + ")",
                          payload_start);
    const std::uint32_t stored = get_u32(in, payload_start + payload_len);
    const std::uint32_t actual = crc32_of(in.subspan(payload_start, payload_len));
    if (stored != actual) throw FormatError("checksum mismatch", payload_start + payload_len);
    return out;
}

inline std::map<std::string, std::string> provenance_from(const nlohmann::json& header,
                                                          std::uint64_t at) {
    std::map<std::string, std::string> out;
    if (!header.contains("provenance")) return out;
    try {
        out = header["provenance"].get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception&) {
        throw FormatError("provenance must map strings to strings", at);
    }
    return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
    std::map<std::string, detail::Blob> blobs;
    for (const auto& [name, p] : ckpt.entries) blobs[name] = {to_string(p.role), p.shape(), &p.value};
    nlohmann::json header = {{"provenance", ckpt.provenance}};
    return detail::encode_container(0, blobs, std::move(header));
}

inline std::vector<std::uint8_t> encode(const StatsBundle& stats) {
    std::map<std::string, detail::Blob> blobs;
    for (const auto& [name, s] : stats.layers) {
        std::vector<std::size_t> dshape = {s.diag_fisher.rows(), s.diag_fisher.cols()};
        // A single-row diagonal Fisher belongs to a vector parameter.
        if (s.diag_fisher.rows() == 1 && !s.input_gram) dshape = {s.diag_fisher.cols()};
        blobs[name + "/diag_fisher"] = {"diag_fisher", dshape, &s.diag_fisher};
        auto add = [&](const std::optional<Matrix>& m, const char* role) {
            if (m) blobs[name + "/" + role] = {role, {m->rows(), m->cols()}, &*m};
        };
        add(s.input_gram, "input_gram");
        add(s.outgrad_gram, "outgrad_gram");
        add(s.exact_fisher, "exact_fisher");
    }
    nlohmann::json header = {{"provenance", stats.provenance},
                             {"fisher_mode", to_string(stats.fisher_mode)},
                             {"split", stats.split},
                             {"example_count", stats.example_count}};
    return detail::encode_container(1, blobs, std::move(header));
}

using Artifact = std::variant<Checkpoint, StatsBundle>;

inline Artifact decode(std::span<const std::uint8_t> bytes) {
    detail::DecodedContainer c = detail::decode_container(bytes);
    const std::uint64_t hdr = detail::kPreamble;
    if (c.kind == 0) {
        Checkpoint ckpt;
        ckpt.provenance = detail::provenance_from(c.header, hdr);
        for (auto& [name, blob] : c.blobs) {
            Role role;
            if (blob.role == "linear_weight" && blob.shape.size() == 2)
                role = Role::linear_weight;
            else if (blob.role == "vector" && blob.shape.size() == 1)
                role = Role::vector;
            else
                throw FormatError("entry '" + name + "' has invalid role/shape", hdr);
            ckpt.entries.emplace(name, Param{role, std::move(blob.value)});
        }
        return ckpt;
    }
    StatsBundle stats;
    stats.provenance = detail::provenance_from(c.header, hdr);
    try {
        stats.fisher_mode = parse_fisher_mode(c.header.at("fisher_mode").get<std::string>());
        stats.split = c.header.at("split").get<std::string>();
        stats.example_count = c.header.at("example_count").get<std::uint64_t>();
    } catch (const std::exception& e) {
        throw FormatError(std::string("bad stats metadata: ") + e.what(), hdr);
    }
    for (auto& [key, blob] : c.blobs) {
        const auto slash = key.rfind('/');
        if (slash == std::string::npos)
            throw FormatError("stats entry '" + key + "' lacks a statistic suffix", hdr);
        const std::string name = key.substr(0, slash);
        const std::string stat = key.substr(slash + 1);
        if (stat != blob.role) throw FormatError("stats entry '" + key + "' role mismatch", hdr);
        LayerStats& s = stats.layers[name];
        s.n_examples = stats.example_count;
        if (stat == "diag_fisher")
            s.diag_fisher = std::move(blob.value);
        else if (stat == "input_gram")
            s.input_gram = std::move(blob.value);
        else if (stat == "outgrad_gram")
            s.outgrad_gram = std::move(blob.value);
        else if (stat == "exact_fisher")
            s.exact_fisher = std::move(blob.value);
        else
            throw FormatError("unknown statistic '" + stat + "'", hdr);
    }
    for (const auto& [name, s] : stats.layers)
        if (s.diag_fisher.empty())
            throw FormatError("stats for '" + name + "' lack a diagonal Fisher", hdr);
    return stats;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to '" + path + "' failed");
}

inline void save(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode(ckpt)); }
inline void save(const std::string& path, const StatsBundle& stats) { write_file(path, encode(stats)); }

inline Artifact load(const std::string& path) { return decode(read_file(path)); }

inline Checkpoint load_checkpoint(const std::string& path) {
    Artifact a = load(path);
    if (auto* c = std::get_if<Checkpoint>(&a)) return std::move(*c);
    throw FormatError("'" + path + "' holds statistics, not a checkpoint", 9);
}

inline StatsBundle load_stats(const std::string& path) {
    Artifact a = load(path);
    if (auto* s = std::get_if<StatsBundle>(&a)) return std::move(*s);
    throw FormatError("'" + path + "' holds a checkpoint, not statistics", 9);
}

}  // namespace mats
