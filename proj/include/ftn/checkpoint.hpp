#pragma once

// Named-tensor checkpoint container ("FTNC" files).
//
// Layout, all integers little-endian regardless of host:
//
//   offset  size  field
//        0     4  magic "FTNC"
//        4     4  u32 format version (currently 1)
//        8     4  u32 endianness marker 0x01020304
//       12     4  u32 flags (reserved, must be 0)
//       16     8  u64 manifest length in bytes
//       24     8  u64 index length in bytes
//       32     8  u64 payload length in bytes
//       40    32  SHA-256 of the payload bytes
//       72     -  manifest (JSON object, UTF-8) | index | payload
//
// The index is a packed sequence of entries, one per tensor, sorted by name:
//   u16 name length, name bytes, u8 precision (1 = f32, 2 = f64), u8 rank,
//   u64 dims[rank], u64 byte offset into the payload.
// Entries cover non-overlapping payload ranges and together account for the
// whole payload, so identical contents always produce identical files.
//
// Read errors carry a code distinguishing wrong file type (kBadMagic),
// unsupported version (kBadVersion), corrupted or truncated payload
// (kBadDigest), and any other structural damage (kBadLayout). The digest is
// checked over the payload range the header declares, before the index or
// manifest are trusted, so a file chopped mid-payload reports kBadDigest
// rather than a parse error.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ftn/sha256.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

enum class CheckpointError { kBadMagic, kBadVersion, kBadDigest, kBadLayout };

inline const char* checkpoint_error_name(CheckpointError e) {
    switch (e) {
        case CheckpointError::kBadMagic: return "bad_magic";
        case CheckpointError::kBadVersion: return "bad_version";
        case CheckpointError::kBadDigest: return "bad_digest";
        case CheckpointError::kBadLayout: return "bad_layout";
    }
    return "unknown";
}

class CheckpointReadError : public std::runtime_error {
public:
    CheckpointReadError(CheckpointError code, const std::string& what)
        : std::runtime_error(std::string("checkpoint: ") + checkpoint_error_name(code) + ": " +
                             what),
          code_(code) {}

    CheckpointError code() const { return code_; }

private:
    CheckpointError code_;
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'F', 'T', 'N', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kEndianMarker = 0x01020304u;
constexpr std::size_t kCheckpointHeaderSize = 72;
constexpr std::size_t kMaxTensorRank = 16;

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// Bounds-checked little-endian cursor over a byte range; running past the end
// is structural damage, reported as kBadLayout by whoever owns the range.
class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t len, const char* what)
        : data_(data), len_(len), what_(what) {}

    bool done() const { return pos_ == len_; }
    std::size_t pos() const { return pos_; }

    std::uint16_t u16() {
        const std::uint8_t* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (std::uint16_t{p[1]} << 8));
    }

    std::uint32_t u32() {
        const std::uint8_t* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        const std::uint8_t* p = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
        return v;
    }

    std::string str(std::size_t n) {
        const std::uint8_t* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

    const std::uint8_t* take(std::size_t n) {
        if (n > len_ - pos_) {
            throw CheckpointReadError(CheckpointError::kBadLayout,
                                      std::string(what_) + " truncated");
        }
        const std::uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }

private:
    const std::uint8_t* data_;
    std::size_t len_;
    std::size_t pos_ = 0;
    const char* what_;
};

template <typename T>
void pack_values(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < t.numel(); ++i) {
        Bits b;
        std::memcpy(&b, t.data() + i, sizeof(T));
        if constexpr (sizeof(T) == 4) {
            put_u32(out, b);
        } else {
            put_u64(out, b);
        }
    }
}

template <typename T>
Tensor<T> unpack_values(const std::uint8_t* bytes, Shape shape) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<T> vals(shape_numel(shape));
    for (std::size_t i = 0; i < vals.size(); ++i) {
        Bits b = 0;
        for (std::size_t j = 0; j < sizeof(T); ++j) {
            b |= Bits{bytes[i * sizeof(T) + j]} << (8 * j);
        }
        std::memcpy(&vals[i], &b, sizeof(T));
    }
    return Tensor<T>(std::move(shape), std::move(vals));
}

}  // namespace detail

class Checkpoint {
public:
    using TensorValue = std::variant<Tensor<float>, Tensor<double>>;

    nlohmann::json manifest = nlohmann::json::object();

    void put(const std::string& name, Tensor<float> t) { store(name, std::move(t)); }
    void put(const std::string& name, Tensor<double> t) { store(name, std::move(t)); }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }
    std::size_t tensor_count() const { return tensors_.size(); }

    const Tensor<float>& f32(const std::string& name) const { return get<float>(name, "f32"); }
    const Tensor<double>& f64(const std::string& name) const { return get<double>(name, "f64"); }

    const std::map<std::string, TensorValue>& tensors() const { return tensors_; }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (auto it = tensors_.lower_bound(prefix); it != tensors_.end(); ++it) {
            if (it->first.compare(0, prefix.size(), prefix) != 0) break;
            out.push_back(it->first);
        }
        return out;
    }

    // Digest of every tensor whose name starts with "backbone/", covering the
    // structure (name, precision, dims) as well as the raw values. Adapter
    // training must leave this unchanged; the trainer aborts if it moves.
    std::string backbone_digest() const { return prefix_digest("backbone/"); }

    std::string prefix_digest(const std::string& prefix) const {
        Sha256 h;
        std::vector<std::uint8_t> scratch;
        for (auto it = tensors_.lower_bound(prefix); it != tensors_.end(); ++it) {
            if (it->first.compare(0, prefix.size(), prefix) != 0) break;
            scratch.clear();
            append_entry_bytes(scratch, it->first, it->second, 0);
            std::visit([&](const auto& t) { detail::pack_values(scratch, t); }, it->second);
            h.update(scratch.data(), scratch.size());
        }
        return hex_digest(h.finish());
    }

    std::vector<std::uint8_t> serialize() const {
        const std::string manifest_text = manifest.dump();

        std::vector<std::uint8_t> index;
        std::vector<std::uint8_t> payload;
        for (const auto& [name, value] : tensors_) {
            append_entry_bytes(index, name, value, payload.size());
            std::visit([&](const auto& t) { detail::pack_values(payload, t); }, value);
        }

        const auto digest = Sha256::of(payload.data(), payload.size());

        std::vector<std::uint8_t> out;
        out.reserve(detail::kCheckpointHeaderSize + manifest_text.size() + index.size() +
                    payload.size());
        out.insert(out.end(), detail::kCheckpointMagic, detail::kCheckpointMagic + 4);
        detail::put_u32(out, detail::kCheckpointVersion);
        detail::put_u32(out, detail::kEndianMarker);
        detail::put_u32(out, 0);
        detail::put_u64(out, manifest_text.size());
        detail::put_u64(out, index.size());
        detail::put_u64(out, payload.size());
        out.insert(out.end(), digest.begin(), digest.end());
        out.insert(out.end(), manifest_text.begin(), manifest_text.end());
        out.insert(out.end(), index.begin(), index.end());
        out.insert(out.end(), payload.begin(), payload.end());
        return out;
    }

    static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
        using detail::kCheckpointHeaderSize;

        if (bytes.size() < 4 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 4) != 0) {
            throw CheckpointReadError(CheckpointError::kBadMagic, "not a checkpoint file");
        }
        if (bytes.size() < kCheckpointHeaderSize) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "header truncated");
        }

        detail::ByteReader header(bytes.data() + 4, kCheckpointHeaderSize - 4, "header");
        const std::uint32_t version = header.u32();
        if (version != detail::kCheckpointVersion) {
            throw CheckpointReadError(CheckpointError::kBadVersion,
                                      "unsupported version " + std::to_string(version));
        }
        const std::uint32_t endian = header.u32();
        if (endian != detail::kEndianMarker) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "bad endianness marker");
        }
        const std::uint32_t flags = header.u32();
        if (flags != 0) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "reserved flags set");
        }
        const std::uint64_t manifest_len = header.u64();
        const std::uint64_t index_len = header.u64();
        const std::uint64_t payload_len = header.u64();
        std::array<std::uint8_t, 32> stored_digest;
        std::memcpy(stored_digest.data(), header.take(32), 32);

        // Verify the payload against the declared range before trusting any
        // of the variable-length sections. A truncated file hashes short and
        // fails here with kBadDigest instead of surfacing as a parse error.
        const std::uint64_t manifest_off = kCheckpointHeaderSize;
        const std::uint64_t index_off = manifest_off + manifest_len;
        const std::uint64_t payload_off = index_off + index_len;
        if (index_off < manifest_off || payload_off < index_off ||
            payload_off + payload_len < payload_off) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "section lengths overflow");
        }
        const std::uint64_t avail_begin = std::min<std::uint64_t>(payload_off, bytes.size());
        const std::uint64_t avail_end =
            std::min<std::uint64_t>(payload_off + payload_len, bytes.size());
        const auto digest = Sha256::of(bytes.data() + avail_begin, avail_end - avail_begin);
        if (avail_end - avail_begin != payload_len ||
            std::memcmp(digest.data(), stored_digest.data(), 32) != 0) {
            throw CheckpointReadError(CheckpointError::kBadDigest,
                                      "payload does not match stored digest");
        }
        if (bytes.size() != payload_off + payload_len) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "trailing bytes after payload");
        }

        Checkpoint out;
        try {
            out.manifest = nlohmann::json::parse(bytes.begin() + manifest_off,
                                                 bytes.begin() + index_off);
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointReadError(CheckpointError::kBadLayout,
                                      std::string("manifest: ") + e.what());
        }
        if (!out.manifest.is_object()) {
            throw CheckpointReadError(CheckpointError::kBadLayout, "manifest is not an object");
        }

        detail::ByteReader index(bytes.data() + index_off, index_len, "index");
        const std::uint8_t* payload = bytes.data() + payload_off;
        std::uint64_t expect_offset = 0;
        while (!index.done()) {
            const std::uint16_t name_len = index.u16();
            if (name_len == 0) {
                throw CheckpointReadError(CheckpointError::kBadLayout, "empty tensor name");
            }
            const std::string name = index.str(name_len);
            const std::uint8_t precision = *index.take(1);
            const std::uint8_t rank = *index.take(1);
            if ((precision != 1 && precision != 2) || rank > detail::kMaxTensorRank) {
                throw CheckpointReadError(CheckpointError::kBadLayout,
                                          "bad descriptor for tensor \"" + name + "\"");
            }
            Shape shape(rank);
            std::uint64_t count = 1;
            for (std::uint8_t i = 0; i < rank; ++i) {
                const std::uint64_t d = index.u64();
                if (d == 0 || (count != 0 && d > UINT64_MAX / count)) {
                    throw CheckpointReadError(CheckpointError::kBadLayout,
                                              "bad dims for tensor \"" + name + "\"");
                }
                shape[i] = static_cast<std::size_t>(d);
                count *= d;
            }
            const std::uint64_t offset = index.u64();
            const std::uint64_t elem = precision == 1 ? 4 : 8;
            if (count > UINT64_MAX / elem || offset != expect_offset ||
                offset + count * elem > payload_len) {
                throw CheckpointReadError(
                    CheckpointError::kBadLayout,
                    "payload range for tensor \"" + name + "\" is out of place");
            }
            expect_offset = offset + count * elem;
            if (out.tensors_.count(name) != 0) {
                throw CheckpointReadError(CheckpointError::kBadLayout,
                                          "duplicate tensor \"" + name + "\"");
            }
            if (precision == 1) {
                out.tensors_.emplace(name,
                                     detail::unpack_values<float>(payload + offset, shape));
            } else {
                out.tensors_.emplace(name,
                                     detail::unpack_values<double>(payload + offset, shape));
            }
        }
        if (expect_offset != payload_len) {
            throw CheckpointReadError(CheckpointError::kBadLayout,
                                      "index does not cover the payload");
        }
        return out;
    }

    void save(const std::string& path) const {
        const std::vector<std::uint8_t> bytes = serialize();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::invalid_argument("checkpoint: cannot open " + path + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("checkpoint: short write to " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::invalid_argument("checkpoint: cannot open " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }

private:
    template <typename T>
    void store(const std::string& name, Tensor<T> t) {
        if (name.empty() || name.size() > UINT16_MAX) {
            throw std::invalid_argument("checkpoint: tensor name length out of range");
        }
        if (t.rank() > detail::kMaxTensorRank) {
            throw std::invalid_argument("checkpoint: tensor \"" + name + "\" rank too large");
        }
        tensors_.insert_or_assign(name, std::move(t));
    }

    template <typename T>
    const Tensor<T>& get(const std::string& name, const char* kind) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw std::out_of_range("checkpoint: no tensor \"" + name + "\"");
        }
        const auto* t = std::get_if<Tensor<T>>(&it->second);
        if (t == nullptr) {
            throw std::invalid_argument("checkpoint: tensor \"" + name + "\" is not " + kind);
        }
        return *t;
    }

    static void append_entry_bytes(std::vector<std::uint8_t>& out, const std::string& name,
                                   const TensorValue& value, std::uint64_t offset) {
        detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        std::visit(
            [&](const auto& t) {
                const bool f32 = std::is_same_v<std::decay_t<decltype(t)>, Tensor<float>>;
                out.push_back(f32 ? 1 : 2);
                out.push_back(static_cast<std::uint8_t>(t.rank()));
                for (std::size_t d : t.shape()) detail::put_u64(out, d);
            },
            value);
        detail::put_u64(out, offset);
    }

    std::map<std::string, TensorValue> tensors_;
};

}  // namespace ftn
