// Binary tensor container used for datasets and checkpoints.
//
// Layout (all integers little-endian):
//   magic "C2VT" | version u32 | entry count u32
//   per entry: name length u16, name bytes, rank u8, extents u32 each,
//              payload float64 row-major (8 * product(extents) bytes)
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "c2v/tensor.hpp"

namespace c2v {

struct ContainerError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, DuplicateName, Io, BadEntry };
    Kind kind;
    ContainerError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

constexpr uint32_t kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {
inline void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

    void need(size_t n) const {
        if (pos_ + n > size_) {
            throw ContainerError(ContainerError::Kind::Truncated,
                                 "container truncated at byte " + std::to_string(pos_));
        }
    }
    uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(data_[pos_]) |
                     static_cast<uint16_t>(data_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
};
}  // namespace detail

inline std::string encode_container(const std::vector<NamedTensor>& entries) {
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.name).second) {
            throw ContainerError(ContainerError::Kind::DuplicateName,
                                 "duplicate entry name '" + e.name + "'");
        }
        if (e.name.size() > 0xffff) {
            throw ContainerError(ContainerError::Kind::BadEntry, "entry name too long");
        }
        if (e.tensor.rank() > 0xff) {
            throw ContainerError(ContainerError::Kind::BadEntry, "entry rank too large");
        }
    }
    std::string buf = "C2VT";
    detail::put_u32(buf, kContainerVersion);
    detail::put_u32(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::put_u16(buf, static_cast<uint16_t>(e.name.size()));
        buf += e.name;
        buf.push_back(static_cast<char>(e.tensor.rank()));
        for (int ext : e.tensor.shape()) detail::put_u32(buf, static_cast<uint32_t>(ext));
        for (size_t i = 0; i < e.tensor.numel(); ++i) detail::put_f64(buf, e.tensor.data()[i]);
    }
    return buf;
}

inline std::vector<NamedTensor> decode_container(const std::string& bytes) {
    detail::Reader r(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
    if (r.bytes(4) != "C2VT") {
        throw ContainerError(ContainerError::Kind::BadMagic, "bad magic, not a C2VT container");
    }
    uint32_t version = r.u32();
    if (version != kContainerVersion) {
        throw ContainerError(ContainerError::Kind::BadVersion,
                             "unsupported container version " + std::to_string(version));
    }
    uint32_t count = r.u32();
    std::vector<NamedTensor> entries;
    entries.reserve(count);
    std::unordered_set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16();
        std::string name = r.bytes(name_len);
        if (!seen.insert(name).second) {
            throw ContainerError(ContainerError::Kind::DuplicateName,
                                 "duplicate entry name '" + name + "'");
        }
        uint8_t rank = r.u8();
        std::vector<int> shape;
        size_t n = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t ext = r.u32();
            if (ext == 0) {
                throw ContainerError(ContainerError::Kind::BadEntry,
                                     "zero extent in entry '" + name + "'");
            }
            shape.push_back(static_cast<int>(ext));
            n *= ext;
        }
        if (rank == 0) shape.push_back(1);
        std::vector<double> data(n);
        for (size_t j = 0; j < n; ++j) data[j] = r.f64();
        entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return entries;
}

inline void save_container(const std::string& path, const std::vector<NamedTensor>& entries) {
    std::string buf = encode_container(entries);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ContainerError(ContainerError::Kind::Io, "cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw ContainerError(ContainerError::Kind::Io, "short write to '" + path + "'");
}

inline std::vector<NamedTensor> load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContainerError(ContainerError::Kind::Io, "cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_container(bytes);
}

inline const Tensor* find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

inline const Tensor& require_entry(const std::vector<NamedTensor>& entries,
                                   const std::string& name) {
    const Tensor* t = find_entry(entries, name);
    if (!t) {
        throw ContainerError(ContainerError::Kind::BadEntry, "missing entry '" + name + "'");
    }
    return *t;
}

}  // namespace c2v
