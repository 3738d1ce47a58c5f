#pragma once

// Binary record container used for checkpoints and dataset exports.
//
// Layout, all integers little-endian:
//   magic "DICO" | u32 version = 1 | u32 record count
//   per record: u32 name length | UTF-8 name | u8 dtype (0 = f32, 1 = f64)
//               | u8 ndim | ndim x u64 dims | payload (LE floats)
//   trailer: u32 length | UTF-8 key=value block
//
// The trailer carries the serialized Config plus `state.*` runtime keys
// (step, RNG stream, classifier size).

#include <cstdint>
#include <bit>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dico/error.hpp"
#include "dico/tensor.hpp"

namespace dico {

struct TensorRecord {
    std::string name;
    uint8_t dtype = 0; // 0 = f32, 1 = f64
    std::vector<uint64_t> dims;
    std::vector<char> payload;

    size_t numel() const {
        size_t n = 1;
        for (uint64_t d : dims) n *= static_cast<size_t>(d);
        return n;
    }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size())
            throw CheckpointError(cat("truncated checkpoint: expected ", n, " bytes for ",
                                      what, " at offset ", pos));
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

template <typename T>
constexpr uint8_t dtype_of() {
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
TensorRecord make_record(const std::string& name, const Shape& shape, const std::vector<T>& values) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = dtype_of<T>();
    for (int d : shape) rec.dims.push_back(static_cast<uint64_t>(d));
    std::string payload;
    payload.reserve(values.size() * sizeof(T));
    for (T x : values) {
        if constexpr (std::is_same_v<T, float>)
            detail::put_u32(payload, std::bit_cast<uint32_t>(x));
        else
            detail::put_u64(payload, std::bit_cast<uint64_t>(x));
    }
    rec.payload.assign(payload.begin(), payload.end());
    return rec;
}

template <typename T>
std::vector<T> record_values(const TensorRecord& rec) {
    if (rec.dtype != dtype_of<T>())
        throw CheckpointError(cat("record '", rec.name, "' has dtype ", int(rec.dtype),
                                  ", expected ", int(dtype_of<T>())));
    const size_t n = rec.numel();
    if (rec.payload.size() != n * sizeof(T))
        throw CheckpointError(cat("record '", rec.name, "' payload size ", rec.payload.size(),
                                  " does not match ", n, " elements"));
    std::vector<T> out(n);
    const auto* bytes = reinterpret_cast<const uint8_t*>(rec.payload.data());
    for (size_t i = 0; i < n; ++i) {
        if constexpr (std::is_same_v<T, float>) {
            uint32_t v = 0;
            for (int b = 0; b < 4; ++b) v |= static_cast<uint32_t>(bytes[i * 4 + b]) << (8 * b);
            out[i] = std::bit_cast<float>(v);
        } else {
            uint64_t v = 0;
            for (int b = 0; b < 8; ++b) v |= static_cast<uint64_t>(bytes[i * 8 + b]) << (8 * b);
            out[i] = std::bit_cast<double>(v);
        }
    }
    return out;
}

struct RecordFile {
    std::vector<TensorRecord> records;
    std::string trailer; // key=value block

    const TensorRecord* find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

inline std::string encode_records(const RecordFile& file) {
    std::string out;
    out += "DICO";
    detail::put_u32(out, 1u); // version
    detail::put_u32(out, static_cast<uint32_t>(file.records.size()));
    for (const auto& r : file.records) {
        detail::put_u32(out, static_cast<uint32_t>(r.name.size()));
        out += r.name;
        out.push_back(static_cast<char>(r.dtype));
        out.push_back(static_cast<char>(r.dims.size()));
        for (uint64_t d : r.dims) detail::put_u64(out, d);
        out.append(r.payload.begin(), r.payload.end());
    }
    detail::put_u32(out, static_cast<uint32_t>(file.trailer.size()));
    out += file.trailer;
    return out;
}

inline RecordFile decode_records(const std::string& buf) {
    detail::Reader rd{buf};
    if (rd.bytes(4, "magic") != "DICO")
        throw CheckpointError("bad magic: not a DICO record file");
    const uint32_t version = rd.u32("version");
    if (version != 1)
        throw CheckpointError(cat("unsupported version ", version, ", expected 1"));
    RecordFile file;
    const uint32_t count = rd.u32("record count");
    file.records.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorRecord& r = file.records[i];
        const uint32_t name_len = rd.u32("name length");
        r.name = rd.bytes(name_len, "name");
        r.dtype = rd.u8("dtype");
        if (r.dtype > 1)
            throw CheckpointError(cat("record '", r.name, "': unknown dtype ", int(r.dtype)));
        const uint8_t ndim = rd.u8("ndim");
        r.dims.resize(ndim);
        for (uint8_t d = 0; d < ndim; ++d) r.dims[d] = rd.u64("dim");
        const size_t bytes = r.numel() * (r.dtype == 0 ? 4 : 8);
        const std::string payload = rd.bytes(bytes, "payload");
        r.payload.assign(payload.begin(), payload.end());
    }
    const uint32_t trailer_len = rd.u32("trailer length");
    file.trailer = rd.bytes(trailer_len, "trailer");
    return file;
}

inline void write_record_file(const std::string& path, const RecordFile& file) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(cat("cannot open '", path, "' for writing"));
    const std::string bytes = encode_records(file);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(cat("short write to '", path, "'"));
}

inline RecordFile read_record_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(cat("cannot open '", path, "'"));
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_records(buf);
}

/// Splits a trailer into config lines and state.* entries.
struct TrailerData {
    std::string config_text;
    std::map<std::string, std::string> state;
};

inline TrailerData split_trailer(const std::string& trailer) {
    TrailerData out;
    size_t pos = 0;
    while (pos <= trailer.size()) {
        size_t nl = trailer.find('\n', pos);
        if (nl == std::string::npos) nl = trailer.size();
        const std::string line = trailer.substr(pos, nl - pos);
        if (line.rfind("state.", 0) == 0) {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                std::string key = line.substr(0, eq);
                std::string val = line.substr(eq + 1);
                while (!key.empty() && key.back() == ' ') key.pop_back();
                while (!val.empty() && val.front() == ' ') val.erase(val.begin());
                out.state[key] = val;
            }
        } else if (!line.empty()) {
            out.config_text += line;
            out.config_text += '\n';
        }
        if (nl == trailer.size()) break;
        pos = nl + 1;
    }
    return out;
}

} // namespace dico
