#pragma once

#include "fssd/layers.hpp"
#include "fssd/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fssd::ckpt {

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& m) : std::runtime_error("checkpoint: " + m) {}
};

// File layout: magic "FSSD", u32 version, then records of
//   u32 name_len, name bytes, u8 dtype, u32 rank, u64 extents[rank], payload.
// dtype tags: 0 = f32, 1 = f64, 2 = u64, 3 = raw bytes.
constexpr uint32_t kVersion = 1;

struct Record {
    uint8_t dtype = 0;
    std::vector<uint64_t> extents;
    std::vector<uint8_t> payload;

    uint64_t count() const {
        uint64_t n = 1;
        for (auto e : extents) n *= e;
        return n;
    }
};

namespace detail {

template <class T>
void put_raw(std::vector<uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

} // namespace detail

class Writer {
public:
    void add_f32(const std::string& name, const Shape& shape, std::span<const float> data) {
        add_record(name, 0, shape, reinterpret_cast<const uint8_t*>(data.data()),
                   data.size() * sizeof(float));
    }
    void add_f64(const std::string& name, const Shape& shape, std::span<const double> data) {
        add_record(name, 1, shape, reinterpret_cast<const uint8_t*>(data.data()),
                   data.size() * sizeof(double));
    }
    void add_u64(const std::string& name, uint64_t v) {
        add_record(name, 2, Shape{1}, reinterpret_cast<const uint8_t*>(&v), sizeof(v));
    }
    void add_bytes(const std::string& name, const std::string& bytes) {
        Shape s{static_cast<int>(bytes.size())};
        add_record(name, 3, s, reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
    }

    void write(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("cannot open for write: " + path);
        f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!f) throw CheckpointError("write failed: " + path);
    }

    Writer() {
        buf_ = {'F', 'S', 'S', 'D'};
        detail::put_raw(buf_, kVersion);
    }

private:
    void add_record(const std::string& name, uint8_t dtype, const Shape& shape,
                    const uint8_t* data, size_t bytes) {
        detail::put_raw(buf_, static_cast<uint32_t>(name.size()));
        buf_.insert(buf_.end(), name.begin(), name.end());
        buf_.push_back(dtype);
        detail::put_raw(buf_, static_cast<uint32_t>(shape.size()));
        for (int e : shape) detail::put_raw(buf_, static_cast<uint64_t>(e));
        buf_.insert(buf_.end(), data, data + bytes);
    }

    std::vector<uint8_t> buf_;
};

inline std::map<std::string, Record> read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "FSSD", 4) != 0)
        throw CheckpointError("bad magic in " + path);
    uint32_t version;
    std::memcpy(&version, buf.data() + 4, 4);
    if (version != kVersion)
        throw CheckpointError("unsupported version " + std::to_string(version));
    std::map<std::string, Record> out;
    size_t at = 8;
    auto need = [&](size_t n) {
        if (at + n > buf.size()) throw CheckpointError("truncated checkpoint: " + path);
    };
    while (at < buf.size()) {
        need(4);
        uint32_t name_len;
        std::memcpy(&name_len, buf.data() + at, 4);
        at += 4;
        need(name_len);
        std::string name(reinterpret_cast<const char*>(buf.data() + at), name_len);
        at += name_len;
        need(5);
        Record rec;
        rec.dtype = buf[at];
        at += 1;
        uint32_t rank;
        std::memcpy(&rank, buf.data() + at, 4);
        at += 4;
        need(static_cast<size_t>(rank) * 8);
        rec.extents.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) {
            std::memcpy(&rec.extents[i], buf.data() + at, 8);
            at += 8;
        }
        const size_t elem = rec.dtype == 0 ? 4 : rec.dtype == 1 ? 8 : rec.dtype == 2 ? 8 : 1;
        const size_t bytes = static_cast<size_t>(rec.count()) * elem;
        need(bytes);
        rec.payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(at),
                           buf.begin() + static_cast<std::ptrdiff_t>(at + bytes));
        at += bytes;
        out.emplace(std::move(name), std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model-level save/load
// ---------------------------------------------------------------------------

template <class T>
void save_state(const std::string& path, const ParamList<T>& params, const AdamState<T>* adam,
                uint64_t episode, const std::string& config_json) {
    Writer w;
    for (const auto& [name, t] : params.items) {
        if constexpr (std::is_same_v<T, float>)
            w.add_f32("param." + name, t.shape(), t.data());
        else
            w.add_f64("param." + name, t.shape(), t.data());
    }
    if (adam) {
        for (size_t i = 0; i < params.items.size(); ++i) {
            const auto& [name, t] = params.items[i];
            if constexpr (std::is_same_v<T, float>) {
                w.add_f32("adam.m." + name, t.shape(), {adam->m[i].data(), adam->m[i].size()});
                w.add_f32("adam.v." + name, t.shape(), {adam->v[i].data(), adam->v[i].size()});
            } else {
                w.add_f64("adam.m." + name, t.shape(), {adam->m[i].data(), adam->m[i].size()});
                w.add_f64("adam.v." + name, t.shape(), {adam->v[i].data(), adam->v[i].size()});
            }
        }
        w.add_u64("adam.t", static_cast<uint64_t>(adam->t));
    }
    w.add_u64("meta.episode", episode);
    w.add_bytes("config.json", config_json);
    w.write(path);
}

template <class T>
struct LoadedState {
    uint64_t episode = 0;
    std::string config_json;
    bool has_adam = false;
};

template <class T>
LoadedState<T> load_state(const std::string& path, ParamList<T>& params, AdamState<T>* adam) {
    auto recs = read_all(path);
    LoadedState<T> out;
    constexpr uint8_t want_dtype = std::is_same_v<T, float> ? 0 : 1;
    for (auto& [name, t] : params.items) {
        auto it = recs.find("param." + name);
        if (it == recs.end()) throw CheckpointError("missing parameter record: " + name);
        const auto& rec = it->second;
        if (rec.dtype != want_dtype) throw CheckpointError("dtype mismatch for " + name);
        if (static_cast<int64_t>(rec.count()) != t.numel())
            throw CheckpointError("shape mismatch for " + name + " (config mismatch?)");
        std::memcpy(t.raw_data().data(), rec.payload.data(), rec.payload.size());
    }
    if (adam) {
        adam->init(ParamList<T>(params).tensors());
        bool all = true;
        for (size_t i = 0; i < params.items.size(); ++i) {
            const auto& name = params.items[i].first;
            auto im = recs.find("adam.m." + name);
            auto iv = recs.find("adam.v." + name);
            if (im == recs.end() || iv == recs.end()) {
                all = false;
                break;
            }
            std::memcpy(adam->m[i].data(), im->second.payload.data(), im->second.payload.size());
            std::memcpy(adam->v[i].data(), iv->second.payload.data(), iv->second.payload.size());
        }
        if (all) {
            auto it = recs.find("adam.t");
            if (it != recs.end()) {
                uint64_t t64;
                std::memcpy(&t64, it->second.payload.data(), 8);
                adam->t = static_cast<int64_t>(t64);
            }
            out.has_adam = true;
        }
    }
    if (auto it = recs.find("meta.episode"); it != recs.end())
        std::memcpy(&out.episode, it->second.payload.data(), 8);
    if (auto it = recs.find("config.json"); it != recs.end())
        out.config_json.assign(it->second.payload.begin(), it->second.payload.end());
    return out;
}

} // namespace fssd::ckpt
