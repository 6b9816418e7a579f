#pragma once

// PACKPT01 checkpoint container: magic, u32 version, u32 entry count, then
// per entry u16 name length, name bytes, u8 dtype (0=f32, 1=f64, 2=i64),
// u8 rank, u32 dims, raw little-endian payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "physar/mat.hpp"
#include "physar/nn.hpp"

namespace physar {

enum class DType : uint8_t { f32 = 0, f64 = 1, i64 = 2 };

struct CheckpointEntry {
    DType dtype = DType::f32;
    std::vector<uint32_t> dims;
    std::vector<uint8_t> bytes;

    int64_t count() const {
        int64_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }

    template <class T>
    std::vector<T> as() const {
        std::vector<T> out(static_cast<size_t>(count()));
        if (dtype == DType::f32) {
            const float* p = reinterpret_cast<const float*>(bytes.data());
            for (int64_t i = 0; i < count(); ++i) out[i] = static_cast<T>(p[i]);
        } else if (dtype == DType::f64) {
            const double* p = reinterpret_cast<const double*>(bytes.data());
            for (int64_t i = 0; i < count(); ++i) out[i] = static_cast<T>(p[i]);
        } else {
            const int64_t* p = reinterpret_cast<const int64_t*>(bytes.data());
            for (int64_t i = 0; i < count(); ++i) out[i] = static_cast<T>(p[i]);
        }
        return out;
    }
};

class Checkpoint {
public:
    std::map<std::string, CheckpointEntry> entries;

    template <class T>
    void put(const std::string& name, const std::vector<uint32_t>& dims, const T* data,
             DType dtype) {
        CheckpointEntry e;
        e.dtype = dtype;
        e.dims = dims;
        int64_t n = e.count();
        if (dtype == DType::f32) {
            e.bytes.resize(static_cast<size_t>(n) * 4);
            float* p = reinterpret_cast<float*>(e.bytes.data());
            for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(data[i]);
        } else if (dtype == DType::f64) {
            e.bytes.resize(static_cast<size_t>(n) * 8);
            double* p = reinterpret_cast<double*>(e.bytes.data());
            for (int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(data[i]);
        } else {
            e.bytes.resize(static_cast<size_t>(n) * 8);
            int64_t* p = reinterpret_cast<int64_t*>(e.bytes.data());
            for (int64_t i = 0; i < n; ++i) p[i] = static_cast<int64_t>(data[i]);
        }
        entries[name] = std::move(e);
    }

    template <class T>
    void put_mat(const std::string& name, const Mat<T>& m, DType dtype = DType::f32) {
        put(name, {static_cast<uint32_t>(m.rows), static_cast<uint32_t>(m.cols)}, m.data.data(),
            dtype);
    }

    template <class T>
    void put_vec(const std::string& name, const std::vector<T>& v, DType dtype) {
        put(name, {static_cast<uint32_t>(v.size())}, v.data(), dtype);
    }

    const CheckpointEntry& get(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end())
            throw std::runtime_error("checkpoint: missing entry '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return entries.count(name) > 0; }

    template <class T>
    Mat<T> get_mat(const std::string& name) const {
        const auto& e = get(name);
        require(e.dims.size() == 2, "checkpoint: entry '" + name + "' is not rank-2");
        Mat<T> m(static_cast<int>(e.dims[0]), static_cast<int>(e.dims[1]));
        m.data = e.template as<T>();
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
        f.write("PACKPT01", 8);
        write_u32(f, 1);
        write_u32(f, static_cast<uint32_t>(entries.size()));
        for (const auto& [name, e] : entries) {
            const uint16_t nl = static_cast<uint16_t>(name.size());
            f.write(reinterpret_cast<const char*>(&nl), 2);
            f.write(name.data(), nl);
            const uint8_t dt = static_cast<uint8_t>(e.dtype);
            const uint8_t rank = static_cast<uint8_t>(e.dims.size());
            f.write(reinterpret_cast<const char*>(&dt), 1);
            f.write(reinterpret_cast<const char*>(&rank), 1);
            for (uint32_t d : e.dims) write_u32(f, d);
            f.write(reinterpret_cast<const char*>(e.bytes.data()),
                    static_cast<std::streamsize>(e.bytes.size()));
        }
        if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, "PACKPT01", 8) != 0)
            throw std::runtime_error("checkpoint: bad magic in " + path);
        const uint32_t version = read_u32(f);
        if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
        const uint32_t count = read_u32(f);
        Checkpoint ck;
        for (uint32_t i = 0; i < count; ++i) {
            uint16_t nl = 0;
            f.read(reinterpret_cast<char*>(&nl), 2);
            std::string name(nl, '\0');
            f.read(name.data(), nl);
            uint8_t dt = 0, rank = 0;
            f.read(reinterpret_cast<char*>(&dt), 1);
            f.read(reinterpret_cast<char*>(&rank), 1);
            CheckpointEntry e;
            e.dtype = static_cast<DType>(dt);
            e.dims.resize(rank);
            for (auto& d : e.dims) d = read_u32(f);
            const size_t elem = e.dtype == DType::f32 ? 4 : 8;
            e.bytes.resize(static_cast<size_t>(e.count()) * elem);
            f.read(reinterpret_cast<char*>(e.bytes.data()),
                   static_cast<std::streamsize>(e.bytes.size()));
            if (!f) throw std::runtime_error("checkpoint: truncated entry in " + path);
            ck.entries[name] = std::move(e);
        }
        return ck;
    }

    template <class T>
    void put_store(const ParamStore<T>& store, const std::string& prefix) {
        for (const auto& e : store.entries) put_mat(prefix + e.name, e.w, DType::f32);
    }

    template <class T>
    void load_store(ParamStore<T>& store, const std::string& prefix) const {
        for (auto& e : store.entries) {
            Mat<T> m = get_mat<T>(prefix + e.name);
            require(m.same_shape(e.w), "checkpoint: shape mismatch for " + e.name);
            e.w = std::move(m);
        }
    }

private:
    static void write_u32(std::ofstream& f, uint32_t v) {
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    static uint32_t read_u32(std::ifstream& f) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    }
};

}  // namespace physar
