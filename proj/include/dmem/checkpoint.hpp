#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmem/osam.hpp"
#include "dmem/tensor.hpp"

namespace dmem {

// Checkpoint container: named float arrays with shape headers.
//
//   magic   "DMEMCKPT" (8 bytes)
//   version u8 = 1
//   count   u32
//   entry*  { name_len u16, name bytes, dtype u8 (0 = f32, 1 = f64),
//             ndim u8, dims u32[ndim], payload dtype[prod(dims)] }
//
// All multi-byte fields little-endian regardless of host, so files move
// across platforms.
namespace ckpt {

inline constexpr char kMagic[8] = {'D', 'M', 'E', 'M', 'C', 'K', 'P', 'T'};
inline constexpr uint8_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "unsupported dtype");
    return std::is_same_v<T, float> ? 0 : 1;
}

inline void put_u16(std::ostream& os, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

template <typename T>
void put_value(std::ostream& os, T v) {
    if constexpr (std::is_same_v<T, float>) {
        put_u32(os, std::bit_cast<uint32_t>(v));
    } else {
        put_u64(os, std::bit_cast<uint64_t>(v));
    }
}

template <typename T>
T get_value(std::istream& is) {
    if constexpr (std::is_same_v<T, float>) {
        return std::bit_cast<float>(get_u32(is));
    } else {
        return std::bit_cast<double>(get_u64(is));
    }
}

} // namespace ckpt

template <typename T>
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor<T>>>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(ckpt::kMagic, 8);
    os.put(static_cast<char>(ckpt::kVersion));
    ckpt::put_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: name too long");
        ckpt::put_u16(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(ckpt::dtype_code<T>()));
        os.put(static_cast<char>(t.ndim()));
        for (int e : t.shape) ckpt::put_u32(os, static_cast<uint32_t>(e));
        for (T v : *t.data) ckpt::put_value<T>(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, ckpt::kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic: " + path);
    const int version = is.get();
    if (version != ckpt::kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = ckpt::get_u32(is);
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = ckpt::get_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int dtype = is.get();
        if (dtype != ckpt::dtype_code<T>())
            throw std::runtime_error("checkpoint: dtype mismatch for entry " + name);
        const int ndim = is.get();
        std::vector<int> shape;
        for (int d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(ckpt::get_u32(is)));
        Tensor<T> t(shape);
        for (auto& v : *t.data) v = ckpt::get_value<T>(is);
        if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

// Copies file contents into already-constructed tensors (so models keep
// their internal sharing). Strict: the name sets must match exactly.
template <typename T>
void load_tensors_into(const std::string& path,
                       std::vector<std::pair<std::string, Tensor<T>>> targets) {
    auto loaded = load_tensors<T>(path);
    if (loaded.size() != targets.size())
        throw std::runtime_error("checkpoint: entry count mismatch for " + path);
    for (size_t i = 0; i < targets.size(); ++i) {
        auto& [name, dst] = targets[i];
        auto& [lname, src] = loaded[i];
        if (lname != name)
            throw std::runtime_error("checkpoint: expected entry '" + name + "', found '" + lname + "'");
        if (src.shape != dst.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " +
                                     shape_str(src.shape) + " vs model " + shape_str(dst.shape));
        *dst.data = *src.data;
    }
}

// Memory-state persistence for the ingest-then-query workflow. The step
// counters ride along as scalar entries.
template <typename T, typename StateT>
void save_state(const std::string& path, const StateT& st, const std::vector<int>& hooked) {
    std::vector<std::pair<std::string, Tensor<T>>> entries;
    for (size_t i = 0; i < st.layers.size(); ++i) {
        const std::string lp = "state.layer" + std::to_string(hooked[i]) + ".";
        for (int s = 0; s < st.layers[i].n_states(); ++s)
            entries.emplace_back(lp + "sub" + std::to_string(s), st.layers[i].S[static_cast<size_t>(s)]);
        Tensor<T> step({1});
        (*step.data)[0] = static_cast<T>(st.layers[i].step);
        entries.emplace_back(lp + "step", step);
    }
    save_tensors(path, entries);
}

template <typename T, typename StateT>
void load_state(const std::string& path, StateT& st, const std::vector<int>& hooked) {
    auto loaded = load_tensors<T>(path);
    size_t idx = 0;
    auto next = [&](const std::string& want) -> Tensor<T>& {
        if (idx >= loaded.size() || loaded[idx].first != want)
            throw std::runtime_error("checkpoint: state entry mismatch, expected " + want);
        return loaded[idx++].second;
    };
    for (size_t i = 0; i < st.layers.size(); ++i) {
        const std::string lp = "state.layer" + std::to_string(hooked[i]) + ".";
        for (int s = 0; s < st.layers[i].n_states(); ++s) {
            Tensor<T>& src = next(lp + "sub" + std::to_string(s));
            if (src.shape != st.layers[i].S[static_cast<size_t>(s)].shape)
                throw std::runtime_error("checkpoint: state shape mismatch");
            *st.layers[i].S[static_cast<size_t>(s)].data = *src.data;
        }
        st.layers[i].step = static_cast<long>(next(lp + "step").item());
    }
    if (idx != loaded.size()) throw std::runtime_error("checkpoint: extra state entries in " + path);
}

} // namespace dmem
