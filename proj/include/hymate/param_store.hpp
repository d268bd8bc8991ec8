// Named parameter tensors with gradient buffers and Adam moments, plus a
// binary checkpoint format. Iteration order is always sorted by name.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hymate/common.hpp"
#include "hymate/tape.hpp"
#include "hymate/tensor.hpp"

namespace hymate {

struct ParamEntry {
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
};

class ParameterStore {
public:
    void add(const std::string& name, Tensor value) {
        require(!entries_.count(name), "ParameterStore: duplicate name " + name);
        ParamEntry e;
        e.grad = Tensor::zeros(value.shape());
        e.m = Tensor::zeros(value.shape());
        e.v = Tensor::zeros(value.shape());
        e.value = std::move(value);
        entries_.emplace(name, std::move(e));
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    ParamEntry& at(const std::string& name) {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParameterStore: unknown name " + name);
        return it->second;
    }

    const ParamEntry& at(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParameterStore: unknown name " + name);
        return it->second;
    }

    Tensor& value(const std::string& name) { return at(name).value; }
    const Tensor& value(const std::string& name) const { return at(name).value; }

    std::size_t size() const { return entries_.size(); }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const auto& [k, e] : entries_) n += e.value.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grads() {
        for (auto& [k, e] : entries_) e.grad.fill(0.0);
    }

    // Deep copy of values only (used for best-epoch checkpointing).
    std::map<std::string, Tensor> snapshot_values() const {
        std::map<std::string, Tensor> out;
        for (const auto& [k, e] : entries_) out.emplace(k, e.value);
        return out;
    }

    void restore_values(const std::map<std::string, Tensor>& snap) {
        for (const auto& [k, v] : snap) at(k).value = v;
    }

    // Loads values for every name that exists in both stores with a matching
    // shape; returns the number of tensors copied. Used to seed fine-tuning
    // from a pretrained checkpoint whose heads differ.
    std::size_t load_matching(const ParameterStore& other) {
        std::size_t n = 0;
        for (auto& [k, e] : entries_) {
            auto it = other.entries_.find(k);
            if (it != other.entries_.end() && it->second.value.same_shape(e.value)) {
                e.value = it->second.value;
                ++n;
            }
        }
        return n;
    }

private:
    std::map<std::string, ParamEntry> entries_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter; grads are zeroed
// afterwards. t is the 1-based step index.
inline void adam_step(ParameterStore& store, const AdamConfig& cfg, std::uint64_t t) {
    require(t >= 1, "adam_step: step index must be >= 1 (bias correction divides by 1-beta^t)");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, e] : store) {
        double* th = e.value.ptr();
        double* g = e.grad.ptr();
        double* m = e.m.ptr();
        double* v = e.v.ptr();
        const std::size_t n = e.value.numel();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            th[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    store.zero_grads();
}

// Creates tape leaves for parameters on demand and pushes tape gradients back
// into the store after backward(). One binding per batch.
class TapeBinding {
public:
    TapeBinding(Tape& tape, ParameterStore& store) : tape_(tape), store_(store) {}

    Var operator()(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        Var v = tape_.leaf(store_.value(name), true);
        vars_.emplace(name, v);
        return v;
    }

    // Accumulates d(loss)/d(param) into store grads.
    void flush_grads() {
        for (auto& [name, var] : vars_) {
            const Tensor& g = tape_.grad(var);
            Tensor& dst = store_.at(name).grad;
            for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
        }
    }

private:
    Tape& tape_;
    ParameterStore& store_;
    std::map<std::string, Var> vars_;
};

// ---- checkpoint format ------------------------------------------------------
// Flat little-endian binary: magic "HYMT", u32 version, u64 tensor count, then
// per tensor: u32 name length, name bytes, u32 ndim, u64 dims..., f64 data.

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_checkpoint: cannot open " + path);
    auto w32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    f.write("HYMT", 4);
    w32(1);
    w64(store.size());
    for (const auto& [name, e] : store) {
        w32(static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        w32(static_cast<std::uint32_t>(e.value.ndim()));
        for (std::size_t d : e.value.shape()) w64(d);
        f.write(reinterpret_cast<const char*>(e.value.ptr()),
                static_cast<std::streamsize>(e.value.numel() * sizeof(double)));
    }
    require(f.good(), "save_checkpoint: write failed for " + path);
}

inline ParameterStore load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw DataError("load_checkpoint: cannot open " + path);
    auto r32 = [&]() {
        std::uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto r64 = [&]() {
        std::uint64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, "HYMT", 4) != 0) throw DataError("load_checkpoint: bad magic");
    if (r32() != 1) throw DataError("load_checkpoint: unsupported version");
    const std::uint64_t count = r64();
    ParameterStore store;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t len = r32();
        std::string name(len, '\0');
        f.read(name.data(), len);
        const std::uint32_t nd = r32();
        std::vector<std::size_t> shape(nd);
        for (auto& d : shape) d = static_cast<std::size_t>(r64());
        Tensor v = Tensor::zeros(shape);
        f.read(reinterpret_cast<char*>(v.ptr()),
               static_cast<std::streamsize>(v.numel() * sizeof(double)));
        if (!f.good()) throw DataError("load_checkpoint: truncated file " + path);
        store.add(name, std::move(v));
    }
    return store;
}

}  // namespace hymate
