// Shared plumbing: error types, float formatting, a small thread pool helper.
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hymate {

// Thrown when a caller breaks a documented precondition.
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// Thrown on malformed external input (files, configs).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

// Shortest representation that round-trips a 64-bit double exactly.
inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, bool* ok = nullptr) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    bool good = res.ec == std::errc() && res.ptr == s.data() + s.size();
    if (ok) *ok = good;
    if (!ok && !good) throw DataError("not a number: '" + s + "'");
    return v;
}

// Runs fn(i) for i in [0, n). Results must be written to disjoint slots so the
// outcome is independent of the thread count.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (std::size_t w = 0; w < nt; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += nt) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace hymate
