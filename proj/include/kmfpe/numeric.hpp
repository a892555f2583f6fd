#pragma once

#include <array>
#include <cstddef>
#include <cstdio>
#include <string>

namespace kmfpe {

/// Reductions are split into a fixed number of contiguous shards that are
/// combined in shard order, so results do not depend on the thread count.
inline constexpr std::size_t kReductionShards = 64;

inline std::size_t shard_begin(std::size_t n, std::size_t shard) {
    return n * shard / kReductionShards;
}

/// Deterministic sum of f(0..n-1); shards run in parallel under OpenMP.
template <class F>
double chunked_sum(std::size_t n, F&& f) {
    std::array<double, kReductionShards> partial{};
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t s = 0; s < kReductionShards; ++s) {
        double acc = 0.0;
        const std::size_t e = shard_begin(n, s + 1);
        for (std::size_t i = shard_begin(n, s); i < e; ++i) acc += f(i);
        partial[s] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

/// Shortest round-trippable decimal form ("%.17g").
inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace kmfpe
