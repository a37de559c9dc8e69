#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace storynizor {

inline constexpr uint64_t kDefaultSeed = 20240917;

// Single seedable stream shared by every random consumer of a run. Draws are
// derived directly from the engine so the full state round-trips through
// state()/set_state().
class Rng {
public:
    explicit Rng(uint64_t seed = kDefaultSeed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Standard normal via Box-Muller; no cached second value.
    double normal();
    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[uniform_int(i)]);
    }

    // Seed for an independent child stream.
    uint64_t derive_seed() { return engine_() ^ 0x9e3779b97f4a7c15ULL; }

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::mt19937_64 engine_;
};

}  // namespace storynizor
