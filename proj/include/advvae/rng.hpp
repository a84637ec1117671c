#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace advvae {

// Independent random streams, all derived from one experiment seed.
enum class Stream : std::uint64_t {
    Init = 1,
    Dropout = 2,
    Sampling = 3,
    Shuffle = 4,
    Folds = 5,
    Upsample = 6,
    EvalSplit = 7,
    ItemSample = 8,
    Attacker = 9,
    Generator = 10,
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Counter-based stream splitting: the same (seed, stream, counter) always yields
// the same child seed, independent of how many other streams were drawn.
std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t counter = 0) noexcept;

// Portable generator. Only mt19937_64's raw output is used, so draws are
// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0)
        : engine_(derive_seed(seed, stream, counter)) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 bits of precision.
    double uniform();
    // Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::swap(values[i - 1], values[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace advvae
