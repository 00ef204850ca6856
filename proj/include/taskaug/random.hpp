#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace taskaug {

// Keyed 64-bit mixing used to derive independent sub-seeds from one root seed.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index);

// Source of the random decisions made by samplers and transforms.
//
// Every higher-level draw is virtual so tests can force specific outcomes
// (a fixed crop offset, n = N novel classes, ...). The default
// implementations are built on next_u64() only and are platform independent:
// nothing here goes through <random> distributions, whose outputs differ
// between standard libraries.
class DrawSource {
public:
    virtual ~DrawSource() = default;

    virtual std::uint64_t next_u64() = 0;

    // Uniform in [0, 1) with 53 random bits.
    virtual double uniform01();
    // Uniform integer in [lo, hi], unbiased (rejection sampling).
    virtual int uniform_int(int lo, int hi);
    virtual bool bernoulli(double p);
    // Inversion sampling; p <= 0 and p >= 1 consume no draws.
    virtual int binomial(int trials, double p);
    // `count` distinct integers from [lo, hi] in draw order (partial Fisher-Yates).
    virtual std::vector<int> sample_without_replacement(int count, int lo, int hi);
    // Standard normal via Box-Muller (one value per call, two uniforms).
    virtual double normal();
};

// Counter-based generator: output k of stream (seed, key) is a pure function
// of (seed, key, k), so any episode can be regenerated on its own.
class RandomSource final : public DrawSource {
public:
    RandomSource(std::uint64_t seed, std::string_view purpose, std::uint64_t index);
    explicit RandomSource(std::uint64_t key) : key_(key) {}

    std::uint64_t next_u64() override;

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace taskaug
