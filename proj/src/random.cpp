#include "taskaug/random.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace taskaug {

namespace {
constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}
} // namespace

std::uint64_t mix64(std::uint64_t x) {
    // SplitMix64 finalizer.
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
    std::uint64_t h = mix64(seed + kGamma);
    h = mix64(h ^ fnv1a(purpose));
    h = mix64(h ^ (index * kGamma + 0x632be59bd9b4e019ULL));
    return h;
}

double DrawSource::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

int DrawSource::uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo) + 1;
    // Reject the top partial block of 2^64 so every residue is equally likely.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int>(lo + static_cast<std::int64_t>(x % span));
}

bool DrawSource::bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return uniform01() < p;
}

int DrawSource::binomial(int trials, double p) {
    if (trials < 0) throw std::invalid_argument("binomial: negative trial count");
    if (p <= 0.0 || trials == 0) return 0;
    if (p >= 1.0) return trials;
    const double u = uniform01();
    // Walk the pmf with the recurrence P(k+1) = P(k) * (n-k)/(k+1) * p/(1-p).
    const double ratio = p / (1.0 - p);
    double pk = std::pow(1.0 - p, trials);
    double cdf = pk;
    int k = 0;
    while (u >= cdf && k < trials) {
        pk *= static_cast<double>(trials - k) / static_cast<double>(k + 1) * ratio;
        ++k;
        cdf += pk;
    }
    return k;
}

std::vector<int> DrawSource::sample_without_replacement(int count, int lo, int hi) {
    const int population = hi - lo + 1;
    if (count < 0 || count > population)
        throw std::invalid_argument("sample_without_replacement: count exceeds population");
    std::vector<int> pool(static_cast<std::size_t>(population));
    std::iota(pool.begin(), pool.end(), lo);
    for (int i = 0; i < count; ++i) {
        const int j = uniform_int(i, population - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(count));
    return pool;
}

double DrawSource::normal() {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

RandomSource::RandomSource(std::uint64_t seed, std::string_view purpose, std::uint64_t index)
    : key_(derive_seed(seed, purpose, index)) {}

std::uint64_t RandomSource::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGamma);
}

} // namespace taskaug
