#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace saessd {

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Hash of a master seed and a path of stream indices. Distinct paths give
// unrelated seeds; the same path always gives the same seed.
constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t h = mix64(master ^ 0x5ae55d0000000000ULL);
    for (std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

// A private random stream. Every replication owns one, so results do not
// depend on execution order or thread count.
class RandomStream {
public:
    using engine_type = std::mt19937_64;

    explicit RandomStream(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

    std::uint64_t seed() const noexcept { return seed_; }
    engine_type& engine() noexcept { return engine_; }

    // Child stream keyed by `index`; does not advance this stream.
    RandomStream substream(std::uint64_t index) const {
        return RandomStream(derive_seed(seed_, {index}));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    double gamma(double shape, double rate) {
        return std::gamma_distribution<double>(shape, 1.0 / rate)(engine_);
    }
    std::int64_t binomial(std::int64_t trials, double p) {
        if (trials <= 0 || p <= 0.0) return 0;
        if (p >= 1.0) return trials;
        return std::binomial_distribution<std::int64_t>(trials, p)(engine_);
    }

private:
    std::uint64_t seed_;
    engine_type engine_;
};

// Stream for replication `replication_index` under `master_seed`.
inline RandomStream replicate_seed(std::uint64_t master_seed, std::uint64_t replication_index) {
    return RandomStream(derive_seed(master_seed, {replication_index}));
}

}  // namespace saessd
