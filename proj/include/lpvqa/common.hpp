#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lpvqa {

/// Builds a message from streamable pieces.
template <typename... Args>
std::string str_cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw Error(str_cat(std::forward<Args>(args)...));
}

template <typename... Args>
void check(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a over the tag
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return splitmix64(seed ^ splitmix64(h ^ splitmix64(index)));
}

/// Deterministic RNG with explicit distribution code so results are
/// bit-identical across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        // rejection sampling keeps the distribution exact
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    /// Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1), u1 < 1
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Samples an index from unnormalized nonnegative weights.
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform01() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    /// Independent stream derived from this generator's seed and a tag.
    Rng derive(std::string_view tag, uint64_t index = 0) const {
        return Rng(mix_seed(seed_, tag, index));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lpvqa
