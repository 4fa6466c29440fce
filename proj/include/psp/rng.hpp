#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace psp {

// Deterministic random source. Sampling transforms (uniform, normal, shuffle)
// are written out explicitly on top of the raw mt19937_64 stream, so a given
// seed produces the same values on every build of this library.
class RngState {
  public:
    explicit RngState(uint64_t seed = 0) : engine_(seed), seed_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return engine_(); }

    // Uniform integer in [0, bound), bound > 0.
    uint64_t uniform_int(uint64_t bound);

    // Uniform double in [lo, hi) with 53-bit resolution.
    double uniform(double lo = 0.0, double hi = 1.0);

    // Gaussian sample via Box-Muller; draws exactly two raw values per call,
    // no cached state, so the stream position is a pure function of call count.
    double normal(double mean = 0.0, double sigma = 1.0);

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    std::string serialize() const;
    static RngState deserialize(const std::string& text);

    bool operator==(const RngState& other) const {
        return engine_ == other.engine_ && seed_ == other.seed_;
    }

  private:
    std::mt19937_64 engine_;
    uint64_t seed_;
};

}  // namespace psp
