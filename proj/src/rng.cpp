#include "psp/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace psp {

uint64_t RngState::uniform_int(uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("uniform_int: bound must be > 0");
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

double RngState::uniform(double lo, double hi) {
    const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;  // [0, 1)
    return lo + (hi - lo) * u;
}

double RngState::normal(double mean, double sigma) {
    // u1 in (0, 1], u2 in [0, 1)
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + sigma * z;
}

std::string RngState::serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << engine_;
    return os.str();
}

RngState RngState::deserialize(const std::string& text) {
    std::istringstream is(text);
    RngState r;
    is >> r.seed_ >> r.engine_;
    if (!is) throw std::runtime_error("RngState::deserialize: malformed state string");
    return r;
}

}  // namespace psp
