#include "cpl/rng.hpp"

#include <cmath>
#include <numbers>

#include "cpl/common.hpp"

namespace cpl {

uint64_t Rng::mix(uint64_t z) {
    // SplitMix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) : key_(mix(seed)), counter_(0) {}

Rng Rng::split(std::string_view name) const {
    return Rng(mix(key_ ^ fnv1a64(name)), 0);
}

Rng Rng::split(uint64_t index) const {
    return Rng(mix(key_ ^ (index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull)), 0);
}

uint64_t Rng::next_u64() {
    return mix(key_ ^ (++counter_ * 0xda942042e4dd58b5ull));
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    // Box-Muller; u1 shifted away from zero so log() stays finite
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw ContractError("uniform_int: n must be positive");
    return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                             static_cast<unsigned __int128>(n)) >> 64);
}

std::vector<double> Rng::normal_vec(size_t n, double stddev) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(0.0, stddev);
    return v;
}

} // namespace cpl
