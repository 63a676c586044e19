#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cpl {

// Counter-based generator: a fixed stream key plus a running counter pushed
// through the SplitMix64 finalizer. split() derives an independent named
// stream from the parent key, so every consumer owns its own sequence and
// nothing is shared globally.
class Rng {
public:
    explicit Rng(uint64_t seed);

    Rng split(std::string_view name) const;
    Rng split(uint64_t index) const;

    uint64_t next_u64();
    double uniform();                    // [0, 1)
    double normal();                     // standard normal (Box-Muller)
    double normal(double mean, double stddev);
    int uniform_int(int n);              // [0, n)

    std::vector<double> normal_vec(size_t n, double stddev);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    Rng(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}
    static uint64_t mix(uint64_t z);

    uint64_t key_;
    uint64_t counter_;
};

} // namespace cpl
