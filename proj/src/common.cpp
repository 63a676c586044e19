#include "cpl/common.hpp"

#include <atomic>

namespace cpl {

namespace {
std::atomic<Precision> g_precision{Precision::f64};
}

Precision precision() { return g_precision.load(std::memory_order_relaxed); }
void set_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

const char* precision_name(Precision p) {
    return p == Precision::f64 ? "f64" : "f32";
}

Precision parse_precision(std::string_view s) {
    if (s == "f64") return Precision::f64;
    if (s == "f32") return Precision::f32;
    throw ConfigError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace cpl
