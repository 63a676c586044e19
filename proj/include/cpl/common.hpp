#pragma once

#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cpl {

// Error taxonomy. Everything the library throws derives from Error so the
// CLI boundary can catch a single type and map it to an exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimError : Error { using Error::Error; };          // shape/extent mismatch
struct ConfigError : Error { using Error::Error; };       // invalid configuration
struct ContractError : Error { using Error::Error; };     // violated precondition
struct LookupError : Error { using Error::Error; };       // unknown id/key
struct DeterminismError : Error { using Error::Error; };  // same inputs produced different outputs
struct IntegrityError : Error { using Error::Error; };    // corrupt file or container
struct NumericsError : Error { using Error::Error; };     // NaN/Inf escaped a forward op

enum class Precision { f64, f32 };

// Global compute precision. In f32 mode every kernel output is rounded
// through float, so trained state is exactly representable in 32-bit
// checkpoints. Verification paths force f64.
Precision precision();
void set_precision(Precision p);

// Scoped override: runs (training, checkpoint evaluation) pin their own
// precision and restore the previous mode when done.
class PrecisionScope {
public:
    explicit PrecisionScope(Precision p) : prev_(precision()) { set_precision(p); }
    ~PrecisionScope() { set_precision(prev_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    Precision prev_;
};

inline double round_f32(double x) {
    return static_cast<double>(static_cast<float>(x));
}

const char* precision_name(Precision p);
Precision parse_precision(std::string_view s);

uint64_t fnv1a64(std::string_view s);
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull);

} // namespace cpl
