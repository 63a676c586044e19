// Timing comparison of the serial reference kernels against the OpenMP
// versions. Results are bit-identical by construction; this only measures
// throughput.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cpl/kernels.hpp"
#include "cpl/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
    fn();  // warm-up
    const auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / reps;
}

} // namespace

int main() {
#ifdef _OPENMP
    std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
    std::printf("openmp: not enabled in this build\n");
#endif
    std::printf("%-16s %6s %12s %12s %9s\n", "kernel", "size", "serial (ms)", "omp (ms)",
                "speedup");

    cpl::Rng rng(42);
    for (int n : {64, 128, 256, 384}) {
        std::vector<double> a = rng.normal_vec(static_cast<size_t>(n) * n, 1.0);
        std::vector<double> b = rng.normal_vec(static_cast<size_t>(n) * n, 1.0);
        std::vector<double> c(static_cast<size_t>(n) * n);
        const int reps = n <= 128 ? 20 : 5;

        const double ts = time_ms(reps, [&] { cpl::kernels::serial::matmul(a.data(), b.data(), c.data(), n, n, n); });
        const double tp = time_ms(reps, [&] { cpl::kernels::omp::matmul(a.data(), b.data(), c.data(), n, n, n); });
        std::printf("%-16s %6d %12.3f %12.3f %8.2fx\n", "matmul", n, ts, tp, ts / tp);
    }

    for (int rows : {256, 1024, 4096}) {
        const int cols = 256;
        std::vector<double> x = rng.normal_vec(static_cast<size_t>(rows) * cols, 5.0);
        std::vector<double> y(x.size());
        std::vector<double> gamma(cols, 1.0), beta(cols, 0.0);

        double ts = time_ms(20, [&] { cpl::kernels::serial::softmax_rows(x.data(), y.data(), rows, cols); });
        double tp = time_ms(20, [&] { cpl::kernels::omp::softmax_rows(x.data(), y.data(), rows, cols); });
        std::printf("%-16s %6d %12.3f %12.3f %8.2fx\n", "softmax_rows", rows, ts, tp, ts / tp);

        ts = time_ms(20, [&] {
            cpl::kernels::serial::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(),
                                                  rows, cols, 1e-5);
        });
        tp = time_ms(20, [&] {
            cpl::kernels::omp::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(),
                                               rows, cols, 1e-5);
        });
        std::printf("%-16s %6d %12.3f %12.3f %8.2fx\n", "layer_norm_rows", rows, ts, tp, ts / tp);

        ts = time_ms(20, [&] { cpl::kernels::serial::gelu(x.data(), y.data(), x.size()); });
        tp = time_ms(20, [&] { cpl::kernels::omp::gelu(x.data(), y.data(), x.size()); });
        std::printf("%-16s %6d %12.3f %12.3f %8.2fx\n", "gelu", rows, ts, tp, ts / tp);
    }
    return 0;
}
