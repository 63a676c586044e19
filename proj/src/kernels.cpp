#include "cpl/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

namespace cpl::kernels {

namespace {
std::atomic<Mode> g_mode{Mode::parallel};
}

Mode mode() { return g_mode.load(std::memory_order_relaxed); }
void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }

double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

// -------------------------------------------------------------------------
// serial reference kernels

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        std::fill(ci, ci + n, 0.0);
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    // a is [k×m], b is [k×n]
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(p) * n + j];
            ci[j] = acc;
        }
    }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        double* yr = y + static_cast<size_t>(r) * cols;
        double mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            denom += yr[j];
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        double* yr = y + static_cast<size_t>(r) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += xr[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < cols; ++j)
            yr[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
    }
}

void gelu(const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
}

} // namespace serial

// -------------------------------------------------------------------------
// OpenMP kernels. Work is split over independent output rows/elements and
// each element keeps the serial accumulation order, so the results match the
// serial kernels bit for bit.

namespace omp {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        std::fill(ci, ci + n, 0.0);
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(p) * n + j];
            ci[j] = acc;
        }
    }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r)
        serial::softmax_rows(x + static_cast<size_t>(r) * cols,
                             y + static_cast<size_t>(r) * cols, 1, cols);
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r)
        serial::layer_norm_rows(x + static_cast<size_t>(r) * cols, gamma, beta,
                                y + static_cast<size_t>(r) * cols, 1, cols, eps);
}

void gelu(const double* x, double* y, size_t n) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i)
        y[i] = gelu_scalar(x[i]);
}

} // namespace omp

// -------------------------------------------------------------------------

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
    mode() == Mode::serial ? serial::matmul(a, b, c, m, k, n) : omp::matmul(a, b, c, m, k, n);
}
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    mode() == Mode::serial ? serial::matmul_nt(a, b, c, m, k, n) : omp::matmul_nt(a, b, c, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    mode() == Mode::serial ? serial::matmul_tn(a, b, c, m, k, n) : omp::matmul_tn(a, b, c, m, k, n);
}
void softmax_rows(const double* x, double* y, int rows, int cols) {
    mode() == Mode::serial ? serial::softmax_rows(x, y, rows, cols)
                           : omp::softmax_rows(x, y, rows, cols);
}
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps) {
    mode() == Mode::serial ? serial::layer_norm_rows(x, gamma, beta, y, rows, cols, eps)
                           : omp::layer_norm_rows(x, gamma, beta, y, rows, cols, eps);
}
void gelu(const double* x, double* y, size_t n) {
    mode() == Mode::serial ? serial::gelu(x, y, n) : omp::gelu(x, y, n);
}

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

} // namespace cpl::kernels
