#pragma once

#include <cstddef>

namespace cpl::kernels {

// Dense inner loops used by the tensor ops. Each kernel exists twice: a
// plain serial reference and an OpenMP version parallelized over independent
// output rows/elements. Both accumulate each output element in the same
// order, so results are bit-identical regardless of mode or thread count;
// the test suite asserts that. The top-level functions dispatch on a global
// mode switch.

enum class Mode { serial, parallel };

Mode mode();
void set_mode(Mode m);

namespace serial {
// c[m×n] = a[m×k] · b[k×n]
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
// c[m×n] = a[m×k] · b[n×k]^T
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
// c[m×n] = a[k×m]^T · b[k×n]
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
// row-wise softmax with max subtraction
void softmax_rows(const double* x, double* y, int rows, int cols);
// row-wise layer norm (population variance), then affine gamma/beta
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps);
void gelu(const double* x, double* y, size_t n);
} // namespace serial

namespace omp {
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(const double* x, double* y, int rows, int cols);
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps);
void gelu(const double* x, double* y, size_t n);
} // namespace omp

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(const double* x, double* y, int rows, int cols);
void layer_norm_rows(const double* x, const double* gamma, const double* beta,
                     double* y, int rows, int cols, double eps);
void gelu(const double* x, double* y, size_t n);

double gelu_scalar(double x);
double gelu_grad_scalar(double x);

} // namespace cpl::kernels
