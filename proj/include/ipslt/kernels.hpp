#pragma once

#include <cstddef>

namespace ipslt::kernels {

// Runtime switches for the OpenMP paths. The dispatching front ends below
// fall back to the serial reference when OpenMP is unavailable, when the
// caller is already inside a parallel region, or when the work is below
// the threshold. Serial and parallel variants are bitwise identical: every
// output element is produced by exactly one thread with a fixed
// accumulation order, so enabling threads never changes results.
void set_parallel_enabled(bool on);
bool parallel_enabled();
void set_parallel_min_work(std::size_t element_ops);
std::size_t parallel_min_work();
int max_threads();

// Serial reference implementations, kept callable for tests and benchmarks.
namespace serial {

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename Real>
void matmul_nn(const Real* a, const Real* b, Real* c, int m, int k, int n,
               bool accumulate);

// c[m x n] (+)= a[m x k] * bt[n x k]^T   (bt stored row-major as n x k)
template <typename Real>
void matmul_nt(const Real* a, const Real* bt, Real* c, int m, int k, int n,
               bool accumulate);

// c[m x n] (+)= at[k x m]^T * b[k x n]   (at stored row-major as k x m)
template <typename Real>
void matmul_tn(const Real* at, const Real* b, Real* c, int m, int k, int n,
               bool accumulate);

// y = softmax(x) independently per row; max-subtracted for stability.
template <typename Real>
void row_softmax(const Real* x, Real* y, int rows, int cols);

// Bias-corrected Adam update, in place. bias1 = 1 - beta1^t, bias2 likewise.
template <typename Real>
void adam_update(Real* p, const Real* g, Real* m, Real* v, std::size_t n,
                 Real lr, Real beta1, Real beta2, Real eps, Real bias1,
                 Real bias2);

}  // namespace serial

// Dispatching front ends (OpenMP when it pays off, serial otherwise).
template <typename Real>
void matmul_nn(const Real* a, const Real* b, Real* c, int m, int k, int n,
               bool accumulate);
template <typename Real>
void matmul_nt(const Real* a, const Real* bt, Real* c, int m, int k, int n,
               bool accumulate);
template <typename Real>
void matmul_tn(const Real* at, const Real* b, Real* c, int m, int k, int n,
               bool accumulate);
template <typename Real>
void row_softmax(const Real* x, Real* y, int rows, int cols);
template <typename Real>
void adam_update(Real* p, const Real* g, Real* m, Real* v, std::size_t n,
                 Real lr, Real beta1, Real beta2, Real eps, Real bias1,
                 Real bias2);

}  // namespace ipslt::kernels
