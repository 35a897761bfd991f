#include "ipslt/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ipslt::kernels {

namespace {

std::atomic<bool> g_parallel{true};
std::atomic<std::size_t> g_min_work{32768};

bool go_parallel(std::size_t work) {
#ifdef _OPENMP
  if (!g_parallel.load(std::memory_order_relaxed)) return false;
  if (work < g_min_work.load(std::memory_order_relaxed)) return false;
  if (omp_in_parallel()) return false;
  return omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}

}  // namespace

void set_parallel_enabled(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }
void set_parallel_min_work(std::size_t element_ops) { g_min_work.store(element_ops); }
std::size_t parallel_min_work() { return g_min_work.load(); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

template <typename Real>
void matmul_nn(const Real* a, const Real* b, Real* c, int m, int k, int n,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    Real* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, Real(0));
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      const Real* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
void matmul_nt(const Real* a, const Real* bt, Real* c, int m, int k, int n,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* brow = bt + static_cast<std::size_t>(j) * k;
      Real acc = 0;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      if (accumulate) {
        crow[j] += acc;
      } else {
        crow[j] = acc;
      }
    }
  }
}

template <typename Real>
void matmul_tn(const Real* at, const Real* b, Real* c, int m, int k, int n,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    Real* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, Real(0));
    for (int kk = 0; kk < k; ++kk) {
      const Real av = at[static_cast<std::size_t>(kk) * m + i];
      const Real* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
void row_softmax(const Real* x, Real* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const Real* xr = x + static_cast<std::size_t>(i) * cols;
    Real* yr = y + static_cast<std::size_t>(i) * cols;
    Real mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    Real sum = 0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <typename Real>
void adam_update(Real* p, const Real* g, Real* m, Real* v, std::size_t n,
                 Real lr, Real beta1, Real beta2, Real eps, Real bias1,
                 Real bias2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (Real(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (Real(1) - beta2) * g[i] * g[i];
    const Real mhat = m[i] / bias1;
    const Real vhat = v[i] / bias2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template void matmul_nn<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_nn<double>(const double*, const double*, double*, int, int, int, bool);
template void matmul_nt<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_nt<double>(const double*, const double*, double*, int, int, int, bool);
template void matmul_tn<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_tn<double>(const double*, const double*, double*, int, int, int, bool);
template void row_softmax<float>(const float*, float*, int, int);
template void row_softmax<double>(const double*, double*, int, int);
template void adam_update<float>(float*, const float*, float*, float*, std::size_t, float, float, float, float, float, float);
template void adam_update<double>(double*, const double*, double*, double*, std::size_t, double, double, double, double, double, double);

}  // namespace serial

template <typename Real>
void matmul_nn(const Real* a, const Real* b, Real* c, int m, int k, int n,
               bool accumulate) {
  const std::size_t work = static_cast<std::size_t>(m) * k * n;
  if (go_parallel(work) && m > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      serial::matmul_nn(a + static_cast<std::size_t>(i) * k, b,
                        c + static_cast<std::size_t>(i) * n, 1, k, n,
                        accumulate);
    }
    return;
#endif
  }
  serial::matmul_nn(a, b, c, m, k, n, accumulate);
}

template <typename Real>
void matmul_nt(const Real* a, const Real* bt, Real* c, int m, int k, int n,
               bool accumulate) {
  const std::size_t work = static_cast<std::size_t>(m) * k * n;
  if (go_parallel(work) && m > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      serial::matmul_nt(a + static_cast<std::size_t>(i) * k, bt,
                        c + static_cast<std::size_t>(i) * n, 1, k, n,
                        accumulate);
    }
    return;
#endif
  }
  serial::matmul_nt(a, bt, c, m, k, n, accumulate);
}

template <typename Real>
void matmul_tn(const Real* at, const Real* b, Real* c, int m, int k, int n,
               bool accumulate) {
  const std::size_t work = static_cast<std::size_t>(m) * k * n;
  if (go_parallel(work) && m > 1) {
#ifdef _OPENMP
    // Parallel over output rows; each thread scans the same k range in the
    // same order, so the per-element accumulation matches serial exactly.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      Real* crow = c + static_cast<std::size_t>(i) * n;
      if (!accumulate) std::fill(crow, crow + n, Real(0));
      for (int kk = 0; kk < k; ++kk) {
        const Real av = at[static_cast<std::size_t>(kk) * m + i];
        const Real* brow = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
#endif
  }
  serial::matmul_tn(at, b, c, m, k, n, accumulate);
}

template <typename Real>
void row_softmax(const Real* x, Real* y, int rows, int cols) {
  const std::size_t work = static_cast<std::size_t>(rows) * cols * 8;
  if (go_parallel(work) && rows > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
      serial::row_softmax(x + static_cast<std::size_t>(i) * cols,
                          y + static_cast<std::size_t>(i) * cols, 1, cols);
    }
    return;
#endif
  }
  serial::row_softmax(x, y, rows, cols);
}

template <typename Real>
void adam_update(Real* p, const Real* g, Real* m, Real* v, std::size_t n,
                 Real lr, Real beta1, Real beta2, Real eps, Real bias1,
                 Real bias2) {
  if (go_parallel(n * 8)) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      const std::size_t idx = static_cast<std::size_t>(i);
      serial::adam_update(p + idx, g + idx, m + idx, v + idx, 1, lr, beta1,
                          beta2, eps, bias1, bias2);
    }
    return;
#endif
  }
  serial::adam_update(p, g, m, v, n, lr, beta1, beta2, eps, bias1, bias2);
}

template void matmul_nn<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_nn<double>(const double*, const double*, double*, int, int, int, bool);
template void matmul_nt<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_nt<double>(const double*, const double*, double*, int, int, int, bool);
template void matmul_tn<float>(const float*, const float*, float*, int, int, int, bool);
template void matmul_tn<double>(const double*, const double*, double*, int, int, int, bool);
template void row_softmax<float>(const float*, float*, int, int);
template void row_softmax<double>(const double*, double*, int, int);
template void adam_update<float>(float*, const float*, float*, float*, std::size_t, float, float, float, float, float, float);
template void adam_update<double>(double*, const double*, double*, double*, std::size_t, double, double, double, double, double, double);

}  // namespace ipslt::kernels
