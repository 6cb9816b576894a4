#include "hdt/kernels.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hdt::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace {

inline void mm_row(const double* a, const double* b, double* c, int64_t i, int64_t k, int64_t n,
                   bool acc) {
  double* ci = c + i * n;
  if (!acc) std::memset(ci, 0, sizeof(double) * static_cast<size_t>(n));
  const double* ai = a + i * k;
  for (int64_t kk = 0; kk < k; ++kk) {
    const double av = ai[kk];
    const double* bk = b + kk * n;
    for (int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
  }
}

inline void mm_nt_row(const double* a, const double* b, double* c, int64_t i, int64_t k, int64_t n,
                      bool acc) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (int64_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (int64_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
    if (acc)
      ci[j] += s;
    else
      ci[j] = s;
  }
}

inline void mm_tn_row(const double* x, const double* y, double* c, int64_t p_i, int64_t m,
                      int64_t p, int64_t q, bool acc) {
  double* cp = c + p_i * q;
  if (!acc) std::memset(cp, 0, sizeof(double) * static_cast<size_t>(q));
  for (int64_t mm_ = 0; mm_ < m; ++mm_) {
    const double xv = x[mm_ * p + p_i];
    const double* ym = y + mm_ * q;
    for (int64_t j = 0; j < q; ++j) cp[j] += xv * ym[j];
  }
}

}  // namespace

void mm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc,
        bool parallel) {
  if (parallel && m > 1) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_row(a, b, c, i, k, n, acc);
  } else {
    for (int64_t i = 0; i < m; ++i) mm_row(a, b, c, i, k, n, acc);
  }
}

void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc,
           bool parallel) {
  if (parallel && m > 1) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n, acc);
  } else {
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n, acc);
  }
}

void mm_tn(const double* x, const double* y, double* c, int64_t m, int64_t p, int64_t q, bool acc,
           bool parallel) {
  if (parallel && p > 1) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < p; ++i) mm_tn_row(x, y, c, i, m, p, q, acc);
  } else {
    for (int64_t i = 0; i < p; ++i) mm_tn_row(x, y, c, i, m, p, q, acc);
  }
}

}  // namespace hdt::kernels
