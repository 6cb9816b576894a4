#pragma once

#include <cstdint>

namespace hdt::kernels {

// Row-major matmul kernels. Every output element is accumulated by a single
// thread in a fixed k-order, so results are bit-identical for any thread
// count; `parallel=false` runs the same loop body serially and is kept as the
// reference path for tests and the kernel benchmark.

// c (m,n) = a (m,k) @ b (k,n); accumulates into c when acc is set
void mm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
        bool acc = false, bool parallel = true);

// c (m,n) = a (m,k) @ b (n,k)^T
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
           bool acc = false, bool parallel = true);

// c (p,q) = x (m,p)^T @ y (m,q)
void mm_tn(const double* x, const double* y, double* c, int64_t m, int64_t p, int64_t q,
           bool acc = false, bool parallel = true);

int max_threads();
void set_threads(int n);

}  // namespace hdt::kernels
