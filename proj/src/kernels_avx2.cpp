#include "fpad/kernels.hpp"

#if FPAD_HAVE_AVX2

#include <immintrin.h>

namespace fpad::kern {

namespace {

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    acc0 = _mm256_add_pd(acc0, acc1);
    __m128d lo = _mm256_castpd256_pd128(acc0);
    __m128d hi = _mm256_extractf128_pd(acc0, 1);
    lo = _mm_add_pd(lo, hi);
    double acc = _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu_avx2(const double* x, double* y, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    }
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_avx2(const double* pre, const double* grad_out, double* grad_in,
                        std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(pre + i), zero, _CMP_GT_OQ);
        const __m256d g = _mm256_and_pd(_mm256_loadu_pd(grad_out + i), mask);
        _mm256_storeu_pd(grad_in + i, _mm256_add_pd(_mm256_loadu_pd(grad_in + i), g));
    }
    for (; i < n; ++i) {
        if (pre[i] > 0.0) grad_in[i] += grad_out[i];
    }
}

void row_max_update_avx2(double* best, double* best_row, const double* row,
                         double row_index, std::size_t n) {
    const __m256d vidx = _mm256_set1_pd(row_index);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d vb = _mm256_loadu_pd(best + i);
        const __m256d vr = _mm256_loadu_pd(row + i);
        const __m256d mask = _mm256_cmp_pd(vr, vb, _CMP_GT_OQ);
        _mm256_storeu_pd(best + i, _mm256_blendv_pd(vb, vr, mask));
        const __m256d vbr = _mm256_loadu_pd(best_row + i);
        _mm256_storeu_pd(best_row + i, _mm256_blendv_pd(vbr, vidx, mask));
    }
    for (; i < n; ++i) {
        if (row[i] > best[i]) {
            best[i] = row[i];
            best_row[i] = row_index;
        }
    }
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops ops{dot_avx2, axpy_avx2, relu_avx2, relu_backward_avx2,
                         row_max_update_avx2};
    return ops;
}

}  // namespace fpad::kern

#endif  // FPAD_HAVE_AVX2
