#pragma once

#include <cstddef>

// Data-parallel inner loops behind the numeric layer. Each kernel has a
// scalar reference implementation and an AVX2 variant; the active set is
// chosen at runtime from CPU capabilities and can be forced for tests.
// SIMD and scalar variants are equivalence-tested, not bit-identical:
// accumulation order differs, so results agree to ~1e-13 relative.

namespace fpad::kern {

enum class Isa { scalar, avx2 };

struct Ops {
    // sum_i a[i] * b[i]
    double (*dot)(const double* a, const double* b, std::size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // y[i] = max(0, x[i])
    void (*relu)(const double* x, double* y, std::size_t n);
    // grad_in[i] += grad_out[i] where pre[i] > 0 (subgradient 0 at 0)
    void (*relu_backward)(const double* pre, const double* grad_out, double* grad_in,
                          std::size_t n);
    // best[i] = max(best[i], row[i]); best_row[i] = row_index where row[i] strictly wins
    void (*row_max_update)(double* best, double* best_row, const double* row,
                           double row_index, std::size_t n);
};

const Ops& scalar_ops();
#if FPAD_HAVE_AVX2
const Ops& avx2_ops();
#endif

bool isa_available(Isa isa);
Isa best_isa();
Isa active_isa();
void force_isa(Isa isa);  // throws if unavailable on this CPU
const char* isa_name(Isa isa);

const Ops& ops();

inline double dot(const double* a, const double* b, std::size_t n) {
    return ops().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    ops().axpy(alpha, x, y, n);
}
inline void relu(const double* x, double* y, std::size_t n) { ops().relu(x, y, n); }
inline void relu_backward(const double* pre, const double* grad_out, double* grad_in,
                          std::size_t n) {
    ops().relu_backward(pre, grad_out, grad_in, n);
}
inline void row_max_update(double* best, double* best_row, const double* row,
                           double row_index, std::size_t n) {
    ops().row_max_update(best, best_row, row, row_index, n);
}

}  // namespace fpad::kern
