#include "fpad/kernels.hpp"

#include "fpad/error.hpp"

namespace fpad::kern {

namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu_scalar(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_scalar(const double* pre, const double* grad_out, double* grad_in,
                          std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (pre[i] > 0.0) grad_in[i] += grad_out[i];
    }
}

void row_max_update_scalar(double* best, double* best_row, const double* row,
                           double row_index, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (row[i] > best[i]) {
            best[i] = row[i];
            best_row[i] = row_index;
        }
    }
}

Isa g_active = best_isa();

}  // namespace

const Ops& scalar_ops() {
    static const Ops ops{dot_scalar, axpy_scalar, relu_scalar, relu_backward_scalar,
                         row_max_update_scalar};
    return ops;
}

bool isa_available(Isa isa) {
    if (isa == Isa::scalar) return true;
#if FPAD_HAVE_AVX2
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa best_isa() { return isa_available(Isa::avx2) ? Isa::avx2 : Isa::scalar; }

Isa active_isa() { return g_active; }

void force_isa(Isa isa) {
    if (!isa_available(isa)) throw ConfigError("requested kernel ISA is not available on this CPU");
    g_active = isa;
}

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

const Ops& ops() {
#if FPAD_HAVE_AVX2
    if (g_active == Isa::avx2) return avx2_ops();
#endif
    return scalar_ops();
}

}  // namespace fpad::kern
