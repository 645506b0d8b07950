#include "fpad/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fpad/kernels.hpp"

namespace fpad {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t m = x.rows(), n = x.cols(), k = w.cols();
    if (w.rows() != n) throw ContractViolation("linear: inner dims do not conform");
    if (b.dims.size() != 1 || b.dims[0] != k) throw ContractViolation("linear: bias dim mismatch");
    Tensor y = Tensor::zeros({m, k});
    for (std::size_t r = 0; r < m; ++r) {
        double* yr = y.row_ptr(r);
        kern::axpy(1.0, b.v.data(), yr, k);
        const double* xr = x.row_ptr(r);
        for (std::size_t i = 0; i < n; ++i) {
            if (xr[i] != 0.0) kern::axpy(xr[i], w.row_ptr(i), yr, k);
        }
    }
    return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor* grad_x,
                     Tensor* grad_w, Tensor* grad_b) {
    const std::size_t m = x.rows(), n = x.cols(), k = w.cols();
    if (grad_y.rows() != m || grad_y.cols() != k)
        throw ContractViolation("linear_backward: grad_y dims mismatch");
    for (std::size_t r = 0; r < m; ++r) {
        const double* gy = grad_y.row_ptr(r);
        const double* xr = x.row_ptr(r);
        if (grad_x) {
            double* gx = grad_x->row_ptr(r);
            for (std::size_t i = 0; i < n; ++i) gx[i] += kern::dot(w.row_ptr(i), gy, k);
        }
        if (grad_w) {
            for (std::size_t i = 0; i < n; ++i) {
                if (xr[i] != 0.0) kern::axpy(xr[i], gy, grad_w->row_ptr(i), k);
            }
        }
        if (grad_b) kern::axpy(1.0, gy, grad_b->v.data(), k);
    }
}

Tensor relu(const Tensor& x) {
    Tensor y = Tensor::zeros(x.dims);
    kern::relu(x.v.data(), y.v.data(), x.size());
    return y;
}

void relu_backward(const Tensor& pre, const Tensor& grad_out, Tensor& grad_in) {
    if (!pre.same_dims(grad_out) || !pre.same_dims(grad_in))
        throw ContractViolation("relu_backward: dims mismatch");
    kern::relu_backward(pre.v.data(), grad_out.v.data(), grad_in.v.data(), pre.size());
}

namespace {

// log(sum exp(logits - max)) and the max itself
std::pair<double, double> log_sum_exp(std::span<const double> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logits) mx = std::max(mx, l);
    double acc = 0.0;
    for (double l : logits) acc += std::exp(l - mx);
    return {std::log(acc), mx};
}

}  // namespace

double softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
    if (logits.size() < 2) throw ContractViolation("softmax_cross_entropy: need N >= 2 logits");
    if (label >= logits.size()) throw ContractViolation("softmax_cross_entropy: label out of range");
    const auto [lse, mx] = log_sum_exp(logits);
    return lse - (logits[label] - mx);
}

void softmax_cross_entropy_backward(std::span<const double> logits, std::size_t label,
                                    double upstream, std::span<double> grad) {
    if (label >= logits.size() || grad.size() != logits.size())
        throw ContractViolation("softmax_cross_entropy_backward: dims mismatch");
    const auto [lse, mx] = log_sum_exp(logits);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double p = std::exp(logits[i] - mx - lse);
        grad[i] += upstream * (p - (i == label ? 1.0 : 0.0));
    }
}

double binary_score_loss(double bg_logit, double fg_logit, int label) {
    const double logits[2] = {bg_logit, fg_logit};
    return softmax_cross_entropy(std::span<const double>(logits, 2),
                                 static_cast<std::size_t>(label != 0));
}

void binary_score_loss_backward(double bg_logit, double fg_logit, int label, double upstream,
                                double& grad_bg, double& grad_fg) {
    const double logits[2] = {bg_logit, fg_logit};
    double g[2] = {0.0, 0.0};
    softmax_cross_entropy_backward(std::span<const double>(logits, 2),
                                   static_cast<std::size_t>(label != 0), upstream,
                                   std::span<double>(g, 2));
    grad_bg += g[0];
    grad_fg += g[1];
}

double smooth_l1(const Tensor& pred, const Tensor& target) {
    if (!pred.same_dims(target)) throw ContractViolation("smooth_l1: dims mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.v[i] - target.v[i];
        const double a = std::abs(d);
        acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
    }
    return acc;
}

void smooth_l1_backward(const Tensor& pred, const Tensor& target, double upstream,
                        Tensor& grad_pred) {
    if (!pred.same_dims(target) || !pred.same_dims(grad_pred))
        throw ContractViolation("smooth_l1_backward: dims mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.v[i] - target.v[i];
        grad_pred.v[i] += upstream * std::clamp(d, -1.0, 1.0);
    }
}

void sgd_step(ParamStore& params, double learning_rate) {
    for (auto& e : params.entries()) {
        kern::axpy(-learning_rate, e.grad.v.data(), e.value.v.data(), e.value.size());
        std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
    }
}

Tensor glorot_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::zeros({fan_in, fan_out});
    for (auto& x : t.v) x = rng.uniform(-s, s);
    return t;
}

GradCheckReport finite_diff_check(const std::function<double(ParamStore&)>& loss_and_grad,
                                  ParamStore& params, double step, double tolerance) {
    GradCheckReport report;

    params.zero_grads();
    const double base_loss = loss_and_grad(params);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.entries().size());
    for (const auto& e : params.entries()) analytic.push_back(e.grad.v);

    const bool base_finite = std::isfinite(base_loss);
    for (std::size_t p = 0; p < params.entries().size(); ++p) {
        auto& entry = params.entries()[p];
        GradCheckRow row;
        row.param = entry.name;
        row.loss_finite = base_finite;
        for (std::size_t i = 0; i < entry.value.size(); ++i) {
            const double saved = entry.value.v[i];
            entry.value.v[i] = saved + step;
            params.zero_grads();
            const double f_plus = loss_and_grad(params);
            entry.value.v[i] = saved - step;
            params.zero_grads();
            const double f_minus = loss_and_grad(params);
            entry.value.v[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                row.loss_finite = false;
                continue;
            }
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > row.max_rel_err) {
                row.max_rel_err = rel;
                row.worst_index = i;
                row.analytic = a;
                row.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, row.max_rel_err);
        report.all_finite = report.all_finite && row.loss_finite;
        report.rows.push_back(std::move(row));
    }
    (void)tolerance;
    params.zero_grads();
    return report;
}

}  // namespace fpad
