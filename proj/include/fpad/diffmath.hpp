#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fpad/param_store.hpp"
#include "fpad/tensor.hpp"

// Differentiable primitives: each forward has a hand-derived backward that
// accumulates into caller-provided gradient tensors. There is no tape; the
// call sites compose backwards in reverse order themselves.

namespace fpad {

// y = x W + b with x (m x n), W (n x k) row-major, b (k).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Accumulates into any non-null output. grad_y is (m x k).
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor* grad_x,
                     Tensor* grad_w, Tensor* grad_b);

Tensor relu(const Tensor& x);
// grad_in += grad_out masked by pre > 0 (subgradient at 0 is 0).
void relu_backward(const Tensor& pre, const Tensor& grad_out, Tensor& grad_in);

// -log softmax(logits)[label], max-subtracted for stability.
double softmax_cross_entropy(std::span<const double> logits, std::size_t label);
// grad += upstream * (softmax(logits) - onehot(label))
void softmax_cross_entropy_backward(std::span<const double> logits, std::size_t label,
                                    double upstream, std::span<double> grad);

// Foreground/background decision as a 2-way softmax over (bg, fg) logits.
double binary_score_loss(double bg_logit, double fg_logit, int label);
void binary_score_loss_backward(double bg_logit, double fg_logit, int label, double upstream,
                                double& grad_bg, double& grad_fg);

// Sum over elements of 0.5 d^2 if |d| < 1 else |d| - 0.5, d = pred - target.
double smooth_l1(const Tensor& pred, const Tensor& target);
void smooth_l1_backward(const Tensor& pred, const Tensor& target, double upstream,
                        Tensor& grad_pred);

// p <- p - lr * g for every parameter, then gradients are zeroed.
void sgd_step(ParamStore& params, double learning_rate);

// Glorot-style init: weights uniform in [-s, s], s = sqrt(6/(fan_in+fan_out));
// bias tensors (1-d) start at zero.
Tensor glorot_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct GradCheckRow {
    std::string param;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool loss_finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double max_rel_err = 0.0;
    bool all_finite = true;
    bool passed(double tolerance) const { return all_finite && max_rel_err < tolerance; }
};

// loss_and_grad must return the loss and accumulate analytic gradients into
// the store (grads are zeroed before the call). Central differences are
// compared elementwise; the relative-error denominator is floored at 1e-3 so
// legitimately tiny gradients are judged absolutely.
GradCheckReport finite_diff_check(const std::function<double(ParamStore&)>& loss_and_grad,
                                  ParamStore& params, double step, double tolerance);

}  // namespace fpad
