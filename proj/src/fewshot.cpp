#include "fpad/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "fpad/diffmath.hpp"
#include "fpad/error.hpp"
#include "fpad/kernels.hpp"

namespace fpad {

namespace {

constexpr double kNormEps = 1e-12;  // below this a vector counts as zero
constexpr double kAdaptEps = 1e-8;  // adaptation-loss gradient guard at L ~ 0

double row_norm(const Tensor& t, std::size_t r) {
    const double* p = t.row_ptr(r);
    return std::sqrt(kern::dot(p, p, t.cols()));
}

}  // namespace

EncodeOut encode_exemplars(const Tensor& raw, const ParamStore& params) {
    EncodeOut out;
    out.x = raw;
    const Tensor& w = params.value("enc.shared.w");
    const std::size_t d = raw.cols();
    if (w.rows() % d != 0)
        throw ContractViolation("encode_exemplars: projection rows not a multiple of feature dim");
    const std::size_t bins = w.rows() / d;
    // An exemplar is what a perfectly pooled proposal of its class looks like:
    // the raw feature repeated in every bin slot.
    out.tiled = Tensor::zeros({raw.rows(), bins * d});
    for (std::size_t r = 0; r < raw.rows(); ++r)
        for (std::size_t b = 0; b < bins; ++b)
            for (std::size_t c = 0; c < d; ++c) out.tiled.at(r, b * d + c) = raw.at(r, c);
    out.pre = linear(out.tiled, w, params.value("enc.shared.b"));
    out.feat = relu(out.pre);
    return out;
}

void encode_exemplars_backward(const EncodeOut& out, const Tensor& grad_feat, ParamStore& params) {
    Tensor grad_pre = Tensor::zeros(out.pre.dims);
    relu_backward(out.pre, grad_feat, grad_pre);
    linear_backward(out.tiled, params.value("enc.shared.w"), grad_pre, nullptr,
                    &params.grad("enc.shared.w"), &params.grad("enc.shared.b"));
}

Tensor similarity_matrix(const Tensor& support, const Tensor& proposals) {
    if (support.cols() != proposals.cols())
        throw ContractViolation("similarity_matrix: feature dims differ");
    const std::size_t M = support.rows(), N = proposals.rows(), E = support.cols();
    Tensor sim = Tensor::zeros({M, N});
    std::vector<double> s_norm(M), p_norm(N);
    for (std::size_t j = 0; j < M; ++j) s_norm[j] = row_norm(support, j);
    for (std::size_t i = 0; i < N; ++i) p_norm[i] = row_norm(proposals, i);
    for (std::size_t j = 0; j < M; ++j) {
        if (s_norm[j] <= kNormEps) continue;
        for (std::size_t i = 0; i < N; ++i) {
            if (p_norm[i] <= kNormEps) continue;
            const double c =
                kern::dot(support.row_ptr(j), proposals.row_ptr(i), E) / (s_norm[j] * p_norm[i]);
            sim.at(j, i) = std::clamp(c, -1.0, 1.0);
        }
    }
    return sim;
}

void similarity_matrix_backward(const Tensor& support, const Tensor& proposals,
                                const Tensor& grad_sim, Tensor& grad_support,
                                Tensor& grad_proposals) {
    const std::size_t M = support.rows(), N = proposals.rows(), E = support.cols();
    if (grad_sim.dims != std::vector<std::size_t>{M, N})
        throw ContractViolation("similarity_matrix_backward: grad dims mismatch");
    for (std::size_t j = 0; j < M; ++j) {
        const double na = row_norm(support, j);
        if (na <= kNormEps) continue;
        const double* a = support.row_ptr(j);
        for (std::size_t i = 0; i < N; ++i) {
            const double g = grad_sim.at(j, i);
            if (g == 0.0) continue;
            const double nb = row_norm(proposals, i);
            if (nb <= kNormEps) continue;
            const double* b = proposals.row_ptr(i);
            const double c = kern::dot(a, b, E) / (na * nb);
            kern::axpy(g / (na * nb), b, grad_support.row_ptr(j), E);
            kern::axpy(-g * c / (na * na), a, grad_support.row_ptr(j), E);
            kern::axpy(g / (na * nb), a, grad_proposals.row_ptr(i), E);
            kern::axpy(-g * c / (nb * nb), b, grad_proposals.row_ptr(i), E);
        }
    }
}

LabelAssignment assign_labels(const Tensor& sim, std::size_t k) {
    if (k < 1 || sim.rows() % k != 0)
        throw ContractViolation("assign_labels: rows must be k per class");
    const std::size_t G = sim.rows() / k, N = sim.cols();
    LabelAssignment out;
    out.label.resize(N);
    out.score.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        int best = 0;
        double best_avg = -2.0;
        for (std::size_t g = 0; g < G; ++g) {
            double avg = 0.0;
            for (std::size_t r = 0; r < k; ++r) avg += sim.at(g * k + r, i);
            avg /= static_cast<double>(k);
            if (avg > best_avg) {
                best_avg = avg;
                best = static_cast<int>(g);
            }
        }
        out.label[i] = best;
        out.score[i] = best_avg;
    }
    return out;
}

double fewshot_cls_loss(const Tensor& sim, const std::vector<int>& targets, std::size_t k,
                        double tau) {
    if (k < 1 || sim.rows() % k != 0)
        throw ContractViolation("fewshot_cls_loss: rows must be k per class");
    if (targets.size() != sim.cols())
        throw ContractViolation("fewshot_cls_loss: one target per proposal column");
    if (!(tau > 0)) throw ContractViolation("fewshot_cls_loss: tau must be positive");
    const std::size_t G = sim.rows() / k;
    double acc = 0.0;
    std::size_t count = 0;
    std::vector<double> logits(G);
    for (std::size_t i = 0; i < sim.cols(); ++i) {
        const int t = targets[i];
        if (t < 0) continue;
        if (static_cast<std::size_t>(t) >= G)
            throw ContractViolation("fewshot_cls_loss: target label out of range");
        for (std::size_t g = 0; g < G; ++g) {
            double avg = 0.0;
            for (std::size_t r = 0; r < k; ++r) avg += sim.at(g * k + r, i);
            logits[g] = avg / (static_cast<double>(k) * tau);
        }
        acc += softmax_cross_entropy(logits, static_cast<std::size_t>(t));
        ++count;
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

void fewshot_cls_loss_backward(const Tensor& sim, const std::vector<int>& targets, std::size_t k,
                               double tau, double upstream, Tensor& grad_sim) {
    const std::size_t G = sim.rows() / k;
    std::size_t count = 0;
    for (int t : targets)
        if (t >= 0) ++count;
    if (!count) return;
    const double w = upstream / static_cast<double>(count);
    std::vector<double> logits(G), grad_logits(G);
    for (std::size_t i = 0; i < sim.cols(); ++i) {
        const int t = targets[i];
        if (t < 0) continue;
        for (std::size_t g = 0; g < G; ++g) {
            double avg = 0.0;
            for (std::size_t r = 0; r < k; ++r) avg += sim.at(g * k + r, i);
            logits[g] = avg / (static_cast<double>(k) * tau);
        }
        std::fill(grad_logits.begin(), grad_logits.end(), 0.0);
        softmax_cross_entropy_backward(logits, static_cast<std::size_t>(t), w, grad_logits);
        for (std::size_t g = 0; g < G; ++g) {
            const double per_row = grad_logits[g] / (static_cast<double>(k) * tau);
            for (std::size_t r = 0; r < k; ++r) grad_sim.at(g * k + r, i) += per_row;
        }
    }
}

Tensor row_normalize(const Tensor& m) {
    Tensor out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = row_norm(m, r);
        if (n < kNormEps) continue;
        double* p = out.row_ptr(r);
        for (std::size_t c = 0; c < m.cols(); ++c) p[c] /= n;
    }
    return out;
}

void row_normalize_backward(const Tensor& m, const Tensor& grad_normed, Tensor& grad_m) {
    if (grad_normed.dims != m.dims || grad_m.dims != m.dims)
        throw ContractViolation("row_normalize_backward: dims mismatch");
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = row_norm(m, r);
        if (n < kNormEps) continue;  // zero row: flat, no gradient
        const double* x = m.row_ptr(r);
        const double* g = grad_normed.row_ptr(r);
        const double xg = kern::dot(x, g, m.cols());
        const double inv = 1.0 / n, inv3 = inv * inv * inv;
        double* out = grad_m.row_ptr(r);
        for (std::size_t c = 0; c < m.cols(); ++c) out[c] += g[c] * inv - x[c] * xg * inv3;
    }
}

double adaptation_loss(const Tensor& proposal_feats, const Tensor& support_feats) {
    if (proposal_feats.cols() != support_feats.cols())
        throw ContractViolation("adaptation_loss: feature dims differ");
    const std::size_t N = proposal_feats.rows(), M = support_feats.rows(), E = support_feats.cols();
    double acc = 0.0;
    for (std::size_t d = 0; d < E; ++d) {
        double mp = 0.0, ms = 0.0;
        for (std::size_t i = 0; i < N; ++i) mp += proposal_feats.at(i, d);
        for (std::size_t j = 0; j < M; ++j) ms += support_feats.at(j, d);
        const double diff = mp / static_cast<double>(N) - ms / static_cast<double>(M);
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

void adaptation_loss_backward(const Tensor& proposal_feats, const Tensor& support_feats,
                              double upstream, Tensor& grad_proposals, Tensor& grad_support) {
    const std::size_t N = proposal_feats.rows(), M = support_feats.rows(), E = support_feats.cols();
    std::vector<double> diff(E);
    double norm2 = 0.0;
    for (std::size_t d = 0; d < E; ++d) {
        double mp = 0.0, ms = 0.0;
        for (std::size_t i = 0; i < N; ++i) mp += proposal_feats.at(i, d);
        for (std::size_t j = 0; j < M; ++j) ms += support_feats.at(j, d);
        diff[d] = mp / static_cast<double>(N) - ms / static_cast<double>(M);
        norm2 += diff[d] * diff[d];
    }
    const double norm = std::sqrt(norm2);
    if (norm < kAdaptEps) return;  // flat at the optimum; avoid 0/0
    for (std::size_t d = 0; d < E; ++d) {
        const double g = upstream * diff[d] / norm;
        for (std::size_t i = 0; i < N; ++i) grad_proposals.at(i, d) += g / static_cast<double>(N);
        for (std::size_t j = 0; j < M; ++j) grad_support.at(j, d) -= g / static_cast<double>(M);
    }
}

double total_loss(double l_p1, double l_p2, double l_fewshot, double l_adapt, double lambda) {
    if (lambda < 0) throw ContractViolation("total_loss: lambda must be >= 0");
    const struct {
        const char* name;
        double value;
    } parts[] = {{"stage-1 proposal loss", l_p1},
                 {"stage-2 proposal loss", l_p2},
                 {"few-shot classification loss", l_fewshot},
                 {"adaptation loss", l_adapt}};
    for (const auto& p : parts)
        if (!std::isfinite(p.value))
            throw NumericError(std::string("total_loss: non-finite ") + p.name);
    return l_p1 + l_p2 + l_fewshot + lambda * l_adapt;
}

}  // namespace fpad
