#pragma once

#include <vector>

#include "fpad/param_store.hpp"
#include "fpad/tensor.hpp"

// Similarity side of the pipeline: exemplar encoding into the shared
// embedding space, the cosine similarity matrix between encoded supports and
// proposal features, episode-label assignment with multi-shot averaging, the
// few-shot classification loss, the feature-space adaptation loss, and the
// total-loss composition.
//
// Exemplar encoder parameters (created by engine::init_params):
//   enc.shared.{w,b}  embedding projection, (bins*D_raw) x E — the same
//                     tensors stage 2 applies to flattened pooled proposal
//                     features; exemplars reach it tiled across the bin slots

namespace fpad {

struct EncodeOut {
    Tensor x;      // M x D_raw, cached raw input
    Tensor tiled;  // M x (bins*D_raw), raw feature repeated per bin slot
    Tensor pre;    // M x E, embedding-projection pre-activation
    Tensor feat;   // M x E, f(S_j) = relu(pre)
};

// Rows of `raw` are exemplar features; rows of the result are f(S_j).
EncodeOut encode_exemplars(const Tensor& raw, const ParamStore& params);
void encode_exemplars_backward(const EncodeOut& out, const Tensor& grad_feat, ParamStore& params);

// sim(j, i) = cos(support_j, proposal_i), clamped into [-1, 1]. A vector with
// norm below 1e-12 yields 0 entries with zero gradient.
Tensor similarity_matrix(const Tensor& support, const Tensor& proposals);
void similarity_matrix_backward(const Tensor& support, const Tensor& proposals,
                                const Tensor& grad_sim, Tensor& grad_support,
                                Tensor& grad_proposals);

struct LabelAssignment {
    std::vector<int> label;     // winning episode class per proposal column
    std::vector<double> score;  // winning class-averaged similarity
};

// Rows must be grouped by class, k consecutive rows per class. Per column:
// average within each class, argmax across classes, ties to the smaller
// class index.
LabelAssignment assign_labels(const Tensor& sim, std::size_t k);

// Softmax cross-entropy over class-averaged similarities divided by tau, for
// every proposal column whose target is a local episode label (>= 0); columns
// with target -1 are excluded. Mean over contributing columns, 0 when none.
double fewshot_cls_loss(const Tensor& sim, const std::vector<int>& targets, std::size_t k,
                        double tau);
void fewshot_cls_loss_backward(const Tensor& sim, const std::vector<int>& targets, std::size_t k,
                               double tau, double upstream, Tensor& grad_sim);

// || mean_i f(R_i) - mean_j f(S_j) ||_2
double adaptation_loss(const Tensor& proposal_feats, const Tensor& support_feats);
void adaptation_loss_backward(const Tensor& proposal_feats, const Tensor& support_feats,
                              double upstream, Tensor& grad_proposals, Tensor& grad_support);

// Rows scaled to unit L2 norm; zero rows stay zero (and get zero gradient).
// The adaptation loss reads these rather than raw activations: the similarity
// scores are cosines, so the distribution gap that matters lives on the unit
// sphere, and normalizing closes off "shrink everything" as a minimizer.
Tensor row_normalize(const Tensor& m);
void row_normalize_backward(const Tensor& m, const Tensor& grad_normed, Tensor& grad_m);

// L_p1 + L_p2 + L_fewshot + lambda * L_adapt; throws NumericError naming the
// first non-finite component.
double total_loss(double l_p1, double l_p2, double l_fewshot, double l_adapt, double lambda);

}  // namespace fpad
