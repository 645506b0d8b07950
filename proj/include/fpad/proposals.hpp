#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fpad/param_store.hpp"
#include "fpad/rng.hpp"
#include "fpad/tensor.hpp"

// Class-agnostic two-stage temporal proposal subnet. Stage 1 scores and
// regresses a fixed anchor grid from strided windows of the feature map;
// survivors are SoI-pooled and refined by stage 2, which also emits the
// proposal embedding consumed by the similarity head.
//
// Parameter naming convention (created by engine::init_params):
//   p1.win.w / p1.win.b          shared window projection, (window*D) x H
//   p1.s<scale>.score.{w,b}      per-scale 2-way score head, H x 2
//   p1.s<scale>.off.{w,b}        per-scale (dc, dl) head, H x 2
//   enc.shared.{w,b}             embedding projection, (bins*D) x E, shared
//                                with the exemplar encoder (tiled input)
//   p2.score.{w,b}, p2.off.{w,b} refinement heads, E x 2
// The proposal feature f(R_i) is relu(enc.shared(x)); refinement heads read
// f(R_i), so the embedding both classifies and feeds similarity.

namespace fpad {

struct Segment {
    double start = 0.0;
    double end = 0.0;
    double length() const { return end - start; }
    double center() const { return 0.5 * (start + end); }
};

struct AnchorSegment {
    double center = 0.0;
    double length = 0.0;
};

struct Proposal {
    double start = 0.0;
    double end = 0.0;
    double score = 0.0;  // foreground probability from the 2-way softmax
    int stage = 1;
    std::vector<double> feature;  // f(R_i), stage 2 only
};

struct ProposalConfig {
    std::size_t feat_dim = 32;  // D, channels of the input feature map
    std::size_t seq_len = 96;   // T'
    std::size_t stride = 8;     // grid step between window centers
    std::size_t window = 16;    // rows fed to the shared projection (zero-padded)
    std::vector<std::size_t> scales = {2, 4, 8, 16, 32, 64};
    std::size_t hidden = 64;     // width of the shared window projection
    std::size_t bins = 4;        // SoI pooling bins
    std::size_t embed_dim = 64;  // E, width of f(R_i)

    double stage1_pos = 0.7;
    double stage1_neg = 0.3;  // stage-1 negatives: max tIoU in [0, stage1_neg)
    double stage2_pos = 0.5;
    double stage2_neg_lo = 0.1;  // stage-2 negatives: max tIoU in [lo, hi)
    double stage2_neg_hi = 0.5;
    std::size_t batch = 64;
    double pos_fraction = 0.5;

    double nms_threshold = 0.7;
    std::size_t train_top = 32;  // stage-1 survivors fed to stage 2 in training
    std::size_t infer_top = 64;  // and at inference

    std::size_t positions() const { return seq_len / stride; }
    std::size_t anchor_count() const { return positions() * scales.size(); }
};

void validate(const ProposalConfig& c);

// One anchor per (grid position, scale), position-major. Centers sit mid-window.
std::vector<AnchorSegment> generate_anchors(std::size_t seq_len, std::size_t stride,
                                            const std::vector<std::size_t>& scales);

double tiou(const Segment& a, const Segment& b);

// dc = (gt_c - a_c)/a_len, dl = ln(gt_len/a_len)
std::array<double, 2> encode_offsets(const Segment& gt, const AnchorSegment& anchor);
// Inverse of encode_offsets, clipped into [0, seq_len] with minimum length 1.
Segment decode_offsets(const AnchorSegment& anchor, const std::array<double, 2>& offsets,
                       double seq_len);

// Anchor extent clipped to the sequence; used for tIoU matching.
Segment anchor_extent(const AnchorSegment& anchor, double seq_len);

struct Stage1Out {
    Tensor windows;  // P x (window*D), cached forward input
    Tensor pre;      // P x H, pre-activation
    Tensor hidden;   // P x H
    Tensor scores;   // A x 2 logits (bg, fg)
    Tensor offsets;  // A x 2
};

Stage1Out stage1_forward(const Tensor& feature_map, const ParamStore& params,
                         const ProposalConfig& cfg);
void stage1_backward(const Stage1Out& out, const Tensor& grad_scores, const Tensor& grad_offsets,
                     ParamStore& params, const ProposalConfig& cfg);

struct TargetItem {
    std::size_t index = 0;  // into the candidate list handed to label_and_sample
    int label = 0;          // 1 foreground / 0 background
    std::size_t gt_index = 0;          // matched gt (foreground only)
    std::array<double, 2> reg{0, 0};   // regression target (foreground only)
};

// Foreground: max tIoU >= pos_tiou, plus the best anchor per gt regardless of
// threshold. Background: max tIoU in [neg_lo, neg_hi). Samples to batch at
// pos_fraction, padding with negatives when positives run short; the batch
// shrinks only when both pools are exhausted.
std::vector<TargetItem> label_and_sample(const std::vector<Segment>& items,
                                         const std::vector<Segment>& gts, double pos_tiou,
                                         double neg_lo, double neg_hi, std::size_t batch,
                                         double pos_fraction, Rng& rng);

struct SoiCache {
    std::vector<std::size_t> argmax;  // bins*D source row indices
};

// Per-bin, per-channel max over the segment's rows; proportional-rounding bin
// edges, every bin non-empty (short segments share rows across bins).
Tensor soi_pool(const Tensor& feature_map, const Segment& segment, std::size_t bins,
                SoiCache* cache);
// Routes each pooled gradient entry to its argmax row.
void soi_pool_backward(const Tensor& grad_pooled, const SoiCache& cache, Tensor& grad_map);

struct Stage2Out {
    Tensor x;        // M x (bins*D), cached flattened pooled input
    Tensor pre;      // M x E, embedding-projection pre-activation
    Tensor feat;     // M x E, f(R_i) = relu(pre)
    Tensor scores;   // M x 2 logits
    Tensor offsets;  // M x 2
};

Stage2Out stage2_forward(const Tensor& pooled_flat, const ParamStore& params);
// grad_feat carries the similarity/adaptation gradient on f(R_i).
void stage2_backward(const Stage2Out& out, const Tensor& grad_scores, const Tensor& grad_offsets,
                     const Tensor& grad_feat, ParamStore& params);

// Greedy NMS: descending score (ties: earlier start, then smaller index);
// suppresses tIoU strictly above the threshold. Returns kept indices in
// selection order.
std::vector<std::size_t> nms(const std::vector<Segment>& segments,
                             const std::vector<double>& scores, double iou_threshold);

}  // namespace fpad
