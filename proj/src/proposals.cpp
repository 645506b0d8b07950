#include "fpad/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fpad/diffmath.hpp"
#include "fpad/error.hpp"
#include "fpad/kernels.hpp"

namespace fpad {

namespace {

std::string scale_param(std::size_t scale, const char* head, const char* leaf) {
    return "p1.s" + std::to_string(scale) + "." + head + "." + leaf;
}

}  // namespace

void validate(const ProposalConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError("proposal config: " + m); };
    if (c.feat_dim < 1) fail("feat_dim must be >= 1");
    if (c.stride < 1) fail("stride must be >= 1");
    if (c.seq_len <= c.stride) fail("seq_len must exceed stride");
    if (c.window < 1) fail("window must be >= 1");
    if (c.scales.empty()) fail("scales must be non-empty");
    for (std::size_t s : c.scales)
        if (s < 1) fail("scales must be positive");
    if (c.hidden < 1 || c.embed_dim < 1 || c.bins < 1) fail("layer widths must be >= 1");
    if (!(c.stage1_neg >= 0 && c.stage1_neg <= c.stage1_pos && c.stage1_pos <= 1.0))
        fail("need 0 <= stage1_neg <= stage1_pos <= 1");
    if (!(c.stage2_neg_lo >= 0 && c.stage2_neg_lo <= c.stage2_neg_hi &&
          c.stage2_neg_hi <= c.stage2_pos && c.stage2_pos <= 1.0))
        fail("need 0 <= stage2_neg_lo <= stage2_neg_hi <= stage2_pos <= 1");
    if (c.batch < 1) fail("batch must be >= 1");
    if (c.pos_fraction < 0 || c.pos_fraction > 1) fail("pos_fraction must be in [0, 1]");
    if (c.nms_threshold < 0 || c.nms_threshold > 1) fail("nms_threshold must be in [0, 1]");
    if (c.train_top < 1 || c.infer_top < 1) fail("top-k limits must be >= 1");
}

std::vector<AnchorSegment> generate_anchors(std::size_t seq_len, std::size_t stride,
                                            const std::vector<std::size_t>& scales) {
    if (stride == 0 || seq_len <= stride)
        throw ContractViolation("generate_anchors: seq_len must exceed stride");
    for (std::size_t s : scales)
        if (s == 0) throw ContractViolation("generate_anchors: scales must be positive");
    std::vector<AnchorSegment> anchors;
    const std::size_t positions = seq_len / stride;
    anchors.reserve(positions * scales.size());
    for (std::size_t p = 0; p < positions; ++p) {
        const double center = static_cast<double>(p * stride) + 0.5 * static_cast<double>(stride);
        for (std::size_t s : scales) anchors.push_back({center, static_cast<double>(s)});
    }
    return anchors;
}

double tiou(const Segment& a, const Segment& b) {
    if (!(a.start < a.end) || !(b.start < b.end))
        throw ContractViolation("tiou: segments must have start < end");
    const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter <= 0.0) return 0.0;
    const double uni = (a.end - a.start) + (b.end - b.start) - inter;
    return inter / uni;
}

std::array<double, 2> encode_offsets(const Segment& gt, const AnchorSegment& anchor) {
    if (!(gt.length() > 0.0) || !(anchor.length > 0.0))
        throw ContractViolation("encode_offsets: lengths must be positive");
    return {(gt.center() - anchor.center) / anchor.length, std::log(gt.length() / anchor.length)};
}

Segment decode_offsets(const AnchorSegment& anchor, const std::array<double, 2>& offsets,
                       double seq_len) {
    if (!(anchor.length > 0.0)) throw ContractViolation("decode_offsets: anchor length <= 0");
    const double center = anchor.center + offsets[0] * anchor.length;
    double length = anchor.length * std::exp(offsets[1]);
    length = std::clamp(length, 1.0, seq_len);
    double s = std::max(0.0, center - 0.5 * length);
    double e = std::min(seq_len, center + 0.5 * length);
    if (e - s < 1.0) {  // pushed off an edge; keep a minimum-length segment inside
        if (center <= 0.5 * length)
            s = 0.0, e = std::min(seq_len, 1.0);
        else
            e = seq_len, s = std::max(0.0, seq_len - 1.0);
    }
    return {s, e};
}

Segment anchor_extent(const AnchorSegment& anchor, double seq_len) {
    return {std::max(0.0, anchor.center - 0.5 * anchor.length),
            std::min(seq_len, anchor.center + 0.5 * anchor.length)};
}

Stage1Out stage1_forward(const Tensor& feature_map, const ParamStore& params,
                         const ProposalConfig& cfg) {
    if (feature_map.dims != std::vector<std::size_t>{cfg.seq_len, cfg.feat_dim})
        throw ContractViolation("stage1_forward: feature map dims mismatch");
    const std::size_t P = cfg.positions(), D = cfg.feat_dim, W = cfg.window;
    const std::size_t S = cfg.scales.size(), A = P * S;

    Stage1Out out;
    out.windows = Tensor::zeros({P, W * D});
    const auto T = static_cast<std::ptrdiff_t>(cfg.seq_len);
    for (std::size_t p = 0; p < P; ++p) {
        const auto center_row =
            static_cast<std::ptrdiff_t>(p * cfg.stride + cfg.stride / 2);
        const std::ptrdiff_t first = center_row - static_cast<std::ptrdiff_t>(W / 2);
        for (std::size_t r = 0; r < W; ++r) {
            const std::ptrdiff_t src = first + static_cast<std::ptrdiff_t>(r);
            if (src < 0 || src >= T) continue;  // zero padding outside the map
            std::copy_n(feature_map.row_ptr(static_cast<std::size_t>(src)), D,
                        out.windows.row_ptr(p) + r * D);
        }
    }

    out.pre = linear(out.windows, params.value("p1.win.w"), params.value("p1.win.b"));
    out.hidden = relu(out.pre);

    out.scores = Tensor::zeros({A, 2});
    out.offsets = Tensor::zeros({A, 2});
    for (std::size_t k = 0; k < S; ++k) {
        const std::size_t scale = cfg.scales[k];
        const Tensor sc = linear(out.hidden, params.value(scale_param(scale, "score", "w")),
                                 params.value(scale_param(scale, "score", "b")));
        const Tensor of = linear(out.hidden, params.value(scale_param(scale, "off", "w")),
                                 params.value(scale_param(scale, "off", "b")));
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t a = p * S + k;
            out.scores.at(a, 0) = sc.at(p, 0);
            out.scores.at(a, 1) = sc.at(p, 1);
            out.offsets.at(a, 0) = of.at(p, 0);
            out.offsets.at(a, 1) = of.at(p, 1);
        }
    }
    return out;
}

void stage1_backward(const Stage1Out& out, const Tensor& grad_scores, const Tensor& grad_offsets,
                     ParamStore& params, const ProposalConfig& cfg) {
    const std::size_t P = cfg.positions(), S = cfg.scales.size(), A = P * S;
    if (grad_scores.dims != std::vector<std::size_t>{A, 2} || !grad_offsets.same_dims(grad_scores))
        throw ContractViolation("stage1_backward: gradient dims mismatch");

    Tensor grad_hidden = Tensor::zeros(out.hidden.dims);
    for (std::size_t k = 0; k < S; ++k) {
        const std::size_t scale = cfg.scales[k];
        Tensor gs = Tensor::zeros({P, 2});
        Tensor go = Tensor::zeros({P, 2});
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t a = p * S + k;
            gs.at(p, 0) = grad_scores.at(a, 0);
            gs.at(p, 1) = grad_scores.at(a, 1);
            go.at(p, 0) = grad_offsets.at(a, 0);
            go.at(p, 1) = grad_offsets.at(a, 1);
        }
        linear_backward(out.hidden, params.value(scale_param(scale, "score", "w")), gs, &grad_hidden,
                        &params.grad(scale_param(scale, "score", "w")),
                        &params.grad(scale_param(scale, "score", "b")));
        linear_backward(out.hidden, params.value(scale_param(scale, "off", "w")), go, &grad_hidden,
                        &params.grad(scale_param(scale, "off", "w")),
                        &params.grad(scale_param(scale, "off", "b")));
    }

    Tensor grad_pre = Tensor::zeros(out.pre.dims);
    relu_backward(out.pre, grad_hidden, grad_pre);
    linear_backward(out.windows, params.value("p1.win.w"), grad_pre, nullptr,
                    &params.grad("p1.win.w"), &params.grad("p1.win.b"));
}

std::vector<TargetItem> label_and_sample(const std::vector<Segment>& items,
                                         const std::vector<Segment>& gts, double pos_tiou,
                                         double neg_lo, double neg_hi, std::size_t batch,
                                         double pos_fraction, Rng& rng) {
    if (items.empty()) throw ContractViolation("label_and_sample: no candidate segments");
    if (!(neg_lo >= 0 && neg_lo <= neg_hi && neg_hi <= pos_tiou && pos_tiou <= 1.0))
        throw ContractViolation("label_and_sample: need 0 <= neg_lo <= neg_hi <= pos_tiou <= 1");
    if (batch < 1 || pos_fraction < 0 || pos_fraction > 1)
        throw ContractViolation("label_and_sample: bad batch or pos_fraction");

    const std::size_t n = items.size(), m = gts.size();
    std::vector<double> max_tiou(n, 0.0);
    std::vector<std::size_t> best_gt(n, 0);
    std::vector<char> is_pos(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t g = 0; g < m; ++g) {
            const double t = tiou(items[i], gts[g]);
            if (t > max_tiou[i]) {
                max_tiou[i] = t;
                best_gt[i] = g;
            }
        }
    for (std::size_t i = 0; i < n; ++i)
        if (m > 0 && max_tiou[i] >= pos_tiou) is_pos[i] = 1;
    // The best-matching candidate per gt is positive even below threshold, so
    // every gt always has at least one regression target. A forced candidate
    // that overlaps nothing regresses toward the gt that forced it.
    std::vector<char> force_assigned(n, 0);
    for (std::size_t g = 0; g < m; ++g) {
        std::size_t best = 0;
        double best_t = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double t = tiou(items[i], gts[g]);
            if (t > best_t) {
                best_t = t;
                best = i;
            }
        }
        is_pos[best] = 1;
        if (max_tiou[best] == 0.0 && !force_assigned[best]) {
            best_gt[best] = g;
            force_assigned[best] = 1;
        }
    }

    std::vector<std::size_t> pos_pool, neg_pool;
    for (std::size_t i = 0; i < n; ++i) {
        if (is_pos[i])
            pos_pool.push_back(i);
        else if (max_tiou[i] >= neg_lo && max_tiou[i] < neg_hi)
            neg_pool.push_back(i);
    }
    if (neg_pool.empty())
        throw ContractViolation("label_and_sample: no negatives available (degenerate corpus)");

    const auto want_pos = static_cast<std::size_t>(
        std::llround(pos_fraction * static_cast<double>(batch)));
    const std::size_t n_pos = std::min(pos_pool.size(), want_pos);
    const std::size_t n_neg = std::min(neg_pool.size(), batch - n_pos);

    std::vector<TargetItem> out;
    out.reserve(n_pos + n_neg);
    for (std::size_t j : rng.sample_without_replacement(pos_pool.size(), n_pos)) {
        const std::size_t i = pos_pool[j];
        TargetItem t;
        t.index = i;
        t.label = 1;
        t.gt_index = best_gt[i];
        const Segment& g = gts[best_gt[i]];
        t.reg = encode_offsets(g, AnchorSegment{items[i].center(), items[i].length()});
        out.push_back(t);
    }
    for (std::size_t j : rng.sample_without_replacement(neg_pool.size(), n_neg)) {
        TargetItem t;
        t.index = neg_pool[j];
        t.label = 0;
        out.push_back(t);
    }
    return out;
}

Tensor soi_pool(const Tensor& feature_map, const Segment& segment, std::size_t bins,
                SoiCache* cache) {
    if (feature_map.dims.size() != 2) throw ContractViolation("soi_pool: feature map must be 2-d");
    if (bins < 1) throw ContractViolation("soi_pool: bins must be >= 1");
    if (!(segment.end >= segment.start)) throw ContractViolation("soi_pool: inverted segment");
    const std::size_t T = feature_map.rows(), D = feature_map.cols();

    auto r0 = static_cast<std::ptrdiff_t>(std::floor(segment.start));
    auto r1 = static_cast<std::ptrdiff_t>(std::ceil(segment.end));
    r0 = std::clamp<std::ptrdiff_t>(r0, 0, static_cast<std::ptrdiff_t>(T) - 1);
    r1 = std::clamp<std::ptrdiff_t>(r1, r0 + 1, static_cast<std::ptrdiff_t>(T));
    const std::size_t L = static_cast<std::size_t>(r1 - r0);

    Tensor pooled = Tensor::zeros({bins, D});
    if (cache) cache->argmax.assign(bins * D, 0);
    std::vector<double> best_row(D);
    for (std::size_t b = 0; b < bins; ++b) {
        std::size_t lo = static_cast<std::size_t>(r0) + b * L / bins;
        std::size_t hi = std::max(lo + 1, static_cast<std::size_t>(r0) + (b + 1) * L / bins);
        hi = std::min(hi, static_cast<std::size_t>(r1));
        double* dst = pooled.row_ptr(b);
        std::copy_n(feature_map.row_ptr(lo), D, dst);
        std::fill(best_row.begin(), best_row.end(), static_cast<double>(lo));
        for (std::size_t r = lo + 1; r < hi; ++r)
            kern::row_max_update(dst, best_row.data(), feature_map.row_ptr(r),
                                 static_cast<double>(r), D);
        if (cache)
            for (std::size_t d = 0; d < D; ++d)
                cache->argmax[b * D + d] = static_cast<std::size_t>(best_row[d]);
    }
    return pooled;
}

void soi_pool_backward(const Tensor& grad_pooled, const SoiCache& cache, Tensor& grad_map) {
    if (grad_pooled.size() != cache.argmax.size())
        throw ContractViolation("soi_pool_backward: cache does not match gradient");
    const std::size_t D = grad_map.cols();
    const std::size_t bins = grad_pooled.rows();
    if (grad_pooled.cols() != D) throw ContractViolation("soi_pool_backward: channel mismatch");
    for (std::size_t b = 0; b < bins; ++b)
        for (std::size_t d = 0; d < D; ++d)
            grad_map.at(cache.argmax[b * D + d], d) += grad_pooled.at(b, d);
}

Stage2Out stage2_forward(const Tensor& pooled_flat, const ParamStore& params) {
    Stage2Out out;
    out.x = pooled_flat;
    out.pre = linear(out.x, params.value("enc.shared.w"), params.value("enc.shared.b"));
    out.feat = relu(out.pre);
    out.scores = linear(out.feat, params.value("p2.score.w"), params.value("p2.score.b"));
    out.offsets = linear(out.feat, params.value("p2.off.w"), params.value("p2.off.b"));
    return out;
}

void stage2_backward(const Stage2Out& out, const Tensor& grad_scores, const Tensor& grad_offsets,
                     const Tensor& grad_feat, ParamStore& params) {
    Tensor g_feat = grad_feat;  // similarity/adaptation contribution
    linear_backward(out.feat, params.value("p2.score.w"), grad_scores, &g_feat,
                    &params.grad("p2.score.w"), &params.grad("p2.score.b"));
    linear_backward(out.feat, params.value("p2.off.w"), grad_offsets, &g_feat,
                    &params.grad("p2.off.w"), &params.grad("p2.off.b"));
    Tensor grad_pre = Tensor::zeros(out.pre.dims);
    relu_backward(out.pre, g_feat, grad_pre);
    linear_backward(out.x, params.value("enc.shared.w"), grad_pre, nullptr,
                    &params.grad("enc.shared.w"), &params.grad("enc.shared.b"));
}

std::vector<std::size_t> nms(const std::vector<Segment>& segments,
                             const std::vector<double>& scores, double iou_threshold) {
    if (segments.size() != scores.size())
        throw ContractViolation("nms: scores do not match segments");
    for (double s : scores)
        if (!std::isfinite(s)) throw ContractViolation("nms: non-finite score");

    std::vector<std::size_t> order(segments.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (segments[a].start != segments[b].start) return segments[a].start < segments[b].start;
        return a < b;
    });

    std::vector<std::size_t> kept;
    std::vector<char> suppressed(segments.size(), 0);
    for (std::size_t i : order) {
        if (suppressed[i]) continue;
        kept.push_back(i);
        for (std::size_t j : order)
            if (!suppressed[j] && j != i && tiou(segments[i], segments[j]) > iou_threshold)
                suppressed[j] = 1;
    }
    return kept;
}

}  // namespace fpad
