#include "fpad/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "fpad/container.hpp"
#include "fpad/diffmath.hpp"
#include "fpad/error.hpp"
#include "fpad/jsonio.hpp"
#include "fpad/kernels.hpp"

namespace fpad {

namespace {

// Stream ids under the training master seed. Episode evaluation uses the
// id baked into episode_at, which must stay distinct from these.
constexpr std::uint64_t kInitStream = 20;
constexpr std::uint64_t kTrainStream = 21;

constexpr const char* kParamsMagic = "FPADPARM1";

double fg_prob(double bg_logit, double fg_logit) {
    return 1.0 / (1.0 + std::exp(bg_logit - fg_logit));
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_stdev(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

nlohmann::ordered_json proposal_to_json(const ProposalConfig& c) {
    nlohmann::ordered_json j;
    j["feat_dim"] = c.feat_dim;
    j["seq_len"] = c.seq_len;
    j["stride"] = c.stride;
    j["window"] = c.window;
    j["scales"] = c.scales;
    j["hidden"] = c.hidden;
    j["bins"] = c.bins;
    j["embed_dim"] = c.embed_dim;
    j["stage1_pos"] = c.stage1_pos;
    j["stage1_neg"] = c.stage1_neg;
    j["stage2_pos"] = c.stage2_pos;
    j["stage2_neg_lo"] = c.stage2_neg_lo;
    j["stage2_neg_hi"] = c.stage2_neg_hi;
    j["batch"] = c.batch;
    j["pos_fraction"] = c.pos_fraction;
    j["nms_threshold"] = c.nms_threshold;
    j["train_top"] = c.train_top;
    j["infer_top"] = c.infer_top;
    return j;
}

ProposalConfig proposal_from_json(const nlohmann::json& j, const std::string& path) {
    jsonio::ObjectReader r(j, path);
    ProposalConfig c;
    // feat_dim / seq_len are normally derived from the corpus via resolve();
    // they are accepted here so config echoes round-trip.
    c.feat_dim = r.value_or<std::size_t>("feat_dim", c.feat_dim);
    c.seq_len = r.value_or<std::size_t>("seq_len", c.seq_len);
    c.stride = r.value_or<std::size_t>("stride", c.stride);
    c.window = r.value_or<std::size_t>("window", c.window);
    c.scales = r.value_or<std::vector<std::size_t>>("scales", c.scales);
    c.hidden = r.value_or<std::size_t>("hidden", c.hidden);
    c.bins = r.value_or<std::size_t>("bins", c.bins);
    c.embed_dim = r.value_or<std::size_t>("embed_dim", c.embed_dim);
    c.stage1_pos = r.value_or<double>("stage1_pos", c.stage1_pos);
    c.stage1_neg = r.value_or<double>("stage1_neg", c.stage1_neg);
    c.stage2_pos = r.value_or<double>("stage2_pos", c.stage2_pos);
    c.stage2_neg_lo = r.value_or<double>("stage2_neg_lo", c.stage2_neg_lo);
    c.stage2_neg_hi = r.value_or<double>("stage2_neg_hi", c.stage2_neg_hi);
    c.batch = r.value_or<std::size_t>("batch", c.batch);
    c.pos_fraction = r.value_or<double>("pos_fraction", c.pos_fraction);
    c.nms_threshold = r.value_or<double>("nms_threshold", c.nms_threshold);
    c.train_top = r.value_or<std::size_t>("train_top", c.train_top);
    c.infer_top = r.value_or<std::size_t>("infer_top", c.infer_top);
    r.finish();
    return c;
}

struct StageLoss {
    double ce = 0.0;
    double reg = 0.0;
    double value() const { return ce + reg; }
};

// Mean binary CE over the sampled batch plus mean smooth-L1 over positives.
StageLoss stage_loss(const Tensor& scores, const Tensor& offsets,
                     const std::vector<TargetItem>& targets, Tensor* grad_scores,
                     Tensor* grad_offsets) {
    StageLoss out;
    if (targets.empty()) return out;
    std::size_t npos = 0;
    for (const TargetItem& t : targets) npos += t.label == 1 ? 1 : 0;
    const double inv_b = 1.0 / static_cast<double>(targets.size());
    const double inv_p = npos ? 1.0 / static_cast<double>(npos) : 0.0;
    for (const TargetItem& t : targets) {
        const double bg = scores.at(t.index, 0);
        const double fg = scores.at(t.index, 1);
        out.ce += binary_score_loss(bg, fg, t.label) * inv_b;
        if (grad_scores)
            binary_score_loss_backward(bg, fg, t.label, inv_b, grad_scores->at(t.index, 0),
                                       grad_scores->at(t.index, 1));
        if (t.label != 1) continue;
        const Tensor pred({1, 2}, {offsets.at(t.index, 0), offsets.at(t.index, 1)});
        const Tensor targ({1, 2}, {t.reg[0], t.reg[1]});
        out.reg += smooth_l1(pred, targ) * inv_p;
        if (grad_offsets) {
            Tensor g = Tensor::zeros({1, 2});
            smooth_l1_backward(pred, targ, inv_p, g);
            grad_offsets->at(t.index, 0) += g.v[0];
            grad_offsets->at(t.index, 1) += g.v[1];
        }
    }
    return out;
}

// Decoded stage-1 candidates in anchor order plus their foreground scores.
void stage1_candidates(const Stage1Out& s1, const std::vector<AnchorSegment>& anchors,
                       const ProposalConfig& cfg, std::vector<Segment>& segs,
                       std::vector<double>& scores) {
    const double t = static_cast<double>(cfg.seq_len);
    segs.resize(anchors.size());
    scores.resize(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        segs[a] = decode_offsets(anchors[a], {s1.offsets.at(a, 0), s1.offsets.at(a, 1)}, t);
        scores[a] = fg_prob(s1.scores.at(a, 0), s1.scores.at(a, 1));
    }
}

Tensor pool_rows(const Tensor& feature_map, const std::vector<Segment>& segments,
                 std::size_t bins) {
    const std::size_t d = feature_map.cols();
    Tensor out = Tensor::zeros({segments.size(), bins * d});
    for (std::size_t i = 0; i < segments.size(); ++i) {
        const Tensor pooled = soi_pool(feature_map, segments[i], bins, nullptr);
        std::copy(pooled.v.begin(), pooled.v.end(), out.row_ptr(i));
    }
    return out;
}

Tensor support_matrix(const Corpus& corpus, const Episode& episode, bool leak, double gain) {
    const std::size_t n = episode.support.size();
    const std::size_t k = episode.support.empty() ? 0 : episode.support[0].size();
    const std::size_t d = corpus.config.feat_dim;
    Tensor raw = Tensor::zeros({n * k, d});
    for (std::size_t l = 0; l < n; ++l)
        for (std::size_t s = 0; s < k; ++s)
            std::copy(episode.support[l][s].feature.begin(), episode.support[l][s].feature.end(),
                      raw.row_ptr(l * k + s));
    return leak ? leakage_project(raw, corpus.catalog, gain) : raw;
}

// The adaptation loss compares the sampled training batch (balanced half
// positive, half negative) against the exemplars, not every NMS survivor:
// survivors are mostly background, and a background-vs-exemplar gap can never
// close, so it would just drag the embedding around forever.
Tensor gather_rows(const Tensor& m, const std::vector<TargetItem>& items) {
    Tensor out = Tensor::zeros({items.size(), m.cols()});
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(m.row_ptr(items[i].index), m.row_ptr(items[i].index) + m.cols(), out.row_ptr(i));
    return out;
}

double tail_mean_adapt(const std::vector<LossLogRow>& log) {
    if (log.empty()) return 0.0;
    const std::size_t tail = std::max<std::size_t>(1, log.size() / 10);
    double acc = 0.0;
    for (std::size_t i = log.size() - tail; i < log.size(); ++i) acc += log[i].adapt;
    return acc / static_cast<double>(tail);
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path) {
    jsonio::ObjectReader r(j, path);
    TrainConfig c;
    c.seed = r.require<std::uint64_t>("seed");
    c.learning_rate = r.value_or<double>("learning_rate", c.learning_rate);
    c.iterations = r.value_or<std::size_t>("iterations", c.iterations);
    c.lambda_adapt = r.value_or<double>("lambda", c.lambda_adapt);
    c.n_way = r.value_or<std::size_t>("n_way", c.n_way);
    c.k_shot = r.value_or<std::size_t>("k_shot", c.k_shot);
    c.tau = r.value_or<double>("tau", c.tau);
    c.per_class_nms = r.value_or<bool>("per_class_nms", c.per_class_nms);
    c.leakage_projection = r.value_or<bool>("leakage_projection", c.leakage_projection);
    c.leakage_gain = r.value_or<double>("leakage_gain", c.leakage_gain);
    if (r.has("proposal")) c.proposal = proposal_from_json(r.raw("proposal"), r.key_path("proposal"));
    r.finish();
    validate(c);
    return c;
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["learning_rate"] = c.learning_rate;
    j["iterations"] = c.iterations;
    j["lambda"] = c.lambda_adapt;
    j["n_way"] = c.n_way;
    j["k_shot"] = c.k_shot;
    j["tau"] = c.tau;
    j["per_class_nms"] = c.per_class_nms;
    j["leakage_projection"] = c.leakage_projection;
    j["leakage_gain"] = c.leakage_gain;
    j["proposal"] = proposal_to_json(c.proposal);
    return j;
}

void validate(const TrainConfig& c) {
    if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate))
        throw ConfigError("learning_rate must be positive and finite");
    if (!(c.lambda_adapt >= 0.0) || !std::isfinite(c.lambda_adapt))
        throw ConfigError("lambda must be non-negative and finite");
    if (c.n_way < 2) throw ConfigError("n_way must be at least 2");
    if (c.k_shot < 1) throw ConfigError("k_shot must be at least 1");
    if (!(c.tau > 0.0) || !std::isfinite(c.tau)) throw ConfigError("tau must be positive");
    if (!(c.leakage_gain >= 0.0) || !std::isfinite(c.leakage_gain))
        throw ConfigError("leakage_gain must be non-negative");
    if (!(c.proposal.nms_threshold > 0.0) || c.proposal.nms_threshold > 1.0)
        throw ConfigError("nms_threshold must be in (0, 1]");
    validate(c.proposal);
}

TrainConfig resolve(TrainConfig cfg, const Corpus& corpus) {
    cfg.proposal.feat_dim = corpus.config.feat_dim;
    cfg.proposal.seq_len = corpus.config.seq_len;
    validate(cfg);
    return cfg;
}

ParamStore init_params(const TrainConfig& cfg) {
    validate(cfg);
    const ProposalConfig& p = cfg.proposal;
    Rng rng = Rng::stream(cfg.seed, kInitStream, 0);
    ParamStore ps;
    auto add_linear = [&](const std::string& prefix, std::size_t fan_in, std::size_t fan_out) {
        ps.add(prefix + ".w", glorot_init(fan_in, fan_out, rng));
        ps.add(prefix + ".b", Tensor::zeros({fan_out}));
    };
    add_linear("p1.win", p.window * p.feat_dim, p.hidden);
    for (std::size_t s : p.scales) {
        add_linear("p1.s" + std::to_string(s) + ".score", p.hidden, 2);
        add_linear("p1.s" + std::to_string(s) + ".off", p.hidden, 2);
    }
    // One embedding projection serves both encoding branches: proposals feed it
    // their flattened pooled bins, exemplars feed it their raw feature tiled
    // across bins, so both sides are compared through identical weights.
    add_linear("enc.shared", p.bins * p.feat_dim, p.embed_dim);
    add_linear("p2.score", p.embed_dim, 2);
    add_linear("p2.off", p.embed_dim, 2);
    return ps;
}

// A frozen "pretrained backbone" keeps what it knows and loses what it
// doesn't: components inside the pretraining span pass through unchanged,
// everything orthogonal survives only at `gain` (< 1). Classes whose
// prototypes lie in the span keep full signal while their off-span noise is
// crushed; classes far from the span lose most of their signal instead.
Tensor leakage_project(const Tensor& rows, const ClassCatalog& catalog, double gain) {
    Tensor out = rows;
    if (gain == 1.0 || catalog.pretrain_dirs.v.empty()) return out;
    const std::size_t d = rows.cols();
    if (catalog.pretrain_dirs.cols() != d)
        throw ContractViolation("leakage_project: dimension mismatch with pretraining span");
    const std::size_t n_dirs = catalog.pretrain_dirs.rows();
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        const double* src = rows.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (std::size_t c = 0; c < d; ++c) dst[c] = gain * src[c];
        for (std::size_t j = 0; j < n_dirs; ++j) {
            const double* dir = catalog.pretrain_dirs.row_ptr(j);
            const double coef = kern::dot(src, dir, d);
            kern::axpy((1.0 - gain) * coef, dir, dst, d);
        }
    }
    return out;
}

void episode_gt(const Corpus& corpus, const Episode& episode, std::vector<Segment>& gts,
                std::vector<int>& labels) {
    gts.clear();
    labels.clear();
    const UntrimmedSequence& seq = corpus.sequences.at(episode.query_index);
    for (const GtSegment& g : seq.gts) {
        gts.push_back({g.start, g.end});
        labels.push_back(episode.local_label(g.class_id));
    }
}

EpisodeStructure select_structure(const Corpus& corpus, const Episode& episode,
                                  const ParamStore& params, const TrainConfig& cfg, Rng& rng) {
    const ProposalConfig& p = cfg.proposal;
    EpisodeStructure st;
    const Tensor& raw_query = corpus.sequences.at(episode.query_index).feature;
    st.query = cfg.leakage_projection ? leakage_project(raw_query, corpus.catalog, cfg.leakage_gain)
                                      : raw_query;
    st.support_raw = support_matrix(corpus, episode, cfg.leakage_projection, cfg.leakage_gain);
    episode_gt(corpus, episode, st.gts, st.gt_label);
    st.anchors = generate_anchors(p.seq_len, p.stride, p.scales);

    const Stage1Out s1 = stage1_forward(st.query, params, p);
    std::vector<Segment> extents(st.anchors.size());
    for (std::size_t a = 0; a < st.anchors.size(); ++a)
        extents[a] = anchor_extent(st.anchors[a], static_cast<double>(p.seq_len));
    st.s1_targets = label_and_sample(extents, st.gts, p.stage1_pos, 0.0, p.stage1_neg, p.batch,
                                     p.pos_fraction, rng);

    std::vector<Segment> cand;
    std::vector<double> cand_score;
    stage1_candidates(s1, st.anchors, p, cand, cand_score);
    const std::vector<std::size_t> kept = nms(cand, cand_score, p.nms_threshold);
    const std::size_t take = std::min(kept.size(), p.train_top);
    st.proposals.reserve(take);
    for (std::size_t i = 0; i < take; ++i) st.proposals.push_back(cand[kept[i]]);

    st.pooled_flat = pool_rows(st.query, st.proposals, p.bins);
    st.s2_targets = label_and_sample(st.proposals, st.gts, p.stage2_pos, p.stage2_neg_lo,
                                     p.stage2_neg_hi, p.batch, p.pos_fraction, rng);
    st.fs_targets.assign(st.proposals.size(), -1);
    for (const TargetItem& t : st.s2_targets)
        if (t.label == 1) st.fs_targets[t.index] = st.gt_label[t.gt_index];
    return st;
}

LossParts forward_losses(const EpisodeStructure& st, const ParamStore& params,
                         const TrainConfig& cfg) {
    LossParts parts;
    const Stage1Out s1 = stage1_forward(st.query, params, cfg.proposal);
    parts.p1 = stage_loss(s1.scores, s1.offsets, st.s1_targets, nullptr, nullptr).value();
    const Stage2Out s2 = stage2_forward(st.pooled_flat, params);
    parts.p2 = stage_loss(s2.scores, s2.offsets, st.s2_targets, nullptr, nullptr).value();
    const EncodeOut enc = encode_exemplars(st.support_raw, params);
    const Tensor sim = similarity_matrix(enc.feat, s2.feat);
    parts.fewshot = fewshot_cls_loss(sim, st.fs_targets, cfg.k_shot, cfg.tau);
    parts.adapt = adaptation_loss(row_normalize(gather_rows(s2.feat, st.s2_targets)),
                                  row_normalize(enc.feat));
    return parts;
}

LossParts backward_losses(const EpisodeStructure& st, ParamStore& params, const TrainConfig& cfg) {
    LossParts parts;
    const ProposalConfig& p = cfg.proposal;

    const Stage1Out s1 = stage1_forward(st.query, params, p);
    Tensor g1_scores = Tensor::zeros(s1.scores.dims);
    Tensor g1_offsets = Tensor::zeros(s1.offsets.dims);
    parts.p1 = stage_loss(s1.scores, s1.offsets, st.s1_targets, &g1_scores, &g1_offsets).value();
    stage1_backward(s1, g1_scores, g1_offsets, params, p);

    const Stage2Out s2 = stage2_forward(st.pooled_flat, params);
    Tensor g2_scores = Tensor::zeros(s2.scores.dims);
    Tensor g2_offsets = Tensor::zeros(s2.offsets.dims);
    parts.p2 = stage_loss(s2.scores, s2.offsets, st.s2_targets, &g2_scores, &g2_offsets).value();

    const EncodeOut enc = encode_exemplars(st.support_raw, params);
    const Tensor sim = similarity_matrix(enc.feat, s2.feat);
    parts.fewshot = fewshot_cls_loss(sim, st.fs_targets, cfg.k_shot, cfg.tau);
    Tensor g_sim = Tensor::zeros(sim.dims);
    fewshot_cls_loss_backward(sim, st.fs_targets, cfg.k_shot, cfg.tau, 1.0, g_sim);
    Tensor g_support = Tensor::zeros(enc.feat.dims);
    Tensor g_prop = Tensor::zeros(s2.feat.dims);
    similarity_matrix_backward(enc.feat, s2.feat, g_sim, g_support, g_prop);

    const Tensor batch_feat = gather_rows(s2.feat, st.s2_targets);
    const Tensor batch_unit = row_normalize(batch_feat);
    const Tensor support_unit = row_normalize(enc.feat);
    parts.adapt = adaptation_loss(batch_unit, support_unit);
    Tensor g_batch_unit = Tensor::zeros(batch_feat.dims);
    Tensor g_support_unit = Tensor::zeros(enc.feat.dims);
    adaptation_loss_backward(batch_unit, support_unit, cfg.lambda_adapt, g_batch_unit,
                             g_support_unit);
    row_normalize_backward(enc.feat, g_support_unit, g_support);
    Tensor g_batch = Tensor::zeros(batch_feat.dims);
    row_normalize_backward(batch_feat, g_batch_unit, g_batch);
    for (std::size_t i = 0; i < st.s2_targets.size(); ++i)
        for (std::size_t c = 0; c < g_batch.cols(); ++c)
            g_prop.at(st.s2_targets[i].index, c) += g_batch.at(i, c);

    stage2_backward(s2, g2_scores, g2_offsets, g_prop, params);
    encode_exemplars_backward(enc, g_support, params);
    return parts;
}

TrainResult train(const TrainConfig& raw_cfg, const Corpus& corpus, const ClassSplit& split) {
    const TrainConfig cfg = resolve(raw_cfg, corpus);
    validate_split(split, corpus.catalog);
    TrainResult result;
    result.params = init_params(cfg);
    result.log.reserve(cfg.iterations);
    const EpisodeSpec spec{cfg.n_way, cfg.k_shot};
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        Rng rng = Rng::stream(cfg.seed, kTrainStream, iter);
        const Episode ep = sample_train_episode(corpus, split, spec, rng);
        const EpisodeStructure st = select_structure(corpus, ep, result.params, cfg, rng);
        result.params.zero_grads();
        const LossParts parts = backward_losses(st, result.params, cfg);
        double total = 0.0;
        try {
            total = total_loss(parts.p1, parts.p2, parts.fewshot, parts.adapt, cfg.lambda_adapt);
        } catch (const NumericError& e) {
            throw NumericError("iteration " + std::to_string(iter) + ": " + e.what());
        }
        result.log.push_back({iter, parts.p1, parts.p2, parts.fewshot, parts.adapt, total});
        sgd_step(result.params, cfg.learning_rate);
    }
    return result;
}

std::vector<Detection> detect(const ParamStore& params, const Corpus& corpus,
                              const Episode& episode, const TrainConfig& raw_cfg,
                              const EvalThresholds& thresholds) {
    const TrainConfig cfg = resolve(raw_cfg, corpus);
    const ProposalConfig& p = cfg.proposal;
    const Tensor& raw_query = corpus.sequences.at(episode.query_index).feature;
    const Tensor query = cfg.leakage_projection
                             ? leakage_project(raw_query, corpus.catalog, cfg.leakage_gain)
                             : raw_query;

    const Stage1Out s1 = stage1_forward(query, params, p);
    const std::vector<AnchorSegment> anchors = generate_anchors(p.seq_len, p.stride, p.scales);
    std::vector<Segment> cand;
    std::vector<double> cand_score;
    stage1_candidates(s1, anchors, p, cand, cand_score);
    const std::vector<std::size_t> kept = nms(cand, cand_score, p.nms_threshold);
    const std::size_t take = std::min(kept.size(), p.infer_top);
    std::vector<Segment> proposals;
    proposals.reserve(take);
    for (std::size_t i = 0; i < take; ++i) proposals.push_back(cand[kept[i]]);
    if (proposals.empty()) return {};

    const Tensor pooled = pool_rows(query, proposals, p.bins);
    const Stage2Out s2 = stage2_forward(pooled, params);

    const double t = static_cast<double>(p.seq_len);
    std::vector<Segment> refined(proposals.size());
    std::vector<double> prop_score(proposals.size());
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        const AnchorSegment as{proposals[i].center(), proposals[i].length()};
        refined[i] = decode_offsets(as, {s2.offsets.at(i, 0), s2.offsets.at(i, 1)}, t);
        prop_score[i] = fg_prob(s2.scores.at(i, 0), s2.scores.at(i, 1));
    }

    const Tensor support = support_matrix(corpus, episode, cfg.leakage_projection, cfg.leakage_gain);
    const EncodeOut enc = encode_exemplars(support, params);
    const Tensor sim = similarity_matrix(enc.feat, s2.feat);
    const LabelAssignment assign = assign_labels(sim, cfg.k_shot);

    std::vector<Detection> survivors;
    for (std::size_t i = 0; i < refined.size(); ++i) {
        if (prop_score[i] < thresholds.proposal) continue;
        if (assign.score[i] < thresholds.similarity) continue;
        survivors.push_back(
            {refined[i].start, refined[i].end, assign.label[i], prop_score[i], assign.score[i]});
    }

    std::vector<Detection> out;
    if (cfg.per_class_nms) {
        for (std::size_t l = 0; l < cfg.n_way; ++l) {
            std::vector<Segment> segs;
            std::vector<double> scores;
            std::vector<std::size_t> src;
            for (std::size_t i = 0; i < survivors.size(); ++i) {
                if (survivors[i].label != static_cast<int>(l)) continue;
                segs.push_back({survivors[i].start, survivors[i].end});
                scores.push_back(survivors[i].similarity_score);
                src.push_back(i);
            }
            if (segs.empty()) continue;
            for (std::size_t k : nms(segs, scores, p.nms_threshold))
                out.push_back(survivors[src[k]]);
        }
    } else {
        out = survivors;
    }
    std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
        if (a.similarity_score != b.similarity_score) return a.similarity_score > b.similarity_score;
        if (a.proposal_score != b.proposal_score) return a.proposal_score > b.proposal_score;
        if (a.start != b.start) return a.start < b.start;
        if (a.end != b.end) return a.end < b.end;
        return a.label < b.label;
    });
    return out;
}

double ap_at_tiou(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                  const std::vector<int>& gt_labels, int label, double alpha) {
    if (gts.size() != gt_labels.size())
        throw ContractViolation("ap_at_tiou: gts and labels disagree");
    std::vector<std::size_t> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g)
        if (gt_labels[g] == label) gt_idx.push_back(g);
    if (gt_idx.empty()) throw ContractViolation("ap_at_tiou: no ground truth for the class");

    std::vector<Detection> dets;
    for (const Detection& d : detections)
        if (d.label == label) dets.push_back(d);
    if (dets.empty()) return 0.0;
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.similarity_score != b.similarity_score) return a.similarity_score > b.similarity_score;
        if (a.proposal_score != b.proposal_score) return a.proposal_score > b.proposal_score;
        if (a.start != b.start) return a.start < b.start;
        return a.end < b.end;
    });

    std::vector<bool> matched(gt_idx.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    const double npos = static_cast<double>(gt_idx.size());
    for (const Detection& d : dets) {
        const Segment ds{d.start, d.end};
        double best = 0.0;
        std::size_t best_g = gt_idx.size();
        for (std::size_t g = 0; g < gt_idx.size(); ++g) {
            if (matched[g]) continue;
            const double ov = tiou(ds, gts[gt_idx[g]]);
            if (ov >= alpha && ov > best) {
                best = ov;
                best_g = g;
            }
        }
        if (best_g < gt_idx.size()) {
            matched[best_g] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / npos);
    }

    // All-point interpolation: integrate the precision envelope over recall.
    double ap = 0.0;
    double env = 0.0;
    for (std::size_t i = precision.size(); i-- > 0;) {
        env = std::max(env, precision[i]);
        const double prev_recall = i == 0 ? 0.0 : recall[i - 1];
        ap += (recall[i] - prev_recall) * env;
    }
    return ap;
}

double episode_map(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                   const std::vector<int>& gt_labels, double alpha) {
    std::vector<int> classes;
    for (int l : gt_labels)
        if (l >= 0 && std::find(classes.begin(), classes.end(), l) == classes.end())
            classes.push_back(l);
    if (classes.empty()) throw ContractViolation("episode_map: query has no episode-class gts");
    std::sort(classes.begin(), classes.end());
    double acc = 0.0;
    for (int c : classes) acc += ap_at_tiou(detections, gts, gt_labels, c, alpha);
    return acc / static_cast<double>(classes.size());
}

std::vector<double> average_map_grid() {
    std::vector<double> grid;
    for (int t = 0; t < 10; ++t) grid.push_back(static_cast<double>(50 + 5 * t) / 100.0);
    return grid;
}

double average_map(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                   const std::vector<int>& gt_labels) {
    const std::vector<double> grid = average_map_grid();
    double acc = 0.0;
    for (double alpha : grid) acc += episode_map(detections, gts, gt_labels, alpha);
    return acc / static_cast<double>(grid.size());
}

EvalReport evaluate(const ParamStore& params, const Corpus& corpus, const ClassSplit& split,
                    const TrainConfig& raw_cfg, std::size_t count, std::uint64_t master_seed,
                    const EvalThresholds& thresholds, std::size_t threads) {
    const TrainConfig cfg = resolve(raw_cfg, corpus);
    validate_split(split, corpus.catalog);
    if (count == 0) throw ConfigError("evaluate: episode count must be positive");
    EvalReport report;
    report.seed = master_seed;
    report.count = count;
    report.n_way = cfg.n_way;
    report.k_shot = cfg.k_shot;
    report.thresholds = thresholds;
    report.map50.assign(count, 0.0);
    report.avg_map.assign(count, 0.0);

    const EpisodeSpec spec{cfg.n_way, cfg.k_shot};
    auto eval_one = [&](std::size_t i) {
        const Episode ep = episode_at(corpus, split, spec, Phase::test, master_seed, i);
        const std::vector<Detection> dets = detect(params, corpus, ep, cfg, thresholds);
        std::vector<Segment> gts;
        std::vector<int> labels;
        episode_gt(corpus, ep, gts, labels);
        report.map50[i] = episode_map(dets, gts, labels, 0.5);
        report.avg_map[i] = average_map(dets, gts, labels);
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) eval_one(i);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr first_error;
        std::mutex error_mutex;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                try {
                    for (std::size_t i = w; i < count; i += workers) eval_one(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            });
        }
        for (std::thread& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    report.mean_map50 = mean_of(report.map50);
    report.std_map50 = sample_stdev(report.map50, report.mean_map50);
    report.mean_avg_map = mean_of(report.avg_map);
    report.std_avg_map = sample_stdev(report.avg_map, report.mean_avg_map);
    return report;
}

nlohmann::ordered_json eval_report_to_json(const EvalReport& report,
                                           const nlohmann::ordered_json& config_echo) {
    nlohmann::ordered_json j;
    j["seed"] = report.seed;
    j["count"] = report.count;
    j["n_way"] = report.n_way;
    j["k_shot"] = report.k_shot;
    j["thresholds"] = {{"proposal", report.thresholds.proposal},
                       {"similarity", report.thresholds.similarity}};
    j["mean_map_at_0.5"] = report.mean_map50;
    j["std_map_at_0.5"] = report.std_map50;
    j["mean_average_map"] = report.mean_avg_map;
    j["std_average_map"] = report.std_avg_map;
    j["per_episode"] = {{"map_at_0.5", report.map50}, {"average_map", report.avg_map}};
    if (!config_echo.is_null()) j["config"] = config_echo;
    return j;
}

std::vector<ThresholdRow> sweep_proposal_threshold(const ParamStore& params, const Corpus& corpus,
                                                   const ClassSplit& split, const TrainConfig& cfg,
                                                   const std::vector<double>& thresholds,
                                                   std::size_t count, std::uint64_t master_seed,
                                                   double similarity_threshold,
                                                   std::size_t threads) {
    if (thresholds.empty()) throw ConfigError("threshold sweep: no thresholds given");
    if (!std::is_sorted(thresholds.begin(), thresholds.end()))
        throw ConfigError("threshold sweep: thresholds must be sorted ascending");
    std::vector<ThresholdRow> rows;
    rows.reserve(thresholds.size());
    for (double t : thresholds) {
        const EvalReport r = evaluate(params, corpus, split, cfg, count, master_seed,
                                      {t, similarity_threshold}, threads);
        rows.push_back({t, r.mean_map50, r.mean_avg_map});
    }
    return rows;
}

std::vector<LambdaRow> sweep_lambda(const TrainConfig& base, const Corpus& corpus,
                                    const ClassSplit& split, const std::vector<double>& lambdas,
                                    std::size_t count, const EvalThresholds& thresholds,
                                    std::size_t threads) {
    if (lambdas.empty()) throw ConfigError("lambda sweep: no lambda values given");
    std::vector<LambdaRow> rows;
    rows.reserve(lambdas.size());
    for (double l : lambdas) {
        if (!(l >= 0.0) || !std::isfinite(l))
            throw ConfigError("lambda sweep: lambda must be non-negative");
        TrainConfig cfg = base;
        cfg.lambda_adapt = l;
        const TrainResult tr = train(cfg, corpus, split);
        const EvalReport r =
            evaluate(tr.params, corpus, split, cfg, count, cfg.seed, thresholds, threads);
        rows.push_back({l, r.mean_map50, r.mean_avg_map, tail_mean_adapt(tr.log)});
    }
    return rows;
}

SplitComparison compare_splits(const TrainConfig& base, const Corpus& corpus, std::size_t n_random,
                               std::size_t n_controlled, std::size_t n_novel,
                               const std::vector<std::uint64_t>& seeds, std::size_t count,
                               const EvalThresholds& thresholds, std::size_t threads) {
    if (n_random == 0 && n_controlled == 0)
        throw ConfigError("split comparison: nothing to run");
    if (seeds.size() < std::max(n_random, n_controlled))
        throw ContractViolation("split comparison: not enough seeds for the requested runs");
    SplitComparison cmp;
    auto run_mode = [&](SplitMode mode, std::size_t n, SplitComparison::Aggregate& agg) {
        std::vector<double> values;
        for (std::size_t i = 0; i < n; ++i) {
            const ClassSplit split = make_split(corpus.catalog, mode, n_novel, seeds[i]);
            TrainConfig cfg = base;
            cfg.seed = seeds[i];
            const TrainResult tr = train(cfg, corpus, split);
            const EvalReport r =
                evaluate(tr.params, corpus, split, cfg, count, cfg.seed, thresholds, threads);
            cmp.runs.push_back({mode, seeds[i], r.mean_map50});
            values.push_back(r.mean_map50);
        }
        agg.runs = values.size();
        agg.mean = mean_of(values);
        agg.stdev = sample_stdev(values, agg.mean);
    };
    run_mode(SplitMode::random, n_random, cmp.random_agg);
    run_mode(SplitMode::controlled, n_controlled, cmp.controlled_agg);
    return cmp;
}

void save_params(const ParamStore& params, const TrainConfig& cfg, const std::string& path) {
    container::File file;
    file.meta["kind"] = "params";
    file.meta["train_config"] = train_config_to_json(cfg);
    for (const auto& e : params.entries()) {
        container::Block b;
        b.name = e.name;
        b.dims.assign(e.value.dims.begin(), e.value.dims.end());
        b.data = e.value.v;
        file.blocks.push_back(std::move(b));
    }
    container::write_file(path, kParamsMagic, file);
}

LoadedParams load_params(const std::string& path) {
    const container::File file = container::read_file(path, kParamsMagic);
    LoadedParams out;
    if (!file.meta.contains("train_config"))
        throw HeaderError(path + ": parameter snapshot lacks its training config");
    out.config = train_config_from_json(file.meta.at("train_config"), path + ":train_config");
    for (const container::Block& b : file.blocks) {
        std::vector<std::size_t> dims(b.dims.begin(), b.dims.end());
        out.params.add(b.name, Tensor(std::move(dims), b.data));
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        if (row.size() != header.size())
            throw ContractViolation("write_csv: row width does not match header");
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
    if (!out) throw IoError("failed writing " + path);
}

void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(log.size());
    for (const LossLogRow& r : log)
        rows.push_back({std::to_string(r.iter), format_double(r.p1), format_double(r.p2),
                        format_double(r.fewshot), format_double(r.adapt), format_double(r.total)});
    write_csv(path, {"iter", "loss_p1", "loss_p2", "loss_fewshot", "loss_adapt", "loss_total"},
              rows);
}

}  // namespace fpad
