#include "fpad/gradcheck_paths.hpp"

#include <algorithm>
#include <cmath>

#include "fpad/engine.hpp"
#include "fpad/error.hpp"

namespace fpad {

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr std::uint64_t kInstanceStream = 99;

struct MicroInstance {
    Corpus corpus;
    TrainConfig cfg;
    ParamStore params;
    EpisodeStructure st;
};

TrainConfig micro_train_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.n_way = 2;
    cfg.k_shot = 2;
    cfg.tau = 0.5;
    cfg.lambda_adapt = 0.7;
    cfg.proposal.feat_dim = 8;
    cfg.proposal.seq_len = 16;
    cfg.proposal.stride = 4;
    cfg.proposal.window = 4;
    cfg.proposal.scales = {2, 4};
    cfg.proposal.hidden = 6;
    cfg.proposal.bins = 2;
    cfg.proposal.embed_dim = 6;
    cfg.proposal.batch = 8;
    cfg.proposal.train_top = 6;
    cfg.proposal.infer_top = 8;
    return cfg;
}

CorpusConfig micro_corpus_config(std::uint64_t seed) {
    CorpusConfig c;
    c.seed = seed;
    c.num_classes = 10;
    c.feat_dim = 8;
    c.seq_len = 16;
    c.sigma_clip = 0.2;
    c.sigma_background = 0.2;
    c.bias_beta = 0.3;
    c.segment_density = 1.5;
    c.exemplars_per_class = 3;
    c.num_sequences = 6;
    c.classes_per_sequence = 2;
    c.seg_len_min = 2;
    c.seg_len_max = 5;
    c.prototype_scale = 1.5;
    return c;
}

bool margins_ok(const Tensor& pre) {
    for (double x : pre.v)
        if (std::fabs(x) < kKinkMargin) return false;
    return true;
}

bool offset_margins_ok(const Tensor& offsets, const std::vector<TargetItem>& targets) {
    for (const TargetItem& t : targets) {
        if (t.label != 1) continue;
        for (std::size_t d = 0; d < 2; ++d) {
            const double diff = offsets.at(t.index, d) - t.reg[d];
            if (std::fabs(std::fabs(diff) - 1.0) < kKinkMargin) return false;
        }
    }
    return true;
}

bool row_norms_ok(const Tensor& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) acc += m.at(r, c) * m.at(r, c);
        if (std::sqrt(acc) < kKinkMargin) return false;
    }
    return true;
}

bool has_label(const std::vector<TargetItem>& targets, int label) {
    return std::any_of(targets.begin(), targets.end(),
                       [label](const TargetItem& t) { return t.label == label; });
}

Tensor batch_rows(const Tensor& m, const std::vector<TargetItem>& items) {
    Tensor out = Tensor::zeros({items.size(), m.cols()});
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(m.row_ptr(items[i].index), m.row_ptr(items[i].index) + m.cols(), out.row_ptr(i));
    return out;
}

// Locally smooth in every path we differentiate: ReLU pre-activations away
// from zero, smooth-L1 differences away from the |d| = 1 elbow, feature rows
// away from zero norm and cosines away from the [-1, 1] clamp, adaptation
// distance away from its zero-gradient guard, and at least one contributor
// to every loss term so none of them is trivially constant.
bool instance_smooth(const MicroInstance& inst) {
    const EpisodeStructure& st = inst.st;
    if (!has_label(st.s1_targets, 1) || !has_label(st.s1_targets, 0)) return false;
    if (!has_label(st.s2_targets, 1) || !has_label(st.s2_targets, 0)) return false;
    if (std::none_of(st.fs_targets.begin(), st.fs_targets.end(), [](int t) { return t >= 0; }))
        return false;

    const Stage1Out s1 = stage1_forward(st.query, inst.params, inst.cfg.proposal);
    if (!margins_ok(s1.pre)) return false;
    if (!offset_margins_ok(s1.offsets, st.s1_targets)) return false;

    const Stage2Out s2 = stage2_forward(st.pooled_flat, inst.params);
    if (!margins_ok(s2.pre)) return false;
    if (!offset_margins_ok(s2.offsets, st.s2_targets)) return false;

    const EncodeOut enc = encode_exemplars(st.support_raw, inst.params);
    if (!margins_ok(enc.pre)) return false;
    if (!row_norms_ok(s2.feat) || !row_norms_ok(enc.feat)) return false;

    const Tensor sim = similarity_matrix(enc.feat, s2.feat);
    for (double v : sim.v)
        if (std::fabs(v) > 1.0 - 1e-4) return false;
    if (adaptation_loss(row_normalize(batch_rows(s2.feat, st.s2_targets)),
                        row_normalize(enc.feat)) < kKinkMargin)
        return false;
    return true;
}

MicroInstance build_instance(std::uint64_t seed, std::size_t index) {
    for (std::size_t attempt = 0; attempt < 200; ++attempt) {
        const std::uint64_t s = mix_seed(seed, index * 1000 + attempt + 1);
        MicroInstance inst;
        try {
            CorpusConfig cc = micro_corpus_config(s);
            inst.corpus = generate_corpus(cc);
            inst.cfg = resolve(micro_train_config(s), inst.corpus);
            inst.params = init_params(inst.cfg);
            Rng wrng = Rng::stream(s, kInstanceStream, 1);
            for (auto& e : inst.params.entries())
                for (double& v : e.value.v) v = wrng.uniform(-1.0, 1.0);

            const ClassSplit split = make_split(inst.corpus.catalog, SplitMode::random, 4, s);
            Rng rng = Rng::stream(s, kInstanceStream, 2);
            Episode ep = sample_train_episode(inst.corpus, split,
                                              {inst.cfg.n_way, inst.cfg.k_shot}, rng);
            inst.st = select_structure(inst.corpus, ep, inst.params, inst.cfg, rng);
        } catch (const GenerationError&) {
            continue;  // tiny sequences occasionally cannot fit all segments
        } catch (const SamplingError&) {
            continue;
        } catch (const ContractViolation&) {
            continue;  // e.g. no stage-2 negatives in this draw
        }
        if (!instance_smooth(inst)) continue;
        return inst;
    }
    throw NumericError("gradcheck: could not draw a kink-free micro instance");
}

double stage_score_loss(const Tensor& scores, const std::vector<TargetItem>& targets,
                        Tensor* grad_scores) {
    const double inv_b = 1.0 / static_cast<double>(targets.size());
    double loss = 0.0;
    for (const TargetItem& t : targets) {
        const double bg = scores.at(t.index, 0);
        const double fg = scores.at(t.index, 1);
        loss += binary_score_loss(bg, fg, t.label) * inv_b;
        if (grad_scores)
            binary_score_loss_backward(bg, fg, t.label, inv_b, grad_scores->at(t.index, 0),
                                       grad_scores->at(t.index, 1));
    }
    return loss;
}

double stage_reg_loss(const Tensor& offsets, const std::vector<TargetItem>& targets,
                      Tensor* grad_offsets) {
    std::size_t npos = 0;
    for (const TargetItem& t : targets) npos += t.label == 1 ? 1 : 0;
    if (npos == 0) return 0.0;
    const double inv_p = 1.0 / static_cast<double>(npos);
    double loss = 0.0;
    for (const TargetItem& t : targets) {
        if (t.label != 1) continue;
        const Tensor pred({1, 2}, {offsets.at(t.index, 0), offsets.at(t.index, 1)});
        const Tensor targ({1, 2}, {t.reg[0], t.reg[1]});
        loss += smooth_l1(pred, targ) * inv_p;
        if (grad_offsets) {
            Tensor g = Tensor::zeros({1, 2});
            smooth_l1_backward(pred, targ, inv_p, g);
            grad_offsets->at(t.index, 0) += g.v[0];
            grad_offsets->at(t.index, 1) += g.v[1];
        }
    }
    return loss;
}

using LossFn = std::function<double(const MicroInstance&, ParamStore&)>;

double path_stage1_score(const MicroInstance& inst, ParamStore& ps) {
    const Stage1Out s1 = stage1_forward(inst.st.query, ps, inst.cfg.proposal);
    Tensor gs = Tensor::zeros(s1.scores.dims);
    Tensor go = Tensor::zeros(s1.offsets.dims);
    const double loss = stage_score_loss(s1.scores, inst.st.s1_targets, &gs);
    stage1_backward(s1, gs, go, ps, inst.cfg.proposal);
    return loss;
}

double path_stage2_offsets(const MicroInstance& inst, ParamStore& ps) {
    const Stage2Out s2 = stage2_forward(inst.st.pooled_flat, ps);
    Tensor gs = Tensor::zeros(s2.scores.dims);
    Tensor go = Tensor::zeros(s2.offsets.dims);
    Tensor gf = Tensor::zeros(s2.feat.dims);
    const double loss = stage_reg_loss(s2.offsets, inst.st.s2_targets, &go);
    stage2_backward(s2, gs, go, gf, ps);
    return loss;
}

double path_fewshot(const MicroInstance& inst, ParamStore& ps) {
    const Stage2Out s2 = stage2_forward(inst.st.pooled_flat, ps);
    const EncodeOut enc = encode_exemplars(inst.st.support_raw, ps);
    const Tensor sim = similarity_matrix(enc.feat, s2.feat);
    const double loss = fewshot_cls_loss(sim, inst.st.fs_targets, inst.cfg.k_shot, inst.cfg.tau);
    Tensor g_sim = Tensor::zeros(sim.dims);
    fewshot_cls_loss_backward(sim, inst.st.fs_targets, inst.cfg.k_shot, inst.cfg.tau, 1.0, g_sim);
    Tensor g_support = Tensor::zeros(enc.feat.dims);
    Tensor g_prop = Tensor::zeros(s2.feat.dims);
    similarity_matrix_backward(enc.feat, s2.feat, g_sim, g_support, g_prop);
    stage2_backward(s2, Tensor::zeros(s2.scores.dims), Tensor::zeros(s2.offsets.dims), g_prop, ps);
    encode_exemplars_backward(enc, g_support, ps);
    return loss;
}

// Mirrors the training wiring: the adaptation term reads the sampled batch
// rows, so the gradient scatters back through only those rows.
double path_adaptation(const MicroInstance& inst, ParamStore& ps) {
    const Stage2Out s2 = stage2_forward(inst.st.pooled_flat, ps);
    const EncodeOut enc = encode_exemplars(inst.st.support_raw, ps);
    const Tensor batch = batch_rows(s2.feat, inst.st.s2_targets);
    const Tensor batch_unit = row_normalize(batch);
    const Tensor support_unit = row_normalize(enc.feat);
    const double loss = adaptation_loss(batch_unit, support_unit);
    Tensor g_batch_unit = Tensor::zeros(batch.dims);
    Tensor g_support_unit = Tensor::zeros(enc.feat.dims);
    adaptation_loss_backward(batch_unit, support_unit, 1.0, g_batch_unit, g_support_unit);
    Tensor g_support = Tensor::zeros(enc.feat.dims);
    row_normalize_backward(enc.feat, g_support_unit, g_support);
    Tensor g_batch = Tensor::zeros(batch.dims);
    row_normalize_backward(batch, g_batch_unit, g_batch);
    Tensor g_prop = Tensor::zeros(s2.feat.dims);
    for (std::size_t i = 0; i < inst.st.s2_targets.size(); ++i)
        for (std::size_t c = 0; c < g_batch.cols(); ++c)
            g_prop.at(inst.st.s2_targets[i].index, c) += g_batch.at(i, c);
    stage2_backward(s2, Tensor::zeros(s2.scores.dims), Tensor::zeros(s2.offsets.dims), g_prop, ps);
    encode_exemplars_backward(enc, g_support, ps);
    return loss;
}

double path_total(const MicroInstance& inst, ParamStore& ps) {
    const LossParts parts = backward_losses(inst.st, ps, inst.cfg);
    return total_loss(parts.p1, parts.p2, parts.fewshot, parts.adapt, inst.cfg.lambda_adapt);
}

LossFn path_fn(const std::string& name) {
    if (name == "stage1-score") return path_stage1_score;
    if (name == "stage2-offsets") return path_stage2_offsets;
    if (name == "fewshot-ce") return path_fewshot;
    if (name == "adaptation") return path_adaptation;
    if (name == "total") return path_total;
    throw ConfigError("unknown gradcheck path: " + name);
}

}  // namespace

const std::vector<std::string>& gradcheck_path_names() {
    static const std::vector<std::string> names = {"stage1-score", "stage2-offsets", "fewshot-ce",
                                                   "adaptation", "total"};
    return names;
}

PathCheckResult check_loss_path(const std::string& name, std::uint64_t seed,
                                std::size_t instances, double step, double tolerance) {
    const LossFn fn = path_fn(name);
    PathCheckResult result;
    result.path = name;
    result.instances = instances;
    for (std::size_t i = 0; i < instances; ++i) {
        MicroInstance inst = build_instance(mix_seed(seed, 0x67726164ULL), i);
        auto loss_and_grad = [&](ParamStore& ps) { return fn(inst, ps); };
        const GradCheckReport report =
            finite_diff_check(loss_and_grad, inst.params, step, tolerance);
        result.max_rel_err = std::max(result.max_rel_err, report.max_rel_err);
        result.all_finite = result.all_finite && report.all_finite;
        for (const GradCheckRow& row : report.rows)
            if (row.max_rel_err >= tolerance || !row.loss_finite) result.failures.push_back(row);
    }
    std::sort(result.failures.begin(), result.failures.end(),
              [](const GradCheckRow& a, const GradCheckRow& b) {
                  return a.max_rel_err > b.max_rel_err;
              });
    if (result.failures.size() > 8) result.failures.resize(8);
    result.passed = result.all_finite && result.max_rel_err < tolerance;
    return result;
}

std::vector<PathCheckResult> run_gradcheck(std::uint64_t seed, std::size_t instances, double step,
                                           double tolerance) {
    std::vector<PathCheckResult> out;
    for (const std::string& name : gradcheck_path_names())
        out.push_back(check_loss_path(name, seed, instances, step, tolerance));
    return out;
}

}  // namespace fpad
