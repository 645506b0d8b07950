#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpad/corpus.hpp"
#include "fpad/episodes.hpp"
#include "fpad/fewshot.hpp"
#include "fpad/proposals.hpp"
#include "fpad/splits.hpp"

// Training loop, two-step inference, episode evaluation (mAP@a, average mAP)
// and the three studies (lambda ablation, proposal-threshold sweep, split
// comparison). Loss structure per episode:
//   L = L_p1 + L_p2 + L_fewshot + lambda * L_adapt
// where each proposal stage contributes mean binary cross-entropy over its
// sampled batch plus mean smooth-L1 over its sampled positives.
//
// The training step is decomposed into select_structure (all discrete
// choices: episode, target sampling, stage-1 survivors, pooled features) and
// forward/backward_losses, which are smooth in the parameters for a frozen
// structure — that split is what makes finite-difference checks of the full
// composite loss meaningful. Stage-1 proposals are handed to stage 2 as
// constants (no gradient flows through the decoded boundaries).

namespace fpad {

struct EvalThresholds {
    double proposal = 0.3;
    double similarity = 0.0;
};

// THUMOS-style low-threshold preset.
inline constexpr EvalThresholds kThumosThresholds{0.05, 0.02};

struct TrainConfig {
    std::uint64_t seed = 0;  // master seed: init, episode streams, target sampling
    double learning_rate = 0.12;
    std::size_t iterations = 2000;
    double lambda_adapt = 0.5;
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    double tau = 0.2;  // cosine scores are divided by tau before softmax
    bool per_class_nms = true;
    bool leakage_projection = false;  // frozen pretraining projection on raw features
    double leakage_gain = 0.25;       // P_span(x) + gain * (x - P_span(x)) when enabled
    ProposalConfig proposal;
};

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::ordered_json train_config_to_json(const TrainConfig& c);
void validate(const TrainConfig& c);

// feat_dim / seq_len always come from the corpus the run uses.
TrainConfig resolve(TrainConfig cfg, const Corpus& corpus);

ParamStore init_params(const TrainConfig& cfg);

// Row-wise P(x) + gain * (x - P(x)) with P the projection onto the pretraining
// span: in-span components pass through, everything else survives only at
// `gain`. Frozen: no parameters, no gradients; models a backbone that
// represents familiar content well and unfamiliar content poorly.
Tensor leakage_project(const Tensor& rows, const ClassCatalog& catalog, double gain);

// Query ground truth as class-agnostic segments plus episode-local labels
// (-1 for segments of classes outside the episode).
void episode_gt(const Corpus& corpus, const Episode& episode, std::vector<Segment>& gts,
                std::vector<int>& labels);

// Frozen per-iteration structure; see file comment.
struct EpisodeStructure {
    Tensor query;        // seq_len x D, after optional leakage projection
    Tensor support_raw;  // (n_way*k) x D, label-major, k rows per label
    std::vector<Segment> gts;
    std::vector<int> gt_label;
    std::vector<AnchorSegment> anchors;
    std::vector<TargetItem> s1_targets;
    std::vector<Segment> proposals;  // stage-1 survivors, detached
    Tensor pooled_flat;              // M2 x (bins*D)
    std::vector<TargetItem> s2_targets;
    std::vector<int> fs_targets;  // per survivor: episode label or -1
};

EpisodeStructure select_structure(const Corpus& corpus, const Episode& episode,
                                  const ParamStore& params, const TrainConfig& cfg, Rng& rng);

struct LossParts {
    double p1 = 0.0;
    double p2 = 0.0;
    double fewshot = 0.0;
    double adapt = 0.0;  // unweighted; lambda is applied in total_loss
};

LossParts forward_losses(const EpisodeStructure& st, const ParamStore& params,
                         const TrainConfig& cfg);
// forward_losses plus gradient accumulation into the store.
LossParts backward_losses(const EpisodeStructure& st, ParamStore& params, const TrainConfig& cfg);

struct LossLogRow {
    std::size_t iter = 0;
    double p1 = 0.0, p2 = 0.0, fewshot = 0.0, adapt = 0.0, total = 0.0;
};

struct TrainResult {
    ParamStore params;
    std::vector<LossLogRow> log;  // one row per iteration
};

TrainResult train(const TrainConfig& cfg, const Corpus& corpus, const ClassSplit& split);

struct Detection {
    double start = 0.0;
    double end = 0.0;
    int label = 0;  // episode-local
    double proposal_score = 0.0;
    double similarity_score = 0.0;
};

// stage-1 -> decode -> NMS -> top-k -> SoI pool -> stage-2 rescore/refine ->
// similarity labels -> score thresholds -> per-class NMS.
std::vector<Detection> detect(const ParamStore& params, const Corpus& corpus,
                              const Episode& episode, const TrainConfig& cfg,
                              const EvalThresholds& thresholds);

// Single-class average precision, all-point interpolation, greedy best-tIoU
// matching in (similarity, proposal)-score order.
double ap_at_tiou(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                  const std::vector<int>& gt_labels, int label, double alpha);
// Mean AP over episode classes that appear in the ground truth.
double episode_map(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                   const std::vector<int>& gt_labels, double alpha);
// Mean of episode_map over tIoU thresholds 0.50, 0.55, ..., 0.95.
double average_map(const std::vector<Detection>& detections, const std::vector<Segment>& gts,
                   const std::vector<int>& gt_labels);
std::vector<double> average_map_grid();

struct EvalReport {
    std::uint64_t seed = 0;
    std::size_t count = 0;
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    EvalThresholds thresholds;
    std::vector<double> map50;    // per episode, index-ordered
    std::vector<double> avg_map;  // per episode
    double mean_map50 = 0.0, std_map50 = 0.0;
    double mean_avg_map = 0.0, std_avg_map = 0.0;
};

// Deterministic for a fixed master seed at every `threads` value: episode i
// derives its own rng stream and results are assembled by index.
EvalReport evaluate(const ParamStore& params, const Corpus& corpus, const ClassSplit& split,
                    const TrainConfig& cfg, std::size_t count, std::uint64_t master_seed,
                    const EvalThresholds& thresholds, std::size_t threads = 1);

nlohmann::ordered_json eval_report_to_json(const EvalReport& report,
                                           const nlohmann::ordered_json& config_echo);

struct ThresholdRow {
    double threshold = 0.0;
    double map50 = 0.0;
    double avg_map = 0.0;
};

// Thresholds must arrive sorted ascending; each row is a full evaluate() at
// the shared master seed.
std::vector<ThresholdRow> sweep_proposal_threshold(const ParamStore& params, const Corpus& corpus,
                                                   const ClassSplit& split, const TrainConfig& cfg,
                                                   const std::vector<double>& thresholds,
                                                   std::size_t count, std::uint64_t master_seed,
                                                   double similarity_threshold,
                                                   std::size_t threads = 1);

struct LambdaRow {
    double lambda = 0.0;
    double map50 = 0.0;
    double avg_map = 0.0;
    double final_adapt = 0.0;  // mean over the last tenth of logged iterations
};

// Full train + evaluate per lambda, all other seeds shared.
std::vector<LambdaRow> sweep_lambda(const TrainConfig& base, const Corpus& corpus,
                                    const ClassSplit& split, const std::vector<double>& lambdas,
                                    std::size_t count, const EvalThresholds& thresholds,
                                    std::size_t threads = 1);

struct SplitComparison {
    struct Run {
        SplitMode mode = SplitMode::random;
        std::uint64_t seed = 0;
        double map50 = 0.0;
    };
    struct Aggregate {
        std::size_t runs = 0;
        double mean = 0.0;
        double stdev = 0.0;  // sample stdev; 0 for a single run
    };
    std::vector<Run> runs;
    Aggregate random_agg;
    Aggregate controlled_agg;
};

// Run i of either mode uses seeds[i] for the split and for training and
// evaluation, so the two modes are seed-paired. seeds.size() must cover
// max(n_random, n_controlled).
SplitComparison compare_splits(const TrainConfig& base, const Corpus& corpus, std::size_t n_random,
                               std::size_t n_controlled, std::size_t n_novel,
                               const std::vector<std::uint64_t>& seeds, std::size_t count,
                               const EvalThresholds& thresholds, std::size_t threads = 1);

// Parameter snapshots use the corpus container convention; the resolved
// training config rides along in the header so evaluation can rebuild the
// network without a separate config file.
void save_params(const ParamStore& params, const TrainConfig& cfg, const std::string& path);

struct LoadedParams {
    ParamStore params;
    TrainConfig config;
};
LoadedParams load_params(const std::string& path);

std::string format_double(double v);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::string& path);

}  // namespace fpad
