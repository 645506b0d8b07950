#include "fpad/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "fpad/container.hpp"
#include "fpad/error.hpp"
#include "fpad/jsonio.hpp"
#include "fpad/kernels.hpp"

namespace fpad {

namespace {

constexpr char kMagic[] = "FPADCORP1";

// rng stream ids within a corpus seed
constexpr std::uint64_t kCatalogStream = 1;
constexpr std::uint64_t kExemplarStream = 2;
constexpr std::uint64_t kSequenceStream = 3;

double vnorm(const std::vector<double>& v) {
    return std::sqrt(kern::dot(v.data(), v.data(), v.size()));
}

// Gram-Schmidt step: remove the span of `basis` from v, renormalize.
// Returns false when v was (numerically) inside the span.
bool orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
    for (const auto& b : basis) {
        const double p = kern::dot(v.data(), b.data(), v.size());
        kern::axpy(-p, b.data(), v.data(), v.size());
    }
    const double n = vnorm(v);
    if (n < 1e-6) return false;
    for (auto& x : v) x /= n;
    return true;
}

std::size_t pretrain_dir_count(const CorpusConfig& c) {
    return std::max<std::size_t>(c.pretrain_visible, std::min<std::size_t>(4, c.feat_dim));
}

}  // namespace

CorpusConfig corpus_config_from_json(const nlohmann::json& j, const std::string& path) {
    jsonio::ObjectReader r(j, path);
    CorpusConfig c;
    c.seed = r.require<std::uint64_t>("seed");
    c.num_classes = r.value_or<std::size_t>("num_classes", c.num_classes);
    c.feat_dim = r.value_or<std::size_t>("feat_dim", c.feat_dim);
    c.seq_len = r.value_or<std::size_t>("seq_len", c.seq_len);
    c.sigma_clip = r.value_or<double>("sigma_clip", c.sigma_clip);
    c.sigma_background = r.value_or<double>("sigma_background", c.sigma_background);
    c.bias_beta = r.value_or<double>("bias_beta", c.bias_beta);
    c.segment_density = r.value_or<double>("segment_density", c.segment_density);
    c.exemplars_per_class = r.value_or<std::size_t>("exemplars_per_class", c.exemplars_per_class);
    c.num_sequences = r.value_or<std::size_t>("num_sequences", c.num_sequences);
    c.classes_per_sequence = r.value_or<std::size_t>("classes_per_sequence", c.classes_per_sequence);
    c.seg_len_min = r.value_or<std::size_t>("seg_len_min", c.seg_len_min);
    c.seg_len_max = r.value_or<std::size_t>("seg_len_max", c.seg_len_max);
    c.prototype_scale = r.value_or<double>("prototype_scale", c.prototype_scale);
    c.pretrain_visible = r.value_or<std::size_t>("pretrain_visible", c.pretrain_visible);
    c.rho_min = r.value_or<double>("rho_min", c.rho_min);
    c.rho_max = r.value_or<double>("rho_max", c.rho_max);
    c.frames_per_exemplar = r.value_or<std::size_t>("frames_per_exemplar", c.frames_per_exemplar);
    c.nominal_fps = r.value_or<double>("nominal_fps", c.nominal_fps);
    r.finish();
    validate(c);
    return c;
}

nlohmann::json corpus_config_to_json(const CorpusConfig& c) {
    return nlohmann::ordered_json{{"seed", c.seed},
                                  {"num_classes", c.num_classes},
                                  {"feat_dim", c.feat_dim},
                                  {"seq_len", c.seq_len},
                                  {"sigma_clip", c.sigma_clip},
                                  {"sigma_background", c.sigma_background},
                                  {"bias_beta", c.bias_beta},
                                  {"segment_density", c.segment_density},
                                  {"exemplars_per_class", c.exemplars_per_class},
                                  {"num_sequences", c.num_sequences},
                                  {"classes_per_sequence", c.classes_per_sequence},
                                  {"seg_len_min", c.seg_len_min},
                                  {"seg_len_max", c.seg_len_max},
                                  {"prototype_scale", c.prototype_scale},
                                  {"pretrain_visible", c.pretrain_visible},
                                  {"rho_min", c.rho_min},
                                  {"rho_max", c.rho_max},
                                  {"frames_per_exemplar", c.frames_per_exemplar},
                                  {"nominal_fps", c.nominal_fps}};
}

void validate(const CorpusConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError("corpus config: " + m); };
    if (c.num_classes < 10) fail("num_classes must be >= 10");
    if (c.feat_dim < 8) fail("feat_dim must be >= 8");
    if (c.seq_len < 16) fail("seq_len must be >= 16");
    if (c.sigma_clip < 0 || c.sigma_background < 0) fail("sigmas must be non-negative");
    if (c.bias_beta < 0) fail("bias_beta must be non-negative");
    if (c.segment_density < 0) fail("segment_density must be non-negative");
    if (c.exemplars_per_class < 1) fail("exemplars_per_class must be >= 1");
    if (c.num_sequences < 1) fail("num_sequences must be >= 1");
    if (c.classes_per_sequence < 1 || c.classes_per_sequence > c.num_classes)
        fail("classes_per_sequence must be in [1, num_classes]");
    if (c.seg_len_min < 1 || c.seg_len_min > c.seg_len_max || c.seg_len_max > c.seq_len)
        fail("need 1 <= seg_len_min <= seg_len_max <= seq_len");
    if (c.prototype_scale <= 0) fail("prototype_scale must be positive");
    if (c.pretrain_visible > c.num_classes) fail("pretrain_visible exceeds num_classes");
    if (c.rho_min < 0 || c.rho_max > 1 || c.rho_min > c.rho_max)
        fail("need 0 <= rho_min <= rho_max <= 1");
    if (c.frames_per_exemplar < 1) fail("frames_per_exemplar must be >= 1");
    if (c.nominal_fps <= 0) fail("nominal_fps must be positive");
    if (c.feat_dim <= pretrain_dir_count(c))
        fail("feat_dim must exceed the pretraining direction count (" +
             std::to_string(pretrain_dir_count(c)) + ")");
}

ClassCatalog build_catalog(const CorpusConfig& config) {
    validate(config);
    Rng rng = Rng::stream(config.seed, kCatalogStream, 0);
    const std::size_t dim = config.feat_dim;
    const std::size_t n_dirs = pretrain_dir_count(config);

    std::vector<std::vector<double>> dirs;
    while (dirs.size() < n_dirs) {
        std::vector<double> v = random_unit_vector(dim, rng);
        if (orthogonalize(v, dirs)) dirs.push_back(std::move(v));
    }

    ClassCatalog cat;
    cat.pretrain_dirs = Tensor::zeros({n_dirs, dim});
    for (std::size_t i = 0; i < n_dirs; ++i)
        std::copy(dirs[i].begin(), dirs[i].end(), cat.pretrain_dirs.row_ptr(i));

    const std::size_t n_hidden = config.num_classes - config.pretrain_visible;
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        ClassInfo info;
        char buf[32];
        std::snprintf(buf, sizeof buf, "class_%03zu", c);
        info.name = buf;
        info.prototype.assign(dim, 0.0);
        if (c < config.pretrain_visible) {
            info.pretrain_visible = true;
            info.rho = 1.0;
            kern::axpy(config.prototype_scale, dirs[c].data(), info.prototype.data(), dim);
        } else {
            const std::size_t t = c - config.pretrain_visible;
            info.pretrain_visible = false;
            info.rho = n_hidden > 1 ? config.rho_min + (config.rho_max - config.rho_min) *
                                                          static_cast<double>(t) /
                                                          static_cast<double>(n_hidden - 1)
                                    : config.rho_min;
            std::vector<double> w;
            do {
                w = random_unit_vector(dim, rng);
            } while (!orthogonalize(w, dirs));
            const std::vector<double>& u = dirs[t % n_dirs];
            kern::axpy(config.prototype_scale * info.rho, u.data(), info.prototype.data(), dim);
            kern::axpy(config.prototype_scale * std::sqrt(1.0 - info.rho * info.rho), w.data(),
                       info.prototype.data(), dim);
        }
        cat.classes.push_back(std::move(info));
    }

    // The exemplar-stream bias direction lives in the span of the class
    // prototypes. A shift along class-relevant directions perturbs each class's
    // similarity differently; a direction orthogonal to every prototype would
    // be a common-mode offset that cosine ranking simply ignores.
    cat.bias_dir.assign(dim, 0.0);
    double bias_norm = 0.0;
    while (bias_norm < 1e-9) {
        std::fill(cat.bias_dir.begin(), cat.bias_dir.end(), 0.0);
        for (const ClassInfo& info : cat.classes)
            kern::axpy(rng.normal(), info.prototype.data(), cat.bias_dir.data(), dim);
        bias_norm = std::sqrt(kern::dot(cat.bias_dir.data(), cat.bias_dir.data(), dim));
    }
    for (double& v : cat.bias_dir) v /= bias_norm;

    for (std::size_t a = 0; a < cat.size(); ++a)
        for (std::size_t b = a + 1; b < cat.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double d = cat.classes[a].prototype[i] - cat.classes[b].prototype[i];
                d2 += d * d;
            }
            if (d2 < 1e-18)
                throw ConfigError("corpus config: prototypes of " + cat.classes[a].name + " and " +
                                  cat.classes[b].name +
                                  " coincide; lower rho_max or pretrain_visible");
        }
    return cat;
}

ExemplarClip synth_exemplar(const ClassCatalog& catalog, std::size_t class_id,
                            const CorpusConfig& config, Rng& rng) {
    if (class_id >= catalog.size()) throw ContractViolation("synth_exemplar: class id out of range");
    ExemplarClip clip;
    clip.class_id = class_id;
    clip.duration_s = rng.uniform(2.0, 10.0);
    const auto& proto = catalog.classes[class_id].prototype;
    clip.feature.resize(proto.size());
    for (std::size_t i = 0; i < proto.size(); ++i)
        clip.feature[i] = proto[i] + config.sigma_clip * rng.normal() +
                          config.bias_beta * catalog.bias_dir[i];
    return clip;
}

UntrimmedSequence synth_untrimmed(const ClassCatalog& catalog,
                                  const std::vector<std::size_t>& classes_present,
                                  const CorpusConfig& config, Rng& rng) {
    if (classes_present.empty()) throw ContractViolation("synth_untrimmed: classes_present empty");
    for (std::size_t c : classes_present)
        if (c >= catalog.size()) throw ContractViolation("synth_untrimmed: class id out of range");

    const std::size_t T = config.seq_len;
    const std::size_t want =
        std::max<std::size_t>(static_cast<std::size_t>(std::llround(config.segment_density)),
                              classes_present.size());

    // Every requested class appears at least once; extra segments draw
    // uniformly from the requested set. Segment order is shuffled so no class
    // systematically gets first pick of the timeline.
    std::vector<std::size_t> seg_class(classes_present);
    while (seg_class.size() < want)
        seg_class.push_back(classes_present[rng.bounded(classes_present.size())]);
    rng.shuffle(seg_class);

    UntrimmedSequence seq;
    seq.frame_rate = config.nominal_fps;
    seq.stride = 8.0;
    for (std::size_t s = 0; s < seg_class.size(); ++s) {
        const std::size_t len =
            config.seg_len_min + rng.bounded(config.seg_len_max - config.seg_len_min + 1);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double start = static_cast<double>(rng.bounded(T - len + 1));
            const double end = start + static_cast<double>(len);
            bool clash = false;
            for (const auto& g : seq.gts)
                if (start < g.end && g.start < end) {
                    clash = true;
                    break;
                }
            if (!clash) {
                seq.gts.push_back({start, end, seg_class[s]});
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("segment density too high: could not place segment " +
                                  std::to_string(s + 1) + " of " + std::to_string(seg_class.size()) +
                                  " after bounded retries");
    }

    seq.feature = Tensor::zeros({T, config.feat_dim});
    for (std::size_t t = 0; t < T; ++t) {
        const GtSegment* inside = nullptr;
        const double mid = static_cast<double>(t) + 0.5;
        for (const auto& g : seq.gts)
            if (mid > g.start && mid < g.end) {
                inside = &g;
                break;
            }
        double* row = seq.feature.row_ptr(t);
        if (inside) {
            const auto& proto = catalog.classes[inside->class_id].prototype;
            for (std::size_t i = 0; i < config.feat_dim; ++i)
                row[i] = proto[i] + config.sigma_clip * rng.normal();
        } else {
            for (std::size_t i = 0; i < config.feat_dim; ++i)
                row[i] = config.sigma_background * rng.normal();
        }
    }
    return seq;
}

Corpus generate_corpus(const CorpusConfig& config) {
    validate(config);
    Corpus corpus;
    corpus.config = config;
    corpus.catalog = build_catalog(config);

    corpus.exemplars.resize(config.num_classes);
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        corpus.exemplars[c].reserve(config.exemplars_per_class);
        for (std::size_t i = 0; i < config.exemplars_per_class; ++i) {
            Rng rng = Rng::stream(config.seed, kExemplarStream, c * config.exemplars_per_class + i);
            corpus.exemplars[c].push_back(synth_exemplar(corpus.catalog, c, config, rng));
        }
    }

    corpus.sequences.reserve(config.num_sequences);
    for (std::size_t j = 0; j < config.num_sequences; ++j) {
        Rng rng = Rng::stream(config.seed, kSequenceStream, j);
        const std::vector<std::size_t> present =
            rng.sample_without_replacement(config.num_classes, config.classes_per_sequence);
        corpus.sequences.push_back(synth_untrimmed(corpus.catalog, present, config, rng));
    }
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    const CorpusConfig& c = corpus.config;
    const std::size_t C = c.num_classes, D = c.feat_dim, T = c.seq_len;
    const std::size_t E = c.exemplars_per_class, S = c.num_sequences;

    container::File file;
    std::size_t total_gts = 0;
    for (const auto& s : corpus.sequences) total_gts += s.gts.size();
    file.meta = nlohmann::ordered_json{
        {"C", C},
        {"D_raw", D},
        {"counts",
         {{"exemplars_per_class", E}, {"sequences", S}, {"gt_segments", total_gts}}},
        {"seed", c.seed},
        {"config", corpus_config_to_json(c)}};

    auto add = [&](const char* name, std::vector<std::uint64_t> dims, std::vector<double> data) {
        file.blocks.push_back({name, std::move(dims), std::move(data)});
    };

    std::vector<double> protos;
    protos.reserve(C * D);
    std::vector<double> rho(C), visible(C);
    for (std::size_t i = 0; i < C; ++i) {
        const auto& cls = corpus.catalog.classes[i];
        protos.insert(protos.end(), cls.prototype.begin(), cls.prototype.end());
        rho[i] = cls.rho;
        visible[i] = cls.pretrain_visible ? 1.0 : 0.0;
    }
    add("prototypes", {C, D}, std::move(protos));
    add("pretrain_dirs", {corpus.catalog.pretrain_dirs.rows(), D}, corpus.catalog.pretrain_dirs.v);
    add("bias_dir", {D}, corpus.catalog.bias_dir);
    add("class_rho", {C}, std::move(rho));
    add("class_visible", {C}, std::move(visible));

    std::vector<double> ex_feat, ex_dur;
    ex_feat.reserve(C * E * D);
    for (const auto& per_class : corpus.exemplars)
        for (const auto& clip : per_class) {
            ex_feat.insert(ex_feat.end(), clip.feature.begin(), clip.feature.end());
            ex_dur.push_back(clip.duration_s);
        }
    add("exemplar_features", {C * E, D}, std::move(ex_feat));
    add("exemplar_durations", {C * E}, std::move(ex_dur));

    std::vector<double> seq_feat, gt_counts, gt_data;
    seq_feat.reserve(S * T * D);
    for (const auto& seq : corpus.sequences) {
        seq_feat.insert(seq_feat.end(), seq.feature.v.begin(), seq.feature.v.end());
        gt_counts.push_back(static_cast<double>(seq.gts.size()));
        for (const auto& g : seq.gts) {
            gt_data.push_back(g.start);
            gt_data.push_back(g.end);
            gt_data.push_back(static_cast<double>(g.class_id));
        }
    }
    add("sequence_features", {S, T, D}, std::move(seq_feat));
    add("gt_counts", {S}, std::move(gt_counts));
    add("gt_data", {total_gts, 3}, std::move(gt_data));

    container::write_file(path, kMagic, file);
}

Corpus load_corpus(const std::string& path) {
    container::File file = container::read_file(path, kMagic);
    if (!file.meta.contains("config")) throw HeaderError("corpus header: missing config echo");
    Corpus corpus;
    corpus.config = corpus_config_from_json(file.meta["config"], "corpus header config");
    const CorpusConfig& c = corpus.config;
    const std::size_t C = c.num_classes, D = c.feat_dim, T = c.seq_len;
    const std::size_t E = c.exemplars_per_class, S = c.num_sequences;

    auto block = [&](const char* name) -> const container::Block& {
        for (const auto& b : file.blocks)
            if (b.name == name) return b;
        throw HeaderError(std::string("corpus header: missing block '") + name + "'");
    };
    auto expect = [&](const container::Block& b, std::vector<std::uint64_t> dims) {
        if (b.dims != dims)
            throw PayloadError("corpus block '" + b.name + "': unexpected dims");
    };

    const auto& protos = block("prototypes");
    expect(protos, {C, D});
    const auto& dirs = block("pretrain_dirs");
    if (dirs.dims.size() != 2 || dirs.dims[1] != D)
        throw PayloadError("corpus block 'pretrain_dirs': unexpected dims");
    const auto& bias = block("bias_dir");
    expect(bias, {D});
    const auto& rho = block("class_rho");
    expect(rho, {C});
    const auto& visible = block("class_visible");
    expect(visible, {C});

    corpus.catalog.pretrain_dirs =
        Tensor({static_cast<std::size_t>(dirs.dims[0]), D}, dirs.data);
    corpus.catalog.bias_dir = bias.data;
    for (std::size_t i = 0; i < C; ++i) {
        ClassInfo info;
        char buf[32];
        std::snprintf(buf, sizeof buf, "class_%03zu", i);
        info.name = buf;
        info.prototype.assign(protos.data.begin() + static_cast<std::ptrdiff_t>(i * D),
                              protos.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * D));
        info.rho = rho.data[i];
        info.pretrain_visible = visible.data[i] != 0.0;
        corpus.catalog.classes.push_back(std::move(info));
    }

    const auto& ex_feat = block("exemplar_features");
    expect(ex_feat, {C * E, D});
    const auto& ex_dur = block("exemplar_durations");
    expect(ex_dur, {C * E});
    corpus.exemplars.resize(C);
    for (std::size_t cidx = 0; cidx < C; ++cidx)
        for (std::size_t i = 0; i < E; ++i) {
            const std::size_t row = cidx * E + i;
            ExemplarClip clip;
            clip.class_id = cidx;
            clip.duration_s = ex_dur.data[row];
            clip.feature.assign(ex_feat.data.begin() + static_cast<std::ptrdiff_t>(row * D),
                                ex_feat.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * D));
            corpus.exemplars[cidx].push_back(std::move(clip));
        }

    const auto& seq_feat = block("sequence_features");
    expect(seq_feat, {S, T, D});
    const auto& gt_counts = block("gt_counts");
    expect(gt_counts, {S});
    const auto& gt_data = block("gt_data");
    if (gt_data.dims.size() != 2 || gt_data.dims[1] != 3)
        throw PayloadError("corpus block 'gt_data': unexpected dims");

    std::size_t gt_pos = 0;
    for (std::size_t j = 0; j < S; ++j) {
        UntrimmedSequence seq;
        seq.frame_rate = c.nominal_fps;
        seq.stride = 8.0;
        seq.feature = Tensor::zeros({T, D});
        std::copy(seq_feat.data.begin() + static_cast<std::ptrdiff_t>(j * T * D),
                  seq_feat.data.begin() + static_cast<std::ptrdiff_t>((j + 1) * T * D),
                  seq.feature.v.begin());
        const auto n = static_cast<std::size_t>(gt_counts.data[j]);
        for (std::size_t g = 0; g < n; ++g) {
            if (gt_pos >= gt_data.dims[0])
                throw PayloadError("corpus block 'gt_data': fewer rows than gt_counts total");
            seq.gts.push_back({gt_data.data[gt_pos * 3], gt_data.data[gt_pos * 3 + 1],
                               static_cast<std::size_t>(gt_data.data[gt_pos * 3 + 2])});
            ++gt_pos;
        }
        corpus.sequences.push_back(std::move(seq));
    }
    if (gt_pos != gt_data.dims[0])
        throw PayloadError("corpus block 'gt_data': more rows than gt_counts total");
    return corpus;
}

}  // namespace fpad
