#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpad/rng.hpp"
#include "fpad/tensor.hpp"

// Synthetic feature-level corpus standing in for encoded untrimmed video.
// Each class has a prototype direction in feature space; untrimmed sequences
// are Gaussian background with prototype-coloured rows inside ground-truth
// segments; trimmed exemplar clips additionally carry a constant bias along a
// corpus-wide unit direction, modelling the frame-rate mismatch between the
// trimmed and untrimmed streams. A subset of classes can be flagged as
// members of a simulated pretraining label set; the remaining class
// prototypes sit at a controlled correlation rho to that set's span.

namespace fpad {

struct CorpusConfig {
    std::uint64_t seed = 0;  // mandatory; there is no default corpus
    std::size_t num_classes = 20;
    std::size_t feat_dim = 32;       // D_raw
    std::size_t seq_len = 96;        // T', rows per untrimmed feature map
    double sigma_clip = 0.25;        // per-channel noise inside segments / exemplars
    double sigma_background = 0.25;  // per-channel noise outside segments
    double bias_beta = 0.5;          // exemplar-stream bias magnitude
    double segment_density = 3.0;    // mean ground-truth segments per sequence
    std::size_t exemplars_per_class = 20;
    std::size_t num_sequences = 200;
    std::size_t classes_per_sequence = 3;
    std::size_t seg_len_min = 6;   // feature units, integral boundaries
    std::size_t seg_len_max = 24;
    double prototype_scale = 2.0;  // norm of every class prototype
    std::size_t pretrain_visible = 0;  // first k classes join the pretraining set
    double rho_min = 0.0;  // correlation ramp across the non-visible classes
    double rho_max = 0.0;
    std::size_t frames_per_exemplar = 16;  // metadata only (uniform sampling regime)
    double nominal_fps = 6.0;              // metadata only
};

CorpusConfig corpus_config_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::json corpus_config_to_json(const CorpusConfig& c);
void validate(const CorpusConfig& c);

struct ClassInfo {
    std::string name;
    std::vector<double> prototype;  // length feat_dim, norm prototype_scale
    bool pretrain_visible = false;
    double rho = 0.0;  // correlation to the pretraining span (1 when visible)
};

struct ClassCatalog {
    std::vector<ClassInfo> classes;
    // Orthonormal directions spanning the simulated pretraining label set.
    // Row-major n_dirs x feat_dim; visible class prototypes lie on these rows.
    Tensor pretrain_dirs;
    std::vector<double> bias_dir;  // unit vector shared by all exemplars

    std::size_t size() const { return classes.size(); }
};

struct ExemplarClip {
    std::size_t class_id = 0;
    double duration_s = 0.0;
    std::vector<double> feature;  // feat_dim
};

struct GtSegment {
    double start = 0.0;  // feature units, 0 <= start < end <= seq_len
    double end = 0.0;
    std::size_t class_id = 0;
};

struct UntrimmedSequence {
    Tensor feature;  // seq_len x feat_dim
    std::vector<GtSegment> gts;
    double frame_rate = 0.0;  // metadata
    double stride = 0.0;      // metadata
};

struct Corpus {
    CorpusConfig config;
    ClassCatalog catalog;
    std::vector<std::vector<ExemplarClip>> exemplars;  // [class][clip]
    std::vector<UntrimmedSequence> sequences;
};

ClassCatalog build_catalog(const CorpusConfig& config);
ExemplarClip synth_exemplar(const ClassCatalog& catalog, std::size_t class_id,
                            const CorpusConfig& config, Rng& rng);
UntrimmedSequence synth_untrimmed(const ClassCatalog& catalog,
                                  const std::vector<std::size_t>& classes_present,
                                  const CorpusConfig& config, Rng& rng);

// The whole corpus is a pure function of the config (seed included).
Corpus generate_corpus(const CorpusConfig& config);

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

}  // namespace fpad
