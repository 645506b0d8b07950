#pragma once

#include <cstdint>
#include <vector>

#include "fpad/corpus.hpp"
#include "fpad/splits.hpp"

// N-way k-shot episode sampling. An episode carries N classes (episode-local
// labels 0..N-1 are a uniform random permutation of the chosen classes), k
// support exemplars per class, and one untrimmed query sequence guaranteed to
// contain at least one episode class among its ground-truth segments.

namespace fpad {

enum class Phase { train, test };

struct EpisodeSpec {
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
};

struct Episode {
    Phase phase = Phase::train;
    std::vector<std::size_t> classes;               // classes[label] = catalog class id
    std::vector<std::vector<ExemplarClip>> support;  // [label][shot], k per label
    std::size_t query_index = 0;                     // into corpus.sequences

    // -1 when the class is not part of this episode.
    int local_label(std::size_t class_id) const {
        for (std::size_t l = 0; l < classes.size(); ++l)
            if (classes[l] == class_id) return static_cast<int>(l);
        return -1;
    }
};

Episode sample_train_episode(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                             Rng& rng);
Episode sample_test_episode(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                            Rng& rng);

// Episode i is a pure function of (corpus, split, spec, phase, master_seed, i):
// each index gets its own derived rng stream, so episodes can be generated
// one-at-a-time, in any order, or in parallel, with identical results.
Episode episode_at(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                   Phase phase, std::uint64_t master_seed, std::uint64_t index);
std::vector<Episode> episode_stream(const Corpus& corpus, const ClassSplit& split,
                                    const EpisodeSpec& spec, Phase phase, std::uint64_t master_seed,
                                    std::size_t count);

}  // namespace fpad
