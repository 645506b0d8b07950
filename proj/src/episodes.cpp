#include "fpad/episodes.hpp"

#include <string>

#include "fpad/error.hpp"

namespace fpad {

namespace {

constexpr std::uint64_t kEpisodeStream = 7;
constexpr int kClassRetries = 100;

Episode sample_episode(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                       Phase phase, Rng& rng) {
    const std::vector<std::size_t>& pool = phase == Phase::train ? split.base : split.novel;
    const char* pool_name = phase == Phase::train ? "base" : "novel";
    if (spec.n_way < 1) throw ContractViolation("episode: n_way must be >= 1");
    if (spec.k_shot < 1) throw ContractViolation("episode: k_shot must be >= 1");
    if (pool.size() < spec.n_way)
        throw SamplingError("cannot sample a " + std::to_string(spec.n_way) + "-way episode from " +
                            std::to_string(pool.size()) + " " + pool_name + " classes");
    if (corpus.config.exemplars_per_class < spec.k_shot)
        throw SamplingError("k_shot " + std::to_string(spec.k_shot) + " exceeds the " +
                            std::to_string(corpus.config.exemplars_per_class) +
                            " exemplars stored per class");

    for (int attempt = 0; attempt < kClassRetries; ++attempt) {
        std::vector<std::size_t> classes;
        classes.reserve(spec.n_way);
        for (std::size_t i : rng.sample_without_replacement(pool.size(), spec.n_way))
            classes.push_back(pool[i]);
        rng.shuffle(classes);  // episode-local labels are a uniform permutation

        // Query must share at least one class with the episode; pick uniformly
        // among qualifying sequences, else resample the class set.
        std::vector<std::size_t> candidates;
        for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
            bool hit = false;
            for (const auto& gt : corpus.sequences[s].gts) {
                for (std::size_t c : classes)
                    if (gt.class_id == c) {
                        hit = true;
                        break;
                    }
                if (hit) break;
            }
            if (hit) candidates.push_back(s);
        }
        if (candidates.empty()) continue;

        Episode ep;
        ep.phase = phase;
        ep.classes = std::move(classes);
        ep.query_index = candidates[rng.bounded(candidates.size())];
        ep.support.resize(spec.n_way);
        for (std::size_t l = 0; l < spec.n_way; ++l) {
            const auto& clips = corpus.exemplars[ep.classes[l]];
            for (std::size_t i : rng.sample_without_replacement(clips.size(), spec.k_shot))
                ep.support[l].push_back(clips[i]);
        }
        return ep;
    }
    throw SamplingError("no query sequence contains any sampled " + std::string(pool_name) +
                        " class after " + std::to_string(kClassRetries) + " class resamples");
}

}  // namespace

Episode sample_train_episode(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                             Rng& rng) {
    return sample_episode(corpus, split, spec, Phase::train, rng);
}

Episode sample_test_episode(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                            Rng& rng) {
    return sample_episode(corpus, split, spec, Phase::test, rng);
}

Episode episode_at(const Corpus& corpus, const ClassSplit& split, const EpisodeSpec& spec,
                   Phase phase, std::uint64_t master_seed, std::uint64_t index) {
    Rng rng = Rng::stream(master_seed, kEpisodeStream, index);
    return sample_episode(corpus, split, spec, phase, rng);
}

std::vector<Episode> episode_stream(const Corpus& corpus, const ClassSplit& split,
                                    const EpisodeSpec& spec, Phase phase, std::uint64_t master_seed,
                                    std::size_t count) {
    if (count < 1) throw ContractViolation("episode_stream: count must be >= 1");
    std::vector<Episode> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(episode_at(corpus, split, spec, phase, master_seed, i));
    return out;
}

}  // namespace fpad
