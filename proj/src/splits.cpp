#include "fpad/splits.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>

#include "fpad/error.hpp"
#include "fpad/jsonio.hpp"
#include "fpad/rng.hpp"

namespace fpad {

namespace {

constexpr std::uint64_t kSplitStream = 1;

ClassSplit assemble(const ClassCatalog& catalog, const std::vector<std::size_t>& novel,
                    SplitMode mode, std::uint64_t seed) {
    ClassSplit split;
    split.mode = mode;
    split.seed = seed;
    split.novel = novel;
    std::sort(split.novel.begin(), split.novel.end());
    std::set<std::size_t> novel_set(split.novel.begin(), split.novel.end());
    for (std::size_t c = 0; c < catalog.size(); ++c)
        if (!novel_set.count(c)) split.base.push_back(c);
    return split;
}

RhoStats rho_stats(const std::vector<std::size_t>& ids, const ClassCatalog& catalog) {
    RhoStats s;
    if (ids.empty()) return s;
    s.min = std::numeric_limits<double>::infinity();
    s.max = -std::numeric_limits<double>::infinity();
    for (std::size_t c : ids) {
        const double r = catalog.classes[c].rho;
        s.mean += r;
        s.min = std::min(s.min, r);
        s.max = std::max(s.max, r);
    }
    s.mean /= static_cast<double>(ids.size());
    return s;
}

}  // namespace

const char* split_mode_name(SplitMode m) {
    return m == SplitMode::random ? "random" : "controlled";
}

SplitMode split_mode_from_name(const std::string& s) {
    if (s == "random") return SplitMode::random;
    if (s == "controlled") return SplitMode::controlled;
    throw ConfigError("unknown split mode \"" + s + "\" (expected random|controlled)");
}

ClassSplit random_split(const ClassCatalog& catalog, std::size_t n_novel, std::uint64_t seed) {
    if (n_novel == 0 || n_novel >= catalog.size())
        throw SplitError("random split: n_novel must be in [1, " +
                         std::to_string(catalog.size() - 1) + "], got " + std::to_string(n_novel));
    Rng rng = Rng::stream(seed, kSplitStream, 0);
    return assemble(catalog, rng.sample_without_replacement(catalog.size(), n_novel),
                    SplitMode::random, seed);
}

ClassSplit controlled_split(const ClassCatalog& catalog, std::size_t n_novel, std::uint64_t seed) {
    if (n_novel == 0 || n_novel >= catalog.size())
        throw SplitError("controlled split: n_novel must be in [1, " +
                         std::to_string(catalog.size() - 1) + "], got " + std::to_string(n_novel));
    std::vector<std::size_t> hidden;
    for (std::size_t c = 0; c < catalog.size(); ++c)
        if (!catalog.classes[c].pretrain_visible) hidden.push_back(c);
    if (hidden.size() < n_novel)
        throw SplitError("controlled split: need " + std::to_string(n_novel) +
                         " classes outside the pretraining set but only " +
                         std::to_string(hidden.size()) + " exist (short by " +
                         std::to_string(n_novel - hidden.size()) + ")");
    Rng rng = Rng::stream(seed, kSplitStream, 0);
    const std::vector<std::size_t> pick = rng.sample_without_replacement(hidden.size(), n_novel);
    std::vector<std::size_t> novel;
    novel.reserve(n_novel);
    for (std::size_t i : pick) novel.push_back(hidden[i]);
    return assemble(catalog, novel, SplitMode::controlled, seed);
}

ClassSplit make_split(const ClassCatalog& catalog, SplitMode mode, std::size_t n_novel,
                      std::uint64_t seed) {
    return mode == SplitMode::random ? random_split(catalog, n_novel, seed)
                                     : controlled_split(catalog, n_novel, seed);
}

void validate_split(const ClassSplit& split, const ClassCatalog& catalog) {
    std::vector<int> seen(catalog.size(), 0);
    auto mark = [&](const std::vector<std::size_t>& ids, const char* which) {
        for (std::size_t c : ids) {
            if (c >= catalog.size())
                throw SplitError(std::string(which) + " class id " + std::to_string(c) +
                                 " out of range for catalog of " + std::to_string(catalog.size()));
            if (seen[c]++)
                throw SplitError("class id " + std::to_string(c) +
                                 " appears twice across base/novel");
        }
    };
    mark(split.base, "base");
    mark(split.novel, "novel");
    for (std::size_t c = 0; c < catalog.size(); ++c)
        if (!seen[c])
            throw SplitError("class id " + std::to_string(c) + " missing from base and novel");
    if (split.novel.empty() || split.base.empty())
        throw SplitError("split must leave both base and novel non-empty");
    if (split.mode == SplitMode::controlled)
        for (std::size_t c : split.novel)
            if (catalog.classes[c].pretrain_visible)
                throw SplitError("controlled split contains pretraining-visible novel class " +
                                 std::to_string(c));
}

SplitReport split_report(const ClassSplit& split, const ClassCatalog& catalog) {
    SplitReport r;
    r.n_base = split.base.size();
    r.n_novel = split.novel.size();
    for (std::size_t c : split.novel)
        if (catalog.classes[c].pretrain_visible) ++r.novel_pretrain_overlap;
    r.base_rho = rho_stats(split.base, catalog);
    r.novel_rho = rho_stats(split.novel, catalog);
    return r;
}

nlohmann::ordered_json split_report_to_json(const SplitReport& r) {
    auto stats = [](const RhoStats& s) {
        return nlohmann::ordered_json{{"mean", s.mean}, {"min", s.min}, {"max", s.max}};
    };
    return nlohmann::ordered_json{{"n_base", r.n_base},
                                  {"n_novel", r.n_novel},
                                  {"novel_pretrain_overlap", r.novel_pretrain_overlap},
                                  {"base_rho", stats(r.base_rho)},
                                  {"novel_rho", stats(r.novel_rho)}};
}

nlohmann::ordered_json split_to_json(const ClassSplit& split) {
    return nlohmann::ordered_json{{"mode", split_mode_name(split.mode)},
                                  {"seed", split.seed},
                                  {"base", split.base},
                                  {"novel", split.novel}};
}

ClassSplit split_from_json(const nlohmann::json& j, const std::string& path) {
    jsonio::ObjectReader r(j, path);
    ClassSplit split;
    split.mode = split_mode_from_name(r.require<std::string>("mode"));
    split.seed = r.require<std::uint64_t>("seed");
    split.base = r.require<std::vector<std::size_t>>("base");
    split.novel = r.require<std::vector<std::size_t>>("novel");
    r.finish();
    std::sort(split.base.begin(), split.base.end());
    std::sort(split.novel.begin(), split.novel.end());
    return split;
}

void save_split(const ClassSplit& split, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << split_to_json(split).dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path);
}

ClassSplit load_split(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("split file " + path + ": " + e.what());
    }
    return split_from_json(j, "split");
}

}  // namespace fpad
