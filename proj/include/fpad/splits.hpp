#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpad/corpus.hpp"

// Base/novel class partitions. "random" ignores the pretraining flag;
// "controlled" draws the novel set only from classes outside the simulated
// pretraining label set, so novel-class leakage is zero by construction.

namespace fpad {

enum class SplitMode { random, controlled };

const char* split_mode_name(SplitMode m);
SplitMode split_mode_from_name(const std::string& s);

struct ClassSplit {
    std::vector<std::size_t> base;   // sorted ascending
    std::vector<std::size_t> novel;  // sorted ascending
    SplitMode mode = SplitMode::random;
    std::uint64_t seed = 0;
};

ClassSplit random_split(const ClassCatalog& catalog, std::size_t n_novel, std::uint64_t seed);
ClassSplit controlled_split(const ClassCatalog& catalog, std::size_t n_novel, std::uint64_t seed);
ClassSplit make_split(const ClassCatalog& catalog, SplitMode mode, std::size_t n_novel,
                      std::uint64_t seed);

// Throws SplitError unless base/novel partition the catalog and the
// controlled-mode disjointness holds.
void validate_split(const ClassSplit& split, const ClassCatalog& catalog);

struct RhoStats {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};

struct SplitReport {
    std::size_t n_base = 0;
    std::size_t n_novel = 0;
    std::size_t novel_pretrain_overlap = 0;  // novel classes inside the pretraining set
    RhoStats base_rho;
    RhoStats novel_rho;
};

SplitReport split_report(const ClassSplit& split, const ClassCatalog& catalog);
nlohmann::ordered_json split_report_to_json(const SplitReport& report);

nlohmann::ordered_json split_to_json(const ClassSplit& split);
ClassSplit split_from_json(const nlohmann::json& j, const std::string& path);

void save_split(const ClassSplit& split, const std::string& path);
ClassSplit load_split(const std::string& path);

}  // namespace fpad
