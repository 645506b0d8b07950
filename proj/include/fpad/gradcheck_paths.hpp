#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpad/diffmath.hpp"

// Finite-difference validation of the five loss paths on randomized micro
// instances (tiny corpus, tiny network, parameters uniform in [-1, 1]).
// Instances whose state sits within 1e-3 of a non-smooth point (ReLU
// pre-activations, smooth-L1 elbows, degenerate feature norms) are redrawn,
// so central differences see a locally smooth function.

namespace fpad {

inline constexpr double kGradCheckStep = 1e-5;

struct PathCheckResult {
    std::string path;
    std::size_t instances = 0;
    double max_rel_err = 0.0;
    bool all_finite = true;
    bool passed = false;
    std::vector<GradCheckRow> failures;  // offending parameters, worst first
};

// "stage1-score", "stage2-offsets", "fewshot-ce", "adaptation", "total"
const std::vector<std::string>& gradcheck_path_names();

PathCheckResult check_loss_path(const std::string& name, std::uint64_t seed,
                                std::size_t instances, double step, double tolerance);

std::vector<PathCheckResult> run_gradcheck(std::uint64_t seed, std::size_t instances, double step,
                                           double tolerance);

}  // namespace fpad
