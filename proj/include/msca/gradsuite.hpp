#pragma once

#include <string>
#include <vector>

#include "msca/gradcheck.hpp"

namespace msca {

struct GradSuiteEntry {
    std::string name;
    GradCheckReport report;
};

// Central-difference checks in 64-bit of every differentiable primitive (inputs
// up to 8x8), the attention module and the full generator at 8x8.
// include_broken appends a primitive with a deliberately wrong backward pass so
// callers can confirm failures are reported.
std::vector<GradSuiteEntry> run_gradient_suite(uint64_t seed, bool include_broken = false);

}  // namespace msca
