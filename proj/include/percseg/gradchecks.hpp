#pragma once
// Named central-difference gradient checks covering every differentiable
// op and the miniature end-to-end model. All checks run in 64-bit.

#include <functional>
#include <string>
#include <vector>

namespace percseg {

struct GradCheckCase {
    std::string name;
    double threshold;
    std::function<double()> run;  // returns max relative error
};

std::vector<GradCheckCase> gradcheck_suite();

struct GradCheckReport {
    std::string name;
    double max_error = 0.0;
    double threshold = 0.0;
    bool passed = false;
};

// Runs the named case ("all" for the full suite); throws
// std::invalid_argument for an unknown name.
std::vector<GradCheckReport> run_gradchecks(const std::string& scope);

}  // namespace percseg
