#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hdca {

struct GradCheckCase {
  std::string name;  // starts with the op under test
  double max_relative_error = 0.0;
  double seconds = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double threshold = 1e-4;

  bool passed() const;
  std::vector<std::string> failures() const;
};

/// Float64 finite-difference check of every differentiable kernel plus a full
/// two-level region stack ({2,3} regions, C=8, C'=4, C_n=4, 6x6 maps).
GradCheckReport run_grad_check_suite(std::uint64_t seed = 0, double threshold = 1e-4);

}  // namespace hdca
