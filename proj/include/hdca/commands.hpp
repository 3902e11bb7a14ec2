#pragma once

// Command-line front end. Everything the `hdca` binary does goes through
// run_cli so that tests can drive it in-process.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hdca/label_map.hpp"
#include "hdca/model.hpp"

namespace hdca {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,   // runtime failure (I/O, format, checks not met)
  kExitUsage = 2,     // invalid flags or configuration
  kExitDiverged = 3,  // training produced a non-finite loss
};

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

using Rgb = std::array<std::uint8_t, 3>;
/// Fixed 16-entry palette; index i uses entry i % 16. The ignore label is black.
const std::array<Rgb, 16>& palette();
std::vector<std::uint8_t> colorize(const LabelMap& labels);

struct HierarchyMaps {
  std::vector<LabelMap> levels;  // region index per pixel, input resolution
  std::vector<int> regions;      // s_n per level
  LabelMap prediction;
};

/// Region assignments of every level plus the class prediction for one [3,H,W]
/// image of any size. Region maps are upsampled by nearest neighbour.
HierarchyMaps hierarchy_maps(SegModel& model, const Tensor& image);

}  // namespace hdca
