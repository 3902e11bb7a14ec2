#pragma once

// Hierarchical dynamic context aggregation.
//
// Each level n infers a soft partition P_n of the feature map into s_n regions,
// pools the backbone features X inside every region (V_n = P_n^T X), turns the
// pooled sums into region means, reduces their channels, and paints the reduced
// region vectors back onto the pixels (X_n = P_n V'_n). Level n sees the output
// of level n-1 when inferring its own regions, and the outputs of all levels are
// concatenated into the pyramid that feeds the classifier.

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "hdca/label_map.hpp"
#include "hdca/layers.hpp"

namespace hdca {

struct HdcaConfig {
  std::vector<int> region_schedule{2, 4, 8, 16};
  int context_channels = 16;   // C_n
  int hidden_channels = 0;     // region-inference width; 0 means C'
  double region_epsilon = 1e-6;
  /// Prepend X' to the pyramid fed to the classifier.
  bool include_reduced_features = false;

  /// Rejects schedules that are not strictly increasing or contain counts below 2.
  /// An empty schedule is allowed here; it selects the no-hierarchy baseline model.
  void validate() const;
};

/// Soft assignment of every pixel to s_n regions; [B,s_n,h,w] (or [s_n,h,w]).
struct RegionProbabilityMap {
  Var values;
  int level = 0;

  std::size_t regions() const;
};

struct ContextVectors {
  Var raw;          // V_n       [B,s_n,C]
  Var normalized;   // region means
  Var reduced;      // V'_n      [B,s_n,C_n]
  Var region_mass;  // column sums of P_n, [B,s_n]
};

struct HdcaLevelParams {
  int level = 1;
  int regions = 2;
  ConvBnRelu infer;              // 3x3, (C' [+ C_{n-1}]) -> hidden
  Parameter* region_weight = nullptr;  // [s_n, hidden, 1, 1]
  Parameter* region_bias = nullptr;    // [s_n]
  Parameter* reduce_weight = nullptr;  // [C_n, C]
  Parameter* reduce_bias = nullptr;    // [C_n]

  static HdcaLevelParams create(ParameterSet& params, int level, int regions,
                                std::size_t infer_in, std::size_t hidden, std::size_t features,
                                std::size_t context, DType dtype, std::mt19937_64& rng);
  std::size_t infer_in_channels() const { return infer.in_channels(); }
};

RegionProbabilityMap infer_regions(Graph& g, Var x_reduced, std::optional<Var> prev_context,
                                   const HdcaLevelParams& params, ops::NormMode mode);

/// V_n = P_n^T X: [B,s,h,w] x [B,C,h,w] -> [B,s,C] (rank-3 inputs give [s,C]).
Var aggregate_contexts(Var p, Var x);

struct NormalizedContexts {
  Var normalized;
  Var region_mass;
};
/// Divides every region row of v by the total probability mass of that region,
/// clamped below at `epsilon`.
NormalizedContexts normalize_contexts(Var v, Var p, double epsilon);

Var reduce_contexts(Graph& g, Var normalized, const HdcaLevelParams& params);

/// X_n = P_n V'_n, reshaped to [B,C_n,h,w].
Var reproject(Var p, Var contexts);

struct LevelOutput {
  Var output;  // X_n
  RegionProbabilityMap regions;
  ContextVectors contexts;
};

/// Everything after region inference: aggregate, normalize, reduce, reproject.
LevelOutput contextualize(Graph& g, Var x, RegionProbabilityMap regions, const HdcaLevelParams& params,
                          double epsilon);

LevelOutput forward_level(Graph& g, Var x, Var x_reduced, std::optional<Var> prev,
                          const HdcaLevelParams& params, ops::NormMode mode, double epsilon);

struct StackOutput {
  Var pyramid;  // [X_1, ..., X_N] along channels
  std::vector<LevelOutput> levels;
};

class HdcaStack {
 public:
  /// `features` is C, `reduced` is C'. Requires a nonempty schedule.
  HdcaStack(ParameterSet& params, const HdcaConfig& config, std::size_t features,
            std::size_t reduced, DType dtype, std::mt19937_64& rng);

  StackOutput forward(Graph& g, Var x, Var x_reduced, ops::NormMode mode) const;

  const HdcaConfig& config() const { return config_; }
  const std::vector<HdcaLevelParams>& levels() const { return levels_; }
  std::size_t pyramid_channels() const;

 private:
  HdcaConfig config_;
  std::vector<HdcaLevelParams> levels_;
};

/// Per-level argmax over regions for one batch item; ties go to the lowest index.
std::vector<LabelMap> extract_region_maps(std::span<const Tensor> region_maps,
                                          std::size_t batch_index = 0);

/// Largest violations of the per-level invariants: per-pixel region sums vs 1,
/// probabilities outside [0,1], and Σ_i V_n[i,c] vs the spatial sum of X[c]
/// (absolute, and relative to max(1, Σ|X[c]|)).
struct LevelInvariantReport {
  double max_row_sum_error = 0.0;
  double max_range_violation = 0.0;
  double max_conservation_error = 0.0;
  double max_conservation_relative = 0.0;
};
LevelInvariantReport check_level_invariants(const LevelOutput& level, const Tensor& x);

}  // namespace hdca
