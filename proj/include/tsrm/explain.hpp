#pragma once

// Back-mapping of attention vectors onto input time steps, and export.

#include <string>
#include <vector>

#include "tsrm/data_io.hpp"
#include "tsrm/model.hpp"

namespace tsrm {

enum class BackmapMode {
  /// Each position spreads weight/k over its k taps; covering windows add.
  /// Mass-conserving.
  Sum,
  /// Each time step takes the mean weight of the windows covering it.
  Mean,
};

BackmapMode parse_backmap_mode(const std::string& s);

struct BackmapOptions {
  BackmapMode mode = BackmapMode::Sum;
  /// Spread pooled-segment weight over the pooled conv positions' fields.
  bool include_pooled = false;
};

/// map: one attention vector of length D laid out as [conv_1, pool_1, ...].
std::vector<double> backmap(const std::vector<double>& map,
                            const std::vector<ResolvedBranch>& branches,
                            Index T, const BackmapOptions& options = {});

struct FeatureAttention {
  std::vector<double> input, output;            // [T]
  std::vector<std::vector<double>> per_layer;   // N x [T]
  std::vector<double> sum;                      // [T]
};

/// Eval-mode forward of one window `input` [T, F] (missing = kMissingToken)
/// and back-mapped weights per feature.
std::vector<FeatureAttention> explain_sample(const TsrmModel<float>& model,
                                             const Grid& input,
                                             const BackmapOptions& options = {});

/// Writes attention_feature_<f>.csv (t, input_value, output_value,
/// weight_sum, weight_layer_1..N) per feature, plus an SVG plot each when
/// `svg` is set. Returns the written paths.
std::vector<std::string> export_attention(const TsrmModel<float>& model,
                                          const Grid& input,
                                          const std::string& out_dir, bool svg,
                                          const BackmapOptions& options = {});

}  // namespace tsrm
