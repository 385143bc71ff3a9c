#pragma once

// CSV ingestion, min-max normalization, windowing, chronological splits and
// synthetic fixtures.

#include <Eigen/Core>

#include <cstdint>
#include <istream>
#include <string>
#include <vector>

#include "tsrm/config.hpp"

namespace tsrm {

/// [time, feature] grids, row-major so a row is one time step.
using Grid = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskGrid =
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Input token marking missing values and forecast horizons.
inline constexpr float kMissingToken = -1.0f;

struct Series {
  std::vector<std::string> columns;
  Grid values;        // missing entries hold 0
  MaskGrid observed;  // false = missing
  std::vector<int> labels;  // per row; empty without a label column

  Index length() const { return values.rows(); }
  Index features() const { return values.cols(); }
};

struct WindowSample {
  Grid values;
  MaskGrid observed;
  int label = -1;
};

struct WindowedDataset {
  Index window = 0;
  Index features = 0;
  std::vector<WindowSample> samples;
  std::size_t dropped = 0;  // windows over the missing-value limit

  std::size_t size() const { return samples.size(); }
};

struct NormStats {
  std::vector<std::string> columns;
  std::vector<double> min, max;
};

Json to_json(const NormStats& s);
NormStats norm_stats_from_json(const Json& j);

/// Parse CSV text. `source` names the input in error messages.
Series parse_csv(std::istream& in, const DataConfig& spec,
                 const std::string& source = "<csv>");
Series load_csv(const std::string& path, const DataConfig& spec);
void write_csv(const std::string& path, const Series& series);

/// Per-feature min/max over observed values. A feature without spread is a
/// data error naming the column.
NormStats fit_norm_stats(const Series& train);

/// (v - min) / (max - min) in place, clamped to [0,1]; returns the number of
/// clamped values.
std::size_t normalize(Series& series, const NormStats& stats);
float denormalize(float v, const NormStats& stats, Index feature);

struct Splits {
  Series train, val, test;
};

/// Chronological, disjoint split by row fractions; the test part takes the
/// remainder.
Splits chronological_split(const Series& series, double train_fraction,
                           double val_fraction);

/// Number of windows a series of `length` yields.
inline Index window_count(Index length, Index window, Index stride) {
  return length < window ? 0 : (length - window) / stride + 1;
}

/// Overlapping windows starting every `stride` rows. Windows whose missing
/// share exceeds `max_missing` are dropped and counted. A window's label is
/// its most frequent row label (ties toward the smaller label).
WindowedDataset make_windows(const Series& series, Index window, Index stride,
                             double max_missing = 0.8);

enum class SynthKind { Sine, Noise };
SynthKind parse_synth_kind(const std::string& s);

/// sine: 0.5 + 0.4 sin(2 pi t / P + phi), random phase and P in [12, 32]
/// per sample and feature; noise: i.i.d. uniform [0,1].
WindowedDataset synth_dataset(SynthKind kind, Index window, Index features,
                              std::size_t n, std::uint64_t seed);

/// One continuous synthetic series of `length` rows for CSV fixtures.
Series synth_series(SynthKind kind, Index length, Index features,
                    std::uint64_t seed);

}  // namespace tsrm
