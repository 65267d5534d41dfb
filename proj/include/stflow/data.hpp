#pragma once

// Flow-grid datasets: on-disk format, min-max normalization, closeness
// samples, external-factor vectors and a synthetic generator.
//
// A dataset directory holds
//   meta.json     {"grid": [N, M], "period_minutes": P, "start_timestamp": ISO-8601, "T": T}
//   flows.f32le   T*2*N*M little-endian float32, row-major (t, channel, row, col);
//                 channel 0 is inflow, channel 1 outflow
//   external.csv  header "timestamp,temperature,wind_speed,condition,holiday",
//                 one row per frame; condition is sun|rain|snow, holiday 0|1

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stflow/errors.hpp"
#include "stflow/tensor.hpp"

namespace stflow {

using Timestamp = std::chrono::sys_seconds;

/// Parses "YYYY-MM-DDTHH:MM[:SS]" (UTC, optional trailing 'Z').
Timestamp parse_timestamp(const std::string& text);
/// "YYYY-MM-DDTHH:MM:SS".
std::string format_timestamp(Timestamp t);
/// Monday = 0 ... Sunday = 6.
unsigned day_of_week(Timestamp t);
unsigned minute_of_day(Timestamp t);

struct WeatherRow {
  Timestamp time;
  double temperature = 0;
  double wind_speed = 0;
  std::string condition = "sun";
  bool holiday = false;
};

struct FlowDataset {
  std::size_t height = 0, width = 0;
  std::size_t period_minutes = 60;
  Timestamp start;
  Tensor<float> flows;              ///< [T, 2, N, M]
  std::vector<WeatherRow> weather;  ///< one row per frame

  std::size_t frames() const { return flows.empty() ? 0 : flows.dim(0); }
  Timestamp time(std::size_t t) const;
  /// Frame index of an exact frame timestamp.
  std::optional<std::size_t> index_of(Timestamp t) const;
  /// Throws IoError on broken invariants (shapes, NaN, negative flows, timestamps).
  void validate() const;
};

FlowDataset load_dataset(const std::string& dir);
/// Creates the directory if needed. Output is a pure function of the dataset.
void save_dataset(const FlowDataset& ds, const std::string& dir);

/// y = 2(x - min)/(max - min) - 1, no clipping.
struct Normalizer {
  double min = 0, max = 1;

  static Normalizer fit(std::span<const float> values);
  double normalize(double x) const { return 2.0 * (x - min) / (max - min) - 1.0; }
  double denormalize(double y) const { return (y + 1.0) * 0.5 * (max - min) + min; }
  template <typename T>
  Tensor<T> normalize(const Tensor<T>& x) const;
  template <typename T>
  Tensor<T> denormalize(const Tensor<T>& y) const;
};

inline constexpr std::size_t kExternalWidth = 14;
inline constexpr std::array<const char*, 3> kConditions{"sun", "rain", "snow"};

/// Min-max ranges of the continuous weather fields, fitted on the training rows.
struct WeatherScaler {
  double temperature_min = 0, temperature_max = 1;
  double wind_min = 0, wind_max = 1;

  static WeatherScaler fit(std::span<const WeatherRow> rows);
};

/// Layout: day-of-week one-hot (7), weekend, holiday, temperature, wind speed,
/// condition one-hot (3). Continuous fields are scaled to [0, 1] over the
/// training range; a degenerate range maps to 0.
std::array<float, kExternalWidth> external_vector(Timestamp t, const WeatherRow& row, const WeatherScaler& scaler);

/// Normalized samples in model layout.
struct SampleSet {
  Tensor<float> closeness;  ///< [S, p, N, M, 2]
  Tensor<float> external;   ///< [S, 14]
  Tensor<float> target;     ///< [S, N, M, 2]
  std::vector<std::size_t> target_index;

  std::size_t size() const { return target_index.size(); }
  /// Rows `idx` gathered into a batch.
  SampleSet subset(std::span<const std::size_t> idx) const;
};

struct PreparedData {
  Normalizer normalizer;
  WeatherScaler weather;
  std::size_t boundary = 0;  ///< first test frame
  SampleSet train, test;
};

/// First frame index at or after `test_start`.
std::size_t boundary_at(const FlowDataset& ds, Timestamp test_start);
/// First frame of the last `test_days` days.
std::size_t boundary_last_days(const FlowDataset& ds, double test_days);

/// Targets t' in [p, boundary) train, [max(p, boundary), T) test. Normalizer and
/// weather ranges are fitted on frames before the boundary only.
PreparedData prepare(const FlowDataset& ds, std::size_t closeness, std::size_t boundary);

/// Samples for target frames [first, last), first >= closeness.
SampleSet make_samples(const FlowDataset& ds, std::size_t closeness, std::size_t first, std::size_t last,
                       const Normalizer& nrm, const WeatherScaler& ws);

struct SynthSpec {
  std::size_t height = 16, width = 8;
  std::size_t days = 30;
  std::size_t period_minutes = 60;
  std::uint64_t seed = 0;
  /// Relative noise level: flows are multiplied by (1 + noise * z), where z is
  /// a unit-variance AR(1) process per region and channel.
  double noise = 0.0;
  double noise_corr = 0.9;
  std::size_t hotspots = 4;
  double base_level = 2.0;
  double hotspot_level = 40.0;
  std::string start = "2024-01-01T00:00:00";
};

/// Noise-free flows depend only on (day of week, time of day), so a weekly
/// historical average reproduces them exactly. Weather is random and does
/// not influence the flows.
FlowDataset synth_generate(const SynthSpec& spec);

}  // namespace stflow
