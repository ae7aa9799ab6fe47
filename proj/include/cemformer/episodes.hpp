#pragma once

// Synthetic two-view maneuver episodes, their on-disk format, fold splits and
// evaluation metrics.
//
// View 0 ("cabin") holds a Gaussian blob drifting horizontally at a
// class-specific speed. View 1 ("road") holds vertical stripes whose phase
// advances at the same speed, plus the context bits drawn as corner markers.
// A single frame says little about the class; the drift across frames does.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cemformer/embed.hpp"
#include "cemformer/rules.hpp"

namespace cem::episodes {

struct Episode {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  std::size_t label = 0;
  rules::ContextVector context;
  std::vector<embed::MultiViewFrame> frames;

  bool operator==(const Episode&) const = default;
};

struct GeneratorConfig {
  std::size_t frames = 5;
  std::size_t height = 32;
  std::size_t width = 32;
  /// Horizontal drift in px/step per class, in default_maneuvers() order.
  std::array<double, 5> drift{0.0, -0.75, -1.5, 0.75, 1.5};
  double blob_sigma = 3.0;
  double blob_background = 0.2;
  double blob_amplitude = 0.6;
  /// Per-episode uniform offset of the blob track, +/- this many px.
  double blob_jitter = 4.0;
  double stripe_period = 8.0;
  double stripe_contrast = 0.6;
  std::size_t marker_size = 4;
  double noise_sigma = 0.25;
  rules::ScenarioSet rules = rules::default_ruleset();

  void validate() const;
};

/// Deterministic in (seed, config). Label uniform over the classes, context
/// uniform over contexts that do not contradict the label (by rejection).
Episode generate_episode(std::uint64_t seed, const GeneratorConfig& config, std::uint64_t id = 0);

/// Episodes with ids 0..n-1 and seeds derived from `seed`.
std::vector<Episode> generate_dataset(std::size_t n, std::uint64_t seed, const GeneratorConfig& config);

struct ManifestEntry {
  std::uint64_t id = 0;
  std::size_t label = 0;
  rules::ContextVector context;
  std::uint64_t seed = 0;
  std::vector<std::string> files;  // one raster per view, relative to the dataset dir
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  int version = 1;
  std::vector<std::string> class_names;
  std::size_t context_dim = rules::kDefaultContextDim;
  std::vector<embed::ViewGeometry> views;
  std::size_t frames = 0;
  std::string rules_path;
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Episode> episodes;
};

/// Writes ep_<id>_view<m>.bin rasters then manifest.txt.
DatasetManifest write_dataset(const std::vector<Episode>& episodes, const std::filesystem::path& dir,
                              const std::vector<std::string>& class_names, const std::string& rules_path = "");
/// Throws FormatError naming the file on bad magic, header or truncation.
Dataset read_dataset(const std::filesystem::path& dir);

/// One raster: magic "CEMRAST1", u32 frames, channels, height, width, dtype
/// (1 = float32), then little-endian payload frame-major, channel-major.
void write_raster(const std::filesystem::path& path, const std::vector<embed::Image>& frames);
std::vector<embed::Image> read_raster(const std::filesystem::path& path);

struct FoldSplit {
  std::size_t folds = 0;
  std::vector<std::vector<std::uint64_t>> ids;
};

/// Per-class seeded shuffle, then round-robin dealing into F folds with the
/// deal position carried across classes.
FoldSplit kfold_split(const DatasetManifest& manifest, std::size_t folds, std::uint64_t seed);

double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels);
double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                std::size_t n_classes);

struct ClassScores {
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
};
ClassScores class_scores(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                         std::size_t n_classes);

/// Fraction of samples whose prediction is contradicted by their context.
double contradiction_rate(const std::vector<std::size_t>& preds, const std::vector<rules::ContextVector>& contexts,
                          const rules::ScenarioSet& scenarios);

/// T - t* for the earliest t* after which every prediction is correct;
/// nullopt when the final prediction is wrong.
std::optional<std::size_t> anticipation_time(const std::vector<std::size_t>& per_step, std::size_t label);

struct FoldMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double contradiction_rate = 0.0;
  double anticipation = 0.0;  // mean over episodes with a correct final step
  std::size_t anticipated = 0;
  std::vector<double> precision;
  std::vector<double> recall;
};

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
};
Summary summarize(const std::vector<double>& values);

struct MetricsReport {
  std::vector<FoldMetrics> folds;
  Summary accuracy, macro_f1, contradiction_rate, anticipation;

  void finalize();
  /// Per-fold rows followed by an "AVG +- SD" line.
  std::string to_text() const;
};

/// Metrics for one evaluated set from per-step predictions.
FoldMetrics evaluate_predictions(const std::vector<std::vector<std::size_t>>& per_step,
                                 const std::vector<std::size_t>& labels,
                                 const std::vector<rules::ContextVector>& contexts,
                                 const rules::ScenarioSet& scenarios, std::size_t n_classes);

}  // namespace cem::episodes
