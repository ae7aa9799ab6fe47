#pragma once

// Online inference: frames arrive one at a time, the session threads the
// episodic memory between them and keeps the per-step history.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cemformer/encoder.hpp"

namespace cem::runtime {

struct StepOutput {
  std::size_t t = 0;  // 1-based
  std::vector<double> probs;
  std::size_t label = 0;
};

class InferenceSession {
 public:
  /// The model must outlive the session; it is only read.
  explicit InferenceSession(const encoder::Model& model, bool record_attention = false);

  /// Throws ContractError on a geometry mismatch and StateError once
  /// poisoned. A NumericError poisons the session before propagating.
  const StepOutput& feed(const embed::MultiViewFrame& frame);
  /// Back to E_0^mem at t = 0; clears history and poison.
  void reset();

  std::size_t t() const { return memory_.t; }
  bool poisoned() const { return poisoned_; }
  bool recording() const { return record_attention_; }
  const std::vector<StepOutput>& history() const { return history_; }
  const encoder::MemoryState& memory() const { return memory_; }
  const encoder::Model& model() const { return *model_; }
  /// One trace per fed step when recording.
  const std::vector<encoder::AttentionTrace>& attention() const { return attention_; }

 private:
  const encoder::Model* model_;
  bool record_attention_;
  bool poisoned_ = false;
  encoder::MemoryState memory_;
  std::vector<StepOutput> history_;
  std::vector<encoder::AttentionTrace> attention_;
};

/// Checks view count and per-view C, H, W against the model.
void check_geometry(const encoder::ModelConfig& config, const embed::MultiViewFrame& frame);

struct ExportedMap {
  std::size_t t = 0;
  std::size_t layer = 0;
  std::size_t view = 0;
  std::size_t rows = 0, cols = 0;
  double grid_sum = 0.0;
  double memory_mass = 0.0;
  std::filesystem::path pgm, csv;
};

/// Per (step, layer, view): attn_t<t>_l<layer>_v<view>.pgm (binary P5,
/// max-normalized) and .csv (raw weights), plus attention_index.csv.
/// Throws StateError when the session did not record attention.
std::vector<ExportedMap> export_attention(const InferenceSession& session, const std::filesystem::path& dir);

void write_pgm(const std::filesystem::path& path, const std::vector<double>& grid, std::size_t rows,
               std::size_t cols);

struct FpsReport {
  std::size_t frames = 0;
  double seconds = 0.0;
  double fps = 0.0;
  double mean_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
};

/// Feeds n frames cycling through `episode`, resetting the session at each
/// wrap, and times every feed.
FpsReport fps_report(InferenceSession& session, const std::vector<embed::MultiViewFrame>& episode, std::size_t n);

/// "t<TAB>p0..pC-1 with 6 decimals<TAB>class name"
std::string format_step(const StepOutput& step, const std::vector<std::string>& class_names);

}  // namespace cem::runtime
