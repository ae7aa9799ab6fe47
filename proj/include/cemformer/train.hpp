#pragma once

// BPTT training: AdamW with decoupled weight decay, cosine learning rate,
// TSN-style frame sampling, per-episode augmentation, k-fold CV.
//
// Episodes of a batch are unrolled in parallel, each on its own tape with
// its own copy of the weights; the per-episode gradients are merged in
// episode order so results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "cemformer/encoder.hpp"
#include "cemformer/episodes.hpp"
#include "cemformer/kernel/gradcheck.hpp"
#include "cemformer/loss.hpp"
#include "cemformer/rules.hpp"

namespace cem::train {

using kernel::Tape;
using kernel::Tensor;

struct TrainConfig {
  double lr = 1e-3;
  double lr_floor = 0.0;
  double weight_decay = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 10;
  /// Frames sampled per episode (T).
  std::size_t frames = 5;
  /// Detach carried memory every W steps; 0 = full BPTT.
  std::size_t truncation = 0;
  std::uint64_t seed = 1;
  /// fnmatch patterns over parameter names; matches are not updated.
  std::vector<std::string> freeze;
  bool use_cc = true;
  loss::StepWeighting weighting = loss::StepWeighting::kExponential;
  std::size_t crop_pad = 2;
  bool flip = false;
  double clip_norm = 1.0;
  /// Encoder shape; the view geometry is taken from the dataset.
  encoder::ModelConfig model;

  void validate() const;
};

/// Reads a JSON object; missing keys keep their defaults.
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& config);

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

/// One AdamW step (beta1 0.9, beta2 0.999, eps 1e-8). Weight decay is
/// applied as theta -= lr * wd * theta, separate from the moment update.
/// Parameters with frozen[i] set are left untouched.
void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                    OptimizerState& state, double lr, double weight_decay, const std::vector<bool>& frozen = {});

double cosine_lr(std::size_t step, std::size_t total_steps, double base, double floor);

enum class SampleMode { kTrain, kEval };

/// One index per equal-length segment: random within the segment in train
/// mode, the segment center in eval mode.
std::vector<std::size_t> sample_frames(std::size_t frame_count, std::size_t steps, SampleMode mode,
                                       std::mt19937_64* rng = nullptr);

/// Pad by `pad` zeros and crop back at offset (oy, ox) in [0, 2 * pad].
embed::Image crop(const embed::Image& image, std::size_t pad, std::size_t oy, std::size_t ox);

/// Mirror every view, swap left/right class names and the leftmost/rightmost
/// context bits.
episodes::Episode flip_episode(const episodes::Episode& episode, const std::vector<std::string>& class_names);

/// Global L2 norm over all gradients; rescales to max_norm when above it.
double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm);

std::vector<bool> freeze_mask(const encoder::Weights& weights, const std::vector<std::string>& patterns);

struct EpochStats {
  std::size_t epoch = 0;
  double joint = 0.0;  // mean per-sample joint loss
  double ce = 0.0;     // mean per-sample weighted ce
  double cc = 0.0;     // mean per-sample weighted cc
  double lr = 0.0;     // rate used by the last step
};

std::string format_stats(const EpochStats& stats);

struct Trainer {
  Trainer(encoder::Model& model, const TrainConfig& config, const rules::ScenarioSet& scenarios);

  /// One pass over `data` in a shuffled order. Throws NumericError naming
  /// the epoch, batch and episode on a non-finite loss.
  EpochStats train_epoch(const std::vector<episodes::Episode>& data);

  /// Total optimizer steps for the cosine schedule.
  void set_total_steps(std::size_t total) { total_steps_ = total; }

  encoder::Model& model;
  TrainConfig config;
  rules::ScenarioSet scenarios;      // the ruleset fed to the loss
  OptimizerState optimizer;
  std::mt19937_64 rng;
  std::size_t epoch = 0;

 private:
  std::vector<bool> frozen_;
  std::size_t total_steps_ = 0;
};

struct Evaluation {
  std::vector<std::vector<std::size_t>> per_step;
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> final_probs;
  episodes::FoldMetrics metrics;
};

/// Eval-mode frame sampling, no augmentation. Metrics use `scenarios` for
/// the contradiction rate regardless of whether CC was trained with.
Evaluation evaluate(const encoder::Model& model, const std::vector<episodes::Episode>& data, std::size_t frames,
                    const rules::ScenarioSet& scenarios);

/// Called after every epoch with the model as trained so far.
using EpochHook = std::function<void(const EpochStats&, const encoder::Model&)>;
using FoldHook = std::function<void(std::size_t fold, const EpochStats&, const encoder::Model&)>;

/// Joint loss of one episode unrolled on `tape` against `weights`.
loss::LossBreakdown episode_loss(Tape& tape, const encoder::Model& model, const encoder::Weights& weights,
                                 const std::vector<embed::MultiViewFrame>& frames, std::size_t label,
                                 const rules::ContextVector& context, const rules::ScenarioSet& scenarios,
                                 loss::StepWeighting weighting, std::size_t truncation = 0);

/// End-to-end finite-difference check of the joint loss over one synthetic
/// episode, every parameter included.
struct GradcheckConfig {
  encoder::ModelConfig model;
  std::size_t frames = 3;
  std::uint64_t seed = 7;
  double step = 3e-5;
  double tolerance = 1e-4;

  /// D=16, L=1, H=2, K=2, one 16x16 view, P=8, T=3.
  static GradcheckConfig tiny();
};

GradcheckConfig gradcheck_config_from_json(const std::string& text);
kernel::GradCheckReport model_gradcheck(const GradcheckConfig& config);

/// Fresh model (seeded from config.seed) trained for config.epochs.
encoder::Model train_model(const std::vector<episodes::Episode>& data, const TrainConfig& config,
                           const rules::ScenarioSet& scenarios, const EpochHook& hook = {});

/// View geometry of the episodes copied into the model config.
encoder::ModelConfig model_config_for(const TrainConfig& config, const std::vector<episodes::Episode>& data,
                                      const std::vector<std::string>& class_names);

struct CvResult {
  episodes::MetricsReport report;
  std::vector<encoder::Model> models;
};

/// Trains F models, fold f held out, and summarizes the held-out metrics.
CvResult run_cv(const std::vector<episodes::Episode>& data, const episodes::FoldSplit& split,
                const TrainConfig& config, const rules::ScenarioSet& scenarios,
                const FoldHook& hook = {});

}  // namespace cem::train
