#pragma once

// Recurrent spatial-temporal encoder.
//
// Per timestep t:
//   zbar_t = [E_t^mem ; z0_t]                 (prepend_memory)
//   zL_t   = L pre-norm transformer blocks     (encode_step)
//   E_{t+1}^mem = first K rows of zL_t         (carry_memory)
//   p_t    = softmax(W * LN(mean(E_{t+1}^mem)) + b) (predict)
//
// E_0^mem is a learned parameter shared across episodes. The carried memory
// is the only channel between timesteps; attention inside a step is
// unmasked. With K = 0 the head reads the mean of the patch outputs instead,
// which makes every step independent of the others.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cemformer/embed.hpp"
#include "cemformer/kernel/tape.hpp"
#include "cemformer/kernel/tensor.hpp"

namespace cem::encoder {

using kernel::Tape;
using kernel::Tensor;

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t memory_tokens = 4;
  std::size_t mlp_ratio = 2;
  std::size_t n_classes = 5;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Everything needed to rebuild a model: encoder shape, input geometry and
/// whether memory is carried between steps (false = episodic memory ablated,
/// every step starts again from E_0^mem).
struct ModelConfig {
  EncoderConfig encoder;
  std::vector<embed::ViewGeometry> views{{1, 32, 32}, {1, 32, 32}};
  embed::PatchConfig patch{8};
  bool carry_memory = true;
  std::vector<std::string> class_names;

  void validate() const;
  /// Total patch tokens per frame, sum of N_m.
  std::size_t patch_tokens() const;
  bool operator==(const ModelConfig&) const = default;
};

struct MemoryState {
  Tensor embeddings;  // K x D
  std::size_t t = 0;
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias;
  Tensor out_weight, out_bias;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

/// LayerNorm then a linear map D -> n_classes, applied to the pooled memory
/// rows. The carried memory is the raw residual stream and grows with t; the
/// norm keeps the logits on one scale at every step.
struct PredictionHead {
  Tensor norm_gamma;  // D
  Tensor norm_beta;   // D
  Tensor weight;  // D x n_classes
  Tensor bias;    // n_classes
};

struct Weights {
  embed::ViewEmbedder embedder;
  Tensor memory_init;  // K x D
  std::vector<BlockWeights> blocks;
  PredictionHead head;

  /// Stable (name, tensor) enumeration used by checkpoints, the optimizer
  /// and freeze masks.
  std::vector<std::pair<std::string, Tensor>> named() const;
  /// Deep copy with fresh gradient slots.
  Weights clone() const;
  std::size_t parameter_count() const;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& weights() { return weights_; }
  std::size_t parameter_count() const { return weights_.parameter_count(); }

 private:
  ModelConfig config_;
  Weights weights_;
};

Weights initialize_weights(const ModelConfig& config, std::mt19937_64& rng);

/// E_0^mem at t = 0. Returns the parameter itself so gradients reach it.
MemoryState init_memory(const Weights& weights);

/// [mem ; z0]
Tensor prepend_memory(Tape& tape, const MemoryState& mem, const Tensor& z0);

/// Softmax attention matrices recorded during encode_step, indexed
/// [layer][head], each (K+N) x (K+N).
struct AttentionTrace {
  std::vector<std::vector<std::vector<double>>> weights;
  std::size_t tokens = 0;
};

/// L pre-norm blocks: x += MHSA(LN(x)); x += MLP(LN(x)).
Tensor encode_step(Tape& tape, const Tensor& zbar, const Weights& weights, const EncoderConfig& config,
                   AttentionTrace* trace = nullptr);

/// First K rows of zL as the next memory, still connected to the graph.
MemoryState carry_memory(Tape& tape, const Tensor& zL, std::size_t memory_tokens, std::size_t t);

struct Prediction {
  Tensor probs;  // 1 x n_classes
  std::size_t label = 0;
};

/// softmax(head(LN(mean over memory rows))); ties go to the lowest class
/// index.
/// Requires at least one memory row.
Prediction predict(Tape& tape, const Tensor& mem_out, const PredictionHead& head);

/// Output of one recurrent step.
struct StepResult {
  Prediction prediction;
  MemoryState next;
  std::optional<AttentionTrace> attention;
};

StepResult step(Tape& tape, const Model& model, const Weights& weights, const MemoryState& memory,
                const embed::MultiViewFrame& frame, bool record_attention = false);

struct RollOptions {
  /// Detach the carried memory every `truncation` steps; 0 means full BPTT.
  std::size_t truncation = 0;
  bool record_attention = false;
};

struct Rollout {
  std::vector<Prediction> steps;
  std::vector<AttentionTrace> attention;
};

/// Offline roll over a whole frame sequence starting from E_0^mem.
Rollout roll(Tape& tape, const Model& model, const Weights& weights,
             const std::vector<embed::MultiViewFrame>& frames, const RollOptions& options = {});

/// Memory-to-patch attention averaged over readout rows and heads, reshaped
/// per view onto its patch grid.
struct AttentionSummary {
  std::size_t layer = 0;
  /// Row-major grid per view, (H_m / P) x (W_m / P).
  std::vector<std::vector<double>> grids;
  std::vector<std::pair<std::size_t, std::size_t>> grid_shapes;
  /// Mass the averaged readout rows place on memory columns.
  double memory_mass = 0.0;
};

/// One summary per layer. Throws StateError when nothing was recorded.
std::vector<AttentionSummary> extract_attention(const std::optional<AttentionTrace>& trace,
                                                const ModelConfig& config);

}  // namespace cem::encoder
