#include "cemformer/encoder.hpp"

#include <cmath>
#include <string>

#include "cemformer/error.hpp"
#include "cemformer/kernel/init.hpp"
#include "cemformer/kernel/ops.hpp"

namespace cem::encoder {

namespace ops = cem::kernel;

namespace {

constexpr double kLayerNormEps = 1e-6;

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_bias(tape, ops::matmul(tape, x, w), b);
}

Tensor attention(Tape& tape, const Tensor& x, const BlockWeights& blk, const EncoderConfig& cfg,
                 std::vector<std::vector<double>>* record) {
  Tensor qkv = linear(tape, x, blk.qkv_weight, blk.qkv_bias);
  Tensor merged = ops::multi_head_attention(tape, qkv, cfg.heads, record);
  return linear(tape, merged, blk.out_weight, blk.out_bias);
}

Tensor mlp(Tape& tape, const Tensor& x, const BlockWeights& blk) {
  Tensor hidden = ops::gelu(tape, linear(tape, x, blk.fc1_weight, blk.fc1_bias));
  return linear(tape, hidden, blk.fc2_weight, blk.fc2_bias);
}

Prediction head_forward(Tape& tape, const Tensor& rows, const PredictionHead& head) {
  Tensor pooled = ops::layer_norm(tape, ops::mean_rows(tape, rows), head.norm_gamma, head.norm_beta, kLayerNormEps);
  Tensor probs = ops::softmax_rows(tape, linear(tape, pooled, head.weight, head.bias));
  auto p = probs.values();
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c)
    if (p[c] > p[best]) best = c;
  return {probs, best};
}

}  // namespace

void EncoderConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be at least 1");
  if (n_classes < 2) throw ConfigError("at least two classes are required");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (views.empty()) throw ConfigError("at least one view is required");
  for (const auto& v : views) patch.validate(v);
  if (!class_names.empty() && class_names.size() != encoder.n_classes)
    throw ConfigError("class list has " + std::to_string(class_names.size()) + " names for " +
                      std::to_string(encoder.n_classes) + " classes");
}

std::size_t ModelConfig::patch_tokens() const {
  std::size_t n = 0;
  for (const auto& v : views) n += patch.tokens(v);
  return n;
}

std::vector<std::pair<std::string, Tensor>> Weights::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t m = 0; m < embedder.views(); ++m) {
    const std::string prefix = "embed.view" + std::to_string(m) + ".";
    out.emplace_back(prefix + "projection", embedder.projection[m]);
    out.emplace_back(prefix + "position", embedder.position[m]);
  }
  out.emplace_back("memory.init", memory_init);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const auto& b = blocks[l];
    out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", b.ln1_beta);
    out.emplace_back(p + "attn.qkv.weight", b.qkv_weight);
    out.emplace_back(p + "attn.qkv.bias", b.qkv_bias);
    out.emplace_back(p + "attn.out.weight", b.out_weight);
    out.emplace_back(p + "attn.out.bias", b.out_bias);
    out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", b.ln2_beta);
    out.emplace_back(p + "mlp.fc1.weight", b.fc1_weight);
    out.emplace_back(p + "mlp.fc1.bias", b.fc1_bias);
    out.emplace_back(p + "mlp.fc2.weight", b.fc2_weight);
    out.emplace_back(p + "mlp.fc2.bias", b.fc2_bias);
  }
  out.emplace_back("head.norm.gamma", head.norm_gamma);
  out.emplace_back("head.norm.beta", head.norm_beta);
  out.emplace_back("head.weight", head.weight);
  out.emplace_back("head.bias", head.bias);
  return out;
}

Weights Weights::clone() const {
  Weights w;
  for (std::size_t m = 0; m < embedder.views(); ++m) {
    w.embedder.projection.push_back(embedder.projection[m].clone());
    w.embedder.position.push_back(embedder.position[m].clone());
  }
  w.memory_init = memory_init.clone();
  for (const auto& b : blocks) {
    w.blocks.push_back({b.ln1_gamma.clone(), b.ln1_beta.clone(), b.qkv_weight.clone(), b.qkv_bias.clone(),
                        b.out_weight.clone(), b.out_bias.clone(), b.ln2_gamma.clone(), b.ln2_beta.clone(),
                        b.fc1_weight.clone(), b.fc1_bias.clone(), b.fc2_weight.clone(), b.fc2_bias.clone()});
  }
  w.head = {head.norm_gamma.clone(), head.norm_beta.clone(), head.weight.clone(), head.bias.clone()};
  return w;
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.size();
  return n;
}

Weights initialize_weights(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  const auto& ec = config.encoder;
  const std::size_t d = ec.d_model, hidden = d * ec.mlp_ratio;
  Weights w;
  w.embedder = embed::ViewEmbedder::initialize(config.views, config.patch, d, rng);
  // Unit scale: each memory row enters the first LayerNorm on its own, and a
  // row with a tiny spread makes that norm badly conditioned.
  w.memory_init = kernel::normal({ec.memory_tokens, d}, 1.0, rng);
  for (std::size_t l = 0; l < ec.layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = kernel::filled({d}, 1.0);
    b.ln1_beta = kernel::filled({d}, 0.0);
    b.qkv_weight = kernel::xavier_uniform(d, 3 * d, rng);
    b.qkv_bias = kernel::filled({3 * d}, 0.0);
    b.out_weight = kernel::xavier_uniform(d, d, rng);
    b.out_bias = kernel::filled({d}, 0.0);
    b.ln2_gamma = kernel::filled({d}, 1.0);
    b.ln2_beta = kernel::filled({d}, 0.0);
    b.fc1_weight = kernel::xavier_uniform(d, hidden, rng);
    b.fc1_bias = kernel::filled({hidden}, 0.0);
    b.fc2_weight = kernel::xavier_uniform(hidden, d, rng);
    b.fc2_bias = kernel::filled({d}, 0.0);
    w.blocks.push_back(std::move(b));
  }
  w.head.norm_gamma = kernel::filled({d}, 1.0);
  w.head.norm_beta = kernel::filled({d}, 0.0);
  w.head.weight = kernel::xavier_uniform(d, ec.n_classes, rng);
  w.head.bias = kernel::filled({ec.n_classes}, 0.0);
  return w;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  std::mt19937_64 rng(seed);
  weights_ = initialize_weights(config_, rng);
}

Model::Model(ModelConfig config, Weights weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
}

MemoryState init_memory(const Weights& weights) { return {weights.memory_init, 0}; }

Tensor prepend_memory(Tape& tape, const MemoryState& mem, const Tensor& z0) {
  if (mem.embeddings.cols() != z0.cols())
    throw DimensionError("prepend_memory: memory " + kernel::to_string(mem.embeddings.shape()) +
                         " vs tokens " + kernel::to_string(z0.shape()));
  if (mem.embeddings.rows() == 0) return z0;
  const Tensor parts[] = {mem.embeddings, z0};
  return ops::concat_tokens(tape, parts);
}

Tensor encode_step(Tape& tape, const Tensor& zbar, const Weights& weights, const EncoderConfig& config,
                   AttentionTrace* trace) {
  if (trace) {
    trace->weights.clear();
    trace->tokens = zbar.rows();
  }
  Tensor x = zbar;
  for (std::size_t l = 0; l < weights.blocks.size(); ++l) {
    const auto& blk = weights.blocks[l];
    try {
      std::vector<std::vector<double>>* record = nullptr;
      if (trace) record = &trace->weights.emplace_back();
      Tensor a = attention(tape, ops::layer_norm(tape, x, blk.ln1_gamma, blk.ln1_beta, kLayerNormEps), blk,
                           config, record);
      x = ops::add(tape, x, a);
      Tensor f = mlp(tape, ops::layer_norm(tape, x, blk.ln2_gamma, blk.ln2_beta, kLayerNormEps), blk);
      x = ops::add(tape, x, f);
    } catch (const NumericError& e) {
      throw NumericError("encoder block " + std::to_string(l) + ": " + e.what());
    }
  }
  return x;
}

MemoryState carry_memory(Tape& tape, const Tensor& zL, std::size_t memory_tokens, std::size_t t) {
  if (zL.rows() < memory_tokens)
    throw ContractError("carry_memory: " + std::to_string(zL.rows()) + " rows cannot hold " +
                        std::to_string(memory_tokens) + " memory tokens");
  return {ops::slice_tokens(tape, zL, 0, memory_tokens), t + 1};
}

Prediction predict(Tape& tape, const Tensor& mem_out, const PredictionHead& head) {
  if (mem_out.rank() != 2 || mem_out.rows() == 0)
    throw ContractError("predict: prediction requires at least one memory token");
  return head_forward(tape, mem_out, head);
}

StepResult step(Tape& tape, const Model& model, const Weights& weights, const MemoryState& memory,
                const embed::MultiViewFrame& frame, bool record_attention) {
  const auto& cfg = model.config();
  const std::size_t k = cfg.encoder.memory_tokens;
  Tensor z0 = embed::embed_frame(tape, frame, cfg.patch, weights.embedder);
  Tensor zbar = prepend_memory(tape, memory, z0);

  StepResult out;
  AttentionTrace trace;
  Tensor zL = encode_step(tape, zbar, weights, cfg.encoder, record_attention ? &trace : nullptr);
  if (record_attention) out.attention = std::move(trace);

  out.next = carry_memory(tape, zL, k, memory.t);
  if (k > 0) {
    out.prediction = predict(tape, out.next.embeddings, weights.head);
  } else {
    out.prediction = head_forward(tape, ops::slice_tokens(tape, zL, 0, zL.rows()), weights.head);
  }
  if (!cfg.carry_memory) out.next.embeddings = weights.memory_init;
  return out;
}

Rollout roll(Tape& tape, const Model& model, const Weights& weights,
             const std::vector<embed::MultiViewFrame>& frames, const RollOptions& options) {
  Rollout out;
  MemoryState mem = init_memory(weights);
  for (std::size_t s = 0; s < frames.size(); ++s) {
    if (options.truncation > 0 && s > 0 && s % options.truncation == 0 && model.config().carry_memory)
      mem.embeddings = mem.embeddings.detach();
    StepResult r = step(tape, model, weights, mem, frames[s], options.record_attention);
    out.steps.push_back(std::move(r.prediction));
    if (r.attention) out.attention.push_back(std::move(*r.attention));
    mem = std::move(r.next);
  }
  return out;
}

std::vector<AttentionSummary> extract_attention(const std::optional<AttentionTrace>& trace,
                                                const ModelConfig& config) {
  if (!trace || trace->weights.empty())
    throw StateError("attention recording was not enabled for this step");
  const std::size_t k = config.encoder.memory_tokens;
  const std::size_t n = trace->tokens;
  const std::size_t row_lo = 0, row_hi = k > 0 ? k : n;
  const double norm = 1.0 / static_cast<double>((row_hi - row_lo) * config.encoder.heads);

  std::vector<AttentionSummary> out;
  for (std::size_t l = 0; l < trace->weights.size(); ++l) {
    std::vector<double> avg(n, 0.0);
    for (const auto& head : trace->weights[l])
      for (std::size_t r = row_lo; r < row_hi; ++r)
        for (std::size_t c = 0; c < n; ++c) avg[c] += head[r * n + c] * norm;

    AttentionSummary s;
    s.layer = l;
    for (std::size_t c = 0; c < k; ++c) s.memory_mass += avg[c];
    std::size_t offset = k;
    for (const auto& view : config.views) {
      const std::size_t gr = config.patch.grid_rows(view), gc = config.patch.grid_cols(view);
      s.grids.emplace_back(avg.begin() + static_cast<long>(offset),
                           avg.begin() + static_cast<long>(offset + gr * gc));
      s.grid_shapes.emplace_back(gr, gc);
      offset += gr * gc;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cem::encoder
