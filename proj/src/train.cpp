#include "cemformer/train.hpp"

#include <fnmatch.h>
#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <numbers>
#include <exception>
#include <sstream>

#include "cemformer/error.hpp"
#include "cemformer/kernel/ops.hpp"
#include "cemformer/seed.hpp"

namespace cem::train {

using episodes::Episode;
using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Every episode builds and frees a few MB of tape. Left at the defaults,
// glibc hands that memory back to the kernel and faults it in again on the
// next episode.
void retain_heap() {
  static const bool done = [] {
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)done;
}

std::string mirror_name(const std::string& name) {
  auto swap_prefix = [](const std::string& n, const std::string& from, const std::string& to) {
    return n.rfind(from, 0) == 0 ? to + n.substr(from.size()) : std::string{};
  };
  if (auto s = swap_prefix(name, "left_", "right_"); !s.empty()) return s;
  if (auto s = swap_prefix(name, "right_", "left_"); !s.empty()) return s;
  return name;
}

embed::Image mirror(const embed::Image& img) {
  embed::Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

// Per-episode randomness drawn serially so parallel unrolling stays
// reproducible.
struct Draw {
  std::vector<std::size_t> frames;
  std::vector<std::pair<std::size_t, std::size_t>> crops;  // per view
  bool flip = false;
};

struct SampleResult {
  std::vector<std::vector<double>> grads;
  double joint = 0.0, ce = 0.0, cc = 0.0;
  std::exception_ptr error;
};

std::vector<embed::MultiViewFrame> prepare(const Episode& ep, const Draw& draw, std::size_t pad) {
  std::vector<embed::MultiViewFrame> out;
  out.reserve(draw.frames.size());
  for (auto idx : draw.frames) {
    embed::MultiViewFrame f = ep.frames[idx];
    if (pad > 0)
      for (std::size_t v = 0; v < f.views.size(); ++v)
        f.views[v] = crop(f.views[v], pad, draw.crops[v].first, draw.crops[v].second);
    out.push_back(std::move(f));
  }
  return out;
}

SampleResult run_sample(const encoder::Model& model, const Episode& ep, const std::vector<embed::MultiViewFrame>& frames,
                        const TrainConfig& config, const rules::ScenarioSet& scenarios) {
  SampleResult r;
  encoder::Weights local = model.weights().clone();
  kernel::Tape tape;
  auto breakdown = episode_loss(tape, model, local, frames, ep.label, ep.context, scenarios, config.weighting,
                                config.truncation);
  if (!std::isfinite(breakdown.total)) throw NumericError("joint loss is " + std::to_string(breakdown.total));
  kernel::backward(breakdown.total_tensor, tape);
  for (std::size_t t = 0; t < breakdown.weights.size(); ++t) {
    r.ce += breakdown.weights[t] * breakdown.ce[t];
    r.cc += breakdown.weights[t] * breakdown.cc[t];
  }
  r.joint = breakdown.total;
  for (const auto& [name, p] : local.named()) {
    if (p.has_grad()) {
      auto g = p.grad();
      r.grads.emplace_back(g.begin(), g.end());
    } else {
      r.grads.emplace_back(p.size(), 0.0);
    }
  }
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || lr_floor < 0.0 || lr_floor > lr) throw ConfigError("need lr > 0 and 0 <= lr_floor <= lr");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (frames == 0) throw ConfigError("need at least one frame per episode");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  model.encoder.validate();
}

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  auto& enc = c.model.encoder;
  try {
    for (auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "lr_floor") c.lr_floor = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "frames") c.frames = value.get<std::size_t>();
      else if (key == "truncation") c.truncation = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "freeze") c.freeze = value.get<std::vector<std::string>>();
      else if (key == "use_cc") c.use_cc = value.get<bool>();
      else if (key == "weighting") {
        const auto w = value.get<std::string>();
        if (w == "exponential") c.weighting = loss::StepWeighting::kExponential;
        else if (w == "uniform") c.weighting = loss::StepWeighting::kUniform;
        else throw ConfigError("weighting must be 'exponential' or 'uniform'");
      } else if (key == "crop_pad") c.crop_pad = value.get<std::size_t>();
      else if (key == "flip") c.flip = value.get<bool>();
      else if (key == "clip_norm") c.clip_norm = value.get<double>();
      else if (key == "layers") enc.layers = value.get<std::size_t>();
      else if (key == "d_model") enc.d_model = value.get<std::size_t>();
      else if (key == "heads") enc.heads = value.get<std::size_t>();
      else if (key == "memory_tokens") enc.memory_tokens = value.get<std::size_t>();
      else if (key == "mlp_ratio") enc.mlp_ratio = value.get<std::size_t>();
      else if (key == "patch") c.model.patch.patch = value.get<std::size_t>();
      else if (key == "carry_memory") c.model.carry_memory = value.get<bool>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  const auto& enc = c.model.encoder;
  json j = {{"lr", c.lr},
            {"lr_floor", c.lr_floor},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"frames", c.frames},
            {"truncation", c.truncation},
            {"seed", c.seed},
            {"freeze", c.freeze},
            {"use_cc", c.use_cc},
            {"weighting", c.weighting == loss::StepWeighting::kUniform ? "uniform" : "exponential"},
            {"crop_pad", c.crop_pad},
            {"flip", c.flip},
            {"clip_norm", c.clip_norm},
            {"layers", enc.layers},
            {"d_model", enc.d_model},
            {"heads", enc.heads},
            {"memory_tokens", enc.memory_tokens},
            {"mlp_ratio", enc.mlp_ratio},
            {"patch", c.model.patch.patch},
            {"carry_memory", c.model.carry_memory}};
  return j.dump(2);
}

void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                    OptimizerState& state, double lr, double weight_decay, const std::vector<bool>& frozen) {
  if (grads.size() != params.size() || (!frozen.empty() && frozen.size() != params.size()))
    throw ContractError("optimizer_step: " + std::to_string(params.size()) + " params, " +
                        std::to_string(grads.size()) + " grads");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer_step: state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_values();
    if (grads[i].size() != theta.size() || state.m[i].size() != theta.size())
      throw ContractError("optimizer_step: shape mismatch at parameter " + std::to_string(i));
    if (!frozen.empty() && frozen[i]) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = grads[i][k];
      m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g;
      v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g * g;
      theta[k] -= lr * weight_decay * theta[k];
      theta[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + kAdamEps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base, double floor) {
  if (total_steps == 0) return base;
  if (step > total_steps) throw ContractError("cosine_lr: step past the end of the schedule");
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::size_t> sample_frames(std::size_t frame_count, std::size_t steps, SampleMode mode,
                                       std::mt19937_64* rng) {
  if (steps == 0 || frame_count < steps)
    throw ContractError("sample_frames: " + std::to_string(frame_count) + " frames cannot fill " +
                        std::to_string(steps) + " segments");
  if (mode == SampleMode::kTrain && !rng) throw ContractError("sample_frames: train mode needs a generator");
  std::vector<std::size_t> out(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t lo = i * frame_count / steps, hi = (i + 1) * frame_count / steps;
    out[i] = mode == SampleMode::kEval ? lo + (hi - lo) / 2
                                       : std::uniform_int_distribution<std::size_t>(lo, hi - 1)(*rng);
  }
  return out;
}

embed::Image crop(const embed::Image& image, std::size_t pad, std::size_t oy, std::size_t ox) {
  if (oy > 2 * pad || ox > 2 * pad) throw ContractError("crop: offset outside the padded border");
  embed::Image out{image.channels, image.height, image.width, std::vector<float>(image.pixels.size(), 0.0f)};
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad);
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(image.height)) continue;
      for (std::size_t x = 0; x < image.width; ++x) {
        const auto sx = static_cast<std::ptrdiff_t>(x + ox) - static_cast<std::ptrdiff_t>(pad);
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(image.width)) continue;
        out.at(c, y, x) = image.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  return out;
}

Episode flip_episode(const Episode& episode, const std::vector<std::string>& class_names) {
  Episode out = episode;
  const auto it = std::find(class_names.begin(), class_names.end(), mirror_name(class_names.at(episode.label)));
  if (it == class_names.end())
    throw ConfigError("no mirrored class for '" + class_names[episode.label] + "'");
  out.label = static_cast<std::size_t>(it - class_names.begin());
  if (out.context.size() >= 2) std::swap(out.context.bits[0], out.context.bits[1]);
  for (auto& f : out.frames)
    for (auto& v : f.views) v = mirror(v);
  return out;
}

double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

std::vector<bool> freeze_mask(const encoder::Weights& weights, const std::vector<std::string>& patterns) {
  std::vector<bool> mask;
  for (const auto& [name, t] : weights.named()) {
    bool hit = false;
    for (const auto& p : patterns) hit = hit || fnmatch(p.c_str(), name.c_str(), 0) == 0;
    mask.push_back(hit);
  }
  return mask;
}

std::string format_stats(const EpochStats& s) {
  std::ostringstream out;
  out << std::setprecision(9) << "epoch " << s.epoch << " joint " << s.joint << " ce " << s.ce << " cc " << s.cc
      << " lr " << s.lr;
  return out.str();
}

Trainer::Trainer(encoder::Model& m, const TrainConfig& c, const rules::ScenarioSet& s)
    : model(m), config(c), rng(derive_seed(c.seed, 1)) {
  config.validate();
  retain_heap();
  scenarios = config.use_cc ? s : rules::ScenarioSet{s.class_names, s.context_dim, {}};
  frozen_ = freeze_mask(model.weights(), config.freeze);
}

EpochStats Trainer::train_epoch(const std::vector<Episode>& data) {
  if (data.empty()) throw ContractError("train_epoch: no episodes");
  ++epoch;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t batches = (data.size() + config.batch_size - 1) / config.batch_size;
  if (total_steps_ == 0) total_steps_ = batches * config.epochs;
  const auto& class_names = model.config().class_names;

  EpochStats stats;
  stats.epoch = epoch;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t lo = b * config.batch_size, hi = std::min(data.size(), lo + config.batch_size);
    const std::size_t n = hi - lo;

    std::vector<Draw> draws(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ep = data[order[lo + i]];
      draws[i].frames = sample_frames(ep.frames.size(), config.frames, SampleMode::kTrain, &rng);
      std::uniform_int_distribution<std::size_t> offset(0, 2 * config.crop_pad);
      for (std::size_t v = 0; v < ep.frames.front().views.size(); ++v) draws[i].crops.emplace_back(offset(rng), offset(rng));
      if (config.flip) draws[i].flip = std::bernoulli_distribution(0.5)(rng);
    }

    std::vector<SampleResult> results(n);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(n); ++i) {
      const auto k = static_cast<std::size_t>(i);
      try {
        const Episode& src = data[order[lo + k]];
        const Episode ep = draws[k].flip ? flip_episode(src, class_names) : src;
        results[k] = run_sample(model, ep, prepare(ep, draws[k], config.crop_pad), config, scenarios);
      } catch (...) {
        results[k].error = std::current_exception();
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (!results[i].error) continue;
      try {
        std::rethrow_exception(results[i].error);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(optimizer.step + 1) +
                           " batch " + std::to_string(b) + " episode " + std::to_string(data[order[lo + i]].id) +
                           ": " + e.what());
      }
    }

    std::vector<std::vector<double>> grads = std::move(results[0].grads);
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p][k] += results[i].grads[p][k];
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& g : grads)
      for (double& x : g) x *= inv;
    clip_grad_norm(grads, config.clip_norm);

    const double lr = cosine_lr(std::min(optimizer.step, total_steps_), total_steps_, config.lr, config.lr_floor);
    std::vector<Tensor> params;
    for (auto& [name, t] : model.weights().named()) params.push_back(t);
    optimizer_step(params, grads, optimizer, lr, config.weight_decay, frozen_);

    for (const auto& r : results) {
      stats.joint += r.joint;
      stats.ce += r.ce;
      stats.cc += r.cc;
    }
    stats.lr = lr;
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  stats.joint *= inv;
  stats.ce *= inv;
  stats.cc *= inv;
  return stats;
}

Evaluation evaluate(const encoder::Model& model, const std::vector<Episode>& data, std::size_t frames,
                    const rules::ScenarioSet& scenarios) {
  if (data.empty()) throw ContractError("evaluate: no episodes");
  retain_heap();
  Evaluation ev;
  ev.per_step.resize(data.size());
  ev.final_probs.resize(data.size());
  std::vector<std::exception_ptr> errors(data.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(data.size()); ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      const auto& ep = data[k];
      std::vector<embed::MultiViewFrame> seq;
      for (auto idx : sample_frames(ep.frames.size(), frames, SampleMode::kEval)) seq.push_back(ep.frames[idx]);
      kernel::Tape tape(false);
      auto roll = encoder::roll(tape, model, model.weights(), seq);
      for (const auto& s : roll.steps) ev.per_step[k].push_back(s.label);
      auto p = roll.steps.back().probs.values();
      ev.final_probs[k].assign(p.begin(), p.end());
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<rules::ContextVector> contexts;
  for (const auto& ep : data) {
    ev.labels.push_back(ep.label);
    contexts.push_back(ep.context);
  }
  ev.metrics = episodes::evaluate_predictions(ev.per_step, ev.labels, contexts, scenarios,
                                              model.config().encoder.n_classes);
  return ev;
}

loss::LossBreakdown episode_loss(Tape& tape, const encoder::Model& model, const encoder::Weights& weights,
                                 const std::vector<embed::MultiViewFrame>& frames, std::size_t label,
                                 const rules::ContextVector& context, const rules::ScenarioSet& scenarios,
                                 loss::StepWeighting weighting, std::size_t truncation) {
  auto roll = encoder::roll(tape, model, weights, frames, {truncation, false});
  std::vector<Tensor> ce, cc;
  for (const auto& s : roll.steps) {
    ce.push_back(loss::cross_entropy(tape, s.probs, label));
    cc.push_back(loss::cc_loss(tape, s.probs, context, scenarios));
  }
  return loss::joint_loss(tape, ce, cc, weighting);
}

GradcheckConfig GradcheckConfig::tiny() {
  GradcheckConfig c;
  c.model.encoder = {.layers = 1, .d_model = 16, .heads = 2, .memory_tokens = 2, .mlp_ratio = 2, .n_classes = 5};
  c.model.views = {{1, 16, 16}};
  c.model.patch.patch = 8;
  c.model.class_names = rules::default_maneuvers();
  return c;
}

GradcheckConfig gradcheck_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gradcheck config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("gradcheck config must be a JSON object");
  GradcheckConfig c = GradcheckConfig::tiny();
  auto& enc = c.model.encoder;
  std::size_t views = c.model.views.size(), size = c.model.views.front().height;
  try {
    for (auto& [key, value] : j.items()) {
      if (key == "layers") enc.layers = value.get<std::size_t>();
      else if (key == "d_model") enc.d_model = value.get<std::size_t>();
      else if (key == "heads") enc.heads = value.get<std::size_t>();
      else if (key == "memory_tokens") enc.memory_tokens = value.get<std::size_t>();
      else if (key == "mlp_ratio") enc.mlp_ratio = value.get<std::size_t>();
      else if (key == "patch") c.model.patch.patch = value.get<std::size_t>();
      else if (key == "carry_memory") c.model.carry_memory = value.get<bool>();
      else if (key == "views") views = value.get<std::size_t>();
      else if (key == "size") size = value.get<std::size_t>();
      else if (key == "frames") c.frames = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "step") c.step = value.get<double>();
      else if (key == "tolerance") c.tolerance = value.get<double>();
      else throw ConfigError("unknown gradcheck key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad gradcheck value: ") + e.what());
  }
  if (views < 1 || views > 2) throw ConfigError("gradcheck supports 1 or 2 views");
  if (c.frames < 1) throw ConfigError("gradcheck needs at least one frame");
  if (!(c.step > 0.0) || !(c.tolerance > 0.0)) throw ConfigError("step and tolerance must be positive");
  c.model.views.assign(views, {1, size, size});
  c.model.validate();
  return c;
}

kernel::GradCheckReport model_gradcheck(const GradcheckConfig& config) {
  config.model.validate();
  const auto& g0 = config.model.views.front();
  episodes::GeneratorConfig gen;
  gen.frames = config.frames;
  gen.height = g0.height;
  gen.width = g0.width;
  gen.marker_size = std::max<std::size_t>(1, std::min<std::size_t>(4, std::min(g0.height, g0.width) / 4));
  gen.blob_jitter = std::min(gen.blob_jitter, g0.width / 4.0);
  Episode ep = episodes::generate_episode(derive_seed(config.seed, 2), gen);
  if (config.model.views.size() > ep.frames.front().views.size())
    throw ConfigError("gradcheck generator provides at most " + std::to_string(ep.frames.front().views.size()) +
                      " views");
  for (auto& f : ep.frames) f.views.resize(config.model.views.size());

  encoder::Model model(config.model, derive_seed(config.seed, 0));
  const auto scenarios = rules::default_ruleset();
  std::vector<Tensor> params;
  for (auto& [name, t] : model.weights().named()) params.push_back(t);
  auto builder = [&](Tape& tape) {
    return episode_loss(tape, model, model.weights(), ep.frames, ep.label, ep.context, scenarios,
                        loss::StepWeighting::kExponential)
        .total_tensor;
  };
  return kernel::finite_diff_grad_check(builder, params, config.step, config.tolerance);
}

encoder::ModelConfig model_config_for(const TrainConfig& config, const std::vector<Episode>& data,
                                      const std::vector<std::string>& class_names) {
  if (data.empty() || data.front().frames.empty()) throw ContractError("model_config_for: no frames");
  encoder::ModelConfig mc = config.model;
  mc.views.clear();
  for (const auto& img : data.front().frames.front().views) mc.views.push_back({img.channels, img.height, img.width});
  mc.class_names = class_names;
  mc.encoder.n_classes = class_names.size();
  mc.validate();
  return mc;
}

encoder::Model train_model(const std::vector<Episode>& data, const TrainConfig& config,
                           const rules::ScenarioSet& scenarios, const EpochHook& hook) {
  encoder::Model model(model_config_for(config, data, scenarios.class_names), derive_seed(config.seed, 0));
  Trainer trainer(model, config, scenarios);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    auto stats = trainer.train_epoch(data);
    if (hook) hook(stats, model);
  }
  return model;
}

CvResult run_cv(const std::vector<Episode>& data, const episodes::FoldSplit& split, const TrainConfig& config,
                const rules::ScenarioSet& scenarios,
                const FoldHook& hook) {
  CvResult out;
  for (std::size_t f = 0; f < split.folds; ++f) {
    std::vector<Episode> train_set, test_set;
    for (const auto& ep : data) {
      const auto& held = split.ids[f];
      (std::find(held.begin(), held.end(), ep.id) != held.end() ? test_set : train_set).push_back(ep);
    }
    if (train_set.empty() || test_set.empty())
      throw ConfigError("fold " + std::to_string(f) + " has an empty train or test set");
    TrainConfig fold_config = config;
    fold_config.seed = derive_seed(config.seed, 1000 + f);
    try {
      auto model = train_model(train_set, fold_config, scenarios, [&](const EpochStats& s, const encoder::Model& m) {
        if (hook) hook(f, s, m);
      });
      out.report.folds.push_back(evaluate(model, test_set, config.frames, scenarios).metrics);
      out.models.push_back(std::move(model));
    } catch (const NumericError& e) {
      throw NumericError("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  out.report.finalize();
  return out;
}

}  // namespace cem::train
