// Command-line front end.
//
//   cemformer gen       --n --t --seed [--rules] [--size] --out
//   cemformer train     --data [--folds] [--config] [--checkpoint-every] --out
//   cemformer eval      --data --checkpoint [--rules] [--frames]
//   cemformer infer     --checkpoint --episode
//   cemformer attn      --checkpoint --episode --out
//   cemformer gradcheck [--config]
//   cemformer fps       --checkpoint [--n] [--episode]
//   cemformer init      --data --out [--config]
//
// An episode is named by its raster prefix, e.g. data/ep_3 for
// data/ep_3_view0.bin, data/ep_3_view1.bin. Passing one of the view files
// works too.
//
// Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>
#include <string>

#include "cemformer/checkpoint.hpp"
#include "cemformer/episodes.hpp"
#include "cemformer/error.hpp"
#include "cemformer/rules.hpp"
#include "cemformer/runtime.hpp"
#include "cemformer/seed.hpp"
#include "cemformer/train.hpp"

namespace fs = std::filesystem;
using namespace cem;

namespace {

constexpr int kOk = 0, kUsage = 1, kData = 2, kNumeric = 3;

std::string default_rules_path() { return std::string(CEM_ASSET_DIR) + "/brain4cars_rules.txt"; }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError(path.string(), "cannot write");
}

rules::ScenarioSet load_scenarios(const std::string& path, const std::vector<std::string>& class_names,
                                  std::size_t context_dim) {
  return rules::load_rules(path.empty() ? default_rules_path() : path, class_names, context_dim);
}

std::vector<embed::MultiViewFrame> load_episode(const std::string& name, std::size_t views) {
  std::string prefix = name;
  static const std::regex view_file(R"(^(.*)_view\d+\.bin$)");
  std::smatch m;
  if (std::regex_match(name, m, view_file)) prefix = m[1];
  std::vector<std::vector<embed::Image>> per_view;
  for (std::size_t v = 0; v < views; ++v) per_view.push_back(episodes::read_raster(prefix + "_view" + std::to_string(v) + ".bin"));
  const std::size_t frames = per_view.front().size();
  std::vector<embed::MultiViewFrame> out(frames);
  for (std::size_t v = 0; v < views; ++v) {
    if (per_view[v].size() != frames)
      throw FormatError(prefix, "views hold different frame counts");
    for (std::size_t t = 0; t < frames; ++t) out[t].views.push_back(std::move(per_view[v][t]));
  }
  return out;
}

train::TrainConfig load_train_config(const std::string& path) {
  return path.empty() ? train::TrainConfig{} : train::config_from_json(read_text(path));
}

int cmd_gen(std::size_t n, std::size_t t, std::uint64_t seed, const std::string& rules_path, std::size_t size,
            const fs::path& out) {
  episodes::GeneratorConfig g;
  g.frames = t;
  g.height = g.width = size;
  const auto& names = rules::default_maneuvers();
  g.rules = load_scenarios(rules_path, names, rules::kDefaultContextDim);
  const auto data = episodes::generate_dataset(n, seed, g);
  const std::string recorded = fs::absolute(rules_path.empty() ? default_rules_path() : rules_path).string();
  const auto manifest = episodes::write_dataset(data, out, names, recorded);
  std::cout << "wrote " << manifest.size() << " episodes of " << t << " frames to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const fs::path& data_dir, std::size_t folds, const std::string& config_path,
              std::size_t checkpoint_every, const fs::path& out) {
  const auto config = load_train_config(config_path);
  const auto data = episodes::read_dataset(data_dir);
  const auto scenarios = load_scenarios(data.manifest.rules_path, data.manifest.class_names, data.manifest.context_dim);
  fs::create_directories(out);
  write_text(out / "config.json", train::config_to_json(config) + "\n");

  std::ofstream log(out / "metrics.log");
  auto on_epoch = [&](std::size_t fold, const train::EpochStats& s, const encoder::Model& m) {
    const std::string line = "fold " + std::to_string(fold) + " " + train::format_stats(s);
    log << line << '\n' << std::flush;
    std::cout << line << '\n' << std::flush;
    if (checkpoint_every > 0 && s.epoch % checkpoint_every == 0 && s.epoch < config.epochs)
      checkpoint::save(m, out / ("fold" + std::to_string(fold) + "_epoch" + std::to_string(s.epoch) + ".ckpt"));
  };

  episodes::MetricsReport report;
  if (folds == 1) {
    // No held-out data: train on everything and report on the training set.
    auto model = train::train_model(data.episodes, config, scenarios,
                                    [&](const train::EpochStats& s, const encoder::Model& m) { on_epoch(0, s, m); });
    checkpoint::save(model, out / "fold0.ckpt");
    report.folds.push_back(train::evaluate(model, data.episodes, config.frames, scenarios).metrics);
    report.finalize();
  } else {
    const auto split = episodes::kfold_split(data.manifest, folds, config.seed);
    std::ostringstream split_text;
    for (std::size_t f = 0; f < split.folds; ++f) {
      split_text << "fold " << f;
      for (auto id : split.ids[f]) split_text << ' ' << id;
      split_text << '\n';
    }
    write_text(out / "split.txt", split_text.str());
    auto cv = train::run_cv(data.episodes, split, config, scenarios, on_epoch);
    for (std::size_t f = 0; f < cv.models.size(); ++f)
      checkpoint::save(cv.models[f], out / ("fold" + std::to_string(f) + ".ckpt"));
    report = std::move(cv.report);
  }
  write_text(out / "report.txt", report.to_text());
  std::cout << report.to_text();
  return kOk;
}

int cmd_eval(const fs::path& data_dir, const fs::path& ckpt, const std::string& rules_path, std::size_t frames) {
  const auto model = checkpoint::load(ckpt);
  const auto data = episodes::read_dataset(data_dir);
  const auto& names = model.config().class_names;
  const std::string path = rules_path.empty() ? data.manifest.rules_path : rules_path;
  const auto scenarios = load_scenarios(path, names, data.manifest.context_dim);
  const auto ev = train::evaluate(model, data.episodes, frames == 0 ? data.manifest.frames : frames, scenarios);
  episodes::MetricsReport report;
  report.folds.push_back(ev.metrics);
  report.finalize();
  std::cout << report.to_text();
  std::cout << "class\tprecision\trecall\n";
  for (std::size_t c = 0; c < names.size(); ++c)
    std::cout << names[c] << '\t' << ev.metrics.precision[c] << '\t' << ev.metrics.recall[c] << '\n';
  return kOk;
}

int cmd_infer(const fs::path& ckpt, const std::string& episode) {
  const auto model = checkpoint::load(ckpt);
  const auto frames = load_episode(episode, model.config().views.size());
  runtime::InferenceSession session(model);
  for (const auto& f : frames) std::cout << runtime::format_step(session.feed(f), model.config().class_names) << '\n';
  return kOk;
}

int cmd_attn(const fs::path& ckpt, const std::string& episode, const fs::path& out) {
  const auto model = checkpoint::load(ckpt);
  const auto frames = load_episode(episode, model.config().views.size());
  runtime::InferenceSession session(model, true);
  for (const auto& f : frames) session.feed(f);
  const auto maps = runtime::export_attention(session, out);
  std::cout << "wrote " << maps.size() << " attention maps to " << out.string() << '\n';
  return kOk;
}

int cmd_gradcheck(const std::string& config_path) {
  const auto config = config_path.empty() ? train::GradcheckConfig::tiny()
                                          : train::gradcheck_config_from_json(read_text(config_path));
  const auto r = train::model_gradcheck(config);
  std::cout << std::setprecision(6) << "coordinates " << r.coordinates << " max_rel_error " << r.max_rel_error
            << " max_abs_error " << r.max_abs_error << " tolerance " << config.tolerance << ' '
            << (r.passed ? "PASS" : "FAIL") << '\n';
  return r.passed ? kOk : kNumeric;
}

int cmd_fps(const fs::path& ckpt, std::size_t n, const std::string& episode) {
  const auto model = checkpoint::load(ckpt);
  std::vector<embed::MultiViewFrame> frames;
  if (!episode.empty()) {
    frames = load_episode(episode, model.config().views.size());
  } else {
    // Uniform noise shaped like the model's views.
    std::mt19937_64 rng(derive_seed(0, 0));
    std::uniform_real_distribution<float> pixel(0.0f, 1.0f);
    frames.resize(5);
    for (auto& f : frames)
      for (const auto& g : model.config().views) {
        embed::Image img{g.channels, g.height, g.width, std::vector<float>(g.channels * g.height * g.width)};
        for (auto& p : img.pixels) p = pixel(rng);
        f.views.push_back(std::move(img));
      }
  }
  runtime::InferenceSession session(model);
  const auto r = runtime::fps_report(session, frames, n);
  std::cout << std::fixed << std::setprecision(3) << "frames " << r.frames << " seconds " << r.seconds << " fps "
            << r.fps << " mean_latency_ms " << r.mean_latency_ms << " p95_latency_ms " << r.p95_latency_ms << '\n';
  return kOk;
}

int cmd_init(const fs::path& data_dir, const std::string& config_path, const fs::path& out) {
  const auto config = load_train_config(config_path);
  const auto data = episodes::read_dataset(data_dir);
  encoder::Model model(train::model_config_for(config, data.episodes, data.manifest.class_names),
                       derive_seed(config.seed, 0));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  checkpoint::save(model, out);
  std::cout << "wrote untrained model with " << model.parameter_count() << " parameters to " << out.string()
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent multi-view transformer for online maneuver anticipation"};
  app.require_subcommand(1);

  std::size_t n = 100, t = 5, size = 32, folds = 5, checkpoint_every = 0, frames = 0, fps_n = 200;
  std::uint64_t seed = 1;
  std::string rules_path, out, data, config, ckpt, episode;

  auto* gen = app.add_subcommand("gen", "synthesize a dataset");
  gen->add_option("--n", n, "episodes")->capture_default_str();
  gen->add_option("--t", t, "frames per episode")->capture_default_str();
  gen->add_option("--seed", seed, "generator seed")->capture_default_str();
  gen->add_option("--rules", rules_path, "rule file used to sample contexts");
  gen->add_option("--size", size, "view height and width in pixels")->capture_default_str();
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train with k-fold cross-validation");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--folds", folds, "folds; 1 trains on everything")->capture_default_str();
  tr->add_option("--config", config, "JSON training config");
  tr->add_option("--checkpoint-every", checkpoint_every, "also save every N epochs");
  tr->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  ev->add_option("--rules", rules_path, "rule file for the contradiction rate");
  ev->add_option("--frames", frames, "sampled frames per episode; 0 uses all");

  auto* inf = app.add_subcommand("infer", "stream one episode and print per-step predictions");
  inf->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  inf->add_option("--episode", episode, "episode raster prefix")->required();

  auto* at = app.add_subcommand("attn", "export attention maps for one episode");
  at->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  at->add_option("--episode", episode, "episode raster prefix")->required();
  at->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the joint loss");
  gc->add_option("--config", config, "JSON gradcheck config");

  auto* fp = app.add_subcommand("fps", "streaming throughput");
  fp->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  fp->add_option("--n", fps_n, "frames to feed")->capture_default_str();
  fp->add_option("--episode", episode, "episode raster prefix; synthetic when absent");

  auto* in = app.add_subcommand("init", "write an untrained checkpoint shaped for a dataset");
  in->add_option("--data", data, "dataset directory")->required();
  in->add_option("--config", config, "JSON training config");
  in->add_option("--out", out, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen(n, t, seed, rules_path, size, out);
    if (*tr) return cmd_train(data, folds, config, checkpoint_every, out);
    if (*ev) return cmd_eval(data, ckpt, rules_path, frames);
    if (*inf) return cmd_infer(ckpt, episode);
    if (*at) return cmd_attn(ckpt, episode, out);
    if (*gc) return cmd_gradcheck(config);
    if (*fp) return cmd_fps(ckpt, fps_n, episode);
    if (*in) return cmd_init(data, config, out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
