#include "cemformer/episodes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "cemformer/error.hpp"
#include "cemformer/seed.hpp"

namespace cem::episodes {
namespace fs = std::filesystem;

namespace {

constexpr char kRasterMagic[8] = {'C', 'E', 'M', 'R', 'A', 'S', 'T', '1'};
constexpr std::uint32_t kDtypeF32 = 1;
constexpr const char* kManifestHeader = "cemformer-dataset";

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

void GeneratorConfig::validate() const {
  if (frames == 0) throw ConfigError("episodes need at least one frame");
  if (height < 2 * marker_size || width < 2 * marker_size)
    throw ConfigError("views are too small for the context markers");
  if (rules.class_names.size() != drift.size())
    throw ConfigError("generator expects " + std::to_string(drift.size()) + " classes");
  if (rules.context_dim > 3) throw ConfigError("at most 3 context bits can be drawn as corner markers");
  if (!(blob_sigma > 0.0) || !(stripe_period > 0.0) || noise_sigma < 0.0)
    throw ConfigError("blob sigma and stripe period must be positive, noise non-negative");
}

Episode generate_episode(std::uint64_t seed, const GeneratorConfig& config, std::uint64_t id) {
  config.validate();
  const std::size_t n_classes = config.drift.size();
  const auto contexts = rules::all_contexts(config.rules.context_dim);
  for (std::size_t y = 0; y < n_classes; ++y)
    if (std::all_of(contexts.begin(), contexts.end(),
                    [&](const rules::ContextVector& c) { return rules::contradicts(config.rules, y, c); }))
      throw ConfigError("class '" + config.rules.class_names[y] + "' is contradicted in every context");

  std::mt19937_64 rng(seed);
  Episode ep;
  ep.id = id;
  ep.seed = seed;
  ep.label = std::uniform_int_distribution<std::size_t>(0, n_classes - 1)(rng);
  std::uniform_int_distribution<std::size_t> pick_context(0, contexts.size() - 1);
  do {
    ep.context = contexts[pick_context(rng)];
  } while (rules::contradicts(config.rules, ep.label, ep.context));

  const double v = config.drift[ep.label];
  const double jitter = std::uniform_real_distribution<double>(-config.blob_jitter, config.blob_jitter)(rng);
  const double phase0 = std::uniform_real_distribution<double>(0.0, config.stripe_period)(rng);
  std::normal_distribution<double> noise(0.0, config.noise_sigma);

  const std::size_t h = config.height, w = config.width, ms = config.marker_size;
  const double half_t = static_cast<double>(config.frames) / 2.0;
  const double cy = static_cast<double>(h) / 2.0;
  const double inv_two_var = 1.0 / (2.0 * config.blob_sigma * config.blob_sigma);

  for (std::size_t t = 1; t <= config.frames; ++t) {
    const double shift = v * (static_cast<double>(t) - half_t);
    embed::Image cabin{1, h, w, std::vector<float>(h * w)};
    embed::Image road{1, h, w, std::vector<float>(h * w)};

    const double cx = static_cast<double>(w) / 2.0 + jitter + shift;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        const double value = config.blob_background +
                             config.blob_amplitude * std::exp(-(dx * dx + dy * dy) * inv_two_var);
        cabin.at(0, y, x) = clamp01(value + noise(rng));
      }

    const double phase = phase0 + shift;
    std::vector<double> clean(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        clean[y * w + x] = 0.5 + 0.5 * config.stripe_contrast *
                                     std::cos(2.0 * std::numbers::pi * (static_cast<double>(x) - phase) /
                                              config.stripe_period);
    // Bit 0 top-left, bit 1 top-right, bit 2 both bottom corners, so a
    // mirrored frame shows the context with bits 0 and 1 swapped.
    auto marker = [&](std::size_t y0, std::size_t x0, double level) {
      for (std::size_t y = y0; y < y0 + ms; ++y)
        for (std::size_t x = x0; x < x0 + ms; ++x) clean[y * w + x] = level;
    };
    for (std::size_t b = 0; b < ep.context.size(); ++b) {
      const double level = ep.context.bits[b] ? 1.0 : 0.0;
      if (b == 0) marker(0, 0, level);
      if (b == 1) marker(0, w - ms, level);
      if (b == 2) {
        marker(h - ms, 0, level);
        marker(h - ms, w - ms, level);
      }
    }
    for (std::size_t i = 0; i < h * w; ++i) road.pixels[i] = clamp01(clean[i] + noise(rng));

    ep.frames.push_back(embed::MultiViewFrame{{std::move(cabin), std::move(road)}});
  }
  return ep;
}

std::vector<Episode> generate_dataset(std::size_t n, std::uint64_t seed, const GeneratorConfig& config) {
  std::vector<Episode> out(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(n); ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    out[static_cast<std::size_t>(i)] = generate_episode(derive_seed(seed, idx), config, idx);
  }
  return out;
}

void write_raster(const fs::path& path, const std::vector<embed::Image>& frames) {
  if (frames.empty()) throw ContractError("write_raster: no frames");
  const auto& g = frames.front();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  out.write(kRasterMagic, sizeof kRasterMagic);
  put_u32(out, static_cast<std::uint32_t>(frames.size()));
  put_u32(out, static_cast<std::uint32_t>(g.channels));
  put_u32(out, static_cast<std::uint32_t>(g.height));
  put_u32(out, static_cast<std::uint32_t>(g.width));
  put_u32(out, kDtypeF32);
  for (const auto& img : frames) {
    if (img.channels != g.channels || img.height != g.height || img.width != g.width)
      throw ContractError("write_raster: frames differ in geometry");
    for (float v : img.pixels) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw FormatError(path.string(), "write failed");
}

std::vector<embed::Image> read_raster(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open raster");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = sizeof kRasterMagic + 5 * 4;
  if (bytes.size() < kHeader) throw FormatError(path.string(), "truncated header");
  if (std::memcmp(bytes.data(), kRasterMagic, sizeof kRasterMagic) != 0)
    throw FormatError(path.string(), "bad magic");
  const unsigned char* h = bytes.data() + sizeof kRasterMagic;
  const std::size_t frames = get_u32(h), channels = get_u32(h + 4), height = get_u32(h + 8),
                    width = get_u32(h + 12);
  if (get_u32(h + 16) != kDtypeF32) throw FormatError(path.string(), "unsupported dtype");
  if (frames == 0 || channels == 0 || height == 0 || width == 0)
    throw FormatError(path.string(), "empty dimensions in header");
  const std::size_t per_frame = channels * height * width;
  if (bytes.size() != kHeader + frames * per_frame * 4)
    throw FormatError(path.string(), "payload size does not match header");
  std::vector<embed::Image> out;
  const unsigned char* p = bytes.data() + kHeader;
  for (std::size_t f = 0; f < frames; ++f) {
    embed::Image img{channels, height, width, std::vector<float>(per_frame)};
    for (auto& v : img.pixels) {
      v = std::bit_cast<float>(get_u32(p));
      p += 4;
    }
    out.push_back(std::move(img));
  }
  return out;
}

DatasetManifest write_dataset(const std::vector<Episode>& episodes, const fs::path& dir,
                              const std::vector<std::string>& class_names, const std::string& rules_path) {
  if (episodes.empty()) throw ContractError("write_dataset: no episodes");
  fs::create_directories(dir);
  DatasetManifest m;
  m.class_names = class_names;
  m.context_dim = episodes.front().context.size();
  m.frames = episodes.front().frames.size();
  m.rules_path = rules_path;
  for (const auto& img : episodes.front().frames.front().views) m.views.push_back({img.channels, img.height, img.width});

  for (const auto& ep : episodes) {
    if (ep.frames.size() != m.frames) throw ContractError("write_dataset: episodes differ in length");
    ManifestEntry e{ep.id, ep.label, ep.context, ep.seed, {}};
    for (std::size_t v = 0; v < m.views.size(); ++v) {
      const std::string name = "ep_" + std::to_string(ep.id) + "_view" + std::to_string(v) + ".bin";
      std::vector<embed::Image> frames;
      for (const auto& f : ep.frames) frames.push_back(f.views.at(v));
      write_raster(dir / name, frames);
      e.files.push_back(name);
    }
    m.entries.push_back(std::move(e));
  }

  std::ofstream out(dir / "manifest.txt", std::ios::trunc);
  if (!out) throw FormatError((dir / "manifest.txt").string(), "cannot open for writing");
  out << kManifestHeader << ' ' << m.version << '\n';
  out << "classes";
  for (const auto& c : m.class_names) out << ' ' << c;
  out << "\ncontext_dim " << m.context_dim << "\nframes " << m.frames << "\nviews " << m.views.size() << '\n';
  for (std::size_t v = 0; v < m.views.size(); ++v)
    out << "view " << v << ' ' << m.views[v].channels << ' ' << m.views[v].height << ' ' << m.views[v].width << '\n';
  out << "rules " << (m.rules_path.empty() ? "-" : m.rules_path) << '\n';
  out << "episodes " << m.entries.size() << '\n';
  for (const auto& e : m.entries) {
    out << "episode " << e.id << ' ' << m.class_names.at(e.label) << ' ' << e.context.str() << ' ' << e.seed;
    for (const auto& f : e.files) out << ' ' << f;
    out << '\n';
  }
  if (!out) throw FormatError((dir / "manifest.txt").string(), "write failed");
  return m;
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  const std::string where = path.string();
  std::ifstream in(path);
  if (!in) throw FormatError(where, "cannot open manifest");

  Dataset ds;
  auto& m = ds.manifest;
  std::string line, key;
  std::size_t expected = 0, n_views = 0;
  auto fail = [&](const std::string& what) { throw FormatError(where, what + " in line '" + line + "'"); };

  if (!std::getline(in, line)) throw FormatError(where, "empty manifest");
  {
    std::istringstream ls(line);
    if (!(ls >> key >> m.version) || key != kManifestHeader) fail("bad manifest header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ls >> key;
    if (key == "classes") {
      std::string c;
      while (ls >> c) m.class_names.push_back(c);
    } else if (key == "context_dim") {
      if (!(ls >> m.context_dim)) fail("bad context_dim");
    } else if (key == "frames") {
      if (!(ls >> m.frames)) fail("bad frames");
    } else if (key == "views") {
      if (!(ls >> n_views)) fail("bad views");
    } else if (key == "view") {
      std::size_t idx;
      embed::ViewGeometry g;
      if (!(ls >> idx >> g.channels >> g.height >> g.width) || idx != m.views.size()) fail("bad view");
      m.views.push_back(g);
    } else if (key == "rules") {
      if (!(ls >> m.rules_path)) fail("bad rules");
      if (m.rules_path == "-") m.rules_path.clear();
    } else if (key == "episodes") {
      if (!(ls >> expected)) fail("bad episodes count");
    } else if (key == "episode") {
      ManifestEntry e;
      std::string label, ctx;
      if (!(ls >> e.id >> label >> ctx >> e.seed)) fail("bad episode entry");
      const auto it = std::find(m.class_names.begin(), m.class_names.end(), label);
      if (it == m.class_names.end()) fail("unknown label");
      e.label = static_cast<std::size_t>(it - m.class_names.begin());
      try {
        e.context = rules::ContextVector::from_string(ctx);
      } catch (const ContractError&) {
        fail("bad context");
      }
      if (e.context.size() != m.context_dim) fail("context length mismatch");
      std::string f;
      while (ls >> f) e.files.push_back(f);
      if (e.files.size() != n_views) fail("wrong number of view files");
      m.entries.push_back(std::move(e));
    } else {
      fail("unknown key");
    }
  }
  if (m.views.size() != n_views) throw FormatError(where, "view count mismatch");
  if (m.entries.size() != expected) throw FormatError(where, "episode count mismatch");

  for (const auto& e : m.entries) {
    Episode ep{e.id, e.seed, e.label, e.context, {}};
    for (std::size_t v = 0; v < n_views; ++v) {
      const fs::path raster = dir / e.files[v];
      auto frames = read_raster(raster);
      const auto& g = m.views[v];
      if (frames.size() != m.frames || frames.front().channels != g.channels || frames.front().height != g.height ||
          frames.front().width != g.width)
        throw FormatError(raster.string(), "geometry does not match the manifest");
      if (ep.frames.empty()) ep.frames.resize(frames.size());
      for (std::size_t f = 0; f < frames.size(); ++f) ep.frames[f].views.push_back(std::move(frames[f]));
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

FoldSplit kfold_split(const DatasetManifest& manifest, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("need at least 2 folds");
  if (manifest.size() < folds)
    throw ConfigError(std::to_string(manifest.size()) + " episodes cannot fill " + std::to_string(folds) + " folds");
  std::size_t n_classes = manifest.class_names.size();
  for (const auto& e : manifest.entries) n_classes = std::max(n_classes, e.label + 1);

  std::vector<std::vector<std::uint64_t>> by_class(n_classes);
  for (const auto& e : manifest.entries) by_class[e.label].push_back(e.id);

  std::mt19937_64 rng(seed);
  FoldSplit split{folds, std::vector<std::vector<std::uint64_t>>(folds)};
  std::size_t deal = 0;
  for (auto& ids : by_class) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (auto id : ids) split.ids[deal++ % folds].push_back(id);
  }
  return split;
}

double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw ContractError("accuracy: need equal, non-empty prediction and label lists");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

ClassScores class_scores(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                         std::size_t n_classes) {
  if (preds.empty() || preds.size() != labels.size())
    throw ContractError("class_scores: need equal, non-empty prediction and label lists");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= n_classes || labels[i] >= n_classes) throw ContractError("class index out of range");
    if (preds[i] == labels[i]) {
      ++tp[preds[i]];
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  ClassScores s;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double p = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    const double r = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(p + r > 0 ? 2.0 * p * r / (p + r) : 0.0);
  }
  return s;
}

double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                std::size_t n_classes) {
  const auto s = class_scores(preds, labels, n_classes);
  double sum = 0.0;
  for (double f : s.f1) sum += f;
  return sum / static_cast<double>(n_classes);
}

double contradiction_rate(const std::vector<std::size_t>& preds, const std::vector<rules::ContextVector>& contexts,
                          const rules::ScenarioSet& scenarios) {
  if (preds.size() != contexts.size()) throw ContractError("contradiction_rate: length mismatch");
  if (preds.empty()) return 0.0;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) bad += rules::contradicts(scenarios, preds[i], contexts[i]);
  return static_cast<double>(bad) / static_cast<double>(preds.size());
}

std::optional<std::size_t> anticipation_time(const std::vector<std::size_t>& per_step, std::size_t label) {
  if (per_step.empty() || per_step.back() != label) return std::nullopt;
  std::size_t first = per_step.size();
  while (first > 0 && per_step[first - 1] == label) --first;
  return per_step.size() - 1 - first;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

void MetricsReport::finalize() {
  std::vector<double> acc, f1, cr, at;
  for (const auto& f : folds) {
    acc.push_back(f.accuracy);
    f1.push_back(f.macro_f1);
    cr.push_back(f.contradiction_rate);
    at.push_back(f.anticipation);
  }
  accuracy = summarize(acc);
  macro_f1 = summarize(f1);
  contradiction_rate = summarize(cr);
  anticipation = summarize(at);
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "fold\taccuracy\tmacro_f1\tcontradiction_rate\tanticipation\n";
  for (std::size_t i = 0; i < folds.size(); ++i)
    out << i << '\t' << folds[i].accuracy << '\t' << folds[i].macro_f1 << '\t' << folds[i].contradiction_rate
        << '\t' << folds[i].anticipation << '\n';
  out << "AVG+-SD\t" << accuracy.mean << "+-" << accuracy.sd << '\t' << macro_f1.mean << "+-" << macro_f1.sd
      << '\t' << contradiction_rate.mean << "+-" << contradiction_rate.sd << '\t' << anticipation.mean << "+-"
      << anticipation.sd << '\n';
  return out.str();
}

FoldMetrics evaluate_predictions(const std::vector<std::vector<std::size_t>>& per_step,
                                 const std::vector<std::size_t>& labels,
                                 const std::vector<rules::ContextVector>& contexts,
                                 const rules::ScenarioSet& scenarios, std::size_t n_classes) {
  if (per_step.size() != labels.size() || labels.empty())
    throw ContractError("evaluate_predictions: need one prediction track per label");
  std::vector<std::size_t> final_preds;
  for (const auto& track : per_step) {
    if (track.empty()) throw ContractError("evaluate_predictions: empty prediction track");
    final_preds.push_back(track.back());
  }
  FoldMetrics m;
  m.accuracy = accuracy(final_preds, labels);
  m.macro_f1 = macro_f1(final_preds, labels, n_classes);
  m.contradiction_rate = contradiction_rate(final_preds, contexts, scenarios);
  const auto scores = class_scores(final_preds, labels, n_classes);
  m.precision = scores.precision;
  m.recall = scores.recall;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (auto a = anticipation_time(per_step[i], labels[i])) {
      total += static_cast<double>(*a);
      ++m.anticipated;
    }
  m.anticipation = m.anticipated ? total / static_cast<double>(m.anticipated) : 0.0;
  return m;
}

}  // namespace cem::episodes
