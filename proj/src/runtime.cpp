#include "cemformer/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cemformer/error.hpp"

namespace cem::runtime {
namespace fs = std::filesystem;

InferenceSession::InferenceSession(const encoder::Model& model, bool record_attention)
    : model_(&model), record_attention_(record_attention) {
  reset();
}

void InferenceSession::reset() {
  memory_ = encoder::init_memory(model_->weights());
  history_.clear();
  attention_.clear();
  poisoned_ = false;
}

void check_geometry(const encoder::ModelConfig& config, const embed::MultiViewFrame& frame) {
  if (frame.views.size() != config.views.size())
    throw ContractError("frame has " + std::to_string(frame.views.size()) + " views, model expects " +
                        std::to_string(config.views.size()));
  for (std::size_t v = 0; v < frame.views.size(); ++v) {
    const auto& img = frame.views[v];
    const auto& g = config.views[v];
    if (img.channels != g.channels || img.height != g.height || img.width != g.width)
      throw ContractError("view " + std::to_string(v) + " is " + std::to_string(img.channels) + "x" +
                          std::to_string(img.height) + "x" + std::to_string(img.width) + ", model expects " +
                          std::to_string(g.channels) + "x" + std::to_string(g.height) + "x" +
                          std::to_string(g.width));
    if (img.pixels.size() != img.channels * img.height * img.width)
      throw ContractError("view " + std::to_string(v) + " pixel buffer does not match its extents");
  }
}

const StepOutput& InferenceSession::feed(const embed::MultiViewFrame& frame) {
  if (poisoned_) throw StateError("session is poisoned by an earlier numeric failure; reset it");
  check_geometry(model_->config(), frame);
  kernel::Tape tape(false);
  encoder::StepResult r;
  try {
    r = encoder::step(tape, *model_, model_->weights(), memory_, frame, record_attention_);
  } catch (const NumericError&) {
    poisoned_ = true;
    throw;
  }
  memory_ = std::move(r.next);
  if (r.attention) attention_.push_back(std::move(*r.attention));
  auto p = r.prediction.probs.values();
  history_.push_back({memory_.t, std::vector<double>(p.begin(), p.end()), r.prediction.label});
  return history_.back();
}

void write_pgm(const fs::path& path, const std::vector<double>& grid, std::size_t rows, std::size_t cols) {
  if (grid.size() != rows * cols) throw ContractError("write_pgm: grid does not match its shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  const double peak = grid.empty() ? 0.0 : *std::max_element(grid.begin(), grid.end());
  for (double w : grid) {
    const double level = peak > 0.0 ? std::clamp(w / peak, 0.0, 1.0) : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * level))));
  }
  if (!out) throw FormatError(path.string(), "write failed");
}

std::vector<ExportedMap> export_attention(const InferenceSession& session, const fs::path& dir) {
  if (!session.recording()) throw StateError("attention recording was not enabled for this session");
  if (session.attention().empty()) throw StateError("no frames have been fed");
  fs::create_directories(dir);
  const auto& config = session.model().config();

  std::vector<ExportedMap> maps;
  for (std::size_t s = 0; s < session.attention().size(); ++s) {
    const auto summaries = encoder::extract_attention(session.attention()[s], config);
    for (const auto& sum : summaries) {
      for (std::size_t v = 0; v < sum.grids.size(); ++v) {
        ExportedMap m;
        m.t = s + 1;
        m.layer = sum.layer;
        m.view = v;
        m.rows = sum.grid_shapes[v].first;
        m.cols = sum.grid_shapes[v].second;
        m.memory_mass = sum.memory_mass;
        for (double w : sum.grids[v]) m.grid_sum += w;
        const std::string stem =
            "attn_t" + std::to_string(m.t) + "_l" + std::to_string(m.layer) + "_v" + std::to_string(v);
        m.pgm = dir / (stem + ".pgm");
        m.csv = dir / (stem + ".csv");
        write_pgm(m.pgm, sum.grids[v], m.rows, m.cols);

        std::ofstream csv(m.csv, std::ios::trunc);
        if (!csv) throw FormatError(m.csv.string(), "cannot open for writing");
        csv << std::setprecision(17);
        for (std::size_t r = 0; r < m.rows; ++r) {
          for (std::size_t c = 0; c < m.cols; ++c) csv << (c ? "," : "") << sum.grids[v][r * m.cols + c];
          csv << '\n';
        }
        maps.push_back(std::move(m));
      }
    }
  }

  // Per (t, layer) the view grid sums plus memory_mass add up to 1.
  std::ofstream index(dir / "attention_index.csv", std::ios::trunc);
  if (!index) throw FormatError((dir / "attention_index.csv").string(), "cannot open for writing");
  index << std::setprecision(17) << "t,layer,view,rows,cols,grid_sum,memory_mass,pgm,csv\n";
  for (const auto& m : maps)
    index << m.t << ',' << m.layer << ',' << m.view << ',' << m.rows << ',' << m.cols << ',' << m.grid_sum << ','
          << m.memory_mass << ',' << m.pgm.filename().string() << ',' << m.csv.filename().string() << '\n';
  return maps;
}

FpsReport fps_report(InferenceSession& session, const std::vector<embed::MultiViewFrame>& episode, std::size_t n) {
  if (n == 0) throw ContractError("fps_report: need at least one frame");
  if (episode.empty()) throw ContractError("fps_report: empty episode");
  using clock = std::chrono::steady_clock;
  std::vector<double> latencies;
  latencies.reserve(n);
  session.reset();
  const auto start = clock::now();
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && i % episode.size() == 0) session.reset();
    const auto t0 = clock::now();
    session.feed(episode[i % episode.size()]);
    latencies.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
  }
  FpsReport r;
  r.frames = n;
  r.seconds = std::chrono::duration<double>(clock::now() - start).count();
  r.fps = static_cast<double>(n) / std::max(r.seconds, 1e-12);
  for (double l : latencies) r.mean_latency_ms += l;
  r.mean_latency_ms /= static_cast<double>(n);
  std::sort(latencies.begin(), latencies.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  r.p95_latency_ms = latencies[std::min(n, std::max<std::size_t>(rank, 1)) - 1];
  return r;
}

std::string format_step(const StepOutput& step, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << step.t << std::fixed << std::setprecision(6);
  for (double p : step.probs) out << '\t' << p;
  out << '\t' << (step.label < class_names.size() ? class_names[step.label] : std::to_string(step.label));
  return out.str();
}

}  // namespace cem::runtime
