#include "cemformer/embed.hpp"

#include <cmath>
#include <string>

#include "cemformer/error.hpp"
#include "cemformer/kernel/init.hpp"
#include "cemformer/kernel/ops.hpp"

namespace cem::embed {

using kernel::Tensor;

void PatchConfig::validate(const ViewGeometry& g) const {
  if (patch == 0) throw ConfigError("patch size must be at least 1");
  if (g.channels == 0 || g.height == 0 || g.width == 0)
    throw ConfigError("empty view geometry");
  if (g.height % patch != 0 || g.width % patch != 0)
    throw ConfigError("view " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                      " is not divisible by patch size " + std::to_string(patch));
}

std::size_t PatchConfig::grid_rows(const ViewGeometry& g) const {
  validate(g);
  return g.height / patch;
}

std::size_t PatchConfig::grid_cols(const ViewGeometry& g) const {
  validate(g);
  return g.width / patch;
}

std::size_t PatchConfig::tokens(const ViewGeometry& g) const { return grid_rows(g) * grid_cols(g); }

std::size_t PatchConfig::patch_width(const ViewGeometry& g) const { return patch * patch * g.channels; }

void validate_frame(const MultiViewFrame& frame, const PatchConfig& config) {
  if (frame.views.empty()) throw ContractError("frame has no views");
  for (std::size_t m = 0; m < frame.views.size(); ++m) {
    const auto& img = frame.views[m];
    config.validate({img.channels, img.height, img.width});
    if (img.pixels.size() != img.channels * img.height * img.width)
      throw ContractError("view " + std::to_string(m) + " pixel buffer does not match its geometry");
    for (float v : img.pixels)
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
        throw ContractError("view " + std::to_string(m) + " has a pixel outside [0, 1]");
  }
}

Tensor patchify(const Image& image, const PatchConfig& config) {
  const ViewGeometry g{image.channels, image.height, image.width};
  const std::size_t p = config.patch;
  const std::size_t rows = config.grid_rows(g), cols = config.grid_cols(g);
  const std::size_t width = config.patch_width(g);
  Tensor out = Tensor::zeros({rows * cols, width});
  auto dst = out.mutable_values();
  for (std::size_t gy = 0; gy < rows; ++gy)
    for (std::size_t gx = 0; gx < cols; ++gx) {
      double* row = dst.data() + (gy * cols + gx) * width;
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t c = 0; c < g.channels; ++c)
            row[(py * p + px) * g.channels + c] = image.at(c, gy * p + py, gx * p + px);
    }
  return out;
}

Image unpatchify(const Tensor& patches, const ViewGeometry& geometry, const PatchConfig& config) {
  const std::size_t p = config.patch;
  const std::size_t rows = config.grid_rows(geometry), cols = config.grid_cols(geometry);
  const std::size_t width = config.patch_width(geometry);
  if (patches.rank() != 2 || patches.rows() != rows * cols || patches.cols() != width)
    throw DimensionError("unpatchify: patch matrix " + kernel::to_string(patches.shape()) +
                         " does not match the view geometry");
  Image img{geometry.channels, geometry.height, geometry.width,
            std::vector<float>(geometry.channels * geometry.height * geometry.width)};
  auto src = patches.values();
  for (std::size_t gy = 0; gy < rows; ++gy)
    for (std::size_t gx = 0; gx < cols; ++gx) {
      const double* row = src.data() + (gy * cols + gx) * width;
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t c = 0; c < geometry.channels; ++c)
            img.at(c, gy * p + py, gx * p + px) =
                static_cast<float>(row[(py * p + px) * geometry.channels + c]);
    }
  return img;
}

std::size_t ViewEmbedder::view_parameters(std::size_t m) const {
  return projection.at(m).size() + position.at(m).size();
}

ViewEmbedder ViewEmbedder::initialize(std::span<const ViewGeometry> views, const PatchConfig& config,
                                      std::size_t d_model, std::mt19937_64& rng) {
  if (views.empty()) throw ConfigError("at least one view is required");
  ViewEmbedder e;
  for (const auto& g : views) {
    e.projection.push_back(kernel::xavier_uniform(config.patch_width(g), d_model, rng));
    e.position.push_back(kernel::normal({config.tokens(g), d_model}, 0.02, rng));
  }
  return e;
}

Tensor embed_view(kernel::Tape& tape, const Tensor& patches, const ViewEmbedder& embedder, std::size_t m) {
  if (m >= embedder.views())
    throw IndexError("embed_view: view " + std::to_string(m) + " of " + std::to_string(embedder.views()));
  const auto& proj = embedder.projection[m];
  if (patches.rank() != 2 || patches.cols() != proj.rows())
    throw DimensionError("embed_view: patches " + kernel::to_string(patches.shape()) +
                         " do not fit projection " + kernel::to_string(proj.shape()));
  return kernel::add(tape, kernel::matmul(tape, patches, proj), embedder.position[m]);
}

Tensor concat_views(kernel::Tape& tape, std::span<const Tensor> view_tokens) {
  return kernel::concat_tokens(tape, view_tokens);
}

Tensor embed_frame(kernel::Tape& tape, const MultiViewFrame& frame, const PatchConfig& config,
                   const ViewEmbedder& embedder) {
  if (frame.views.size() != embedder.views())
    throw ContractError("frame has " + std::to_string(frame.views.size()) + " views, model expects " +
                        std::to_string(embedder.views()));
  std::vector<Tensor> tokens;
  tokens.reserve(frame.views.size());
  for (std::size_t m = 0; m < frame.views.size(); ++m)
    tokens.push_back(embed_view(tape, patchify(frame.views[m], config), embedder, m));
  return concat_views(tape, tokens);
}

}  // namespace cem::embed
