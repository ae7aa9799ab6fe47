#pragma once

// Multi-view patch embeddings: each view is cut into P x P patches, projected
// with its own matrix, offset by its own learned position table, and the
// per-view token blocks are stacked into one sequence.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "cemformer/kernel/tape.hpp"
#include "cemformer/kernel/tensor.hpp"

namespace cem::embed {

/// One camera image stored channel-major (C x H x W), pixels in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }

  bool operator==(const Image&) const = default;
};

/// All views observed at one timestep.
struct MultiViewFrame {
  std::vector<Image> views;
  bool operator==(const MultiViewFrame&) const = default;
};

struct ViewGeometry {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  bool operator==(const ViewGeometry&) const = default;
};

struct PatchConfig {
  std::size_t patch = 8;

  /// Patches along each axis; throws ConfigError when not divisible.
  std::size_t grid_rows(const ViewGeometry& g) const;
  std::size_t grid_cols(const ViewGeometry& g) const;
  /// N_m = H * W / P^2
  std::size_t tokens(const ViewGeometry& g) const;
  /// P^2 * C
  std::size_t patch_width(const ViewGeometry& g) const;
  void validate(const ViewGeometry& g) const;
  bool operator==(const PatchConfig&) const = default;
};

/// Checks M >= 1, pixel range and finiteness, and divisibility by P.
void validate_frame(const MultiViewFrame& frame, const PatchConfig& config);

/// [N x P^2 C] matrix. Patches run row-major over the grid; inside a patch,
/// pixels run row-major with channels innermost.
kernel::Tensor patchify(const Image& image, const PatchConfig& config);

/// Inverse of patchify for the given geometry.
Image unpatchify(const kernel::Tensor& patches, const ViewGeometry& geometry, const PatchConfig& config);

/// Per-view projection E_m [P^2 C x D] and position table E_m^pos [N_m x D].
/// Views never share parameters.
struct ViewEmbedder {
  std::vector<kernel::Tensor> projection;
  std::vector<kernel::Tensor> position;

  std::size_t views() const { return projection.size(); }
  std::size_t d_model() const { return projection.empty() ? 0 : projection.front().cols(); }
  /// Parameter count of view m alone.
  std::size_t view_parameters(std::size_t m) const;

  /// Xavier-uniform projections and N(0, 0.02^2) position tables.
  static ViewEmbedder initialize(std::span<const ViewGeometry> views, const PatchConfig& config,
                                 std::size_t d_model, std::mt19937_64& rng);
};

/// patches * E_m + E_m^pos
kernel::Tensor embed_view(kernel::Tape& tape, const kernel::Tensor& patches, const ViewEmbedder& embedder,
                          std::size_t m);

/// z0 = [x_1; x_2; ...; x_M]
kernel::Tensor concat_views(kernel::Tape& tape, std::span<const kernel::Tensor> view_tokens);

/// Full path from raw frame to z0.
kernel::Tensor embed_frame(kernel::Tape& tape, const MultiViewFrame& frame, const PatchConfig& config,
                           const ViewEmbedder& embedder);

}  // namespace cem::embed
