#pragma once

#include "pcc/autodiff.hpp"
#include "pcc/parameters.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::vit {

/// Geometry and width of the patch encoder. Square inputs only.
struct EncoderConfig {
  int image_side = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] int grid_side() const { return image_side / patch_size; }
  [[nodiscard]] int tokens() const { return grid_side() * grid_side(); }
  [[nodiscard]] int patch_dim() const { return patch_size * patch_size * 3; }
  [[nodiscard]] int mlp_hidden() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// RGB image stored row-major as height x (width * 3), channel-interleaved,
/// values in [0, 1].
struct ImageSample {
  Mat pixels;
  std::set<std::string> labels;
  std::string identifier;

  [[nodiscard]] int height() const { return static_cast<int>(pixels.rows()); }
  [[nodiscard]] int width() const { return static_cast<int>(pixels.cols() / 3); }
  [[nodiscard]] double at(int y, int x, int channel) const { return pixels(y, x * 3 + channel); }
};

struct PatchTokens {
  Mat values;  // tokens x embed_dim
  int grid_side = 0;
};

/// Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains; all
/// names live under "encoder.".
ParameterSet init_params(const EncoderConfig& cfg);

/// Row-major flat indices mapping an image matrix onto the (tokens x patch_dim)
/// patch matrix, patches in raster order and pixels (dy, dx, channel) inside.
std::vector<Eigen::Index> patch_index_map(const EncoderConfig& cfg);

/// Differentiable forward pass on a tape. `pixels` is the image matrix.
ad::Var encode(ParameterBinder& params, ad::Var pixels, const EncoderConfig& cfg);

/// Evaluation-mode forward pass. Throws ShapeError on geometry mismatch.
PatchTokens encode(const ImageSample& x, const EncoderConfig& cfg, const ParameterSet& params);

}  // namespace pcc::vit
