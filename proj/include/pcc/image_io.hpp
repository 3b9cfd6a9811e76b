#pragma once

#include "pcc/pseudo_labeling.hpp"
#include "pcc/vit_encoder.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>

namespace pcc::io {

/// Reads any OpenCV-supported colour image as RGB in [0, 1], optionally
/// resized (bilinear) to side x side.
vit::ImageSample load_rgb(const std::filesystem::path& path, std::optional<int> side = std::nullopt);
void save_rgb_png(const std::filesystem::path& path, const vit::ImageSample& image);

/// Reads a single-channel label PNG: palette indices for palette images, raw
/// values for 8-bit greyscale. Optionally nearest-neighbour resized.
pseudo::PseudoLabelMap read_label_png(const std::filesystem::path& path,
                                      std::optional<int> side = std::nullopt);
/// Writes an 8-bit palette PNG using the PASCAL VOC colour map.
void write_label_png(const std::filesystem::path& path, const pseudo::PseudoLabelMap& labels);

/// The 256-entry PASCAL VOC colour map.
std::array<std::array<std::uint8_t, 3>, 256> voc_colormap();

pseudo::PseudoLabelMap resize_nearest(const pseudo::PseudoLabelMap& labels, int height, int width);

}  // namespace pcc::io
