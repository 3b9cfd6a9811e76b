#pragma once

#include "pcc/classification_head.hpp"
#include "pcc/vit_encoder.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::pseudo {

/// Per-pixel class scores, stored (y, x, class) row-major.
struct DenseScores {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> data;

  DenseScores() = default;
  DenseScores(int h, int w, int c) : height(h), width(w), classes(c), data(static_cast<std::size_t>(h) * w * c, 0.0) {}

  [[nodiscard]] double& at(int y, int x, int c) { return data[index(y, x, c)]; }
  [[nodiscard]] double at(int y, int x, int c) const { return data[index(y, x, c)]; }
  [[nodiscard]] std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

 private:
  [[nodiscard]] std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * classes + c;
  }
};

struct PseudoLabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major
  std::string source_id;

  PseudoLabelMap() = default;
  PseudoLabelMap(int h, int w, std::string id = {})
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0), source_id(std::move(id)) {}

  [[nodiscard]] int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

/// Mean-field dense CRF with a Potts model over a Gaussian spatial kernel and
/// a bilateral (position, colour) kernel. Colour distances use 0..255 units.
struct CRFConfig {
  int iterations = 5;
  double spatial_weight = 3.0;
  double bilateral_weight = 5.0;
  double spatial_sigma = 3.0;
  double bilateral_sigma_xy = 49.0;
  double bilateral_sigma_rgb = 13.0;

  void validate() const;
  friend bool operator==(const CRFConfig&, const CRFConfig&) = default;
};

void to_json(nlohmann::json& j, const CRFConfig& c);
void from_json(const nlohmann::json& j, CRFConfig& c);

struct IoUReport {
  std::vector<std::optional<double>> per_class_iou;
  double mean_iou = 0.0;
  std::vector<std::vector<std::uint64_t>> confusion;  // [gt][pred]

  [[nodiscard]] nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
  [[nodiscard]] std::string to_table(const std::vector<std::string>& class_names = {}) const;
};

/// Bilinear resize of the square patch grid (align-corners = false).
DenseScores upsample_predictions(const head::PatchPredictions& Z, int target_h, int target_w);

/// Per-pixel argmax; ties go to the lowest class index.
PseudoLabelMap argmax_labels(const DenseScores& dense, std::string source_id = {});

/// Mean-field refinement with exact dense pairwise sums. Zero pairwise weights
/// return the input unchanged.
DenseScores crf_refine(const DenseScores& dense, const vit::ImageSample& image, const CRFConfig& cfg);

/// Confusion-matrix IoU. Ground-truth pixels equal to ignore_index are skipped;
/// classes absent from both maps are undefined and left out of the mean.
IoUReport compute_miou(const PseudoLabelMap& pred, const PseudoLabelMap& gt, int classes,
                       std::optional<int> ignore_index = std::nullopt);

/// Accumulates confusion over many images before computing IoU.
class IoUAccumulator {
 public:
  IoUAccumulator(int classes, std::optional<int> ignore_index);
  void add(const PseudoLabelMap& pred, const PseudoLabelMap& gt);
  [[nodiscard]] IoUReport report() const;

 private:
  int classes_;
  std::optional<int> ignore_;
  std::vector<std::vector<std::uint64_t>> confusion_;
};

}  // namespace pcc::pseudo
