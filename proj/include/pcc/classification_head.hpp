#pragma once

#include "pcc/autodiff.hpp"
#include "pcc/cluster_engine.hpp"
#include "pcc/cluster_fusion.hpp"
#include "pcc/parameters.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace pcc::head {

/// Class names with background at index 0.
struct ClassVocabulary {
  std::vector<std::string> classes;

  static constexpr const char* kBackground = "background";
  static ClassVocabulary from_categories(const clusters::CategoryList& categories);
  [[nodiscard]] std::size_t size() const { return classes.size(); }
  /// Throws ConfigError for unknown names.
  [[nodiscard]] int index_of(const std::string& name) const;
  [[nodiscard]] clusters::CategoryList foreground() const;
};

struct ClassifierWeights {
  Mat W;  // (e + H) x C
};

/// Row-stochastic patch class distributions, tokens x C.
struct PatchPredictions {
  Mat Z;
  int grid_side = 0;
};

/// Image-level targets; y[0] (background) is always 1.
struct ImageLabelVector {
  std::vector<std::uint8_t> y;

  static ImageLabelVector from_labels(const std::set<std::string>& labels, const ClassVocabulary& vocab);
};

struct TopKConfig {
  int k = 6;
  friend bool operator==(const TopKConfig&, const TopKConfig&) = default;
};

struct LossOptions {
  double epsilon = 1e-7;
  /// Average the background term into the loss (otherwise over foreground only).
  bool include_background = true;
};

inline constexpr const char* kClassifierName = "head.W";

ParameterSet init_classifier_params(int input_dim, std::size_t classes, std::uint64_t seed);

/// Z = softmax(F_out W), row-wise.
PatchPredictions classify_patches(const fusion::FusedTokens& tokens, const ClassifierWeights& W);
ad::Var classify_patches(ad::Var tokens, ad::Var W);

/// Per class, the mean of the k largest patch scores (1 x C). Ties go to the
/// lower patch index. Throws ShapeError if k is outside [1, tokens].
Mat topk_pool(const PatchPredictions& Z, const TopKConfig& cfg);
ad::Var topk_pool(ad::Var Z, const TopKConfig& cfg);

/// Indices of the k selected patches for one column of Z.
std::vector<Eigen::Index> topk_indices(const Mat& Z, Eigen::Index column, int k);

/// Class-averaged binary cross-entropy with p clipped to [eps, 1 - eps].
double mce_loss(const Mat& p, const ImageLabelVector& y, const LossOptions& opts = {});
ad::Var mce_loss(ad::Var p, const ImageLabelVector& y, const LossOptions& opts = {});

}  // namespace pcc::head
