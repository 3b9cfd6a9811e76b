#pragma once

#include "pcc/autodiff.hpp"
#include "pcc/classification_head.hpp"
#include "pcc/cluster_engine.hpp"
#include "pcc/cluster_fusion.hpp"
#include "pcc/parameters.hpp"
#include "pcc/vit_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

namespace pcc::model {

struct ModelConfig {
  vit::EncoderConfig encoder;
  int cluster_dim = 32;
  fusion::FusionMode fusion_mode = fusion::FusionMode::cluster_token;
  head::TopKConfig topk;
  head::LossOptions loss;
  bool refiner_residual = false;

  /// e + H, or e when nothing is appended.
  [[nodiscard]] int token_width() const;
};

/// Encoder, fusion, refiner and classifier parameters plus everything needed
/// to interpret them.
class Model {
 public:
  Model(ModelConfig cfg, head::ClassVocabulary vocab, std::optional<clusters::ClusterAssignment> assignment,
        ParameterSet params);

  /// Fresh parameters; encoder seed is taken from cfg.encoder.seed.
  static Model create(const ModelConfig& cfg, head::ClassVocabulary vocab,
                      std::optional<clusters::ClusterAssignment> assignment);

  struct Trace {
    ad::Var loss;  // empty when the sample has no labels
    ad::Var patch_predictions;
  };

  /// Full differentiable chain: encode, cluster token, fuse, refine, classify,
  /// pool, loss. Labels drive both the cluster vector and the loss target.
  Trace forward(ParameterBinder& params, const vit::ImageSample& x) const;

  /// Loss and parameter gradients for one sample.
  double loss_and_gradients(const vit::ImageSample& x, Gradients& grads) const;
  /// Inference-only patch predictions (no tape gradients).
  [[nodiscard]] head::PatchPredictions predict(const vit::ImageSample& x) const;

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const head::ClassVocabulary& vocabulary() const { return vocab_; }
  [[nodiscard]] const std::optional<clusters::ClusterAssignment>& assignment() const { return assignment_; }
  [[nodiscard]] const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

 private:
  ad::Var appended_token(ParameterBinder& params, const vit::ImageSample& x) const;

  ModelConfig cfg_;
  head::ClassVocabulary vocab_;
  std::optional<clusters::ClusterAssignment> assignment_;
  ParameterSet params_;
};

struct ForwardResult {
  double loss = 0.0;
  head::PatchPredictions predictions;
};

/// Evaluation of the training objective for one labelled image.
ForwardResult forward_loss(const vit::ImageSample& x, const Model& model);

/// Single-file checkpoint: a JSON header (free-form metadata plus a tensor
/// table) followed by raw little-endian doubles.
struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, Mat> tensors;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace pcc::model
