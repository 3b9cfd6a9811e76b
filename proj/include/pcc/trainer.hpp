#pragma once

#include "pcc/config.hpp"
#include "pcc/dataset.hpp"
#include "pcc/model.hpp"
#include "pcc/pseudo_labeling.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

namespace pcc::train {

model::ModelConfig model_config(const config::RunConfig& cfg);

/// First and second moment estimates, keyed like the parameters.
struct AdamState {
  std::map<std::string, Mat> m;
  std::map<std::string, Mat> v;
  std::int64_t step = 0;

  /// In-place update of `params` from the batch-mean gradients.
  void apply(ParameterSet& params, const Gradients& grads, const config::OptimizerConfig& opt, double lr);
};

struct TrainOptions {
  /// Continue from the latest checkpoint in cfg.paths.checkpoints when one exists.
  bool resume = false;
  /// Stop once this many epochs (counted from zero) are complete.
  std::optional<int> stop_after_epochs;
  /// Called for every metrics record after it is written.
  std::function<void(const nlohmann::json&)> on_record;
};

struct TrainResult {
  model::Model model;
  int epochs_completed = 0;
  std::vector<double> epoch_losses;  // epochs run by this call only
  std::optional<double> last_miou;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_log;
};

/// Mini-batch Adam on the mean MCE loss. Writes <checkpoints>/latest.ckpt
/// after every epoch and appends records to <checkpoints>/metrics.jsonl.
/// Throws DivergenceError on a non-finite loss.
TrainResult train(const config::RunConfig& cfg, const data::DatasetManifest& manifest,
                  const std::optional<clusters::ClusterAssignment>& assignment, const TrainOptions& opts = {});

std::filesystem::path latest_checkpoint_path(const config::RunConfig& cfg);

struct LoadedCheckpoint {
  config::RunConfig config;
  model::Model model;
  AdamState adam;
  int epochs_completed = 0;
};

void save_training_checkpoint(const std::filesystem::path& path, const config::RunConfig& cfg,
                              const model::Model& model, const AdamState& adam, int epochs_completed);
LoadedCheckpoint load_training_checkpoint(const std::filesystem::path& path);

/// Upsample the patch predictions to the image size, optionally CRF-refine,
/// and take the per-pixel argmax.
pseudo::PseudoLabelMap pseudo_label(const model::Model& model, const vit::ImageSample& image,
                                    const std::optional<pseudo::CRFConfig>& crf = std::nullopt);

/// Pseudo-label mIoU of `model` over samples with matching ground truth.
pseudo::IoUReport evaluate(const model::Model& model, const std::vector<vit::ImageSample>& images,
                           const std::vector<pseudo::PseudoLabelMap>& masks,
                           const std::optional<pseudo::CRFConfig>& crf = std::nullopt);

}  // namespace pcc::train
