#pragma once

#include "pcc/classification_head.hpp"
#include "pcc/cluster_engine.hpp"
#include "pcc/cluster_fusion.hpp"
#include "pcc/dataset.hpp"
#include "pcc/pseudo_labeling.hpp"
#include "pcc/vit_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::config {

/// `epochs` < 0 means "for the remaining epochs".
struct LrPhase {
  int epochs = -1;
  double lr = 1e-4;
  friend bool operator==(const LrPhase&, const LrPhase&) = default;
};

struct OptimizerConfig {
  std::string kind = "adam";
  std::vector<LrPhase> lr_schedule{{2, 1e-3}, {-1, 1e-4}};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  [[nodiscard]] double lr_at(int epoch) const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct Paths {
  std::string dataset;      // manifest.json
  std::string cluster_map;  // cluster map produced by `pcc cluster`
  std::string checkpoints = "runs/checkpoints";
  std::string outputs = "runs/outputs";
  friend bool operator==(const Paths&, const Paths&) = default;
};

/// How the cluster stage of `pcc run` reaches an LLM.
struct LlmSettings {
  std::string backend = "mock";  // mock | live
  std::string model_id = "mock-model";
  std::string mock_script;
  std::string cache_path = ".pcc_cache/llm_cache.jsonl";
  std::string gen_template;     // optional template files
  std::string refine_template;
  int stability_window = 2;
  int max_iterations = 10;
  int max_retries = 2;
  double request_timeout = 60.0;
  friend bool operator==(const LlmSettings&, const LlmSettings&) = default;
};

struct RunConfig {
  vit::EncoderConfig encoder;
  int cluster_dim = 32;
  fusion::FusionMode fusion_mode = fusion::FusionMode::cluster_token;
  head::TopKConfig topk;
  /// Add each refiner pass's input to its output.
  bool refiner_residual = false;
  bool loss_includes_background = true;
  OptimizerConfig optimizer;
  int batch_size = 8;
  int max_epochs = 30;
  std::uint64_t seed = 0;
  int workers = 1;
  bool deterministic = true;
  /// Compute pseudo-label mIoU every N epochs during training (0 = never).
  int eval_every = 1;
  /// Training-time augmentation. Reserved: only "none" is accepted.
  std::string augmentation = "none";
  bool crf = false;
  pseudo::CRFConfig crf_config;
  Paths paths;
  std::optional<LlmSettings> llm;
  /// Generated into the dataset directory by `pcc run` when the manifest is missing.
  std::optional<data::SyntheticSpec> synthetic;
  /// `pcc run` trains once per listed fusion mode and writes a comparison.
  std::vector<std::string> ablation_modes;

  /// Range checks; throws ConfigError.
  void validate() const;
  [[nodiscard]] vit::EncoderConfig seeded_encoder() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Applies PCC_<KEY>[__<KEY>...] environment overrides, e.g.
/// PCC_MAX_EPOCHS=3 or PCC_ENCODER__DEPTH=2. Values are parsed as JSON when
/// possible, otherwise taken as strings.
void apply_env_overrides(nlohmann::json& j, char** envp);

/// Loads a config file, applying environment overrides when `envp` is given.
RunConfig load_run_config(const std::filesystem::path& path, char** envp = nullptr);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace pcc::config
