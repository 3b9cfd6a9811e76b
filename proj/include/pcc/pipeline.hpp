#pragma once

#include "pcc/cluster_engine.hpp"
#include "pcc/config.hpp"
#include "pcc/dataset.hpp"
#include "pcc/llm_gateway.hpp"
#include "pcc/model.hpp"
#include "pcc/pseudo_labeling.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::pipeline {

/// Mock gateways replay settings.mock_script; live ones read LLM_ENDPOINT and
/// LLM_API_KEY and cache under settings.cache_path.
std::unique_ptr<llm::LlmGateway> make_gateway(const config::LlmSettings& settings);

/// Runs the self-refining clustering loop over `categories`.
clusters::ClusterAssignment cluster_categories(const clusters::CategoryList& categories,
                                               const config::LlmSettings& settings);

/// Accepts a manifest file, a directory holding manifest.json, or a VOC-style
/// root. Throws ConfigError when the split does not match.
data::DatasetManifest load_dataset(const std::filesystem::path& path, const std::optional<std::string>& split);

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct PseudoResult {
  std::vector<pseudo::PseudoLabelMap> labels;
  std::vector<StageTiming> timings;  // "pseudo" and, when refined, "crf"
};

/// Pseudo-labels for every manifest entry at network resolution, written as
/// palette PNGs <out_dir>/<id>.png when out_dir is non-empty.
PseudoResult generate_pseudo_labels(const model::Model& model, const data::DatasetManifest& manifest,
                                    const std::filesystem::path& out_dir,
                                    const std::optional<pseudo::CRFConfig>& crf);

/// mIoU of pseudo-labels against the manifest's masks (resized to match).
pseudo::IoUReport evaluate_against_masks(const std::vector<pseudo::PseudoLabelMap>& labels,
                                         const data::DatasetManifest& manifest, int classes);

/// Pairs <pred>/<id>.png with <gt>/<id>.png. Without `classes` the count is
/// inferred from the largest label seen (255 is ignored).
pseudo::IoUReport evaluate_directories(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                                       std::optional<int> classes = std::nullopt);

struct RunReport {
  std::string fusion_mode;
  bool crf = false;
  std::optional<pseudo::IoUReport> iou;  // absent when the split has no masks
  std::vector<std::string> classes;
  std::vector<double> epoch_losses;
  std::vector<StageTiming> timings;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct PipelineResult {
  std::vector<RunReport> runs;
  std::vector<StageTiming> shared_timings;  // dataset and cluster stages
  std::filesystem::path output_dir;
};

/// Dataset (generated when missing and a synthetic spec is configured),
/// cluster, train, pseudo, optional CRF and evaluation. Listing several
/// ablation modes trains once per mode and writes comparison.txt.
PipelineResult run_pipeline(const config::RunConfig& cfg, std::ostream* progress = nullptr);

/// Text table comparing the mIoU of several runs.
std::string comparison_table(const std::vector<RunReport>& runs);

}  // namespace pcc::pipeline
