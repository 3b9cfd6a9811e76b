#include "pcc/cluster_engine.hpp"
#include "pcc/config.hpp"
#include "pcc/dataset.hpp"
#include "pcc/errors.hpp"
#include "pcc/pipeline.hpp"
#include "pcc/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

extern char** environ;

namespace fs = std::filesystem;
using namespace pcc;

namespace {

void write_report(const pseudo::IoUReport& report, const std::vector<std::string>& classes, const std::string& out) {
  std::cout << report.to_table(classes);
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream(out) << report.to_json(classes).dump(2) << '\n';
  }
}

void apply_worker_flags(config::RunConfig& cfg, bool deterministic, const std::optional<int>& workers) {
  if (workers) {
    cfg.workers = *workers;
    cfg.deterministic = false;
  }
  if (deterministic) cfg.deterministic = true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pseudo-label generation with cluster-conditioned vision transformers"};
  app.require_subcommand(1);

  // cluster
  auto* cluster = app.add_subcommand("cluster", "Group category names into cluster tags with an LLM");
  std::string categories_path, backend = "mock", cluster_out, mock_script, model_id = "mock-model";
  std::string cache_path = ".pcc_cache/llm_cache.jsonl", gen_template, refine_template;
  int window = 2, max_iter = 10, retries = 2;
  double timeout = 60.0;
  bool clear_cache = false;
  cluster->add_option("--categories", categories_path, "Category list, one name per line")->required();
  cluster->add_option("--backend", backend, "mock or live")->check(CLI::IsMember({"mock", "live"}));
  cluster->add_option("--out", cluster_out, "Cluster map output (JSON)")->required();
  cluster->add_option("--mock-script", mock_script, "Scripted responses for the mock backend");
  cluster->add_option("--model-id", model_id, "Model identifier sent to the live endpoint");
  cluster->add_option("--cache", cache_path, "Response cache file for the live backend");
  cluster->add_option("--gen-template", gen_template, "Generation prompt template file");
  cluster->add_option("--refine-template", refine_template, "Refinement prompt template file");
  cluster->add_option("--stability-window", window, "Stop once this many iterates agree");
  cluster->add_option("--max-iterations", max_iter, "Refinement budget");
  cluster->add_option("--max-retries", retries, "Retries per live request");
  cluster->add_option("--timeout", timeout, "Seconds per live request");
  cluster->add_flag("--clear-cache", clear_cache, "Drop cached responses for --model-id first");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the patch classifier from image-level labels");
  std::string train_config;
  bool resume = false;
  train_cmd->add_option("--config", train_config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_flag("--resume", resume, "Continue from the latest checkpoint");
  bool deterministic = false;
  std::optional<int> workers;
  train_cmd->add_flag("--deterministic", deterministic, "Single worker, fixed order");
  train_cmd->add_option("--workers", workers, "Parallel gradient workers when not deterministic");

  // pseudo
  auto* pseudo_cmd = app.add_subcommand("pseudo", "Write pseudo-label PNGs from a checkpoint");
  std::string checkpoint, split = "train", pseudo_dataset, pseudo_out;
  bool use_crf = false;
  pseudo_cmd->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  pseudo_cmd->add_option("--split", split, "Dataset split");
  pseudo_cmd->add_option("--dataset", pseudo_dataset, "Manifest or VOC-style root (default: from the checkpoint)");
  pseudo_cmd->add_option("--out", pseudo_out, "Output directory (default: <outputs>/pseudo_labels)");
  pseudo_cmd->add_flag("--crf", use_crf, "Refine with the dense CRF");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "mIoU of label PNGs against ground truth");
  std::string pred_dir, gt_dir, eval_out;
  std::optional<int> num_classes;
  eval_cmd->add_option("--pred", pred_dir, "Predicted label PNGs")->required();
  eval_cmd->add_option("--gt", gt_dir, "Ground-truth label PNGs with matching names")->required();
  eval_cmd->add_option("--num-classes", num_classes, "Class count including background");
  eval_cmd->add_option("--out", eval_out, "Also write the report as JSON");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic shapes dataset");
  std::string spec_path, synth_out;
  synth->add_option("--spec", spec_path, "Synthetic spec (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory (default: data/<spec name>)");

  // run
  auto* run = app.add_subcommand("run", "Dataset, cluster, train, pseudo-label and evaluate end to end");
  std::string run_config;
  run->add_option("--config", run_config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  run->add_flag("--deterministic", deterministic, "Single worker, fixed order");
  run->add_option("--workers", workers, "Parallel gradient workers when not deterministic");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cluster) {
      config::LlmSettings s;
      s.backend = backend;
      s.model_id = model_id;
      s.mock_script = mock_script;
      s.cache_path = cache_path;
      s.gen_template = gen_template;
      s.refine_template = refine_template;
      s.stability_window = window;
      s.max_iterations = max_iter;
      s.max_retries = retries;
      s.request_timeout = timeout;
      if (clear_cache && backend == "live") {
        llm::ResponseCache(cache_path).clear(model_id);
      }
      const auto assignment = pipeline::cluster_categories(clusters::CategoryList::load(categories_path), s);
      assignment.save(cluster_out);
      std::cout << assignment.to_text();
      std::cout << "# " << assignment.size() << " tags, " << assignment.iteration_index << " refinements"
                << (assignment.stalled ? ", stalled" : "") << " -> " << cluster_out << '\n';
    } else if (*train_cmd) {
      auto cfg = config::load_run_config(train_config, environ);
      apply_worker_flags(cfg, deterministic, workers);
      const auto manifest = pipeline::load_dataset(cfg.paths.dataset, std::nullopt);
      std::optional<clusters::ClusterAssignment> assignment;
      if (cfg.fusion_mode == fusion::FusionMode::cluster_token) {
        if (cfg.paths.cluster_map.empty() || !fs::exists(cfg.paths.cluster_map)) {
          throw ConfigError("fusion_mode cluster_token needs paths.cluster_map; run `pcc cluster` first");
        }
        assignment = clusters::ClusterAssignment::load(cfg.paths.cluster_map);
      }
      train::TrainOptions opts;
      opts.resume = resume;
      opts.on_record = [](const nlohmann::json& r) {
        if (r.at("type") == "epoch") std::cout << r.dump() << '\n' << std::flush;
      };
      const auto result = train::train(cfg, manifest, assignment, opts);
      std::cout << "checkpoint: " << result.checkpoint.string() << "\nmetrics: " << result.metrics_log.string()
                << '\n';
    } else if (*pseudo_cmd) {
      const auto loaded = train::load_training_checkpoint(checkpoint);
      const fs::path dataset = pseudo_dataset.empty() ? fs::path(loaded.config.paths.dataset) : fs::path(pseudo_dataset);
      const auto manifest = pipeline::load_dataset(dataset, split);
      const fs::path out = pseudo_out.empty() ? fs::path(loaded.config.paths.outputs) / "pseudo_labels" : fs::path(pseudo_out);
      const auto crf = use_crf ? std::optional(loaded.config.crf_config) : std::nullopt;
      const auto result = pipeline::generate_pseudo_labels(loaded.model, manifest, out, crf);
      std::cout << "wrote " << result.labels.size() << " pseudo-labels to " << out.string() << '\n';
      if (manifest.has_masks()) {
        const auto report = pipeline::evaluate_against_masks(
            result.labels, manifest, static_cast<int>(loaded.model.vocabulary().size()));
        write_report(report, loaded.model.vocabulary().classes, {});
      }
    } else if (*eval_cmd) {
      write_report(pipeline::evaluate_directories(pred_dir, gt_dir, num_classes), {}, eval_out);
    } else if (*synth) {
      const auto spec = data::load_synthetic_spec(spec_path);
      const fs::path out = synth_out.empty() ? fs::path("data") / fs::path(spec_path).stem() : fs::path(synth_out);
      const auto manifest = data::generate_synthetic(spec, out);
      std::cout << "wrote " << manifest.entries.size() << " images to " << out.string() << '\n';
    } else if (*run) {
      auto cfg = config::load_run_config(run_config, environ);
      apply_worker_flags(cfg, deterministic, workers);
      const auto result = pipeline::run_pipeline(cfg, &std::cout);
      for (const auto& r : result.runs) {
        std::cout << "\n[" << r.fusion_mode << "]\n" << (r.iou ? r.iou->to_table(r.classes) : "no ground truth\n");
      }
      if (result.runs.size() > 1) std::cout << '\n' << pipeline::comparison_table(result.runs);
      std::cout << "reports in " << result.output_dir.string() << '\n';
    }
  } catch (const pcc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
