#include "pcc/pipeline.hpp"

#include "pcc/errors.hpp"
#include "pcc/image_io.hpp"
#include "pcc/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pcc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kIgnoreLabel = 255;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  [[nodiscard]] double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IOError("cannot write " + path.string());
  out << text;
}

json timings_json(const std::vector<StageTiming>& timings) {
  json j = json::object();
  for (const auto& t : timings) j[t.stage] = t.seconds;
  return j;
}

void note(std::ostream* progress, const std::string& line) {
  if (progress != nullptr) *progress << line << '\n' << std::flush;
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

std::unique_ptr<llm::LlmGateway> make_gateway(const config::LlmSettings& settings) {
  if (settings.backend == "mock") {
    if (settings.mock_script.empty()) throw ConfigError("the mock backend needs llm.mock_script");
    llm::LLMBackend backend;
    backend.model_id = settings.model_id;
    return std::make_unique<llm::LlmGateway>(backend, llm::MockScript::load(settings.mock_script));
  }
  if (settings.backend == "live") {
    llm::LLMBackend backend = llm::LLMBackend::from_environment(settings.model_id);
    backend.max_retries = settings.max_retries;
    backend.request_timeout = settings.request_timeout;
    backend.validate();
    auto cache = std::make_shared<llm::ResponseCache>(settings.cache_path);
    return std::make_unique<llm::LlmGateway>(backend, cache);
  }
  throw ConfigError("unknown llm backend '" + settings.backend + "' (expected mock or live)");
}

clusters::ClusterAssignment cluster_categories(const clusters::CategoryList& categories,
                                               const config::LlmSettings& settings) {
  clusters::PromptTemplates templates = clusters::PromptTemplates::defaults();
  if (!settings.gen_template.empty()) templates.gen_template = read_text(settings.gen_template);
  if (!settings.refine_template.empty()) templates.refine_template = read_text(settings.refine_template);
  templates.validate();
  clusters::StopCondition stop{settings.stability_window, settings.max_iterations};
  auto gateway = make_gateway(settings);
  return clusters::generate_clusters(categories, *gateway, templates, stop);
}

data::DatasetManifest load_dataset(const fs::path& path, const std::optional<std::string>& split) {
  data::DatasetManifest manifest;
  if (fs::is_directory(path) && fs::exists(path / "JPEGImages")) {
    manifest = data::ingest_voc_style(path, split.value_or("train"));
  } else if (fs::is_directory(path)) {
    manifest = data::DatasetManifest::load(path / "manifest.json");
  } else {
    manifest = data::DatasetManifest::load(path);
  }
  if (split && manifest.split != *split) {
    throw ConfigError("dataset " + path.string() + " holds split '" + manifest.split + "', not '" + *split + "'");
  }
  return manifest;
}

PseudoResult generate_pseudo_labels(const model::Model& model, const data::DatasetManifest& manifest,
                                    const fs::path& out_dir, const std::optional<pseudo::CRFConfig>& crf) {
  PseudoResult result;
  const int side = model.config().encoder.image_side;
  const auto images = data::load_images(manifest, side);

  Stopwatch pseudo_clock;
  std::vector<pseudo::DenseScores> dense;
  dense.reserve(images.size());
  for (const auto& image : images) {
    dense.push_back(pseudo::upsample_predictions(model.predict(image), image.height(), image.width()));
  }
  double pseudo_seconds = pseudo_clock.seconds();

  if (crf) {
    Stopwatch crf_clock;
    for (std::size_t i = 0; i < images.size(); ++i) dense[i] = pseudo::crf_refine(dense[i], images[i], *crf);
    result.timings.push_back({"crf", crf_clock.seconds()});
  }

  Stopwatch write_clock;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    result.labels.push_back(pseudo::argmax_labels(dense[i], images[i].identifier));
    if (!out_dir.empty()) io::write_label_png(out_dir / (images[i].identifier + ".png"), result.labels.back());
  }
  pseudo_seconds += write_clock.seconds();
  result.timings.insert(result.timings.begin(), StageTiming{"pseudo", pseudo_seconds});
  return result;
}

pseudo::IoUReport evaluate_against_masks(const std::vector<pseudo::PseudoLabelMap>& labels,
                                         const data::DatasetManifest& manifest, int classes) {
  if (!manifest.has_masks()) throw ConfigError("split '" + manifest.split + "' has no ground-truth masks");
  if (labels.size() != manifest.entries.size()) throw ShapeError("pseudo-label count does not match the manifest");
  data::MaskAccessAudit::Phase phase("evaluation");
  pseudo::IoUAccumulator acc(classes, kIgnoreLabel);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pseudo::PseudoLabelMap gt = data::load_mask(*manifest.entries[i].mask);
    if (gt.height != labels[i].height || gt.width != labels[i].width) {
      gt = io::resize_nearest(gt, labels[i].height, labels[i].width);
    }
    acc.add(labels[i], gt);
  }
  return acc.report();
}

pseudo::IoUReport evaluate_directories(const fs::path& pred_dir, const fs::path& gt_dir, std::optional<int> classes) {
  if (!fs::is_directory(pred_dir)) throw IOError("prediction directory " + pred_dir.string() + " does not exist");
  if (!fs::is_directory(gt_dir)) throw IOError("ground-truth directory " + gt_dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IOError("no .png predictions in " + pred_dir.string());

  data::MaskAccessAudit::Phase phase("evaluation");
  std::vector<std::pair<pseudo::PseudoLabelMap, pseudo::PseudoLabelMap>> pairs;
  int max_label = 0;
  for (const auto& f : files) {
    const fs::path gt_path = gt_dir / f.filename();
    if (!fs::exists(gt_path)) throw FormatError("no ground truth for " + f.string() + " (expected " + gt_path.string() + ")");
    pseudo::PseudoLabelMap pred = io::read_label_png(f);
    pseudo::PseudoLabelMap gt = data::load_mask(gt_path);
    if (gt.height != pred.height || gt.width != pred.width) gt = io::resize_nearest(gt, pred.height, pred.width);
    for (int v : pred.labels) max_label = std::max(max_label, v == kIgnoreLabel ? 0 : v);
    for (int v : gt.labels) max_label = std::max(max_label, v == kIgnoreLabel ? 0 : v);
    pairs.emplace_back(std::move(pred), std::move(gt));
  }
  const int n = classes.value_or(max_label + 1);
  if (n <= max_label) {
    throw ConfigError("label " + std::to_string(max_label) + " exceeds --num-classes " + std::to_string(n));
  }
  pseudo::IoUAccumulator acc(n, kIgnoreLabel);
  for (const auto& [pred, gt] : pairs) acc.add(pred, gt);
  return acc.report();
}

json RunReport::to_json() const {
  json j = {{"fusion_mode", fusion_mode},
            {"crf", crf},
            {"classes", classes},
            {"epoch_losses", epoch_losses},
            {"timing_seconds", timings_json(timings)}};
  j["iou"] = iou ? iou->to_json(classes) : json(nullptr);
  j["mean_iou"] = iou ? json(iou->mean_iou) : json(nullptr);
  return j;
}

std::string comparison_table(const std::vector<RunReport>& runs) {
  std::ostringstream ss;
  ss << "fusion_mode     crf    mIoU     final_loss\n";
  for (const auto& r : runs) {
    std::string mode = r.fusion_mode;
    mode.resize(std::max<std::size_t>(mode.size(), 15), ' ');
    ss << mode << ' ' << (r.crf ? "on " : "off") << "    " << (r.iou ? format_fixed(r.iou->mean_iou, 4) : "  n/a ")
       << "   " << (r.epoch_losses.empty() ? "n/a" : format_fixed(r.epoch_losses.back(), 4)) << '\n';
  }
  return ss.str();
}

PipelineResult run_pipeline(const config::RunConfig& cfg, std::ostream* progress) {
  cfg.validate();
  PipelineResult result;
  result.output_dir = cfg.paths.outputs;

  std::vector<fusion::FusionMode> modes;
  for (const auto& m : cfg.ablation_modes) modes.push_back(fusion::parse_fusion_mode(m));
  if (modes.empty()) modes.push_back(cfg.fusion_mode);
  const bool needs_clusters =
      std::find(modes.begin(), modes.end(), fusion::FusionMode::cluster_token) != modes.end();

  // Dataset.
  if (cfg.paths.dataset.empty()) throw ConfigError("paths.dataset is not set");
  const fs::path dataset_path = cfg.paths.dataset;
  if (!fs::exists(dataset_path)) {
    if (!cfg.synthetic) {
      throw ConfigError("dataset " + dataset_path.string() + " does not exist and no synthetic spec is configured");
    }
    Stopwatch clock;
    const fs::path dir = dataset_path.extension() == ".json" ? dataset_path.parent_path() : dataset_path;
    note(progress, "synth: generating " + std::to_string(cfg.synthetic->num_images) + " images in " + dir.string());
    data::generate_synthetic(*cfg.synthetic, dir);
    result.shared_timings.push_back({"synth", clock.seconds()});
  }
  const data::DatasetManifest manifest = load_dataset(dataset_path, std::nullopt);
  manifest.validate();

  // Cluster map: produced here when an LLM is configured, otherwise it must exist.
  std::optional<clusters::ClusterAssignment> assignment;
  if (needs_clusters) {
    if (cfg.llm) {
      Stopwatch clock;
      assignment = cluster_categories(clusters::CategoryList{manifest.categories}, *cfg.llm);
      const fs::path out = cfg.paths.cluster_map.empty() ? fs::path(cfg.paths.outputs) / "cluster_map.json"
                                                         : fs::path(cfg.paths.cluster_map);
      assignment->save(out);
      result.shared_timings.push_back({"cluster", clock.seconds()});
      note(progress, "cluster: " + std::to_string(assignment->size()) + " tags after " +
                         std::to_string(assignment->iteration_index) + " refinements" +
                         (assignment->stalled ? " (stalled)" : "") + " -> " + out.string());
    } else if (!cfg.paths.cluster_map.empty() && fs::exists(cfg.paths.cluster_map)) {
      assignment = clusters::ClusterAssignment::load(cfg.paths.cluster_map);
    } else {
      throw ConfigError("fusion_mode cluster_token needs a cluster map: '" + cfg.paths.cluster_map +
                        "' is missing and no llm section is configured");
    }
  }

  const auto vocab = head::ClassVocabulary::from_categories(clusters::CategoryList{manifest.categories});
  const std::optional<pseudo::CRFConfig> crf = cfg.crf ? std::optional(cfg.crf_config) : std::nullopt;

  for (const auto mode : modes) {
    const std::string name = fusion::to_string(mode);
    config::RunConfig run_cfg = cfg;
    run_cfg.fusion_mode = mode;
    run_cfg.ablation_modes.clear();
    fs::path out_dir = cfg.paths.outputs;
    if (modes.size() > 1) {
      run_cfg.paths.checkpoints = (fs::path(cfg.paths.checkpoints) / name).string();
      out_dir /= name;
    }
    RunReport report;
    report.fusion_mode = name;
    report.crf = cfg.crf;
    report.classes = vocab.classes;

    Stopwatch train_clock;
    train::TrainOptions opts;
    opts.on_record = [&](const json& r) {
      if (r.at("type") == "epoch") {
        std::string line = "train[" + name + "]: epoch " + std::to_string(r.at("epoch").get<int>()) + " loss " +
                           format_fixed(r.at("loss").get<double>(), 4);
        if (r.contains("miou")) line += " mIoU " + format_fixed(r.at("miou").get<double>(), 4);
        note(progress, line);
      }
    };
    const std::optional<clusters::ClusterAssignment> run_assignment =
        mode == fusion::FusionMode::cluster_token ? assignment : std::nullopt;
    train::TrainResult trained = train::train(run_cfg, manifest, run_assignment, opts);
    report.epoch_losses = trained.epoch_losses;
    report.timings.push_back({"train", train_clock.seconds()});

    PseudoResult pseudo = generate_pseudo_labels(trained.model, manifest, out_dir / "pseudo_labels", crf);
    report.timings.insert(report.timings.end(), pseudo.timings.begin(), pseudo.timings.end());

    if (manifest.has_masks()) {
      Stopwatch eval_clock;
      report.iou = evaluate_against_masks(pseudo.labels, manifest, static_cast<int>(vocab.size()));
      report.timings.push_back({"eval", eval_clock.seconds()});
      note(progress, "eval[" + name + "]: mIoU " + format_fixed(report.iou->mean_iou, 4));
    }

    json j = report.to_json();
    j["shared_timing_seconds"] = timings_json(result.shared_timings);
    write_text(out_dir / "report.json", j.dump(2) + "\n");
    write_text(out_dir / "report.txt", report.iou ? report.iou->to_table(vocab.classes) : "no ground truth\n");
    result.runs.push_back(std::move(report));
  }

  if (result.runs.size() > 1) write_text(fs::path(cfg.paths.outputs) / "comparison.txt", comparison_table(result.runs));
  return result;
}

}  // namespace pcc::pipeline
