#include "pcc/trainer.hpp"

#include "pcc/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

namespace pcc::train {

using nlohmann::json;

namespace {

constexpr int kIgnoreLabel = 255;
constexpr const char* kEvaluationPhase = "evaluation";

head::ClassVocabulary vocabulary_for(const data::DatasetManifest& manifest) {
  return head::ClassVocabulary::from_categories(clusters::CategoryList{manifest.categories});
}

// Sum of per-sample gradients for one batch, always accumulated in batch order.
double batch_gradients(const model::Model& model, const std::vector<vit::ImageSample>& images,
                       const std::vector<std::size_t>& batch, int workers, Gradients& total) {
  std::vector<Gradients> per(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) losses[i] = model.loss_and_gradients(images[batch[i]], per[i]);
  };
  const auto n = batch.size();
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(n * t / threads, n * (t + 1) / threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  total.clear();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += losses[i];
    for (auto& [name, g] : per[i]) {
      auto it = total.find(name);
      if (it == total.end()) {
        total.emplace(name, std::move(g));
      } else {
        it->second += g;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& [name, g] : total) g *= inv;
  return loss * inv;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, bool append, std::function<void(const json&)> hook)
      : out_(path, append ? std::ios::app : std::ios::trunc), hook_(std::move(hook)) {
    if (!out_) throw IOError("cannot write metrics log " + path.string());
  }

  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (hook_) hook_(record);
  }

 private:
  std::ofstream out_;
  std::function<void(const json&)> hook_;
};

}  // namespace

model::ModelConfig model_config(const config::RunConfig& cfg) {
  model::ModelConfig mc;
  mc.encoder = cfg.seeded_encoder();
  mc.cluster_dim = cfg.cluster_dim;
  mc.fusion_mode = cfg.fusion_mode;
  mc.topk = cfg.topk;
  mc.loss.include_background = cfg.loss_includes_background;
  mc.refiner_residual = cfg.refiner_residual;
  return mc;
}

void AdamState::apply(ParameterSet& params, const Gradients& grads, const config::OptimizerConfig& opt, double lr) {
  ++step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (auto& [name, p] : params.entries()) {
    auto g_it = grads.find(name);
    if (g_it == grads.end() && opt.weight_decay == 0.0) continue;
    Mat g = g_it == grads.end() ? Mat::Zero(p.rows(), p.cols()) : g_it->second;
    if (opt.weight_decay != 0.0) g += opt.weight_decay * p;
    auto [m_it, m_new] = m.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
    auto [v_it, v_new] = v.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
    Mat& mm = m_it->second;
    Mat& vv = v_it->second;
    mm = opt.beta1 * mm + (1.0 - opt.beta1) * g;
    vv = opt.beta2 * vv + (1.0 - opt.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + opt.epsilon);
  }
}

std::filesystem::path latest_checkpoint_path(const config::RunConfig& cfg) {
  return std::filesystem::path(cfg.paths.checkpoints) / "latest.ckpt";
}

void save_training_checkpoint(const std::filesystem::path& path, const config::RunConfig& cfg,
                              const model::Model& model, const AdamState& adam, int epochs_completed) {
  model::Checkpoint ck;
  ck.header = {{"config", cfg},
               {"epochs_completed", epochs_completed},
               {"adam_step", adam.step},
               {"classes", model.vocabulary().classes},
               {"assignment", model.assignment() ? model.assignment()->to_json() : json(nullptr)}};
  for (const auto& [name, p] : model.params().entries()) ck.tensors.emplace("param/" + name, p);
  for (const auto& [name, m] : adam.m) ck.tensors.emplace("adam.m/" + name, m);
  for (const auto& [name, v] : adam.v) ck.tensors.emplace("adam.v/" + name, v);
  ck.save(path);
}

LoadedCheckpoint load_training_checkpoint(const std::filesystem::path& path) {
  model::Checkpoint ck = model::Checkpoint::load(path);
  try {
    auto cfg = ck.header.at("config").get<config::RunConfig>();
    head::ClassVocabulary vocab{ck.header.at("classes").get<std::vector<std::string>>()};
    std::optional<clusters::ClusterAssignment> assignment;
    if (!ck.header.at("assignment").is_null()) {
      assignment = clusters::ClusterAssignment::from_json(ck.header.at("assignment"));
    }
    ParameterSet params;
    AdamState adam;
    adam.step = ck.header.at("adam_step").get<std::int64_t>();
    for (auto& [key, t] : ck.tensors) {
      const auto slash = key.find('/');
      const std::string kind = key.substr(0, slash);
      const std::string name = key.substr(slash + 1);
      if (kind == "param") {
        params.add(name, std::move(t));
      } else if (kind == "adam.m") {
        adam.m.emplace(name, std::move(t));
      } else if (kind == "adam.v") {
        adam.v.emplace(name, std::move(t));
      }
    }
    model::Model model(model_config(cfg), std::move(vocab), std::move(assignment), std::move(params));
    return {std::move(cfg), std::move(model), std::move(adam), ck.header.at("epochs_completed").get<int>()};
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + " has an invalid header: " + e.what());
  }
}

pseudo::PseudoLabelMap pseudo_label(const model::Model& model, const vit::ImageSample& image,
                                    const std::optional<pseudo::CRFConfig>& crf) {
  pseudo::DenseScores dense = pseudo::upsample_predictions(model.predict(image), image.height(), image.width());
  if (crf) dense = pseudo::crf_refine(dense, image, *crf);
  return pseudo::argmax_labels(dense, image.identifier);
}

pseudo::IoUReport evaluate(const model::Model& model, const std::vector<vit::ImageSample>& images,
                           const std::vector<pseudo::PseudoLabelMap>& masks,
                           const std::optional<pseudo::CRFConfig>& crf) {
  if (images.size() != masks.size()) throw ShapeError("evaluate: image and mask counts differ");
  pseudo::IoUAccumulator acc(static_cast<int>(model.vocabulary().size()), kIgnoreLabel);
  for (std::size_t i = 0; i < images.size(); ++i) acc.add(pseudo_label(model, images[i], crf), masks[i]);
  return acc.report();
}

TrainResult train(const config::RunConfig& cfg, const data::DatasetManifest& manifest,
                  const std::optional<clusters::ClusterAssignment>& assignment, const TrainOptions& opts) {
  cfg.validate();
  manifest.validate();
  if (manifest.entries.empty()) throw ConfigError("training manifest has no entries");
  if (cfg.fusion_mode == fusion::FusionMode::cluster_token && !assignment) {
    throw ConfigError("fusion_mode cluster_token requires a cluster map");
  }

  const auto ckpt_path = latest_checkpoint_path(cfg);
  const auto log_path = std::filesystem::path(cfg.paths.checkpoints) / "metrics.jsonl";
  std::filesystem::create_directories(cfg.paths.checkpoints);

  std::optional<model::Model> model;
  AdamState adam;
  int start_epoch = 0;
  const bool resuming = opts.resume && std::filesystem::exists(ckpt_path);
  if (resuming) {
    LoadedCheckpoint loaded = load_training_checkpoint(ckpt_path);
    if (json(model_config(loaded.config).encoder) != json(model_config(cfg).encoder) ||
        loaded.config.fusion_mode != cfg.fusion_mode || loaded.config.cluster_dim != cfg.cluster_dim ||
        loaded.config.refiner_residual != cfg.refiner_residual) {
      throw ConfigError("checkpoint " + ckpt_path.string() + " was written for a different model configuration");
    }
    model.emplace(std::move(loaded.model));
    adam = std::move(loaded.adam);
    start_epoch = loaded.epochs_completed;
  } else {
    model.emplace(model::Model::create(model_config(cfg), vocabulary_for(manifest), assignment));
  }

  std::vector<vit::ImageSample> images = data::load_images(manifest, cfg.encoder.image_side);
  std::vector<pseudo::PseudoLabelMap> masks;  // loaded lazily, outside the training phase
  const bool can_evaluate = cfg.eval_every > 0 && manifest.has_masks();
  const std::optional<pseudo::CRFConfig> crf = cfg.crf ? std::optional(cfg.crf_config) : std::nullopt;

  MetricsLog log(log_path, resuming, opts.on_record);
  TrainResult result{*model, start_epoch, {}, std::nullopt, ckpt_path, log_path};

  const int workers = cfg.deterministic ? 1 : cfg.workers;
  const int last_epoch = std::min(cfg.max_epochs, opts.stop_after_epochs.value_or(cfg.max_epochs));
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  Gradients grads;

  for (int epoch = start_epoch; epoch < last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.optimizer.lr_at(epoch);
    const auto order = epoch_order(images.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    {
      data::MaskAccessAudit::Phase phase(data::kTrainStepPhase);
      for (std::size_t lo = 0; lo < order.size(); lo += batch) {
        const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(lo + batch, order.size())));
        const double loss = batch_gradients(*model, images, ids, workers, grads);
        if (!std::isfinite(loss)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                std::to_string(adam.step + 1));
        }
        adam.apply(model->params(), grads, cfg.optimizer, lr);
        loss_sum += loss;
        ++steps;
        log.write({{"type", "step"}, {"epoch", epoch + 1}, {"step", adam.step}, {"loss", loss}, {"lr", lr}});
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(steps);
    json record = {{"type", "epoch"}, {"epoch", epoch + 1}, {"loss", mean_loss}, {"lr", lr}};

    if (can_evaluate && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == last_epoch)) {
      data::MaskAccessAudit::Phase phase(kEvaluationPhase);
      if (masks.empty()) {
        for (const auto& e : manifest.entries) masks.push_back(data::load_mask(*e.mask, cfg.encoder.image_side));
      }
      const auto report = evaluate(*model, images, masks, crf);
      record["miou"] = report.mean_iou;
      result.last_miou = report.mean_iou;
    }
    record["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_training_checkpoint(ckpt_path, cfg, *model, adam, epoch + 1);
    log.write(record);
    result.epoch_losses.push_back(mean_loss);
    result.epochs_completed = epoch + 1;
  }
  result.model = std::move(*model);
  return result;
}

}  // namespace pcc::train
