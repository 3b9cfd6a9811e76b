#include "pcc/model.hpp"

#include "pcc/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pcc::model {

int ModelConfig::token_width() const {
  return encoder.embed_dim + (fusion_mode == fusion::FusionMode::none ? 0 : cluster_dim);
}

Model::Model(ModelConfig cfg, head::ClassVocabulary vocab,
             std::optional<clusters::ClusterAssignment> assignment, ParameterSet params)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), assignment_(std::move(assignment)),
      params_(std::move(params)) {
  cfg_.encoder.validate();
  if (cfg_.fusion_mode == fusion::FusionMode::cluster_token && !assignment_) {
    throw ConfigError("cluster_token fusion needs a cluster assignment");
  }
  if (vocab_.size() < 2) throw ConfigError("class vocabulary needs background plus at least one class");
}

Model Model::create(const ModelConfig& cfg, head::ClassVocabulary vocab,
                    std::optional<clusters::ClusterAssignment> assignment) {
  cfg.encoder.validate();
  const std::uint64_t seed = cfg.encoder.seed;
  ParameterSet ps = vit::init_params(cfg.encoder);
  const std::size_t clusters = assignment ? assignment->size() : 0;
  if (cfg.fusion_mode == fusion::FusionMode::cluster_token && !assignment) {
    throw ConfigError("cluster_token fusion needs a cluster assignment");
  }
  ps.merge(fusion::init_fusion_params(cfg.fusion_mode, clusters, cfg.cluster_dim, seed));
  ps.merge(fusion::init_refiner_params(fusion::RefinerConfig::for_width(cfg.token_width()), seed));
  ps.merge(head::init_classifier_params(cfg.token_width(), vocab.size(), seed));
  return Model(cfg, std::move(vocab), std::move(assignment), std::move(ps));
}

ad::Var Model::appended_token(ParameterBinder& p, const vit::ImageSample& x) const {
  switch (cfg_.fusion_mode) {
    case fusion::FusionMode::none:
      return {};
    case fusion::FusionMode::class_token:
      return p(fusion::kClassTokenName);
    case fusion::FusionMode::cluster_token:
      return fusion::embed_clusters(clusters::cluster_vector(x.labels, *assignment_),
                                    p(fusion::kClusterMatrixName));
  }
  return {};
}

Model::Trace Model::forward(ParameterBinder& p, const vit::ImageSample& x) const {
  ad::Tape& tape = p.tape();
  ad::Var patches = vit::encode(p, tape.constant(x.pixels), cfg_.encoder);
  ad::Var fused = fusion::fuse(patches, appended_token(p, x));
  ad::Var refined = fusion::refine(p, fused, cfg_.refiner_residual);
  ad::Var z = head::classify_patches(refined, p(head::kClassifierName));
  ad::Var pooled = head::topk_pool(z, cfg_.topk);
  ad::Var loss = head::mce_loss(pooled, head::ImageLabelVector::from_labels(x.labels, vocab_), cfg_.loss);
  return {loss, z};
}

double Model::loss_and_gradients(const vit::ImageSample& x, Gradients& grads) const {
  ad::Tape tape;
  ParameterBinder binder(tape, params_);
  Trace t = forward(binder, x);
  tape.backward(t.loss);
  grads = binder.gradients();
  return t.loss.value()(0, 0);
}

head::PatchPredictions Model::predict(const vit::ImageSample& x) const {
  ad::Tape tape;
  ParameterBinder binder(tape, params_, false);
  ad::Var patches = vit::encode(binder, tape.constant(x.pixels), cfg_.encoder);
  ad::Var fused = fusion::fuse(patches, appended_token(binder, x));
  ad::Var z = head::classify_patches(fusion::refine(binder, fused, cfg_.refiner_residual),
                                       binder(head::kClassifierName));
  return {z.value(), cfg_.encoder.grid_side()};
}

ForwardResult forward_loss(const vit::ImageSample& x, const Model& model) {
  ad::Tape tape;
  ParameterBinder binder(tape, model.params(), false);
  Model::Trace t = model.forward(binder, x);
  return {t.loss.value()(0, 0), {t.patch_predictions.value(), model.config().encoder.grid_side()}};
}

// --- checkpoint -------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "PCCCKPT1";

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  nlohmann::json full = header;
  full["tensors"] = table;
  const std::string text = full.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic) - 1);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw IOError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("truncated checkpoint header in " + path.string());

  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto table = ck.header.at("tensors");
  ck.header.erase("tensors");
  for (const auto& t : table) {
    Mat m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw FormatError("truncated tensor data in " + path.string());
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

}  // namespace pcc::model
