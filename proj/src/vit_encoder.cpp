#include "pcc/vit_encoder.hpp"

#include "pcc/errors.hpp"

#include <cmath>

namespace pcc::vit {

namespace {

constexpr double kInitStd = 0.02;

std::string block_prefix(int i) { return "encoder.block" + std::to_string(i) + "."; }

ad::Var linear(ParameterBinder& p, ad::Var x, const std::string& name) {
  return ad::add_row(ad::matmul(x, p(name + ".w")), p(name + ".b"));
}

ad::Var norm(ParameterBinder& p, ad::Var x, const std::string& name) {
  return ad::layer_norm(x, p(name + ".g"), p(name + ".b"));
}

ad::Var attention(ParameterBinder& p, ad::Var x, const std::string& prefix, const EncoderConfig& cfg) {
  const Eigen::Index e = cfg.embed_dim;
  const Eigen::Index head_dim = e / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  ad::Var qkv = linear(p, x, prefix + "qkv");
  std::vector<ad::Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (Eigen::Index h = 0; h < cfg.heads; ++h) {
    ad::Var q = ad::slice_cols(qkv, h * head_dim, head_dim);
    ad::Var k = ad::slice_cols(qkv, e + h * head_dim, head_dim);
    ad::Var v = ad::slice_cols(qkv, 2 * e + h * head_dim, head_dim);
    ad::Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    heads.push_back(ad::matmul(weights, v));
  }
  ad::Var merged = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return linear(p, merged, prefix + "proj");
}

}  // namespace

void EncoderConfig::validate() const {
  if (image_side <= 0 || patch_size <= 0) throw ShapeError("image_side and patch_size must be positive");
  if (image_side % patch_size != 0) {
    throw ShapeError("image_side " + std::to_string(image_side) + " is not divisible by patch_size " +
                     std::to_string(patch_size));
  }
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ShapeError("embed_dim must be a positive multiple of heads");
  }
  if (depth < 1) throw ShapeError("depth must be >= 1");
  if (!(mlp_ratio > 0.0)) throw ShapeError("mlp_ratio must be positive");
}

int EncoderConfig::mlp_hidden() const {
  return std::max(1, static_cast<int>(std::lround(mlp_ratio * embed_dim)));
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"image_side", c.image_side}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
       {"depth", c.depth},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.image_side = j.value("image_side", d.image_side);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.seed = j.value("seed", d.seed);
}

ParameterSet init_params(const EncoderConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Eigen::Index e = cfg.embed_dim;
  const Eigen::Index m = cfg.mlp_hidden();
  ParameterSet ps;
  auto add_linear = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
    ps.add(name + ".w", rng.truncated_normal(in, out, kInitStd));
    ps.add(name + ".b", Mat::Zero(1, out));
  };
  auto add_norm = [&](const std::string& name) {
    ps.add(name + ".g", Mat::Ones(1, e));
    ps.add(name + ".b", Mat::Zero(1, e));
  };
  add_linear("encoder.patch", cfg.patch_dim(), e);
  ps.add("encoder.pos", rng.truncated_normal(cfg.tokens(), e, kInitStd));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = block_prefix(i);
    add_norm(b + "ln1");
    add_linear(b + "attn.qkv", e, 3 * e);
    add_linear(b + "attn.proj", e, e);
    add_norm(b + "ln2");
    add_linear(b + "mlp.fc1", e, m);
    add_linear(b + "mlp.fc2", m, e);
  }
  add_norm("encoder.norm");
  return ps;
}

std::vector<Eigen::Index> patch_index_map(const EncoderConfig& cfg) {
  const int g = cfg.grid_side();
  const int d = cfg.patch_size;
  const Eigen::Index row_stride = static_cast<Eigen::Index>(cfg.image_side) * 3;
  std::vector<Eigen::Index> map;
  map.reserve(static_cast<std::size_t>(cfg.tokens()) * static_cast<std::size_t>(cfg.patch_dim()));
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      for (int dy = 0; dy < d; ++dy) {
        for (int dx = 0; dx < d; ++dx) {
          for (int ch = 0; ch < 3; ++ch) {
            const Eigen::Index y = pr * d + dy;
            const Eigen::Index x = pc * d + dx;
            map.push_back(y * row_stride + x * 3 + ch);
          }
        }
      }
    }
  }
  return map;
}

ad::Var encode(ParameterBinder& p, ad::Var pixels, const EncoderConfig& cfg) {
  cfg.validate();
  if (pixels.rows() != cfg.image_side || pixels.cols() != static_cast<Eigen::Index>(cfg.image_side) * 3) {
    throw ShapeError("image is " + std::to_string(pixels.rows()) + "x" +
                     std::to_string(pixels.cols() / 3) + ", encoder expects " +
                     std::to_string(cfg.image_side) + "x" + std::to_string(cfg.image_side));
  }
  ad::Var patches = ad::gather_flat(pixels, patch_index_map(cfg), cfg.tokens(), cfg.patch_dim());
  ad::Var x = ad::add(linear(p, patches, "encoder.patch"), p("encoder.pos"));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = block_prefix(i);
    x = ad::add(x, attention(p, norm(p, x, b + "ln1"), b + "attn.", cfg));
    ad::Var hidden = ad::gelu(linear(p, norm(p, x, b + "ln2"), b + "mlp.fc1"));
    x = ad::add(x, linear(p, hidden, b + "mlp.fc2"));
  }
  return norm(p, x, "encoder.norm");
}

PatchTokens encode(const ImageSample& x, const EncoderConfig& cfg, const ParameterSet& params) {
  ad::Tape tape;
  ParameterBinder binder(tape, params, false);
  ad::Var out = encode(binder, tape.constant(x.pixels), cfg);
  return {out.value(), cfg.grid_side()};
}

}  // namespace pcc::vit
