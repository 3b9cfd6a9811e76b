#include "pcc/cluster_fusion.hpp"

#include "pcc/errors.hpp"

#include <cmath>

namespace pcc::fusion {

namespace {

constexpr const char* kPasses[] = {"refiner.horizontal", "refiner.vertical"};

struct Direction {
  ad::Var wx, wh, b;
};

Direction bind_direction(ParameterBinder& p, const std::string& prefix) {
  return {p(prefix + ".wx"), p(prefix + ".wh"), p(prefix + ".b")};
}

/// Runs one LSTM direction over `steps` (each a batch of sequences x D).
std::vector<ad::Var> run_lstm(const std::vector<ad::Var>& steps, const Direction& d, bool reverse) {
  const Eigen::Index hidden = d.wh.rows();
  const auto n = steps.size();
  std::vector<ad::Var> outputs(n);
  ad::Var h, c;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = reverse ? n - 1 - k : k;
    ad::Var pre = ad::matmul(steps[t], d.wx);
    if (h.valid()) pre = ad::add(pre, ad::matmul(h, d.wh));
    ad::Var gates = ad::add_row(pre, d.b);
    ad::Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    ad::Var f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    ad::Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
    ad::Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    ad::Var ig = ad::mul(i, g);
    c = c.valid() ? ad::add(ad::mul(f, c), ig) : ig;
    h = ad::mul(o, ad::tanh(c));
    outputs[t] = h;
  }
  return outputs;
}

/// One bidirectional pass. Horizontal: sequences are grid rows, steps walk
/// columns. Vertical: the transpose.
ad::Var bidirectional_pass(ParameterBinder& p, ad::Var x, int g, bool horizontal,
                           const std::string& prefix) {
  std::vector<ad::Var> steps;
  steps.reserve(static_cast<std::size_t>(g));
  for (int t = 0; t < g; ++t) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(g));
    for (int seq = 0; seq < g; ++seq) idx[static_cast<std::size_t>(seq)] = horizontal ? seq * g + t : t * g + seq;
    steps.push_back(ad::gather_rows(x, idx));
  }
  std::vector<ad::Var> fwd = run_lstm(steps, bind_direction(p, prefix + ".fwd"), false);
  std::vector<ad::Var> bwd = run_lstm(steps, bind_direction(p, prefix + ".bwd"), true);
  // Stacked rows are ordered (step, sequence).
  ad::Var stacked_f = ad::concat_rows(fwd);
  ad::Var stacked_b = ad::concat_rows(bwd);
  std::vector<ad::Var> both{stacked_f, stacked_b};
  ad::Var hidden = ad::concat_cols(both);
  if (horizontal) {
    std::vector<Eigen::Index> to_raster(static_cast<std::size_t>(g) * static_cast<std::size_t>(g));
    for (int r = 0; r < g; ++r) {
      for (int c = 0; c < g; ++c) to_raster[static_cast<std::size_t>(r * g + c)] = c * g + r;
    }
    hidden = ad::gather_rows(hidden, to_raster);
  }
  return ad::add_row(ad::matmul(hidden, p(prefix + ".proj.w")), p(prefix + ".proj.b"));
}

}  // namespace

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none:
      return "none";
    case FusionMode::class_token:
      return "class_token";
    case FusionMode::cluster_token:
      return "cluster_token";
  }
  return "none";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "class_token") return FusionMode::class_token;
  if (s == "cluster_token") return FusionMode::cluster_token;
  throw ConfigError("unknown fusion_mode: " + s);
}

RefinerConfig RefinerConfig::for_width(int input_dim) {
  return {input_dim, std::max(1, input_dim / 2)};
}

ParameterSet init_fusion_params(FusionMode mode, std::size_t clusters, int cluster_dim,
                                std::uint64_t seed) {
  ParameterSet ps;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  if (mode == FusionMode::cluster_token) {
    if (clusters == 0) throw ConfigError("cluster_token fusion needs a non-empty cluster vocabulary");
    ps.add(kClusterMatrixName,
           rng.truncated_normal(static_cast<Eigen::Index>(clusters), cluster_dim, 0.02));
  } else if (mode == FusionMode::class_token) {
    ps.add(kClassTokenName, rng.truncated_normal(1, cluster_dim, 0.02));
  }
  return ps;
}

ParameterSet init_refiner_params(const RefinerConfig& cfg, std::uint64_t seed) {
  if (cfg.input_dim <= 0 || cfg.hidden <= 0) throw ShapeError("refiner widths must be positive");
  Rng rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
  const Eigen::Index d = cfg.input_dim;
  const Eigen::Index h = cfg.hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
  };
  ParameterSet ps;
  for (const char* pass : kPasses) {
    for (const char* dir : {".fwd", ".bwd"}) {
      const std::string prefix = std::string(pass) + dir;
      ps.add(prefix + ".wx", uniform(d, 4 * h));
      ps.add(prefix + ".wh", uniform(h, 4 * h));
      ps.add(prefix + ".b", Mat::Zero(1, 4 * h));
    }
    // Linear-layer default: uniform in +-1/sqrt(fan_in).
    const double proj_bound = 1.0 / std::sqrt(static_cast<double>(2 * h));
    Mat proj(2 * h, d);
    for (Eigen::Index i = 0; i < proj.size(); ++i) proj.data()[i] = rng.uniform(-proj_bound, proj_bound);
    ps.add(std::string(pass) + ".proj.w", std::move(proj));
    ps.add(std::string(pass) + ".proj.b", Mat::Zero(1, d));
  }
  return ps;
}

ClusterToken embed_clusters(const clusters::ClusterVector& u, const ClusterEmbeddingMatrix& G) {
  if (static_cast<Eigen::Index>(u.size()) != G.G.rows()) {
    throw ShapeError("cluster vector has " + std::to_string(u.size()) + " bits, G has " +
                     std::to_string(G.G.rows()) + " rows");
  }
  Mat out = Mat::Zero(1, G.G.cols());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u.bits[i] != 0) out.row(0) += G.G.row(static_cast<Eigen::Index>(i));
  }
  return {out};
}

ad::Var embed_clusters(const clusters::ClusterVector& u, ad::Var G) {
  if (static_cast<Eigen::Index>(u.size()) != G.rows()) {
    throw ShapeError("cluster vector has " + std::to_string(u.size()) + " bits, G has " +
                     std::to_string(G.rows()) + " rows");
  }
  Mat row(1, G.rows());
  for (std::size_t i = 0; i < u.size(); ++i) row(0, static_cast<Eigen::Index>(i)) = u.bits[i];
  return ad::matmul(G.tape()->constant(std::move(row)), G);
}

FusedTokens fuse(const vit::PatchTokens& patches, const ClusterToken& token) {
  const Eigen::Index h = token.values.size();
  Mat out(patches.values.rows(), patches.values.cols() + h);
  out.leftCols(patches.values.cols()) = patches.values;
  if (h > 0) out.rightCols(h) = token.values.row(0).replicate(patches.values.rows(), 1);
  return {out, patches.grid_side};
}

ad::Var fuse(ad::Var patches, ad::Var token) {
  if (!token.valid() || token.cols() == 0) return patches;
  std::vector<ad::Var> parts{patches, ad::broadcast_rows(token, patches.rows())};
  return ad::concat_cols(parts);
}

int grid_side_of(Eigen::Index tokens) {
  const auto g = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (g * g != tokens || g == 0) {
    throw ShapeError(std::to_string(tokens) + " tokens do not form a square grid");
  }
  return static_cast<int>(g);
}

ad::Var refine(ParameterBinder& p, ad::Var in, bool residual) {
  const int g = grid_side_of(in.rows());
  ad::Var x = bidirectional_pass(p, in, g, true, kPasses[0]);
  if (residual) x = ad::add(x, in);
  ad::Var y = bidirectional_pass(p, x, g, false, kPasses[1]);
  return residual ? ad::add(y, x) : y;
}

FusedTokens refine(const FusedTokens& in, const ParameterSet& params, bool residual) {
  ad::Tape tape;
  ParameterBinder binder(tape, params, false);
  ad::Var out = refine(binder, tape.constant(in.values), residual);
  return {out.value(), grid_side_of(in.values.rows())};
}

}  // namespace pcc::fusion
