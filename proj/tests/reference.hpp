#pragma once

// Scalar-loop reference implementations used as independent oracles. Nothing
// here touches Eigen expressions or the tape; every quantity is recomputed
// element by element from its definition.

#include "pcc/model.hpp"
#include "pcc/pseudo_labeling.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace pcc::reference {

using Grid = std::vector<std::vector<double>>;

inline Grid zeros(std::size_t r, std::size_t c) { return Grid(r, std::vector<double>(c, 0.0)); }

inline Grid from_mat(const Mat& m) {
  Grid g = zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  }
  return g;
}

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid out = zeros(a.size(), b.front().size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.front().size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  }
  return out;
}

inline Grid add_bias(Grid x, const Grid& bias) {
  for (auto& row : x) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  }
  return x;
}

inline Grid linear(const Grid& x, const ParameterSet& ps, const std::string& name) {
  return add_bias(matmul(x, from_mat(ps.at(name + ".w"))), from_mat(ps.at(name + ".b")));
}

inline Grid layer_norm(const Grid& x, const ParameterSet& ps, const std::string& name, double eps = 1e-6) {
  const Grid g = from_mat(ps.at(name + ".g"));
  const Grid b = from_mat(ps.at(name + ".b"));
  Grid out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      out[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[0][j] + b[0][j];
    }
  }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
  double m = v.front();
  for (double x : v) m = std::max(m, x);
  std::vector<double> out(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Patch tokens for one image, patches in raster order, pixels (dy, dx, ch).
inline Grid patchify(const vit::ImageSample& x, const vit::EncoderConfig& cfg) {
  const int g = cfg.grid_side();
  const int d = cfg.patch_size;
  Grid out;
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      std::vector<double> row;
      for (int dy = 0; dy < d; ++dy) {
        for (int dx = 0; dx < d; ++dx) {
          for (int ch = 0; ch < 3; ++ch) row.push_back(x.at(pr * d + dy, pc * d + dx, ch));
        }
      }
      out.push_back(row);
    }
  }
  return out;
}

inline Grid encode(const vit::ImageSample& img, const vit::EncoderConfig& cfg, const ParameterSet& ps) {
  Grid x = linear(patchify(img, cfg), ps, "encoder.patch");
  const Grid pos = from_mat(ps.at("encoder.pos"));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += pos[i][j];
  }
  const std::size_t e = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t hd = e / static_cast<std::size_t>(cfg.heads);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    const Grid qkv = linear(layer_norm(x, ps, p + "ln1"), ps, p + "attn.qkv");
    Grid merged = zeros(x.size(), e);
    for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> scores(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qkv[i][h * hd + c] * qkv[j][e + h * hd + c];
          scores[j] = s / std::sqrt(static_cast<double>(hd));
        }
        const auto a = softmax(scores);
        for (std::size_t c = 0; c < hd; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < x.size(); ++j) s += a[j] * qkv[j][2 * e + h * hd + c];
          merged[i][h * hd + c] = s;
        }
      }
    }
    const Grid attn = linear(merged, ps, p + "attn.proj");
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < e; ++j) x[i][j] += attn[i][j];
    }
    Grid hidden = linear(layer_norm(x, ps, p + "ln2"), ps, p + "mlp.fc1");
    for (auto& row : hidden) {
      for (double& v : row) v = gelu(v);
    }
    const Grid mlp = linear(hidden, ps, p + "mlp.fc2");
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < e; ++j) x[i][j] += mlp[i][j];
    }
  }
  return layer_norm(x, ps, "encoder.norm");
}

/// Hidden states of one LSTM direction over a sequence of input vectors.
/// Gate blocks are ordered input, forget, cell, output.
inline Grid lstm(const Grid& seq, const ParameterSet& ps, const std::string& prefix, bool reverse) {
  const Grid wx = from_mat(ps.at(prefix + ".wx"));
  const Grid wh = from_mat(ps.at(prefix + ".wh"));
  const Grid b = from_mat(ps.at(prefix + ".b"));
  const std::size_t hidden = wh.size();
  std::vector<double> h(hidden, 0.0), c(hidden, 0.0);
  Grid out(seq.size());
  for (std::size_t k = 0; k < seq.size(); ++k) {
    const std::size_t t = reverse ? seq.size() - 1 - k : k;
    std::vector<double> pre(4 * hidden);
    for (std::size_t j = 0; j < 4 * hidden; ++j) {
      double s = b[0][j];
      for (std::size_t d = 0; d < seq[t].size(); ++d) s += seq[t][d] * wx[d][j];
      for (std::size_t d = 0; d < hidden; ++d) s += h[d] * wh[d][j];
      pre[j] = s;
    }
    for (std::size_t j = 0; j < hidden; ++j) {
      const double ig = sigmoid(pre[j]);
      const double fg = sigmoid(pre[hidden + j]);
      const double gg = std::tanh(pre[2 * hidden + j]);
      const double og = sigmoid(pre[3 * hidden + j]);
      c[j] = fg * c[j] + ig * gg;
      h[j] = og * std::tanh(c[j]);
    }
    out[t] = h;
  }
  return out;
}

/// One bidirectional pass over a raster-ordered token grid, projected back.
inline Grid bidirectional(const Grid& x, int g, bool horizontal, const ParameterSet& ps, const std::string& prefix) {
  const std::size_t gs = static_cast<std::size_t>(g);
  Grid hidden(x.size());
  for (std::size_t seq = 0; seq < gs; ++seq) {
    Grid line;
    std::vector<std::size_t> where;
    for (std::size_t t = 0; t < gs; ++t) {
      const std::size_t idx = horizontal ? seq * gs + t : t * gs + seq;
      line.push_back(x[idx]);
      where.push_back(idx);
    }
    const Grid f = lstm(line, ps, prefix + ".fwd", false);
    const Grid b = lstm(line, ps, prefix + ".bwd", true);
    for (std::size_t t = 0; t < gs; ++t) {
      std::vector<double> both = f[t];
      both.insert(both.end(), b[t].begin(), b[t].end());
      hidden[where[t]] = both;
    }
  }
  return linear(hidden, ps, prefix + ".proj");
}

inline Grid refine(const Grid& in, int g, const ParameterSet& ps, bool residual) {
  Grid x = bidirectional(in, g, true, ps, "refiner.horizontal");
  if (residual) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += in[i][j];
    }
  }
  Grid y = bidirectional(x, g, false, ps, "refiner.vertical");
  if (residual) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      for (std::size_t j = 0; j < y[i].size(); ++j) y[i][j] += x[i][j];
    }
  }
  return y;
}

inline Grid classify(const Grid& tokens, const Grid& W) {
  Grid z = matmul(tokens, W);
  for (auto& row : z) row = softmax(row);
  return z;
}

/// Mean of the k largest entries per column, by full sort.
inline std::vector<double> topk_pool(const Grid& Z, int k) {
  std::vector<double> p(Z.front().size());
  for (std::size_t c = 0; c < p.size(); ++c) {
    std::vector<double> col;
    for (const auto& row : Z) col.push_back(row[c]);
    std::sort(col.begin(), col.end(), std::greater<>());
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += col[static_cast<std::size_t>(i)];
    p[c] = s / k;
  }
  return p;
}

inline double mce(const std::vector<double>& p, const std::vector<int>& y, double eps = 1e-7) {
  double s = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double q = std::clamp(p[c], eps, 1.0 - eps);
    s += y[c] ? -std::log(q) : -std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

struct ChainResult {
  double loss = 0.0;
  Grid Z;
};

/// The whole training objective for one sample, stage by stage.
inline ChainResult forward_loss(const vit::ImageSample& x, const model::Model& m) {
  const auto& cfg = m.config();
  const ParameterSet& ps = m.params();
  Grid tokens = reference::encode(x, cfg.encoder, ps);

  std::vector<double> appended;
  if (cfg.fusion_mode == fusion::FusionMode::cluster_token) {
    const auto& a = *m.assignment();
    const Grid G = from_mat(ps.at(fusion::kClusterMatrixName));
    appended.assign(G.front().size(), 0.0);
    for (std::size_t i = 0; i < a.vocabulary.size(); ++i) {
      bool on = false;
      for (const auto& label : x.labels) on = on || a.mapping.at(label).contains(a.vocabulary[i]);
      if (!on) continue;
      for (std::size_t j = 0; j < appended.size(); ++j) appended[j] += G[i][j];
    }
  } else if (cfg.fusion_mode == fusion::FusionMode::class_token) {
    appended = from_mat(ps.at(fusion::kClassTokenName)).front();
  }
  for (auto& row : tokens) row.insert(row.end(), appended.begin(), appended.end());

  const Grid refined = refine(tokens, cfg.encoder.grid_side(), ps, cfg.refiner_residual);
  ChainResult r;
  r.Z = classify(refined, from_mat(ps.at(head::kClassifierName)));
  const auto p = topk_pool(r.Z, cfg.topk.k);
  std::vector<int> y(m.vocabulary().size(), 0);
  y[0] = 1;
  for (std::size_t c = 1; c < y.size(); ++c) y[c] = x.labels.contains(m.vocabulary().classes[c]) ? 1 : 0;
  r.loss = mce(p, y, cfg.loss.epsilon);
  return r;
}

/// Bilinear sample of a g x g grid at output pixel (y, x), half-pixel centres,
/// coordinates clamped at the borders.
inline double bilinear(const Mat& Z, int g, int c, int y, int x, int out_h, int out_w) {
  auto source = [&](int dst, int out) {
    const double s = (dst + 0.5) * static_cast<double>(g) / out - 0.5;
    return std::max(s, 0.0);
  };
  const double sy = source(y, out_h), sx = source(x, out_w);
  const int y0 = std::min(static_cast<int>(std::floor(sy)), g - 1), x0 = std::min(static_cast<int>(std::floor(sx)), g - 1);
  const int y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
  const double wy = sy - y0, wx = sx - x0;
  auto at = [&](int r, int q) { return Z(r * g + q, c); };
  return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
}

/// Exact mean field with an explicit Potts compatibility: each label pays the
/// kernel-weighted mass of every other label at every other pixel.
inline pseudo::DenseScores crf(const pseudo::DenseScores& d, const vit::ImageSample& img, const pseudo::CRFConfig& cfg) {
  const int n = d.height * d.width, C = d.classes;
  std::vector<double> q(d.data), unary(d.data.size());
  for (std::size_t i = 0; i < q.size(); ++i) unary[i] = -std::log(std::max(d.data[i], 1e-12));
  auto kernel = [&](int i, int j) {
    const int yi = i / d.width, xi = i % d.width, yj = j / d.width, xj = j % d.width;
    const double d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
    double c2 = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
      const double diff = 255.0 * img.at(yi, xi, ch) - 255.0 * img.at(yj, xj, ch);
      c2 += diff * diff;
    }
    return cfg.spatial_weight * std::exp(-d2 / (2 * cfg.spatial_sigma * cfg.spatial_sigma)) +
           cfg.bilateral_weight * std::exp(-d2 / (2 * cfg.bilateral_sigma_xy * cfg.bilateral_sigma_xy) -
                                           c2 / (2 * cfg.bilateral_sigma_rgb * cfg.bilateral_sigma_rgb));
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<double> next(q.size());
    for (int i = 0; i < n; ++i) {
      std::vector<double> energy(static_cast<std::size_t>(C));
      for (int l = 0; l < C; ++l) {
        double pairwise = 0.0;
        for (int j = 0; j < n; ++j) {
          if (j == i) continue;
          for (int m = 0; m < C; ++m) {
            if (m != l) pairwise += kernel(i, j) * q[static_cast<std::size_t>(j * C + m)];
          }
        }
        energy[static_cast<std::size_t>(l)] = unary[static_cast<std::size_t>(i * C + l)] + pairwise;
      }
      double total = 0.0;
      for (int l = 0; l < C; ++l) total += std::exp(-energy[static_cast<std::size_t>(l)]);
      for (int l = 0; l < C; ++l) {
        next[static_cast<std::size_t>(i * C + l)] = std::exp(-energy[static_cast<std::size_t>(l)]) / total;
      }
    }
    q = next;
  }
  pseudo::DenseScores out(d.height, d.width, C);
  out.data = q;
  return out;
}

/// Index of the first maximum of each pixel's class vector.
inline std::vector<int> argmax(const pseudo::DenseScores& d) {
  std::vector<int> out;
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      int best = 0;
      for (int c = 1; c < d.classes; ++c) {
        if (d.at(y, x, c) > d.at(y, x, best)) best = c;
      }
      out.push_back(best);
    }
  }
  return out;
}

/// Per-class IoU by direct counting; nullopt where the union is empty.
inline std::vector<std::optional<double>> class_iou(const std::vector<int>& pred, const std::vector<int>& gt, int classes,
                                                    int ignore) {
  std::vector<std::optional<double>> out;
  for (int c = 0; c < classes; ++c) {
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      const bool p = pred[i] == c, g = gt[i] == c;
      inter += p && g;
      uni += p || g;
    }
    out.push_back(uni == 0 ? std::nullopt : std::optional(static_cast<double>(inter) / uni));
  }
  return out;
}

/// Row vector u^T G by explicit summation.
inline std::vector<double> embed(const std::vector<int>& bits, const Mat& G) {
  std::vector<double> out(static_cast<std::size_t>(G.cols()), 0.0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    for (Eigen::Index j = 0; j < G.cols(); ++j) out[static_cast<std::size_t>(j)] += bits[i] * G(static_cast<Eigen::Index>(i), j);
  }
  return out;
}

}  // namespace pcc::reference
