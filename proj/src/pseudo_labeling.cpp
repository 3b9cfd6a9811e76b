#include "pcc/pseudo_labeling.hpp"

#include "pcc/cluster_fusion.hpp"
#include "pcc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace pcc::pseudo {

using nlohmann::json;

void CRFConfig::validate() const {
  if (iterations < 1) throw ConfigError("crf iterations must be >= 1");
  if (spatial_weight < 0.0 || bilateral_weight < 0.0) throw ConfigError("crf weights must be >= 0");
  if (!(spatial_sigma > 0.0 && bilateral_sigma_xy > 0.0 && bilateral_sigma_rgb > 0.0)) {
    throw ConfigError("crf sigmas must be > 0");
  }
}

void to_json(json& j, const CRFConfig& c) {
  j = {{"iterations", c.iterations},
       {"spatial_weight", c.spatial_weight},
       {"bilateral_weight", c.bilateral_weight},
       {"spatial_sigma", c.spatial_sigma},
       {"bilateral_sigma_xy", c.bilateral_sigma_xy},
       {"bilateral_sigma_rgb", c.bilateral_sigma_rgb}};
}

void from_json(const json& j, CRFConfig& c) {
  CRFConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.spatial_weight = j.value("spatial_weight", d.spatial_weight);
  c.bilateral_weight = j.value("bilateral_weight", d.bilateral_weight);
  c.spatial_sigma = j.value("spatial_sigma", d.spatial_sigma);
  c.bilateral_sigma_xy = j.value("bilateral_sigma_xy", d.bilateral_sigma_xy);
  c.bilateral_sigma_rgb = j.value("bilateral_sigma_rgb", d.bilateral_sigma_rgb);
}

DenseScores upsample_predictions(const head::PatchPredictions& Z, int target_h, int target_w) {
  if (target_h <= 0 || target_w <= 0) throw ShapeError("upsample target must be positive");
  const int g = fusion::grid_side_of(Z.Z.rows());
  const int classes = static_cast<int>(Z.Z.cols());
  DenseScores out(target_h, target_w, classes);

  // Source coordinate (dst + 0.5) * in / out - 0.5, clamped at the low edge.
  auto axis = [g](int dst, int out_size, int& i0, int& i1, double& frac) {
    double src = (dst + 0.5) * static_cast<double>(g) / out_size - 0.5;
    if (src < 0.0) src = 0.0;
    i0 = std::min(static_cast<int>(src), g - 1);
    i1 = std::min(i0 + 1, g - 1);
    frac = src - i0;
  };
  for (int y = 0; y < target_h; ++y) {
    int y0, y1;
    double fy;
    axis(y, target_h, y0, y1, fy);
    for (int x = 0; x < target_w; ++x) {
      int x0, x1;
      double fx;
      axis(x, target_w, x0, x1, fx);
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
      for (int c = 0; c < classes; ++c) {
        out.at(y, x, c) = w00 * Z.Z(y0 * g + x0, c) + w01 * Z.Z(y0 * g + x1, c) +
                          w10 * Z.Z(y1 * g + x0, c) + w11 * Z.Z(y1 * g + x1, c);
      }
    }
  }
  return out;
}

PseudoLabelMap argmax_labels(const DenseScores& dense, std::string source_id) {
  PseudoLabelMap out(dense.height, dense.width, std::move(source_id));
  for (int y = 0; y < dense.height; ++y) {
    for (int x = 0; x < dense.width; ++x) {
      int best = 0;
      for (int c = 1; c < dense.classes; ++c) {
        if (dense.at(y, x, c) > dense.at(y, x, best)) best = c;
      }
      out.at(y, x) = best;
    }
  }
  return out;
}

namespace {

template <typename Scalar>
using KernelMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Combined pairwise weight w_s k_s + w_b k_b for every pixel pair, zero on
/// the diagonal.
template <typename Scalar>
KernelMatrix<Scalar> pairwise_kernel(const vit::ImageSample& image, const CRFConfig& cfg) {
  const int h = image.height();
  const int w = image.width();
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;
  KernelMatrix<Scalar> k(n, n);
  const double inv_s = 1.0 / (2.0 * cfg.spatial_sigma * cfg.spatial_sigma);
  const double inv_bxy = 1.0 / (2.0 * cfg.bilateral_sigma_xy * cfg.bilateral_sigma_xy);
  const double inv_brgb = 1.0 / (2.0 * cfg.bilateral_sigma_rgb * cfg.bilateral_sigma_rgb);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int yi = static_cast<int>(i / w), xi = static_cast<int>(i % w);
    k(i, i) = 0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const int yj = static_cast<int>(j / w), xj = static_cast<int>(j % w);
      const double d2 = static_cast<double>((yi - yj) * (yi - yj) + (xi - xj) * (xi - xj));
      double c2 = 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double diff = 255.0 * (image.at(yi, xi, ch) - image.at(yj, xj, ch));
        c2 += diff * diff;
      }
      const double v = cfg.spatial_weight * std::exp(-d2 * inv_s) +
                       cfg.bilateral_weight * std::exp(-d2 * inv_bxy - c2 * inv_brgb);
      k(i, j) = static_cast<Scalar>(v);
      k(j, i) = static_cast<Scalar>(v);
    }
  }
  return k;
}

template <typename Scalar>
DenseScores mean_field(const DenseScores& dense, const vit::ImageSample& image, const CRFConfig& cfg) {
  const Eigen::Index n = static_cast<Eigen::Index>(dense.pixels());
  const Eigen::Index classes = dense.classes;
  const KernelMatrix<Scalar> kernel = pairwise_kernel<Scalar>(image, cfg);

  // Unary energies and initial marginals.
  ad::Mat unary(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < classes; ++c) {
      unary(i, c) = -std::log(std::max(dense.data[static_cast<std::size_t>(i * classes + c)], 1e-12));
    }
  }
  auto normalize = [&](const ad::Mat& logits) {
    ad::Mat q(n, classes);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = logits.row(i).maxCoeff();
      q.row(i) = (logits.row(i).array() - m).exp().matrix();
      q.row(i) /= q.row(i).sum();
    }
    return q;
  };
  ad::Mat q = normalize(-unary);
  for (int it = 0; it < cfg.iterations; ++it) {
    ad::Mat message = (kernel * q.cast<Scalar>()).template cast<double>();
    q = normalize(message - unary);
  }
  DenseScores out(dense.height, dense.width, dense.classes);
  std::copy(q.data(), q.data() + q.size(), out.data.begin());
  return out;
}

}  // namespace

DenseScores crf_refine(const DenseScores& dense, const vit::ImageSample& image, const CRFConfig& cfg) {
  cfg.validate();
  if (image.height() != dense.height || image.width() != dense.width) {
    throw ShapeError("crf: image is " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + ", scores are " + std::to_string(dense.height) +
                     "x" + std::to_string(dense.width));
  }
  if (cfg.spatial_weight == 0.0 && cfg.bilateral_weight == 0.0) return dense;
  // Double-precision kernels for small images; single precision keeps the
  // N x N matrix affordable up to 64 x 64.
  if (dense.pixels() <= 1024) return mean_field<double>(dense, image, cfg);
  if (dense.pixels() <= 4096) return mean_field<float>(dense, image, cfg);
  throw ShapeError("dense crf supports at most 4096 pixels per image, got " +
                   std::to_string(dense.pixels()));
}

IoUAccumulator::IoUAccumulator(int classes, std::optional<int> ignore_index)
    : classes_(classes), ignore_(ignore_index) {
  if (classes < 1) throw ConfigError("class count must be >= 1");
  confusion_.assign(static_cast<std::size_t>(classes), std::vector<std::uint64_t>(static_cast<std::size_t>(classes), 0));
}

void IoUAccumulator::add(const PseudoLabelMap& pred, const PseudoLabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("prediction " + pred.source_id + " is " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + ", ground truth is " + std::to_string(gt.height) +
                     "x" + std::to_string(gt.width));
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i];
    if (ignore_ && g == *ignore_) continue;
    const int p = pred.labels[i];
    if (g < 0 || g >= classes_) throw FormatError("ground-truth label " + std::to_string(g) + " out of range");
    if (p < 0 || p >= classes_) throw FormatError("predicted label " + std::to_string(p) + " out of range");
    ++confusion_[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
  }
}

IoUReport IoUAccumulator::report() const {
  IoUReport r;
  r.confusion = confusion_;
  double total = 0.0;
  int defined = 0;
  for (int c = 0; c < classes_; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    const std::uint64_t tp = confusion_[uc][uc];
    std::uint64_t fn = 0, fp = 0;
    for (int o = 0; o < classes_; ++o) {
      if (o == c) continue;
      fn += confusion_[uc][static_cast<std::size_t>(o)];
      fp += confusion_[static_cast<std::size_t>(o)][uc];
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) {
      r.per_class_iou.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class_iou.emplace_back(iou);
    total += iou;
    ++defined;
  }
  r.mean_iou = defined > 0 ? total / defined : 0.0;
  return r;
}

IoUReport compute_miou(const PseudoLabelMap& pred, const PseudoLabelMap& gt, int classes,
                       std::optional<int> ignore_index) {
  IoUAccumulator acc(classes, ignore_index);
  acc.add(pred, gt);
  return acc.report();
}

namespace {

std::string class_name(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : "class" + std::to_string(c);
}

}  // namespace

json IoUReport::to_json(const std::vector<std::string>& class_names) const {
  json per_class = json::array();
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    per_class.push_back({{"class", class_name(class_names, c)},
                         {"iou", per_class_iou[c] ? json(*per_class_iou[c]) : json(nullptr)}});
  }
  return {{"mean_iou", mean_iou}, {"per_class", per_class}, {"confusion", confusion}};
}

std::string IoUReport::to_table(const std::vector<std::string>& class_names) const {
  std::size_t width = 8;
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) width = std::max(width, class_name(class_names, c).size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width) + 2) << "class" << "IoU\n";
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << class_name(class_names, c);
    if (per_class_iou[c]) {
      out << std::fixed << std::setprecision(4) << *per_class_iou[c] << '\n';
    } else {
      out << "-\n";
    }
  }
  out << std::left << std::setw(static_cast<int>(width) + 2) << "mIoU" << std::fixed
      << std::setprecision(4) << mean_iou << '\n';
  return out.str();
}

}  // namespace pcc::pseudo
