#include "pcc/classification_head.hpp"

#include "pcc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pcc::head {

ClassVocabulary ClassVocabulary::from_categories(const clusters::CategoryList& categories) {
  categories.validate();
  ClassVocabulary v;
  v.classes.push_back(kBackground);
  v.classes.insert(v.classes.end(), categories.names.begin(), categories.names.end());
  return v;
}

int ClassVocabulary::index_of(const std::string& name) const {
  auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw ConfigError("unknown class: " + name);
  return static_cast<int>(it - classes.begin());
}

clusters::CategoryList ClassVocabulary::foreground() const {
  return {std::vector<std::string>(classes.begin() + 1, classes.end())};
}

ImageLabelVector ImageLabelVector::from_labels(const std::set<std::string>& labels,
                                               const ClassVocabulary& vocab) {
  ImageLabelVector out;
  out.y.assign(vocab.size(), 0);
  out.y[0] = 1;
  for (const auto& l : labels) out.y[static_cast<std::size_t>(vocab.index_of(l))] = 1;
  return out;
}

ParameterSet init_classifier_params(int input_dim, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed ^ 0x165667b19e3779f9ULL);
  ParameterSet ps;
  ps.add(kClassifierName, rng.truncated_normal(input_dim, static_cast<Eigen::Index>(classes), 0.02));
  return ps;
}

PatchPredictions classify_patches(const fusion::FusedTokens& tokens, const ClassifierWeights& W) {
  ad::Tape tape;
  ad::Var z = classify_patches(tape.constant(tokens.values), tape.constant(W.W));
  return {z.value(), tokens.grid_side};
}

ad::Var classify_patches(ad::Var tokens, ad::Var W) {
  if (tokens.cols() != W.rows()) {
    throw ShapeError("classifier expects width " + std::to_string(W.rows()) + ", tokens have " +
                     std::to_string(tokens.cols()));
  }
  return ad::softmax_rows(ad::matmul(tokens, W));
}

std::vector<Eigen::Index> topk_indices(const Mat& Z, Eigen::Index column, int k) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(Z.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return Z(a, column) > Z(b, column); });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

namespace {

void check_k(Eigen::Index tokens, int k) {
  if (k < 1 || k > tokens) {
    throw ShapeError("top-k pooling needs 1 <= k <= " + std::to_string(tokens) + ", got k=" +
                     std::to_string(k));
  }
}

}  // namespace

Mat topk_pool(const PatchPredictions& Z, const TopKConfig& cfg) {
  ad::Tape tape;
  return topk_pool(tape.constant(Z.Z), cfg).value();
}

ad::Var topk_pool(ad::Var Z, const TopKConfig& cfg) {
  check_k(Z.rows(), cfg.k);
  const Mat& z = Z.value();
  const Eigen::Index classes = z.cols();
  std::vector<std::vector<Eigen::Index>> selected(static_cast<std::size_t>(classes));
  Mat out(1, classes);
  for (Eigen::Index c = 0; c < classes; ++c) {
    selected[static_cast<std::size_t>(c)] = topk_indices(z, c, cfg.k);
    double acc = 0.0;
    for (Eigen::Index j : selected[static_cast<std::size_t>(c)]) acc += z(j, c);
    out(0, c) = acc / cfg.k;
  }
  const int k = cfg.k;
  return Z.tape()->record(std::move(out), {Z}, [Z, selected, k](ad::Tape& tp, const Mat& g) {
    Mat gz = Mat::Zero(Z.rows(), Z.cols());
    for (std::size_t c = 0; c < selected.size(); ++c) {
      for (Eigen::Index j : selected[c]) gz(j, static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c)) / k;
    }
    tp.accumulate(Z, gz);
  });
}

namespace {

void check_loss_shapes(Eigen::Index classes, const ImageLabelVector& y, const LossOptions& opts) {
  if (static_cast<Eigen::Index>(y.y.size()) != classes) {
    throw ShapeError("prediction has " + std::to_string(classes) + " classes, label vector " +
                     std::to_string(y.y.size()));
  }
  if (!opts.include_background && classes < 2) {
    throw ShapeError("excluding background leaves no classes to average");
  }
}

}  // namespace

double mce_loss(const Mat& p, const ImageLabelVector& y, const LossOptions& opts) {
  ad::Tape tape;
  return mce_loss(tape.constant(p), y, opts).value()(0, 0);
}

ad::Var mce_loss(ad::Var p, const ImageLabelVector& y, const LossOptions& opts) {
  if (p.rows() != 1) throw ShapeError("image prediction must be a single row");
  const Eigen::Index classes = p.cols();
  check_loss_shapes(classes, y, opts);
  const Eigen::Index first = opts.include_background ? 0 : 1;
  const double count = static_cast<double>(classes - first);
  const double eps = opts.epsilon;
  double total = 0.0;
  for (Eigen::Index c = first; c < classes; ++c) {
    const double pc = std::clamp(p.value()(0, c), eps, 1.0 - eps);
    total -= y.y[static_cast<std::size_t>(c)] != 0 ? std::log(pc) : std::log(1.0 - pc);
  }
  Mat out(1, 1);
  out(0, 0) = total / count;
  std::vector<std::uint8_t> labels = y.y;
  return p.tape()->record(std::move(out), {p}, [p, labels, first, count, eps](ad::Tape& tp, const Mat& g) {
    Mat gp = Mat::Zero(1, p.cols());
    for (Eigen::Index c = first; c < p.cols(); ++c) {
      const double raw = p.value()(0, c);
      if (raw < eps || raw > 1.0 - eps) continue;  // clipped: flat
      gp(0, c) = labels[static_cast<std::size_t>(c)] != 0 ? -1.0 / raw : 1.0 / (1.0 - raw);
    }
    tp.accumulate(p, gp * (g(0, 0) / count));
  });
}

}  // namespace pcc::head
