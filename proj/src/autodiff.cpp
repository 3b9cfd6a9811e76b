#include "pcc/autodiff.hpp"

#include "pcc/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace pcc::ad {

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Mat value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || requires_grad(p);
  Node n{std::move(value), {}, needs, {}};
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::ensure_grad(Node& n) {
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Mat& Tape::grad(int id) const {
  auto& n = const_cast<Node&>(nodes_[static_cast<std::size_t>(id)]);
  ensure_grad(n);
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.rows() != 1 || out.cols() != 1) {
    throw ShapeError("backward() needs a scalar output, got " + std::to_string(out.rows()) + "x" +
                     std::to_string(out.cols()));
  }
  accumulate(out, Mat::Ones(1, 1));
  for (int i = out.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  }
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: column counts differ");
  Tape& t = *a.tape();
  return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value());
    if (tp.requires_grad(b)) tp.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Tape& t = *a.tape();
  Mat out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Mat& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row");
  Tape& t = *row.tape();
  Mat out = row.value().replicate(rows, 1);
  return t.record(std::move(out), {row},
                  [row](Tape& tp, const Mat& g) { tp.accumulate(row, g.colwise().sum()); });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double factor) {
  Tape& t = *a.tape();
  return t.record(a.value() * factor, {a},
                  [a, factor](Tape& tp, const Mat& g) { tp.accumulate(a, g * factor); });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    tp.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Mat out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return t.record(out, {a}, [a, out](Tape& tp, const Mat& g) {
    tp.accumulate(a, (g.array() * out.array() * (1.0 - out.array())).matrix());
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  Mat out = a.value().array().tanh().matrix();
  return t.record(out, {a}, [a, out](Tape& tp, const Mat& g) {
    tp.accumulate(a, (g.array() * (1.0 - out.array().square())).matrix());
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat out = a.value().unaryExpr(
      [inv_sqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return t.record(std::move(out), {a}, [a, inv_sqrt2](Tape& tp, const Mat& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat d = a.value().unaryExpr([&](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return t.record(out, {a}, [a, out](Tape& tp, const Mat& g) {
    // dx = y * (g - <g, y>) per row
    Eigen::VectorXd dots = g.cwiseProduct(out).rowwise().sum();
    Mat dx = out.cwiseProduct((g.colwise() - dots).matrix());
    tp.accumulate(a, dx);
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  if (gamma.cols() != a.cols() || beta.cols() != a.cols()) {
    throw ShapeError("layer_norm: affine parameters do not match feature width");
  }
  Tape& t = *a.tape();
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
            beta.value().row(0).array();
  return t.record(std::move(out), {a, gamma, beta},
                  [a, gamma, beta, xhat, inv_std, n](Tape& tp, const Mat& g) {
                    if (tp.requires_grad(gamma)) {
                      tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                    }
                    if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                    if (!tp.requires_grad(a)) return;
                    Mat gx = g.array().rowwise() * gamma.value().row(0).array();
                    Mat dx(g.rows(), n);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double m1 = gx.row(r).mean();
                      const double m2 = gx.row(r).cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                    tp.accumulate(a, dx);
                  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Tape& t = *a.tape();
  Mat out = a.value().middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start](Tape& tp, const Mat& g) {
    tp.accumulate_block(a, 0, start, g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape()->record(std::move(out), parts, [ps](Tape& tp, const Mat& g) {
    Eigen::Index off = 0;
    for (const Var& p : ps) {
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape()->record(std::move(out), parts, [ps](Tape& tp, const Mat& g) {
    Eigen::Index off = 0;
    for (const Var& p : ps) {
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

Var gather_rows(Var a, std::span<const Eigen::Index> rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return a.tape()->record(std::move(out), {a}, [a, idx](Tape& tp, const Mat& g) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(a, ga);
  });
}

Var gather_flat(Var a, std::vector<Eigen::Index> index_map, Eigen::Index out_rows,
                Eigen::Index out_cols) {
  if (static_cast<Eigen::Index>(index_map.size()) != out_rows * out_cols) {
    throw ShapeError("gather_flat: index map size does not match output shape");
  }
  const Eigen::Index n = a.value().size();
  Mat out(out_rows, out_cols);
  const double* src = a.value().data();
  double* dst = out.data();
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    if (index_map[i] < 0 || index_map[i] >= n) throw ShapeError("gather_flat: index out of range");
    dst[i] = src[index_map[i]];
  }
  return a.tape()->record(std::move(out), {a}, [a, map = std::move(index_map)](Tape& tp, const Mat& g) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    const double* gs = g.data();
    double* gd = ga.data();
    for (std::size_t i = 0; i < map.size(); ++i) gd[map[i]] += gs[i];
    tp.accumulate(a, ga);
  });
}

}  // namespace pcc::ad
