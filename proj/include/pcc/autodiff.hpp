#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Each sample gets its
// own tape, so independent samples can be differentiated on separate threads
// while sharing read-only parameter values.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace pcc::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] const Mat& grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that does not receive gradients.
  Var constant(Mat value);
  /// Leaf that accumulates gradients.
  Var variable(Mat value);

  /// Records an interior node. `backward` receives the node's upstream gradient
  /// and must call accumulate() for each parent. Skipped when no parent
  /// requires gradients.
  Var record(Mat value, std::initializer_list<Var> parents, Backward backward);
  Var record(Mat value, std::span<const Var> parents, Backward backward);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and runs the reverse sweep.
  void backward(Var out);

  void accumulate(const Var& v, const Mat& g);
  template <typename Expr>
  void accumulate_block(const Var& v, Eigen::Index r, Eigen::Index c, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad.block(r, c, g.rows(), g.cols()) += g;
  }

  [[nodiscard]] bool requires_grad(const Var& v) const {
    return nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  [[nodiscard]] const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  /// Gradient of a node; a zero matrix of matching shape if nothing flowed in.
  [[nodiscard]] const Mat& grad(int id) const;
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  static void ensure_grad(Node& n);

  std::vector<Node> nodes_;
};

// Linear algebra
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
/// Repeats a 1 x n row `rows` times.
Var broadcast_rows(Var row, Eigen::Index rows);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);

// Pointwise nonlinearities
Var sigmoid(Var a);
Var tanh(Var a);
/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Var gelu(Var a);

// Row-wise normalizers
Var softmax_rows(Var a);
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-6);

// Structural
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const Eigen::Index> rows);
/// out(flat i) = a(flat index_map[i]); flat indices are row-major.
Var gather_flat(Var a, std::vector<Eigen::Index> index_map, Eigen::Index out_rows,
                Eigen::Index out_cols);

}  // namespace pcc::ad
