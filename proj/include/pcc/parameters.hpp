#pragma once

#include "pcc/autodiff.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace pcc {

using ad::Mat;

/// Named, ordered collection of trainable matrices. Names are dotted paths
/// ("encoder.block0.attn.qkv.w"); the first segment is the namespace.
class ParameterSet {
 public:
  void add(const std::string& name, Mat value);
  [[nodiscard]] bool contains(const std::string& name) const { return values_.contains(name); }
  [[nodiscard]] const Mat& at(const std::string& name) const;
  Mat& at(const std::string& name);
  [[nodiscard]] const std::map<std::string, Mat>& entries() const { return values_; }
  std::map<std::string, Mat>& entries() { return values_; }
  [[nodiscard]] std::size_t scalar_count() const;
  /// Scalar count restricted to names starting with `prefix`.
  [[nodiscard]] std::size_t scalar_count(const std::string& prefix) const;
  void merge(const ParameterSet& other);

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::map<std::string, Mat> values_;
};

using Gradients = std::map<std::string, Mat>;

/// Binds a ParameterSet onto a tape, creating one leaf per parameter on first
/// use, and collects the leaf gradients after the reverse sweep.
class ParameterBinder {
 public:
  /// With `track_gradients` false every parameter is bound as a constant.
  ParameterBinder(ad::Tape& tape, const ParameterSet& params, bool track_gradients = true)
      : tape_(tape), params_(params), track_(track_gradients) {}

  ad::Var operator()(const std::string& name);
  [[nodiscard]] ad::Tape& tape() const { return tape_; }
  /// Gradients of every parameter touched by the forward pass.
  [[nodiscard]] Gradients gradients() const;

 private:
  ad::Tape& tape_;
  const ParameterSet& params_;
  bool track_;
  std::map<std::string, ad::Var> bound_;
};

/// Seeded generator used for every stochastic initialisation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Normal(0, std) truncated to [-2 std, 2 std] by resampling.
  double truncated_normal(double std);
  double uniform(double lo, double hi);
  int uniform_int(int lo, int hi);
  std::mt19937_64& engine() { return engine_; }

  Mat truncated_normal(Eigen::Index rows, Eigen::Index cols, double std);

 private:
  std::mt19937_64 engine_;
};

}  // namespace pcc
