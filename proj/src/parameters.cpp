#include "pcc/parameters.hpp"

#include "pcc/errors.hpp"

namespace pcc {

void ParameterSet::add(const std::string& name, Mat value) {
  if (!values_.emplace(name, std::move(value)).second) {
    throw ConfigError("duplicate parameter name: " + name);
  }
}

const Mat& ParameterSet::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

Mat& ParameterSet::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const { return scalar_count(""); }

std::size_t ParameterSet::scalar_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, m] : values_) {
    if (name.starts_with(prefix)) n += static_cast<std::size_t>(m.size());
  }
  return n;
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [name, m] : other.values_) add(name, m);
}

ad::Var ParameterBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Var v = track_ ? tape_.variable(params_.at(name)) : tape_.constant(params_.at(name));
  bound_.emplace(name, v);
  return v;
}

Gradients ParameterBinder::gradients() const {
  Gradients out;
  for (const auto& [name, v] : bound_) out.emplace(name, v.grad());
  return out;
}

double Rng::truncated_normal(double std) {
  std::normal_distribution<double> dist(0.0, std);
  for (;;) {
    const double x = dist(engine_);
    if (x >= -2.0 * std && x <= 2.0 * std) return x;
  }
}

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

int Rng::uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

Mat Rng::truncated_normal(Eigen::Index rows, Eigen::Index cols, double std) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = truncated_normal(std);
  return m;
}

}  // namespace pcc
