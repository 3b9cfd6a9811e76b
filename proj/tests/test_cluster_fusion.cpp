#include "pcc/cluster_fusion.hpp"
#include "pcc/errors.hpp"
#include "reference.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <random>

using namespace pcc;
using clusters::ClusterVector;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ClusterVector random_bits(std::size_t L, std::mt19937_64& rng) {
  ClusterVector u;
  for (std::size_t i = 0; i < L; ++i) u.bits.push_back(static_cast<std::uint8_t>(rng() % 2));
  return u;
}

ParameterSet random_refiner(int width, std::mt19937_64& rng, double scale = 0.5) {
  ParameterSet ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(width), 1);
  for (auto& [name, m] : ps.entries()) m = random_mat(m.rows(), m.cols(), rng, scale);
  return ps;
}

}  // namespace

TEST_CASE("embed_clusters: multi-hot row sum") {
  Mat G(3, 2);
  G << 1, 2, 3, 4, 5, 6;
  const auto t = fusion::embed_clusters({{1, 0, 1}}, {G});
  CHECK(t.values(0, 0) == 6.0);
  CHECK(t.values(0, 1) == 8.0);
  const auto z = fusion::embed_clusters({{0, 0, 0}}, {G});
  CHECK(z.values.cols() == 2);
  CHECK(z.values.isZero(0.0));
  CHECK_THROWS_AS(fusion::embed_clusters({{1, 0}}, {G}), ShapeError);
}

TEST_CASE("embed_clusters matches the per-element loop oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + rng() % 6;
    const Mat G = random_mat(static_cast<Eigen::Index>(L), 3, rng);
    const ClusterVector u = random_bits(L, rng);
    const auto t = fusion::embed_clusters(u, {G});
    for (Eigen::Index j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < L; ++i) s += u.bits[i] * G(static_cast<Eigen::Index>(i), j);
      CHECK(std::abs(t.values(0, j) - s) <= 1e-12);
    }
    ad::Tape tape;
    const Mat taped = fusion::embed_clusters(u, tape.variable(G)).value();
    CHECK((taped - t.values).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("fuse appends the token to every row") {
  std::mt19937_64 rng(12);
  const Mat Fv = random_mat(4, 3, rng);
  Mat Fc(1, 2);
  Fc << 0.25, -1.5;
  const auto out = fusion::fuse({Fv, 2}, {Fc});
  REQUIRE(out.values.rows() == 4);
  REQUIRE(out.values.cols() == 5);
  CHECK(out.values.leftCols(3) == Fv);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(out.values.row(i).rightCols(2) == Fc);
  CHECK(out.grid_side == 2);

  const auto none = fusion::fuse({Fv, 2}, {Mat(1, 0)});
  CHECK(none.values == Fv);
}

TEST_CASE("class token arm has the same shapes as the cluster token arm") {
  const auto cluster = fusion::init_fusion_params(fusion::FusionMode::cluster_token, 3, 4, 0);
  const auto cls = fusion::init_fusion_params(fusion::FusionMode::class_token, 3, 4, 0);
  CHECK(cluster.at(fusion::kClusterMatrixName).rows() == 3);
  CHECK(cluster.at(fusion::kClusterMatrixName).cols() == 4);
  CHECK(cls.at(fusion::kClassTokenName).rows() == 1);
  CHECK(cls.at(fusion::kClassTokenName).cols() == 4);
  CHECK(fusion::init_fusion_params(fusion::FusionMode::none, 3, 4, 0).entries().empty());
  CHECK_THROWS_AS(fusion::init_fusion_params(fusion::FusionMode::cluster_token, 0, 4, 0), ConfigError);
}

TEST_CASE("fusion mode names round-trip") {
  for (auto m : {fusion::FusionMode::none, fusion::FusionMode::class_token, fusion::FusionMode::cluster_token}) {
    CHECK(fusion::parse_fusion_mode(fusion::to_string(m)) == m);
  }
  CHECK_THROWS_AS(fusion::parse_fusion_mode("attention"), ConfigError);
}

TEST_CASE("refine preserves shape at the 24x24 geometry") {
  const int width = 6;
  const auto ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(width), 0);
  std::mt19937_64 rng(13);
  const auto out = fusion::refine({random_mat(576, width, rng), 24}, ps);
  CHECK(out.values.rows() == 576);
  CHECK(out.values.cols() == width);
  CHECK(out.grid_side == 24);
  CHECK(out.values.allFinite());
}

TEST_CASE("refine with zero weights and zero projection bias outputs zeros") {
  std::mt19937_64 rng(14);
  ParameterSet ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(4), 0);
  for (auto& [name, m] : ps.entries()) m.setZero();
  const auto out = fusion::refine({random_mat(9, 4, rng), 3}, ps);
  CHECK(out.values.isZero(0.0));
}

TEST_CASE("refine rejects non-square token counts") {
  const auto ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(4), 0);
  CHECK_THROWS_AS(fusion::refine({Mat::Zero(6, 4), 0}, ps), ShapeError);
  CHECK_THROWS_AS(fusion::grid_side_of(0), ShapeError);
  CHECK(fusion::grid_side_of(576) == 24);
}

TEST_CASE("refine on a 2x2 grid with hidden size 1 matches a hand-unrolled recurrence") {
  // Width 2 gives one hidden unit per direction. Every weight is set by hand.
  ParameterSet ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(2), 0);
  REQUIRE(ps.at("refiner.horizontal.fwd.wh").rows() == 1);
  int counter = 0;
  for (auto& [name, m] : ps.entries()) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.1 * static_cast<double>((counter++ % 7) - 3);
  }
  Mat in(4, 2);
  in << 0.5, -1.0, 1.5, 0.25, -0.75, 2.0, 0.0, 1.0;

  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  // One LSTM step with scalar state; gates i, f, g, o.
  auto step = [&](const std::string& p, double x0, double x1, double& h, double& c) {
    const Mat& wx = ps.at(p + ".wx");
    const Mat& wh = ps.at(p + ".wh");
    const Mat& b = ps.at(p + ".b");
    double z[4];
    for (int j = 0; j < 4; ++j) z[j] = x0 * wx(0, j) + x1 * wx(1, j) + h * wh(0, j) + b(0, j);
    c = sig(z[1]) * c + sig(z[0]) * std::tanh(z[2]);
    h = sig(z[3]) * std::tanh(c);
  };
  // Bidirectional pass over the sequence (a, b) of tokens; returns projected outputs.
  auto pass = [&](const std::string& p, const Mat& x, int a, int b, Mat& out) {
    double hf = 0, cf = 0, hb = 0, cb = 0;
    double f[2], r[2];
    step(p + ".fwd", x(a, 0), x(a, 1), hf, cf);
    f[0] = hf;
    step(p + ".fwd", x(b, 0), x(b, 1), hf, cf);
    f[1] = hf;
    step(p + ".bwd", x(b, 0), x(b, 1), hb, cb);
    r[1] = hb;
    step(p + ".bwd", x(a, 0), x(a, 1), hb, cb);
    r[0] = hb;
    const Mat& W = ps.at(p + ".proj.w");
    const Mat& B = ps.at(p + ".proj.b");
    const int idx[2] = {a, b};
    for (int t = 0; t < 2; ++t) {
      for (int d = 0; d < 2; ++d) out(idx[t], d) = f[t] * W(0, d) + r[t] * W(1, d) + B(0, d);
    }
  };
  Mat mid(4, 2), out(4, 2);
  pass("refiner.horizontal", in, 0, 1, mid);  // top row
  pass("refiner.horizontal", in, 2, 3, mid);  // bottom row
  pass("refiner.vertical", mid, 0, 2, out);   // left column
  pass("refiner.vertical", mid, 1, 3, out);   // right column

  const auto got = fusion::refine({in, 2}, ps);
  CHECK((got.values - out).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("refine matches the loop oracle on random grids, with and without residual") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const int g = 1 + static_cast<int>(rng() % 4);
    const int width = 2 + static_cast<int>(rng() % 5);
    const ParameterSet ps = random_refiner(width, rng);
    const Mat in = random_mat(g * g, width, rng);
    for (bool residual : {false, true}) {
      const auto got = fusion::refine({in, g}, ps, residual);
      const auto oracle = reference::refine(reference::from_mat(in), g, ps, residual);
      for (int i = 0; i < g * g; ++i) {
        for (int d = 0; d < width; ++d) CHECK(std::abs(got.values(i, d) - oracle[i][d]) <= 1e-12);
      }
    }
  }
}

// --- properties ---------------------------------------------------------------

TEST_CASE("property: embedding is additive over disjoint supports") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + rng() % 8;
    const Mat G = random_mat(static_cast<Eigen::Index>(L), 4, rng);
    ClusterVector a, b, both;
    for (std::size_t i = 0; i < L; ++i) {
      const auto r = rng() % 3;  // 0: neither, 1: a, 2: b
      a.bits.push_back(r == 1);
      b.bits.push_back(r == 2);
      both.bits.push_back(r != 0);
    }
    const Mat sum = fusion::embed_clusters(a, {G}).values + fusion::embed_clusters(b, {G}).values;
    CHECK((fusion::embed_clusters(both, {G}).values - sum).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("property: refine is shape-preserving for every valid grid") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const int g = 1 + static_cast<int>(rng() % 6);
    const int width = 1 + static_cast<int>(rng() % 8);
    const auto ps = fusion::init_refiner_params(fusion::RefinerConfig::for_width(width), rng());
    const auto out = fusion::refine({random_mat(g * g, width, rng), g}, ps, trial % 2 == 0);
    CHECK(out.values.rows() == g * g);
    CHECK(out.values.cols() == width);
  }
}

TEST_CASE("property: fused rows share an identical cluster suffix") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index s = 1 + static_cast<Eigen::Index>(rng() % 30);
    const Eigen::Index h = 1 + static_cast<Eigen::Index>(rng() % 6);
    const auto out = fusion::fuse({random_mat(s, 3, rng), 0}, {random_mat(1, h, rng)});
    double worst = 0.0;
    for (Eigen::Index i = 0; i < s; ++i) {
      worst = std::max(worst, (out.values.row(i).rightCols(h) - out.values.row(0).rightCols(h)).cwiseAbs().maxCoeff());
    }
    CHECK(worst == 0.0);
  }
}

TEST_CASE("property: gradients in G and the refiner match finite differences") {
  std::mt19937_64 rng(19);
  const int width = 5;
  ParameterSet ps = random_refiner(width, rng, 0.4);
  ps.add(fusion::kClusterMatrixName, random_mat(3, 2, rng));
  const Mat patches = random_mat(4, width - 2, rng);
  const ClusterVector u{{1, 0, 1}};
  const Mat weights = random_mat(4, width, rng);

  auto objective = [&](ParameterBinder& p) {
    ad::Tape& tape = p.tape();
    ad::Var fused = fusion::fuse(tape.constant(patches), fusion::embed_clusters(u, p(fusion::kClusterMatrixName)));
    return ad::sum(ad::mul(fusion::refine(p, fused, false), tape.constant(weights)));
  };
  ad::Tape tape;
  ParameterBinder binder(tape, ps);
  tape.backward(objective(binder));
  const Gradients grads = binder.gradients();

  int checked = 0;
  for (const auto& [name, m] : ps.entries()) {
    for (Eigen::Index i = 0; i < m.size(); i += 3) {
      const double h = 1e-6;
      auto eval = [&](double delta) {
        ParameterSet q = ps;
        q.at(name).data()[i] += delta;
        ad::Tape t;
        ParameterBinder b(t, q, false);
        return objective(b).value()(0, 0);
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      CHECK_MESSAGE(testing::relative_error(grads.at(name).data()[i], fd) <= 1e-4, name, "[", i, "]");
      ++checked;
    }
  }
  CHECK(checked >= 50);
}
