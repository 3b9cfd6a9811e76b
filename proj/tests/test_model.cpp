#include "pcc/errors.hpp"
#include "pcc/model.hpp"
#include "reference.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace pcc;
using fusion::FusionMode;

TEST_CASE("full chain on a 2x2 grid with two classes matches the hand-chained oracle") {
  std::mt19937_64 rng(41);
  const head::ClassVocabulary two{{"background", "cat"}};
  for (int trial = 0; trial < 20; ++trial) {
    for (FusionMode mode : {FusionMode::cluster_token, FusionMode::class_token, FusionMode::none}) {
      const auto m = testing::micro_model(mode, trial % 2 == 1, rng, two);
      const auto x = testing::random_image(4, rng, trial % 3 == 0 ? std::set<std::string>{} : std::set<std::string>{"cat"});
      const auto got = model::forward_loss(x, m);
      const auto oracle = reference::forward_loss(x, m);
      CHECK(std::abs(got.loss - oracle.loss) <= 1e-10);
      for (int i = 0; i < 4; ++i) {
        for (int c = 0; c < 2; ++c) CHECK(std::abs(got.predictions.Z(i, c) - oracle.Z[i][c]) <= 1e-10);
      }
    }
  }
}

TEST_CASE("loss is finite and non-negative, including background-only images") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = testing::micro_model(FusionMode::cluster_token, false, rng);
    std::set<std::string> labels;
    for (const char* c : {"cat", "dog", "car"}) {
      if (rng() % 2) labels.insert(c);
    }
    const auto r = model::forward_loss(testing::random_image(4, rng, labels), m);
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss >= 0.0);
    CHECK(r.predictions.Z.rows() == 4);
    CHECK(r.predictions.Z.cols() == 4);
  }
}

TEST_CASE("predict and the training forward pass agree") {
  std::mt19937_64 rng(43);
  const auto m = testing::micro_model(FusionMode::cluster_token, true, rng);
  const auto x = testing::random_image(4, rng, {"dog"});
  CHECK((m.predict(x).Z - model::forward_loss(x, m).predictions.Z).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("the cluster token follows the image labels") {
  std::mt19937_64 rng(44);
  const auto m = testing::micro_model(FusionMode::cluster_token, false, rng);
  const auto img = testing::random_image(4, rng);
  auto cat = img, dog = img, car = img;
  cat.labels = {"cat"};
  dog.labels = {"dog"};
  car.labels = {"car"};
  // cat and dog share every tag, so they see the same token.
  CHECK(m.predict(cat).Z == m.predict(dog).Z);
  CHECK(m.predict(cat).Z != m.predict(car).Z);
}

TEST_CASE("model construction validates its inputs") {
  const auto cfg = testing::micro_config(FusionMode::cluster_token);
  CHECK_THROWS_AS(model::Model::create(cfg, testing::micro_vocabulary(), std::nullopt), ConfigError);
  CHECK_THROWS_AS(model::Model::create(testing::micro_config(FusionMode::none), {{"background"}}, std::nullopt),
                  ConfigError);
  const auto m = model::Model::create(testing::micro_config(FusionMode::none), testing::micro_vocabulary(), std::nullopt);
  CHECK(m.config().token_width() == 4);
  CHECK(model::Model::create(cfg, testing::micro_vocabulary(), testing::micro_assignment()).config().token_width() == 6);
}

TEST_CASE("parameters live under distinct namespaces") {
  const auto m = model::Model::create(testing::micro_config(), testing::micro_vocabulary(), testing::micro_assignment());
  std::set<std::string> namespaces;
  for (const auto& [name, v] : m.params().entries()) namespaces.insert(name.substr(0, name.find('.')));
  CHECK(namespaces == std::set<std::string>{"encoder", "fusion", "head", "refiner"});
  CHECK(m.params().at(fusion::kClusterMatrixName).rows() == 3);
  CHECK(m.params().at(head::kClassifierName).rows() == 6);
  CHECK(m.params().at(head::kClassifierName).cols() == 4);
}

TEST_CASE("end-to-end gradients match central differences across every parameter group") {
  std::mt19937_64 rng(45);
  int checked = 0;
  for (bool residual : {false, true}) {
    const auto m = testing::micro_model(FusionMode::cluster_token, residual, rng);
    const auto x = testing::random_image(4, rng, {"cat", "car"});
    const auto probes = testing::gradient_check(m, x, {"encoder.", "fusion.G", "refiner.", "head.W"}, 40, rng);
    for (const auto& p : probes) {
      CHECK_MESSAGE(p.rel_error <= 1e-4, p.name, "[", p.index, "] analytic ", p.analytic, " numeric ", p.numeric);
      ++checked;
    }
  }
  CHECK(checked >= 50);
}

TEST_CASE("class token gradients match central differences") {
  std::mt19937_64 rng(46);
  const auto m = testing::micro_model(FusionMode::class_token, false, rng);
  const auto x = testing::random_image(4, rng, {"dog"});
  for (const auto& p : testing::gradient_check(m, x, {"fusion.class_token", "head.W"}, 10, rng)) {
    CHECK_MESSAGE(p.rel_error <= 1e-4, p.name, "[", p.index, "]");
  }
}

TEST_CASE("checkpoints round-trip exactly") {
  testing::TempDir dir("ckpt");
  std::mt19937_64 rng(47);
  model::Checkpoint ck;
  ck.header = {{"epoch", 3}, {"note", "x"}};
  ck.tensors["a"] = Mat::Random(3, 5);
  ck.tensors["b.c"] = Mat::Random(1, 1);
  ck.save(dir.path / "nested" / "model.ckpt");
  CHECK_FALSE(std::filesystem::exists(dir.path / "nested" / "model.ckpt.tmp"));
  const auto back = model::Checkpoint::load(dir.path / "nested" / "model.ckpt");
  CHECK(back.header == ck.header);
  CHECK(back.tensors == ck.tensors);
}

TEST_CASE("damaged checkpoints raise FormatError") {
  testing::TempDir dir("badckpt");
  std::ofstream(dir.path / "junk.ckpt") << "not a checkpoint at all";
  CHECK_THROWS_AS(model::Checkpoint::load(dir.path / "junk.ckpt"), FormatError);

  model::Checkpoint ck;
  ck.header = {{"k", 1}};
  ck.tensors["a"] = Mat::Ones(4, 4);
  ck.save(dir.path / "good.ckpt");
  const auto full = std::filesystem::file_size(dir.path / "good.ckpt");
  std::filesystem::copy_file(dir.path / "good.ckpt", dir.path / "short.ckpt");
  std::filesystem::resize_file(dir.path / "short.ckpt", full - 8);
  CHECK_THROWS_AS(model::Checkpoint::load(dir.path / "short.ckpt"), FormatError);

  CHECK_THROWS_AS(model::Checkpoint::load(dir.path / "missing.ckpt"), IOError);
}
