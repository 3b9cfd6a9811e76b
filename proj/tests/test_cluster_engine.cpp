#include "pcc/cluster_engine.hpp"
#include "pcc/errors.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace pcc;
using namespace pcc::clusters;

namespace {

CategoryList pets() { return {{"cat", "dog", "car"}}; }

llm::MockScript constant_script(const std::string& response) {
  llm::MockScript s;
  s.entries.push_back({"", false, response});
  return s;
}

/// Gen answer, then refine answers alternating between two assignments.
llm::MockScript oscillating_script() {
  llm::MockScript s;
  s.entries.push_back({"Cluster these", false, "cat: animal\ndog: animal\ncar: vehicle"});
  for (int i = 0; i < 20; ++i) {
    s.entries.push_back({"Refine these", false,
                         i % 2 == 0 ? "cat: pet\ndog: pet\ncar: vehicle" : "cat: animal\ndog: animal\ncar: vehicle"});
  }
  return s;
}

ClusterAssignment make(std::map<std::string, std::set<std::string>> m) {
  ClusterAssignment a;
  for (const auto& [k, v] : m) a.categories.push_back(k);
  a.mapping = std::move(m);
  a.rebuild_vocabulary();
  return a;
}

}  // namespace

TEST_CASE("parse_assignment: direct parse, normalisation and errors") {
  const auto p = parse_assignment("cat: pet\ndog: pet", {{"cat", "dog"}});
  CHECK(p.assignment.mapping.at("cat") == std::set<std::string>{"pet"});
  CHECK(p.assignment.mapping.at("dog") == std::set<std::string>{"pet"});
  CHECK(p.assignment.size() == 1);
  CHECK(p.unmatched.empty());

  const auto n = parse_assignment("Cat : Pet, Animal", {{"cat"}});
  CHECK(n.assignment.mapping.at("cat") == std::set<std::string>{"animal", "pet"});

  CHECK_THROWS_AS(parse_assignment("giraffe: animal", {{"cat", "dog"}}), ParseError);
}

TEST_CASE("parse_assignment assigns misc to categories the reply omits") {
  const auto p = parse_assignment("cat: pet\nzebra: stripes", pets());
  CHECK(p.unmatched == std::vector<std::string>{"dog", "car"});
  CHECK(p.assignment.mapping.at("dog") == std::set<std::string>{"misc"});
  CHECK(p.assignment.vocabulary == std::vector<std::string>{"misc", "pet"});
  p.assignment.validate();
}

TEST_CASE("assignments_equal uses per-category set semantics") {
  const auto a = make({{"cat", {"animal", "pet"}}, {"car", {"vehicle"}}});
  auto b = make({{"cat", {"pet", "animal"}}, {"car", {"vehicle"}}});
  std::reverse(b.vocabulary.begin(), b.vocabulary.end());
  CHECK(assignments_equal(a, b));
  CHECK_FALSE(assignments_equal(a, make({{"cat", {"animal"}}, {"car", {"vehicle"}}})));
  CHECK(assignments_equal(ClusterAssignment{}, ClusterAssignment{}));
}

TEST_CASE("cluster_vector examples") {
  const auto z = make({{"cat", {"animal", "pet"}}, {"car", {"vehicle"}}});
  REQUIRE(z.vocabulary == std::vector<std::string>{"animal", "pet", "vehicle"});
  CHECK(cluster_vector({"cat"}, z).bits == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(cluster_vector({}, z).bits == std::vector<std::uint8_t>{0, 0, 0});
  CHECK(cluster_vector({"cat", "car"}, z).bits == std::vector<std::uint8_t>{1, 1, 1});
  CHECK_THROWS_AS(cluster_vector({"horse"}, z), ConfigError);
}

TEST_CASE("cats and dogs share the animal and pet clusters") {
  llm::LlmGateway g(llm::LLMBackend{}, constant_script("cat: animal,pet\ndog: animal,pet\ncar: vehicle"));
  const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), {2, 10});
  CHECK(z.size() == 3);
  CHECK(z.vocabulary == std::vector<std::string>{"animal", "pet", "vehicle"});
  CHECK(cluster_vector({"cat"}, z).bits == std::vector<std::uint8_t>{1, 1, 0});
}

TEST_CASE("constant mock converges after the first refinement") {
  llm::LlmGateway g(llm::LLMBackend{}, constant_script("cat: animal,pet\ndog: animal,pet\ncar: vehicle"));
  const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), {2, 10});
  CHECK(z.iteration_index == 1);
  CHECK_FALSE(z.stalled);
  CHECK(g.transcript().size() == 2);
}

TEST_CASE("oscillating mock stops at the iteration cap with stalled set") {
  llm::LlmGateway g(llm::LLMBackend{}, oscillating_script());
  const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), {2, 5});
  CHECK(z.iteration_index == 5);
  CHECK(z.stalled);
  CHECK(g.transcript().size() == 6);
  CHECK(z.mapping.at("cat") == std::set<std::string>{"pet"});
}

TEST_CASE("a larger stability window needs that many agreeing iterates") {
  for (int r = 2; r <= 5; ++r) {
    llm::LlmGateway g(llm::LLMBackend{}, constant_script("cat: a\ndog: a\ncar: b"));
    const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), {r, 10});
    CHECK(z.iteration_index == r - 1);
    CHECK(g.transcript().size() == static_cast<std::size_t>(r));
    CHECK_FALSE(z.stalled);
  }
}

TEST_CASE("refine prompts carry the previous iterate") {
  llm::LlmGateway g(llm::LLMBackend{}, constant_script("cat: pet\ndog: pet\ncar: vehicle"));
  generate_clusters(pets(), g, PromptTemplates::defaults(), {2, 10});
  const auto& t = g.transcript();
  CHECK(t[0].prompt_text.find("cat, dog, car") != std::string::npos);
  CHECK(t[1].prompt_text.find("cat: pet\ndog: pet\ncar: vehicle") != std::string::npos);
}

TEST_CASE("an unparseable reply is re-prompted once, then ParseError") {
  llm::MockScript s;
  s.entries.push_back({"", false, "I cannot help with that."});
  s.entries.push_back({"", false, "cat: pet\ndog: pet\ncar: vehicle"});
  llm::LlmGateway ok(llm::LLMBackend{}, s);
  const auto z = generate_clusters(pets(), ok, PromptTemplates::defaults(), {2, 10});
  CHECK(z.mapping.at("car") == std::set<std::string>{"vehicle"});
  CHECK(ok.transcript().size() == 3);

  llm::LlmGateway bad(llm::LLMBackend{}, constant_script("no idea"));
  CHECK_THROWS_AS(generate_clusters(pets(), bad, PromptTemplates::defaults(), {2, 10}), ParseError);
  CHECK(bad.transcript().size() == 2);
}

TEST_CASE("input validation") {
  llm::LlmGateway g(llm::LLMBackend{}, constant_script("cat: a"));
  CHECK_THROWS_AS(generate_clusters({}, g, PromptTemplates::defaults(), {2, 10}), ConfigError);
  CHECK_THROWS_AS(generate_clusters(pets(), g, PromptTemplates::defaults(), {3, 3}), ConfigError);
  CHECK_THROWS_AS(generate_clusters(pets(), g, PromptTemplates::defaults(), {0, 3}), ConfigError);
  CHECK_THROWS_AS(generate_clusters(pets(), g, {"no placeholder", "{clusters}"}, {2, 10}), ConfigError);
  CHECK_THROWS_AS(generate_clusters(pets(), g, {"{categories}", "{clusters} {clusters}"}, {2, 10}), ConfigError);
  CHECK_THROWS_AS((CategoryList{{"cat", "cat"}}.validate()), ConfigError);
  CHECK_THROWS_AS((CategoryList{{"cat", ""}}.validate()), ConfigError);
}

TEST_CASE("templates and category lists load from files") {
  testing::TempDir dir("templates");
  std::ofstream(dir.path / "gen.txt") << "Group {categories} please";
  std::ofstream(dir.path / "refine.txt") << "Improve {clusters}";
  std::ofstream(dir.path / "cats.txt") << "cat\n\ndog\n";
  const auto t = PromptTemplates::load(dir.path / "gen.txt", dir.path / "refine.txt");
  CHECK(t.gen_template == "Group {categories} please");
  CHECK(CategoryList::load(dir.path / "cats.txt").names == std::vector<std::string>{"cat", "dog"});
}

TEST_CASE("cluster maps round-trip through JSON files") {
  testing::TempDir dir("map");
  auto z = make({{"cat", {"animal", "pet"}}, {"car", {"vehicle"}}});
  z.iteration_index = 3;
  z.stalled = true;
  z.save(dir.path / "map.json");
  const auto back = ClusterAssignment::load(dir.path / "map.json");
  CHECK(assignments_equal(back, z));
  CHECK(back.vocabulary == z.vocabulary);
  CHECK(back.iteration_index == 3);
  CHECK(back.stalled);
  CHECK(back.to_text() == "car: vehicle\ncat: animal, pet\n");
}

TEST_CASE("invalid assignments are rejected") {
  auto z = make({{"cat", {"pet"}}});
  z.mapping["cat"].clear();
  CHECK_THROWS_AS(z.validate(), ConfigError);
  auto w = make({{"cat", {"pet"}}});
  w.vocabulary.push_back("extra");
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

// --- properties ---------------------------------------------------------------

namespace {

ClusterAssignment random_assignment(std::mt19937_64& rng, std::size_t categories, std::size_t tags) {
  ClusterAssignment a;
  for (std::size_t c = 0; c < categories; ++c) {
    const std::string name = "c" + std::to_string(c);
    a.categories.push_back(name);
    auto& set = a.mapping[name];
    set.insert("t" + std::to_string(rng() % tags));
    while (rng() % 2 == 0) set.insert("t" + std::to_string(rng() % tags));
  }
  a.rebuild_vocabulary();
  return a;
}

std::set<std::string> random_labels(std::mt19937_64& rng, const ClusterAssignment& a) {
  std::set<std::string> s;
  for (const auto& c : a.categories) {
    if (rng() % 3 == 0) s.insert(c);
  }
  return s;
}

}  // namespace

TEST_CASE("property: cluster vector of a union is the OR of the parts") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_assignment(rng, 1 + rng() % 8, 1 + rng() % 6);
    const auto A = random_labels(rng, a), B = random_labels(rng, a);
    std::set<std::string> U = A;
    U.insert(B.begin(), B.end());
    const auto va = cluster_vector(A, a), vb = cluster_vector(B, a), vu = cluster_vector(U, a);
    REQUIRE(vu.size() == a.size());
    for (std::size_t i = 0; i < vu.size(); ++i) CHECK(vu.bits[i] == (va.bits[i] | vb.bits[i]));
  }
}

TEST_CASE("property: permuting the vocabulary permutes the bits identically") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_assignment(rng, 1 + rng() % 8, 1 + rng() % 6);
    auto p = a;
    std::vector<std::size_t> perm(a.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < perm.size(); ++i) p.vocabulary[i] = a.vocabulary[perm[i]];
    const auto labels = random_labels(rng, a);
    const auto u = cluster_vector(labels, a), up = cluster_vector(labels, p);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(up.bits[i] == u.bits[perm[i]]);
    // Each bit is one exactly when some label carries that tag.
    for (std::size_t i = 0; i < u.size(); ++i) {
      bool expected = false;
      for (const auto& l : labels) expected = expected || a.mapping.at(l).contains(a.vocabulary[i]);
      CHECK(u.bits[i] == expected);
    }
  }
}

TEST_CASE("property: clustering is a pure function of its inputs and script") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 30; ++trial) {
    llm::MockScript s;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) {
      std::string reply;
      for (const auto& c : pets().names) reply += c + ": t" + std::to_string(rng() % 3) + "\n";
      s.entries.push_back({"", false, reply});
    }
    const StopCondition stop{2 + static_cast<int>(rng() % 2), 4 + static_cast<int>(rng() % 4)};
    auto run = [&] {
      llm::LlmGateway g(llm::LLMBackend{}, s);
      const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), stop);
      std::string transcript;
      for (const auto& e : g.transcript()) transcript += e.prompt_text + '\x1e' + e.response_text + '\x1f';
      return std::make_pair(z.to_json().dump(), transcript);
    };
    CHECK(run() == run());
  }
}

TEST_CASE("property: every returned assignment is total and valid") {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 50; ++trial) {
    std::string reply = "cat: t" + std::to_string(rng() % 3) + "\n";
    if (rng() % 2) reply += "dog: t1\n";
    llm::LlmGateway g(llm::LLMBackend{}, constant_script(reply));
    const auto z = generate_clusters(pets(), g, PromptTemplates::defaults(), {2, 5});
    z.validate();
    for (const auto& c : pets().names) CHECK_FALSE(z.mapping.at(c).empty());
  }
}
