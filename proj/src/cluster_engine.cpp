#include "pcc/cluster_engine.hpp"

#include "pcc/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace pcc::clusters {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::size_t count_occurrences(const std::string& s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

std::string replace_once(std::string s, std::string_view needle, const std::string& payload) {
  const auto pos = s.find(needle);
  return s.replace(pos, needle.size(), payload);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += sep;
    out += items[i];
  }
  return out;
}

constexpr std::string_view kFormatReminder =
    "\n\nYour previous answer could not be read. Reply ONLY with one line per category in the "
    "form `category: tag, tag`.";

}  // namespace

void CategoryList::validate() const {
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (trim(n).empty()) throw ConfigError("category names must be non-empty");
    if (!seen.insert(lower(trim(n))).second) throw ConfigError("duplicate category: " + n);
  }
}

CategoryList CategoryList::load(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  CategoryList l;
  for (std::string line; std::getline(in, line);) {
    if (auto t = trim(line); !t.empty()) l.names.push_back(t);
  }
  l.validate();
  return l;
}

// Wording is a reconstruction of the generation / refinement prompt pair; the
// format instruction is what parse_assignment relies on.
PromptTemplates PromptTemplates::defaults() {
  return {
      "You are helping to train an image segmentation model. Cluster these dataset categories "
      "into groups that share visual or semantic features, for example \"animal\", \"pet\", "
      "\"vehicle\" or \"furniture\". A category may belong to several clusters, and similar "
      "categories should share cluster tags.\n"
      "Categories: {categories}\n"
      "Answer with exactly one line per category in the form `category: tag, tag` and nothing "
      "else.",
      "Here are cluster tags assigned to dataset categories:\n"
      "{clusters}\n"
      "Refine these clusters. Merge tags that mean the same thing, move categories that were "
      "placed in the wrong cluster, and make sure categories with shared features share a tag. "
      "If the clusters are already consistent, repeat them unchanged.\n"
      "Answer with exactly one line per category in the form `category: tag, tag` and nothing "
      "else.",
  };
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& gen_path,
                                      const std::filesystem::path& refine_path) {
  PromptTemplates t{read_file(gen_path), read_file(refine_path)};
  t.validate();
  return t;
}

void PromptTemplates::validate() const {
  if (count_occurrences(gen_template, kCategoriesPlaceholder) != 1) {
    throw ConfigError("generation template needs exactly one {categories} placeholder");
  }
  if (count_occurrences(refine_template, kClustersPlaceholder) != 1) {
    throw ConfigError("refine template needs exactly one {clusters} placeholder");
  }
}

void ClusterAssignment::rebuild_vocabulary() {
  std::set<std::string> all;
  for (const auto& [cat, tags] : mapping) all.insert(tags.begin(), tags.end());
  vocabulary.assign(all.begin(), all.end());
}

void ClusterAssignment::validate() const {
  for (const auto& c : categories) {
    auto it = mapping.find(c);
    if (it == mapping.end() || it->second.empty()) {
      throw ConfigError("cluster assignment has no tags for category " + c);
    }
  }
  if (mapping.size() != categories.size()) throw ConfigError("cluster assignment has extra categories");
  ClusterAssignment copy = *this;
  copy.rebuild_vocabulary();
  if (copy.vocabulary != vocabulary) throw ConfigError("cluster vocabulary does not match mapping");
}

std::string ClusterAssignment::to_text() const {
  std::string out;
  for (const auto& c : categories) {
    auto it = mapping.find(c);
    if (it == mapping.end()) continue;
    out += c + ": " + join({it->second.begin(), it->second.end()}, ", ") + "\n";
  }
  return out;
}

json ClusterAssignment::to_json() const {
  json m = json::object();
  for (const auto& [cat, tags] : mapping) m[cat] = std::vector<std::string>(tags.begin(), tags.end());
  return {{"categories", categories},
          {"vocabulary", vocabulary},
          {"mapping", m},
          {"iteration_index", iteration_index},
          {"stalled", stalled}};
}

ClusterAssignment ClusterAssignment::from_json(const json& j) {
  ClusterAssignment z;
  try {
    z.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& [cat, tags] : j.at("mapping").items()) {
      auto v = tags.get<std::vector<std::string>>();
      z.mapping[cat] = std::set<std::string>(v.begin(), v.end());
    }
    z.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    z.iteration_index = j.value("iteration_index", 0);
    z.stalled = j.value("stalled", false);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed cluster map: ") + e.what());
  }
  z.validate();
  return z;
}

void ClusterAssignment::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IOError("cannot write cluster map " + path.string());
  out << to_json().dump(2) << '\n';
}

ClusterAssignment ClusterAssignment::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open cluster map " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError("cluster map " + path.string() + " is not valid JSON: " + e.what());
  }
}

ParsedAssignment parse_assignment(const std::string& response, const CategoryList& categories) {
  std::map<std::string, std::string> by_lower;
  for (const auto& c : categories.names) by_lower.emplace(lower(trim(c)), c);

  ParsedAssignment out;
  out.assignment.categories = categories.names;
  std::istringstream in(response);
  for (std::string line; std::getline(in, line);) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = trim(std::string_view(line).substr(0, colon));
    // Tolerate list bullets ("- cat:", "* cat:").
    while (!key.empty() && (key.front() == '-' || key.front() == '*')) key = trim(key.substr(1));
    auto it = by_lower.find(lower(key));
    if (it == by_lower.end()) continue;

    std::set<std::string> tags;
    std::istringstream tag_stream(line.substr(colon + 1));
    for (std::string tag; std::getline(tag_stream, tag, ',');) {
      if (auto t = lower(trim(tag)); !t.empty()) tags.insert(t);
    }
    if (!tags.empty()) out.assignment.mapping[it->second].insert(tags.begin(), tags.end());
  }
  if (out.assignment.mapping.empty()) {
    throw ParseError("response matched none of the dataset categories");
  }
  for (const auto& c : categories.names) {
    if (!out.assignment.mapping.contains(c)) {
      out.unmatched.push_back(c);
      out.assignment.mapping[c] = {std::string(kMiscTag)};
    }
  }
  out.assignment.rebuild_vocabulary();
  return out;
}

bool assignments_equal(const ClusterAssignment& a, const ClusterAssignment& b) {
  return a.mapping == b.mapping;
}

void StopCondition::validate() const {
  if (stability_window < 1 || stability_window >= max_iterations) {
    throw ConfigError("stop condition needs 1 <= stability_window < max_iterations");
  }
}

ClusterVector cluster_vector(const std::set<std::string>& image_labels, const ClusterAssignment& z) {
  ClusterVector u;
  u.bits.assign(z.vocabulary.size(), 0);
  for (const auto& label : image_labels) {
    auto it = z.mapping.find(label);
    if (it == z.mapping.end()) throw ConfigError("label " + label + " is not in the cluster map");
    for (std::size_t i = 0; i < z.vocabulary.size(); ++i) {
      if (it->second.contains(z.vocabulary[i])) u.bits[i] = 1;
    }
  }
  return u;
}

namespace {

ClusterAssignment query_assignment(llm::LlmGateway& gateway, const std::string& prompt,
                                   const CategoryList& categories) {
  try {
    return parse_assignment(gateway.complete(prompt), categories).assignment;
  } catch (const ParseError&) {
    return parse_assignment(gateway.complete(prompt + std::string(kFormatReminder)), categories)
        .assignment;
  }
}

}  // namespace

ClusterAssignment generate_clusters(const CategoryList& categories, llm::LlmGateway& gateway,
                                    const PromptTemplates& templates, const StopCondition& stop) {
  if (categories.empty()) throw ConfigError("category list is empty");
  categories.validate();
  templates.validate();
  stop.validate();

  const std::string gen_prompt = replace_once(
      templates.gen_template, PromptTemplates::kCategoriesPlaceholder, join(categories.names, ", "));
  std::vector<ClusterAssignment> iterates;
  iterates.push_back(query_assignment(gateway, gen_prompt, categories));

  const auto window = static_cast<std::size_t>(stop.stability_window);
  for (int t = 0; t < stop.max_iterations; ++t) {
    const std::string refine_prompt = replace_once(
        templates.refine_template, PromptTemplates::kClustersPlaceholder, iterates.back().to_text());
    iterates.push_back(query_assignment(gateway, refine_prompt, categories));

    ClusterAssignment& latest = iterates.back();
    latest.iteration_index = t + 1;
    if (iterates.size() >= window) {
      const bool stable = std::all_of(iterates.end() - static_cast<std::ptrdiff_t>(window),
                                      iterates.end(), [&](const ClusterAssignment& z) {
                                        return assignments_equal(z, latest);
                                      });
      if (stable) return latest;
    }
  }
  ClusterAssignment last = iterates.back();
  last.stalled = true;
  return last;
}

}  // namespace pcc::clusters
