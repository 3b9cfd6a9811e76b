#pragma once

#include "pcc/llm_gateway.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::clusters {

/// Foreground category names of a dataset, in a fixed order.
struct CategoryList {
  std::vector<std::string> names;

  void validate() const;
  [[nodiscard]] bool empty() const { return names.empty(); }
  /// One name per non-empty line.
  static CategoryList load(const std::filesystem::path& path);
};

/// Prompt pair used by the self-refine loop. `gen_template` carries exactly one
/// "{categories}" placeholder, `refine_template` exactly one "{clusters}".
struct PromptTemplates {
  std::string gen_template;
  std::string refine_template;

  static constexpr std::string_view kCategoriesPlaceholder = "{categories}";
  static constexpr std::string_view kClustersPlaceholder = "{clusters}";

  static PromptTemplates defaults();
  static PromptTemplates load(const std::filesystem::path& gen_path,
                              const std::filesystem::path& refine_path);
  void validate() const;
};

/// Category -> cluster-tag sets, plus the sorted tag vocabulary.
struct ClusterAssignment {
  std::vector<std::string> categories;
  std::map<std::string, std::set<std::string>> mapping;
  std::vector<std::string> vocabulary;
  int iteration_index = 0;
  bool stalled = false;

  [[nodiscard]] std::size_t size() const { return vocabulary.size(); }
  /// Recomputes vocabulary as the sorted union of all tags.
  void rebuild_vocabulary();
  /// Throws ConfigError unless every category has at least one tag and the
  /// vocabulary matches the mapping.
  void validate() const;
  /// Canonical `category: tag, tag` lines in category order, tags sorted.
  [[nodiscard]] std::string to_text() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static ClusterAssignment from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ClusterAssignment load(const std::filesystem::path& path);
};

struct ParsedAssignment {
  ClusterAssignment assignment;
  /// Dataset categories the response did not mention; they carry {"misc"}.
  std::vector<std::string> unmatched;
};

inline constexpr std::string_view kMiscTag = "misc";

/// Parses `category: tag, tag` lines. Category names match case-insensitively,
/// tags are lower-cased and trimmed, unknown categories are skipped. Throws
/// ParseError when no dataset category is matched.
ParsedAssignment parse_assignment(const std::string& response, const CategoryList& categories);

/// Per-category set equality; vocabulary order is irrelevant.
bool assignments_equal(const ClusterAssignment& a, const ClusterAssignment& b);

struct StopCondition {
  int stability_window = 2;
  int max_iterations = 10;
  void validate() const;
};

/// Multi-hot membership over ClusterAssignment::vocabulary.
struct ClusterVector {
  std::vector<std::uint8_t> bits;
  [[nodiscard]] std::size_t size() const { return bits.size(); }
  friend bool operator==(const ClusterVector&, const ClusterVector&) = default;
};

ClusterVector cluster_vector(const std::set<std::string>& image_labels, const ClusterAssignment& z);

/// Self-refine loop: z0 from the generation prompt, then repeated refinement
/// until the last `stability_window` iterates agree or `max_iterations` is hit
/// (returned with stalled = true).
ClusterAssignment generate_clusters(const CategoryList& categories, llm::LlmGateway& gateway,
                                    const PromptTemplates& templates, const StopCondition& stop);

}  // namespace pcc::clusters
