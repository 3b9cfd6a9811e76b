#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::llm {

/// Connection settings for a chat-completion service. An endpoint of "mock"
/// selects the scripted offline backend.
struct LLMBackend {
  std::string identity = "mock";
  std::string endpoint = "mock";
  std::string model_id = "mock-model";
  double request_timeout = 60.0;
  int max_retries = 2;
  std::string api_key;

  [[nodiscard]] bool is_mock() const { return endpoint == "mock"; }
  void validate() const;

  /// Live backend configured from LLM_ENDPOINT / LLM_API_KEY.
  static LLMBackend from_environment(const std::string& model_id);
};

struct PromptExchange {
  std::string model_id;
  std::string prompt_text;
  std::string response_text;
  std::string cache_key;
  double timestamp = 0.0;
};

/// Hex SHA-256 of model_id, a NUL separator, and the prompt.
std::string make_cache_key(const std::string& model_id, const std::string& prompt);

enum class ExhaustionPolicy { repeat_last, error };

struct ScriptEntry {
  std::string matcher;  // substring; empty matches every prompt
  bool is_regex = false;
  std::string response;
};

/// Canned replies consumed in order. Each call takes the next unused entry
/// whose matcher accepts the prompt.
struct MockScript {
  std::vector<ScriptEntry> entries;
  ExhaustionPolicy exhaustion_policy = ExhaustionPolicy::repeat_last;

  static MockScript from_json(const nlohmann::json& j);
  static MockScript load(const std::filesystem::path& path);
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Append-only line-delimited store of prompt exchanges, keyed by cache_key.
/// Safe for concurrent readers and writers.
class ResponseCache {
 public:
  /// In-memory only.
  ResponseCache() = default;
  /// Loads existing records from `path` and appends new ones to it.
  explicit ResponseCache(std::filesystem::path path);

  [[nodiscard]] std::optional<PromptExchange> lookup(const std::string& key) const;
  void store(const PromptExchange& exchange);
  /// Evicts everything (no model id) or only the given model's entries, and
  /// rewrites the backing file. Returns the number evicted.
  std::size_t clear(const std::optional<std::string>& model_id = std::nullopt);
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  void rewrite_locked() const;

  std::optional<std::filesystem::path> path_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, PromptExchange> entries_;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Transport seam for the live backend; replaced by stubs in tests.
class Transport {
 public:
  virtual ~Transport() = default;
  /// Throws NetworkError on connection failure.
  virtual HttpResponse post(const std::string& url, const std::string& body,
                            const std::string& api_key, double timeout_seconds) = 0;
};

std::unique_ptr<Transport> make_http_transport();

/// Request body for a single-turn chat completion at temperature 0.
nlohmann::json make_chat_request(const std::string& model_id, const std::string& prompt);
/// Text of the first choice; throws NetworkError if the payload is malformed.
std::string extract_chat_response(const std::string& body);

/// Scope of clear_cache(): everything, or a single model's entries.
struct CacheScope {
  std::optional<std::string> model_id;
  static CacheScope all() { return {}; }
  static CacheScope by_model_id(std::string id) { return {std::move(id)}; }
};

class LlmGateway {
 public:
  /// Mock gateway replaying `script`.
  LlmGateway(LLMBackend backend, MockScript script);
  /// Live gateway. A null transport means the HTTP transport.
  LlmGateway(LLMBackend backend, std::shared_ptr<ResponseCache> cache,
             std::unique_ptr<Transport> transport = nullptr);

  std::string complete(const std::string& prompt);
  std::size_t clear_cache(const CacheScope& scope);

  /// Rewinds a mock script to its first entry and drops the transcript.
  void reset();

  [[nodiscard]] const LLMBackend& backend() const { return backend_; }
  /// Network attempts made so far (including failed ones).
  [[nodiscard]] std::size_t request_count() const { return request_count_; }
  [[nodiscard]] const std::vector<PromptExchange>& transcript() const { return transcript_; }

 private:
  std::string complete_mock(const std::string& prompt);
  std::string complete_live(const std::string& prompt);

  LLMBackend backend_;
  std::optional<MockScript> script_;
  std::size_t cursor_ = 0;
  std::optional<std::string> last_response_;
  std::shared_ptr<ResponseCache> cache_;
  std::unique_ptr<Transport> transport_;
  std::size_t request_count_ = 0;
  std::vector<PromptExchange> transcript_;
};

}  // namespace pcc::llm
