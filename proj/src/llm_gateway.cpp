#include "pcc/llm_gateway.hpp"

#include "pcc/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <regex>

namespace pcc::llm {

using nlohmann::json;

void LLMBackend::validate() const {
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (!(request_timeout > 0.0)) throw ConfigError("request_timeout must be > 0");
  if (endpoint.empty()) throw ConfigError("backend endpoint is empty");
}

LLMBackend LLMBackend::from_environment(const std::string& model_id) {
  LLMBackend b;
  b.identity = "live";
  b.model_id = model_id;
  const char* endpoint = std::getenv("LLM_ENDPOINT");
  if (endpoint == nullptr || *endpoint == '\0') {
    throw ConfigError("LLM_ENDPOINT is not set; use the mock backend for offline runs");
  }
  b.endpoint = endpoint;
  if (const char* key = std::getenv("LLM_API_KEY")) b.api_key = key;
  return b;
}

std::string make_cache_key(const std::string& model_id, const std::string& prompt) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, model_id.data(), model_id.size());
  const char sep = '\0';
  EVP_DigestUpdate(ctx, &sep, 1);
  EVP_DigestUpdate(ctx, prompt.data(), prompt.size());
  EVP_DigestFinal_ex(ctx, digest.data(), &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

// --- MockScript -------------------------------------------------------------

MockScript MockScript::from_json(const json& j) {
  MockScript s;
  const std::string policy = j.value("exhaustion_policy", "repeat_last");
  if (policy == "repeat_last") {
    s.exhaustion_policy = ExhaustionPolicy::repeat_last;
  } else if (policy == "error") {
    s.exhaustion_policy = ExhaustionPolicy::error;
  } else {
    throw ConfigError("unknown exhaustion_policy: " + policy);
  }
  for (const auto& e : j.at("entries")) {
    ScriptEntry entry;
    entry.matcher = e.value("match", "");
    entry.is_regex = e.value("regex", false);
    entry.response = e.at("response").get<std::string>();
    s.entries.push_back(std::move(entry));
  }
  return s;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open mock script " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("malformed mock script " + path.string() + ": " + e.what());
  }
}

json MockScript::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"match", e.matcher}, {"regex", e.is_regex}, {"response", e.response}});
  }
  return {{"exhaustion_policy",
           exhaustion_policy == ExhaustionPolicy::repeat_last ? "repeat_last" : "error"},
          {"entries", entries_json}};
}

// --- ResponseCache ------------------------------------------------------------

namespace {

json exchange_to_json(const PromptExchange& e) {
  return {{"cache_key", e.cache_key},
          {"model_id", e.model_id},
          {"prompt", e.prompt_text},
          {"response", e.response_text},
          {"timestamp", e.timestamp}};
}

PromptExchange exchange_from_json(const json& j) {
  return {j.at("model_id").get<std::string>(), j.at("prompt").get<std::string>(),
          j.at("response").get<std::string>(), j.at("cache_key").get<std::string>(),
          j.value("timestamp", 0.0)};
}

double wall_clock_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

ResponseCache::ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(*path_);
  if (!in) return;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      PromptExchange e = exchange_from_json(json::parse(line));
      entries_[e.cache_key] = std::move(e);
    } catch (const json::exception& ex) {
      throw FormatError("corrupt cache record at " + path_->string() + ":" +
                        std::to_string(lineno) + ": " + ex.what());
    }
  }
}

std::optional<PromptExchange> ResponseCache::lookup(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ResponseCache::store(const PromptExchange& exchange) {
  std::unique_lock lock(mutex_);
  entries_[exchange.cache_key] = exchange;
  if (!path_) return;
  if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
  std::ofstream out(*path_, std::ios::app);
  if (!out) throw IOError("cannot append to cache file " + path_->string());
  out << exchange_to_json(exchange).dump() << '\n';
}

std::size_t ResponseCache::clear(const std::optional<std::string>& model_id) {
  std::unique_lock lock(mutex_);
  std::size_t evicted = 0;
  if (!model_id) {
    evicted = entries_.size();
    entries_.clear();
  } else {
    evicted = std::erase_if(entries_, [&](const auto& kv) { return kv.second.model_id == *model_id; });
  }
  if (evicted > 0) rewrite_locked();
  return evicted;
}

void ResponseCache::rewrite_locked() const {
  if (!path_) return;
  std::ofstream out(*path_, std::ios::trunc);
  if (!out) throw IOError("cannot rewrite cache file " + path_->string());
  for (const auto& [key, e] : entries_) out << exchange_to_json(e).dump() << '\n';
}

std::size_t ResponseCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

// --- wire format --------------------------------------------------------------

json make_chat_request(const std::string& model_id, const std::string& prompt) {
  return {{"model", model_id},
          {"temperature", 0},
          {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
}

std::string extract_chat_response(const std::string& body) {
  try {
    const json j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw NetworkError(std::string("malformed chat-completion payload: ") + e.what());
  }
}

// --- LlmGateway ---------------------------------------------------------------

LlmGateway::LlmGateway(LLMBackend backend, MockScript script)
    : backend_(std::move(backend)), script_(std::move(script)) {
  backend_.validate();
  if (!backend_.is_mock()) throw ConfigError("a mock script needs a backend with endpoint \"mock\"");
}

LlmGateway::LlmGateway(LLMBackend backend, std::shared_ptr<ResponseCache> cache,
                       std::unique_ptr<Transport> transport)
    : backend_(std::move(backend)), cache_(std::move(cache)), transport_(std::move(transport)) {
  backend_.validate();
  if (backend_.is_mock()) throw ConfigError("live gateway constructed with the mock endpoint");
  if (!cache_) cache_ = std::make_shared<ResponseCache>();
  if (!transport_) transport_ = make_http_transport();
}

std::string LlmGateway::complete(const std::string& prompt) {
  if (prompt.empty()) throw ConfigError("prompt must be non-empty");
  std::string response = script_ ? complete_mock(prompt) : complete_live(prompt);
  return response;
}

std::string LlmGateway::complete_mock(const std::string& prompt) {
  const auto& entries = script_->entries;
  for (std::size_t i = cursor_; i < entries.size(); ++i) {
    const ScriptEntry& e = entries[i];
    const bool hit = e.is_regex ? std::regex_search(prompt, std::regex(e.matcher))
                                : prompt.find(e.matcher) != std::string::npos;
    if (!hit) continue;
    cursor_ = i + 1;
    if (is_blank(e.response)) throw EmptyResponse("mock script entry has blank text");
    last_response_ = e.response;
    transcript_.push_back({backend_.model_id, prompt, e.response,
                           make_cache_key(backend_.model_id, prompt), 0.0});
    return e.response;
  }
  if (script_->exhaustion_policy == ExhaustionPolicy::repeat_last && last_response_) {
    transcript_.push_back({backend_.model_id, prompt, *last_response_,
                           make_cache_key(backend_.model_id, prompt), 0.0});
    return *last_response_;
  }
  throw ScriptExhausted("mock script has no remaining entry for prompt: " +
                        prompt.substr(0, std::min<std::size_t>(prompt.size(), 80)));
}

std::string LlmGateway::complete_live(const std::string& prompt) {
  const std::string key = make_cache_key(backend_.model_id, prompt);
  if (auto hit = cache_->lookup(key)) {
    transcript_.push_back(*hit);
    return hit->response_text;
  }
  const std::string body = make_chat_request(backend_.model_id, prompt).dump();
  std::string last_error;
  for (int attempt = 0; attempt <= backend_.max_retries; ++attempt) {
    ++request_count_;
    try {
      HttpResponse r = transport_->post(backend_.endpoint, body, backend_.api_key,
                                        backend_.request_timeout);
      if (r.status < 200 || r.status >= 300) {
        last_error = "HTTP status " + std::to_string(r.status);
        continue;
      }
      std::string text = extract_chat_response(r.body);
      if (is_blank(text)) throw EmptyResponse("backend returned blank text");
      PromptExchange ex{backend_.model_id, prompt, text, key, wall_clock_seconds()};
      cache_->store(ex);
      transcript_.push_back(std::move(ex));
      return text;
    } catch (const NetworkError& e) {
      last_error = e.what();
    }
  }
  throw NetworkError("request failed after " + std::to_string(backend_.max_retries + 1) +
                     " attempts: " + last_error);
}

std::size_t LlmGateway::clear_cache(const CacheScope& scope) {
  if (!cache_) return 0;
  return cache_->clear(scope.model_id);
}

void LlmGateway::reset() {
  cursor_ = 0;
  last_response_.reset();
  transcript_.clear();
}

}  // namespace pcc::llm
