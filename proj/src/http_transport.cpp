#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "pcc/errors.hpp"
#include "pcc/llm_gateway.hpp"

namespace pcc::llm {

namespace {

class HttpTransport final : public Transport {
 public:
  HttpResponse post(const std::string& url, const std::string& body, const std::string& api_key,
                    double timeout_seconds) override {
    // Split "scheme://host[:port]/path" into client base and request path.
    const auto scheme_end = url.find("://");
    const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string base = path_start == std::string::npos ? url : url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(base);
    const auto secs = static_cast<time_t>(timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) throw NetworkError("HTTP request to " + url + " failed: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }
};

}  // namespace

std::unique_ptr<Transport> make_http_transport() { return std::make_unique<HttpTransport>(); }

}  // namespace pcc::llm
