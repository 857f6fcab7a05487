#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace hbias {

struct HttpResponse {
  int status = 0;  // 0 means the request never got a response
  std::string body;
  std::map<std::string, std::string> headers;  // keys lower-cased
  std::string error;
};

using HttpHeaders = std::map<std::string, std::string>;

/// Minimal JSON-over-HTTP POST transport. Implementations must be safe to
/// call from several threads at once.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& path, const std::string& body,
                                 const HttpHeaders& headers) = 0;
};

/// cpp-httplib backed transport; `base_url` is scheme://host[:port].
std::shared_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::seconds timeout = std::chrono::seconds(60));

class AuthenticationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;
Sleeper real_sleeper();

/// Delay requested by a rate-limit response (Retry-After seconds or
/// retry-after-ms), if any.
std::optional<std::chrono::milliseconds> retry_after(const HttpResponse& r);

bool is_retryable(const HttpResponse& r);

struct RetryResult {
  HttpResponse response;
  int attempts = 0;
};

/// POSTs with exponential backoff. Returns the last response; 401/403 raise
/// AuthenticationError immediately.
RetryResult post_with_retry(HttpTransport& transport, const std::string& path,
                            const std::string& body, const HttpHeaders& headers,
                            const RetryPolicy& policy, const Sleeper& sleep);

/// Reads a credential from the environment; throws ConfigError when unset.
std::string credential_from_env(const std::string& var);

}  // namespace hbias
