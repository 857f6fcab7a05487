#include "hbias/http.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "httplib.h"

#include "hbias/core.hpp"

namespace hbias {

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttplibTransport(std::string base_url, std::chrono::seconds timeout)
      : base_url_(std::move(base_url)), timeout_(timeout) {}

  HttpResponse post_json(const std::string& path, const std::string& body,
                         const HttpHeaders& headers) override {
    // httplib clients are not shareable across threads; one per call.
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    cli.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);

    HttpResponse out;
    auto res = cli.Post(path, h, body, "application/json");
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    for (const auto& [k, v] : res->headers) {
      std::string key = k;
      std::transform(key.begin(), key.end(), key.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      out.headers[key] = v;
    }
    return out;
  }

 private:
  std::string base_url_;
  std::chrono::seconds timeout_;
};

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::seconds timeout) {
  return std::make_shared<HttplibTransport>(base_url, timeout);
}

Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::optional<std::chrono::milliseconds> retry_after(const HttpResponse& r) {
  if (auto it = r.headers.find("retry-after-ms"); it != r.headers.end()) {
    char* end = nullptr;
    const double ms = std::strtod(it->second.c_str(), &end);
    if (end != it->second.c_str() && ms >= 0) return std::chrono::milliseconds(static_cast<long long>(ms));
  }
  if (auto it = r.headers.find("retry-after"); it != r.headers.end()) {
    char* end = nullptr;
    const double s = std::strtod(it->second.c_str(), &end);
    if (end != it->second.c_str() && s >= 0)
      return std::chrono::milliseconds(static_cast<long long>(s * 1000.0));
  }
  return std::nullopt;
}

bool is_retryable(const HttpResponse& r) {
  return r.status == 0 || r.status == 408 || r.status == 409 || r.status == 429 || r.status >= 500;
}

RetryResult post_with_retry(HttpTransport& transport, const std::string& path,
                            const std::string& body, const HttpHeaders& headers,
                            const RetryPolicy& policy, const Sleeper& sleep) {
  RetryResult result;
  auto backoff = policy.initial_backoff;
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    result.response = transport.post_json(path, body, headers);
    result.attempts = attempt;
    const int s = result.response.status;
    if (s == 401 || s == 403) {
      throw AuthenticationError("endpoint rejected credentials (HTTP " + std::to_string(s) + ")");
    }
    if (!is_retryable(result.response) || attempt == attempts) break;

    auto delay = retry_after(result.response).value_or(backoff);
    sleep(std::min(delay, policy.max_backoff));
    backoff = std::min(policy.max_backoff,
                       std::chrono::milliseconds(static_cast<long long>(backoff.count() * policy.multiplier)));
  }
  return result;
}

std::string credential_from_env(const std::string& var) {
  const char* v = std::getenv(var.c_str());
  if (v == nullptr || *v == '\0') throw ConfigError("credential environment variable " + var + " is not set");
  return v;
}

}  // namespace hbias
