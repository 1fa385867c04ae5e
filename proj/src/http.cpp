#include "dbagent/http.hpp"

#include <chrono>
#include <thread>

#include "dbagent/error.hpp"
#include "httplib.h"

namespace dbagent::http {

namespace {

struct Target
{
  std::string origin;
  std::string prefix;
};

Target split_url(const std::string& base_url)
{
  const auto scheme_end = base_url.find("://");
  const auto host_begin = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_begin = base_url.find('/', host_begin);
  if (path_begin == std::string::npos) return {base_url, ""};
  std::string prefix = base_url.substr(path_begin);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {base_url.substr(0, path_begin), prefix};
}

std::string server_message(const std::string& body)
{
  try {
    auto j = nlohmann::json::parse(body);
    if (j.is_object()) {
      if (j.contains("error")) {
        const auto& e = j["error"];
        if (e.is_string()) return e.get<std::string>();
        if (e.is_object() && e.contains("message")) return e["message"].dump();
        return e.dump();
      }
      if (j.contains("message")) return j["message"].dump();
    }
  } catch (const nlohmann::json::exception&) {
  }
  return body.size() > 500 ? body.substr(0, 500) + "..." : body;
}

}  // namespace

nlohmann::json post_json(const Endpoint& endpoint, const std::string& path, const nlohmann::json& body,
                         const Headers& extra_headers)
{
  if (endpoint.base_url.empty()) throw BackendError("no endpoint URL configured", false);
  const auto target = split_url(endpoint.base_url);
  const auto full_path = target.prefix + path;
  const auto payload = body.dump();

  httplib::Headers headers;
  for (const auto& [k, v] : extra_headers) headers.emplace(k, v);
  if (!endpoint.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint.api_key);

  const int attempts = std::max(1, endpoint.max_attempts);
  std::string last_error;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    // One client per request so concurrent callers never share a connection.
    httplib::Client client(target.origin);
    const auto timeout = std::chrono::milliseconds(endpoint.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    auto res = client.Post(full_path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
    } else if (res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::parse_error& e) {
        throw BackendError(endpoint.base_url + full_path + ": response is not valid JSON: " + e.what(), false, attempt);
      }
    } else if (res->status >= 500 || res->status == 429) {
      last_error = "HTTP " + std::to_string(res->status) + ": " + server_message(res->body);
    } else {
      throw BackendError(endpoint.base_url + full_path + ": HTTP " + std::to_string(res->status) + ": " +
                             server_message(res->body),
                         false, attempt);
    }
    if (attempt < attempts && endpoint.retry_backoff_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(endpoint.retry_backoff_ms * attempt));
    }
  }
  throw BackendError(endpoint.base_url + full_path + ": " + last_error + " (after " + std::to_string(attempts) +
                         " attempts)",
                     true, attempts);
}

}  // namespace dbagent::http
