#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace dbagent::http {

struct Endpoint
{
  /// e.g. http://localhost:8080 or http://host:8080/api (path prefix allowed).
  std::string base_url;
  int timeout_ms = 60000;
  /// Total attempts for transport failures and 5xx/429 responses.
  int max_attempts = 3;
  int retry_backoff_ms = 200;
  /// Sent as a bearer token; never logged.
  std::string api_key;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

/// POSTs a JSON body and parses a JSON reply. Throws BackendError: retriable
/// (with the attempt count) after exhausting retries on transport errors or
/// 5xx/429, non-retriable on other non-200 statuses, carrying the server's
/// message.
nlohmann::json post_json(const Endpoint& endpoint, const std::string& path, const nlohmann::json& body,
                         const Headers& extra_headers = {});

}  // namespace dbagent::http
