#include "dbagent/model_gateway.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/text.hpp"

namespace dbagent::gateway {

std::string_view to_string(Role role)
{
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view name)
{
  if (name == "system") return Role::System;
  if (name == "user") return Role::User;
  if (name == "assistant") return Role::Assistant;
  throw DataError("unknown chat role '" + std::string(name) + "'");
}

const std::vector<std::string>& action_stops()
{
  static const std::vector<std::string> stops{"</answer>", "</text_search>", "</image_search>"};
  return stops;
}

void GenerationParams::ensure_action_stops()
{
  for (const auto& stop : action_stops()) {
    if (std::find(stop_sequences.begin(), stop_sequences.end(), stop) == stop_sequences.end()) {
      stop_sequences.push_back(stop);
    }
  }
}

std::string truncate_at_stop(std::string_view text, const std::vector<std::string>& stops)
{
  std::size_t best_pos = std::string_view::npos;
  std::size_t best_len = 0;
  for (const auto& stop : stops) {
    if (stop.empty()) continue;
    const auto pos = text.find(stop);
    if (pos == std::string_view::npos) continue;
    if (pos < best_pos || (pos == best_pos && stop.size() > best_len)) {
      best_pos = pos;
      best_len = stop.size();
    }
  }
  if (best_pos == std::string_view::npos) return std::string(text);
  return std::string(text.substr(0, best_pos + best_len));
}

std::string ChatBackend::complete(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                                  int turn_index) const
{
  if (messages.empty()) throw UsageError("complete needs at least one message");
  if (messages.front().role != Role::System) throw UsageError("first message must be the system instruction");
  for (const auto& m : messages) {
    if (m.content.empty() && m.images.empty()) throw UsageError("chat message has neither content nor images");
  }
  auto effective = params;
  effective.ensure_action_stops();
  auto text = truncate_at_stop(generate(messages, effective, turn_index), effective.stop_sequences);
  if (text::is_blank(text)) {
    throw EmptyGeneration("backend returned an empty generation at turn " + std::to_string(turn_index));
  }
  return text;
}

std::string ChatBackend::complete_free_form(const std::vector<ChatMessage>& messages,
                                            const GenerationParams& params, int turn_index) const
{
  if (messages.empty()) throw UsageError("complete needs at least one message");
  auto text = truncate_at_stop(generate(messages, params, turn_index), params.stop_sequences);
  if (text::is_blank(text)) {
    throw EmptyGeneration("backend returned an empty generation at turn " + std::to_string(turn_index));
  }
  return text;
}

ScriptedRule rule_from_json(const nlohmann::json& j)
{
  if (!j.is_object()) throw std::invalid_argument("rule must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "match" && key != "output") throw std::invalid_argument("unknown field '" + key + "'");
  }
  if (!j.contains("output") || !j["output"].is_string()) throw std::invalid_argument("'output' must be a string");
  if (!j.contains("match") || !j["match"].is_object()) throw std::invalid_argument("'match' must be an object");
  ScriptedRule rule;
  rule.output = j["output"].get<std::string>();
  const auto& m = j["match"];
  for (const auto& [key, value] : m.items()) {
    if (key == "turn_index") {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw std::invalid_argument("'match.turn_index' must be a non-negative integer");
      }
      rule.turn_index = value.get<int>();
    } else if (key == "pattern") {
      if (!value.is_string()) throw std::invalid_argument("'match.pattern' must be a string");
      rule.pattern = value.get<std::string>();
      try {
        rule.compiled.emplace(*rule.pattern, std::regex::ECMAScript);
      } catch (const std::regex_error& e) {
        throw std::invalid_argument("invalid pattern '" + *rule.pattern + "': " + e.what());
      }
    } else {
      throw std::invalid_argument("unknown match key '" + key + "'");
    }
  }
  if (!rule.turn_index && !rule.pattern) throw std::invalid_argument("'match' needs turn_index or pattern");
  return rule;
}

nlohmann::json to_json(const ScriptedRule& rule)
{
  nlohmann::json match = nlohmann::json::object();
  if (rule.turn_index) match["turn_index"] = *rule.turn_index;
  if (rule.pattern) match["pattern"] = *rule.pattern;
  return {{"match", match}, {"output", rule.output}};
}

ScriptedBackend::ScriptedBackend(std::vector<ScriptedRule> rules, std::string source)
  : rules_(std::move(rules)), source_(std::move(source))
{
  for (auto& rule : rules_) {
    if (rule.pattern && !rule.compiled) rule.compiled.emplace(*rule.pattern, std::regex::ECMAScript);
  }
}

nlohmann::json ScriptedBackend::describe() const
{
  return {{"kind", kind()}, {"rules", rules_.size()}, {"source", source_}};
}

std::string ScriptedBackend::generate(const std::vector<ChatMessage>& messages, const GenerationParams&,
                                      int turn_index) const
{
  const std::string* last_user = nullptr;
  for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
    if (it->role == Role::User) {
      last_user = &it->content;
      break;
    }
  }
  for (const auto& rule : rules_) {
    if (rule.turn_index && *rule.turn_index != turn_index) continue;
    if (rule.compiled && (!last_user || !std::regex_search(*last_user, *rule.compiled))) continue;
    return rule.output;
  }
  throw EmptyGeneration("no scripted rule matches turn " + std::to_string(turn_index));
}

ScriptedBackend load_script(const std::filesystem::path& path)
{
  std::vector<ScriptedRule> rules;
  std::vector<std::string> problems;
  jsonl::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    try {
      auto rule = rule_from_json(nlohmann::json::parse(line));
      rule.line = line_no;
      rules.push_back(std::move(rule));
    } catch (const std::exception& e) {
      problems.push_back(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  });
  if (!problems.empty()) {
    throw DataError("malformed script rules:\n  " + text::join(problems, "\n  "), path.string());
  }
  return ScriptedBackend(std::move(rules), path.string());
}

RemoteChatBackend::RemoteChatBackend(http::Endpoint endpoint, LogSink log)
  : endpoint_(std::move(endpoint)), log_(std::move(log))
{
  std::random_device rd;
  const auto t = static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
  const std::uint64_t mixed = (static_cast<std::uint64_t>(rd()) << 32) ^ t;
  static constexpr char kHex[] = "0123456789abcdef";
  for (int i = 0; i < 12; ++i) id_prefix_.push_back(kHex[(mixed >> (4 * i)) & 0xf]);
}

nlohmann::json RemoteChatBackend::describe() const
{
  return {{"kind", kind()},
          {"url", endpoint_.base_url},
          {"timeout_ms", endpoint_.timeout_ms},
          {"max_attempts", endpoint_.max_attempts}};
}

std::string RemoteChatBackend::generate(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                                        int turn_index) const
{
  nlohmann::json body;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : messages) {
    nlohmann::json jm{{"role", to_string(m.role)}, {"content", m.content}};
    if (!m.images.empty()) jm["images"] = m.images;
    body["messages"].push_back(std::move(jm));
  }
  body["temperature"] = params.temperature;
  body["max_tokens"] = params.max_new_tokens;
  body["stop"] = params.stop_sequences;

  const auto request_id = id_prefix_ + "-" + std::to_string(counter_.fetch_add(1));
  if (log_) log_("chat request " + request_id + " turn " + std::to_string(turn_index));
  auto reply = http::post_json(endpoint_, "/chat", body, {{"X-Request-Id", request_id}});
  if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string()) {
    throw BackendError("chat response lacks a 'text' string (request " + request_id + ")", false);
  }
  return reply["text"].get<std::string>();
}

}  // namespace dbagent::gateway
