#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "dbagent/http.hpp"
#include "json.hpp"

namespace dbagent::gateway {

enum class Role { System, User, Assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

struct ChatMessage
{
  Role role = Role::User;
  std::string content;
  std::vector<std::string> images;

  bool operator==(const ChatMessage&) const = default;
};

/// The three closing action tags. Every GenerationParams carries them.
const std::vector<std::string>& action_stops();

struct GenerationParams
{
  double temperature = 0.0;
  int max_new_tokens = 1024;
  std::vector<std::string> stop_sequences = action_stops();

  /// Adds any missing closing action tag.
  void ensure_action_stops();
};

/// Cuts text just after the earliest stop sequence (the stop itself is
/// kept). At equal positions the longest stop wins.
std::string truncate_at_stop(std::string_view text, const std::vector<std::string>& stops);

class ChatBackend
{
public:
  virtual ~ChatBackend() = default;

  virtual std::string_view kind() const = 0;
  virtual nlohmann::json describe() const = 0;

  /// Raw turn text ending at the first stop sequence. turn_index is the
  /// caller's per-trajectory generation counter. Throws EmptyGeneration when
  /// nothing usable comes back, BackendError on transport failure.
  std::string complete(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                       int turn_index) const;

  /// Same as complete but only the caller's stop sequences apply. The
  /// factory judges use it: their formats put tags after an action tag.
  std::string complete_free_form(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                                 int turn_index) const;

protected:
  virtual std::string generate(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                               int turn_index) const = 0;
};

struct ScriptedRule
{
  std::optional<int> turn_index;
  std::optional<std::string> pattern;
  std::optional<std::regex> compiled;
  std::string output;
  std::size_t line = 0;
};

/// Replays canned outputs. A rule matches when all of its conditions hold:
/// turn_index equals the call's index, pattern is found (ECMAScript search) in
/// the content of the last user message. First matching rule in file order
/// wins. Read-only after construction.
class ScriptedBackend final : public ChatBackend
{
public:
  explicit ScriptedBackend(std::vector<ScriptedRule> rules, std::string source = {});

  std::string_view kind() const override { return "scripted"; }
  nlohmann::json describe() const override;
  const std::vector<ScriptedRule>& rules() const { return rules_; }

protected:
  std::string generate(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                       int turn_index) const override;

private:
  std::vector<ScriptedRule> rules_;
  std::string source_;
};

/// Parses one script line; throws std::invalid_argument on a malformed rule.
ScriptedRule rule_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScriptedRule& rule);

/// JSON Lines of {"match": {...}, "output": str}. All malformed lines are
/// reported together in one DataError.
ScriptedBackend load_script(const std::filesystem::path& path);

/// POST {base}/chat. Each call carries a fresh X-Request-Id that is kept
/// across its retries and passed to the log sink once.
class RemoteChatBackend final : public ChatBackend
{
public:
  using LogSink = std::function<void(std::string_view)>;

  explicit RemoteChatBackend(http::Endpoint endpoint, LogSink log = {});

  std::string_view kind() const override { return "remote_http"; }
  nlohmann::json describe() const override;

protected:
  std::string generate(const std::vector<ChatMessage>& messages, const GenerationParams& params,
                       int turn_index) const override;

private:
  http::Endpoint endpoint_;
  LogSink log_;
  std::string id_prefix_;
  mutable std::atomic<std::uint64_t> counter_{0};
};

}  // namespace dbagent::gateway
