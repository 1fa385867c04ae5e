#pragma once

// Agent turn grammar. A well-formed turn is
//
//   turn    := ws "<think>" text "</think>" ws [ "<caption>" text "</caption>" ws ] action ws
//   action  := "<answer>" text "</answer>"
//            | "<text_search>" text "</text_search>"
//            | "<image_search>" ws "image_path" ws "</image_search>"
//
// Tag names are case-sensitive. Inner text is trimmed. Tags outside the agent
// set (e.g. <entity>) are tolerated by the parser and reported as
// UnknownTag only by strict contextual validation. See docs/protocol.md.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace dbagent::protocol {

enum class ActionKind { Answer, TextSearch, ImageSearch };

std::string_view tag_name(ActionKind kind);
std::optional<ActionKind> action_from_tag(std::string_view name);

inline constexpr std::string_view kImagePlaceholder = "image_path";
inline constexpr std::size_t kMaxTurnChars = 65536;
inline constexpr std::string_view kNoResults = "[no results]";
inline constexpr std::string_view kToolError = "[tool error]";

/// Half-open byte range [begin, end) into the raw turn text.
struct Span
{
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

struct TagMention
{
  std::string name;
  Span span;
  bool operator==(const TagMention&) const = default;
};

struct TurnRecord
{
  std::string think;
  std::optional<std::string> caption;
  ActionKind action = ActionKind::Answer;
  std::string action_payload;
  std::string raw;
  /// Markup outside the agent tag set that the parser skipped over.
  std::vector<TagMention> unknown_tags;

  bool operator==(const TurnRecord&) const = default;
};

enum class ViolationCode {
  MissingThink,
  MultipleActions,
  NoAction,
  TrailingText,
  BadImagePayload,
  CaptionMisplaced,
  CaptionWithoutPriorImageSearch,
  UnknownTag,
  DuplicateTag,
  UnclosedTag,
  StrayText,
  EmptyPayload,
  TooLong,
};

std::string_view to_string(ViolationCode code);

struct ProtocolViolation
{
  ViolationCode code;
  Span span;
  std::string message;
};

struct ParseResult
{
  std::optional<TurnRecord> turn;
  std::vector<ProtocolViolation> violations;

  bool ok() const { return turn.has_value(); }
};

/// Total parser: never throws, reports every violation it finds.
ParseResult parse_turn(std::string_view raw);

/// Canonical rendering: think, optional caption, action; one newline between.
std::string serialize(const TurnRecord& turn);

/// Builds a record whose raw text is its canonical serialization.
TurnRecord make_turn(std::string think, std::optional<std::string> caption, ActionKind action,
                     std::string payload);

enum class ValidationMode { Strict, Lenient };

struct ValidationOptions
{
  /// Strict mode rejects a caption in front of <answer> unless this is set.
  bool allow_caption_before_answer = false;
};

/// Re-checks the turn's grammar and, in strict mode, the contextual rules:
/// unknown tags are rejected and a caption requires an earlier image search.
std::vector<ProtocolViolation> validate_in_context(const TurnRecord& turn,
                                                   std::span<const TurnRecord> history,
                                                   ValidationMode mode,
                                                   const ValidationOptions& options = {});

struct EvidenceItem
{
  std::string article_id;
  std::string section_id;
  std::string article_title;
  std::string section_heading;
  std::string text;
  double score = 0.0;
  int rank = 0;
  int turn_index = 0;

  bool operator==(const EvidenceItem&) const = default;
};

struct EvidenceBlock
{
  std::vector<EvidenceItem> items;
  std::string rendered;
  int turn_index = 0;
  bool tool_error = false;

  bool operator==(const EvidenceBlock&) const = default;
};

/// `<evidence>\n[i] {title} — {heading}: {text}\n...</evidence>`; items keep
/// the caller's order. Line breaks inside fields are flattened to spaces.
EvidenceBlock render_evidence(std::vector<EvidenceItem> items, int turn_index);
EvidenceBlock tool_error_evidence(int turn_index);

/// Payload of the last Answer turn, if any.
std::optional<std::string> extract_final_answer(std::span<const TurnRecord> turns);

void to_json(nlohmann::json& j, const TurnRecord& turn);
void from_json(const nlohmann::json& j, TurnRecord& turn);
void to_json(nlohmann::json& j, const EvidenceBlock& block);
void from_json(const nlohmann::json& j, EvidenceBlock& block);
nlohmann::json to_json(const ProtocolViolation& violation);

}  // namespace dbagent::protocol
