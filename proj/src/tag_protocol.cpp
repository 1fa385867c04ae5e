#include "dbagent/tag_protocol.hpp"

#include <algorithm>
#include <cctype>
#include <variant>

#include "dbagent/text.hpp"

namespace dbagent::protocol {

namespace {

constexpr std::string_view kKnownTags[] = {"think", "caption", "answer", "text_search", "image_search"};

bool is_known(std::string_view name)
{
  return std::find(std::begin(kKnownTags), std::end(kKnownTags), name) != std::end(kKnownTags);
}

bool is_action(std::string_view name)
{
  return action_from_tag(name).has_value();
}

struct Token
{
  enum Kind { Text, Open, Close } kind;
  std::string_view name;
  Span span;
};

bool name_start(char c)
{
  return std::isalpha(static_cast<unsigned char>(c)) != 0 || c == '_';
}

bool name_char(char c)
{
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

// Splits raw into text runs and tags of the form <name> / </name>. Anything
// else starting with '<' stays text.
std::vector<Token> tokenize(std::string_view raw)
{
  std::vector<Token> tokens;
  std::size_t text_start = 0;
  auto flush_text = [&](std::size_t end) {
    if (end > text_start) tokens.push_back({Token::Text, {}, {text_start, end}});
  };
  std::size_t i = 0;
  while (i < raw.size()) {
    if (raw[i] != '<') {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    const bool closing = j < raw.size() && raw[j] == '/';
    if (closing) ++j;
    const std::size_t name_begin = j;
    if (j < raw.size() && name_start(raw[j])) {
      ++j;
      while (j < raw.size() && name_char(raw[j])) ++j;
      if (j < raw.size() && raw[j] == '>') {
        flush_text(i);
        tokens.push_back({closing ? Token::Close : Token::Open, raw.substr(name_begin, j - name_begin), {i, j + 1}});
        i = j + 1;
        text_start = i;
        continue;
      }
    }
    ++i;
  }
  flush_text(raw.size());
  return tokens;
}

struct Element
{
  std::string_view name;
  Span inner;
  Span full;
};

struct Stray
{
  Span span;
};

struct Unknown
{
  std::string_view name;
  Span span;
};

using Item = std::variant<Element, Stray, Unknown>;

Span span_of(const Item& item)
{
  return std::visit([](const auto& v) -> Span {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, Element>) return v.full;
    else return v.span;
  }, item);
}

struct Structure
{
  std::vector<Item> items;
  std::vector<TagMention> unknown_tags;
  std::vector<ProtocolViolation> violations;
};

Structure build_structure(std::string_view raw, const std::vector<Token>& tokens)
{
  Structure out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    const Token& tok = tokens[i];
    if (tok.kind == Token::Text) {
      if (!text::is_blank(raw.substr(tok.span.begin, tok.span.end - tok.span.begin))) {
        out.items.emplace_back(Stray{tok.span});
      }
      ++i;
      continue;
    }
    if (!is_known(tok.name)) {
      out.unknown_tags.push_back({std::string(tok.name), tok.span});
      // <x>text</x> is skipped as one unit; any other unknown tag only covers
      // itself.
      std::size_t end_index = i;
      if (tok.kind == Token::Open) {
        for (std::size_t j = i + 1; j < tokens.size(); ++j) {
          const Token& t = tokens[j];
          if (t.kind == Token::Text) continue;
          if (t.kind == Token::Close && t.name == tok.name) end_index = j;
          break;
        }
      }
      for (std::size_t j = i + 1; j <= end_index; ++j) {
        if (tokens[j].kind != Token::Text) out.unknown_tags.push_back({std::string(tokens[j].name), tokens[j].span});
      }
      out.items.emplace_back(Unknown{tok.name, {tok.span.begin, tokens[end_index].span.end}});
      i = end_index + 1;
      continue;
    }
    if (tok.kind == Token::Close) {
      out.violations.push_back({ViolationCode::UnclosedTag, tok.span,
                                "closing </" + std::string(tok.name) + "> without a matching opening tag"});
      ++i;
      continue;
    }
    std::size_t close_index = 0;
    bool closed = false;
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      const Token& t = tokens[j];
      if (t.kind == Token::Text) continue;
      if (!is_known(t.name)) continue;
      if (t.kind == Token::Close && t.name == tok.name) {
        close_index = j;
        closed = true;
      }
      break;
    }
    if (!closed) {
      out.violations.push_back({ViolationCode::UnclosedTag, tok.span,
                                "<" + std::string(tok.name) + "> is not properly closed"});
      ++i;
      continue;
    }
    for (std::size_t j = i + 1; j < close_index; ++j) {
      if (tokens[j].kind != Token::Text) out.unknown_tags.push_back({std::string(tokens[j].name), tokens[j].span});
    }
    const Token& close = tokens[close_index];
    out.items.emplace_back(Element{tok.name, {tok.span.end, close.span.begin}, {tok.span.begin, close.span.end}});
    i = close_index + 1;
  }
  return out;
}

std::string inner_text(std::string_view raw, Span inner)
{
  return std::string(text::trim(raw.substr(inner.begin, inner.end - inner.begin)));
}

}  // namespace

std::string_view tag_name(ActionKind kind)
{
  switch (kind) {
    case ActionKind::Answer: return "answer";
    case ActionKind::TextSearch: return "text_search";
    case ActionKind::ImageSearch: return "image_search";
  }
  return "answer";
}

std::optional<ActionKind> action_from_tag(std::string_view name)
{
  if (name == "answer") return ActionKind::Answer;
  if (name == "text_search") return ActionKind::TextSearch;
  if (name == "image_search") return ActionKind::ImageSearch;
  return std::nullopt;
}

std::string_view to_string(ViolationCode code)
{
  switch (code) {
    case ViolationCode::MissingThink: return "MissingThink";
    case ViolationCode::MultipleActions: return "MultipleActions";
    case ViolationCode::NoAction: return "NoAction";
    case ViolationCode::TrailingText: return "TrailingText";
    case ViolationCode::BadImagePayload: return "BadImagePayload";
    case ViolationCode::CaptionMisplaced: return "CaptionMisplaced";
    case ViolationCode::CaptionWithoutPriorImageSearch: return "CaptionWithoutPriorImageSearch";
    case ViolationCode::UnknownTag: return "UnknownTag";
    case ViolationCode::DuplicateTag: return "DuplicateTag";
    case ViolationCode::UnclosedTag: return "UnclosedTag";
    case ViolationCode::StrayText: return "StrayText";
    case ViolationCode::EmptyPayload: return "EmptyPayload";
    case ViolationCode::TooLong: return "TooLong";
  }
  return "Unknown";
}

ParseResult parse_turn(std::string_view raw)
{
  ParseResult result;
  if (raw.size() > kMaxTurnChars) {
    result.violations.push_back({ViolationCode::TooLong, {0, raw.size()},
                                 "turn exceeds " + std::to_string(kMaxTurnChars) + " characters"});
    return result;
  }

  const auto tokens = tokenize(raw);
  Structure s = build_structure(raw, tokens);
  auto& v = s.violations;

  std::vector<std::size_t> thinks, captions, actions;
  for (std::size_t k = 0; k < s.items.size(); ++k) {
    if (const auto* e = std::get_if<Element>(&s.items[k])) {
      if (e->name == "think") thinks.push_back(k);
      else if (e->name == "caption") captions.push_back(k);
      else if (is_action(e->name)) actions.push_back(k);
    }
  }

  if (thinks.empty()) {
    v.push_back({ViolationCode::MissingThink, {0, 0}, "turn has no <think> block"});
  } else if (thinks.front() != 0) {
    v.push_back({ViolationCode::MissingThink, span_of(s.items.front()), "output must start with <think>"});
  }
  for (std::size_t k = 1; k < thinks.size(); ++k) {
    v.push_back({ViolationCode::DuplicateTag, span_of(s.items[thinks[k]]), "<think> appears more than once"});
  }

  if (actions.empty()) {
    v.push_back({ViolationCode::NoAction, {raw.size(), raw.size()},
                 "turn must end with one of <answer>, <text_search>, <image_search>"});
  }
  for (std::size_t k = 1; k < actions.size(); ++k) {
    v.push_back({ViolationCode::MultipleActions, span_of(s.items[actions[k]]), "more than one action tag"});
  }

  const std::size_t last_action = actions.empty() ? s.items.size() : actions.back();
  const std::size_t first_think = thinks.empty() ? 0 : thinks.front();

  for (std::size_t k = 0; k < s.items.size(); ++k) {
    const auto& item = s.items[k];
    const bool after_action = !actions.empty() && k > last_action;
    if (std::holds_alternative<Stray>(item) || std::holds_alternative<Unknown>(item)) {
      if (after_action) {
        v.push_back({ViolationCode::TrailingText, {span_of(item).begin, raw.size()},
                     "nothing may follow the closing action tag"});
        break;
      }
      if (std::holds_alternative<Stray>(item)) {
        v.push_back({ViolationCode::StrayText, span_of(item), "text outside of any tag"});
      }
    }
  }

  for (std::size_t n = 0; n < captions.size(); ++n) {
    const std::size_t k = captions[n];
    const Span span = span_of(s.items[k]);
    if (n > 0) v.push_back({ViolationCode::DuplicateTag, span, "<caption> appears more than once"});
    if ((!thinks.empty() && k < first_think) || (!actions.empty() && k > last_action)) {
      v.push_back({ViolationCode::CaptionMisplaced, span, "<caption> must sit between </think> and the action tag"});
    }
  }

  for (std::size_t k : thinks) {
    const auto& e = std::get<Element>(s.items[k]);
    if (inner_text(raw, e.inner).empty()) v.push_back({ViolationCode::EmptyPayload, e.full, "<think> is empty"});
  }
  for (std::size_t k : captions) {
    const auto& e = std::get<Element>(s.items[k]);
    if (inner_text(raw, e.inner).empty()) v.push_back({ViolationCode::EmptyPayload, e.full, "<caption> is empty"});
  }
  for (std::size_t k : actions) {
    const auto& e = std::get<Element>(s.items[k]);
    const auto payload = inner_text(raw, e.inner);
    if (e.name == "image_search") {
      if (payload != kImagePlaceholder) {
        v.push_back({ViolationCode::BadImagePayload, e.inner,
                     "<image_search> must contain exactly image_path, got '" + payload + "'"});
      }
    } else if (payload.empty()) {
      v.push_back({ViolationCode::EmptyPayload, e.full, "<" + std::string(e.name) + "> is empty"});
    }
  }

  std::sort(v.begin(), v.end(), [](const ProtocolViolation& a, const ProtocolViolation& b) {
    if (a.span.begin != b.span.begin) return a.span.begin < b.span.begin;
    return static_cast<int>(a.code) < static_cast<int>(b.code);
  });

  if (!v.empty()) {
    result.violations = std::move(v);
    return result;
  }

  TurnRecord turn;
  turn.raw = std::string(raw);
  turn.think = inner_text(raw, std::get<Element>(s.items[thinks.front()]).inner);
  if (!captions.empty()) turn.caption = inner_text(raw, std::get<Element>(s.items[captions.front()]).inner);
  const auto& act = std::get<Element>(s.items[actions.front()]);
  turn.action = *action_from_tag(act.name);
  turn.action_payload = inner_text(raw, act.inner);
  turn.unknown_tags = std::move(s.unknown_tags);
  result.turn = std::move(turn);
  return result;
}

std::string serialize(const TurnRecord& turn)
{
  std::string out = "<think>" + turn.think + "</think>\n";
  if (turn.caption) out += "<caption>" + *turn.caption + "</caption>\n";
  const auto tag = std::string(tag_name(turn.action));
  out += "<" + tag + ">" + turn.action_payload + "</" + tag + ">";
  return out;
}

TurnRecord make_turn(std::string think, std::optional<std::string> caption, ActionKind action, std::string payload)
{
  TurnRecord t;
  t.think = std::move(think);
  t.caption = std::move(caption);
  t.action = action;
  t.action_payload = std::move(payload);
  t.raw = serialize(t);
  return t;
}

std::vector<ProtocolViolation> validate_in_context(const TurnRecord& turn, std::span<const TurnRecord> history,
                                                   ValidationMode mode, const ValidationOptions& options)
{
  auto parsed = parse_turn(turn.raw);
  std::vector<ProtocolViolation> out = std::move(parsed.violations);
  if (mode == ValidationMode::Lenient) return out;

  const auto& unknown = parsed.turn ? parsed.turn->unknown_tags : turn.unknown_tags;
  // One violation per unknown element: a closing tag whose opening was
  // already reported is skipped.
  std::vector<std::string> open_unknown;
  for (const auto& tag : unknown) {
    const bool closing = turn.raw.compare(tag.span.begin, 2, "</") == 0;
    if (closing) {
      auto it = std::find(open_unknown.begin(), open_unknown.end(), tag.name);
      if (it != open_unknown.end()) {
        open_unknown.erase(it);
        continue;
      }
    } else {
      open_unknown.push_back(tag.name);
    }
    out.push_back({ViolationCode::UnknownTag, tag.span, "tag <" + tag.name + "> is not part of the agent protocol"});
  }
  if (turn.caption) {
    const auto open = turn.raw.find("<caption>");
    const Span span = open == std::string::npos ? Span{} : Span{open, open + 9};
    const bool searched_image = std::any_of(history.begin(), history.end(), [](const TurnRecord& t) {
      return t.action == ActionKind::ImageSearch;
    });
    if (!searched_image) {
      out.push_back({ViolationCode::CaptionWithoutPriorImageSearch, span,
                     "<caption> is only allowed after an earlier <image_search>"});
    }
    if (turn.action == ActionKind::Answer && !options.allow_caption_before_answer) {
      out.push_back({ViolationCode::CaptionMisplaced, span, "<caption> before <answer> is disabled"});
    }
  }
  return out;
}

EvidenceBlock render_evidence(std::vector<EvidenceItem> items, int turn_index)
{
  EvidenceBlock block;
  block.turn_index = turn_index;
  std::string out = "<evidence>\n";
  if (items.empty()) {
    out += std::string(kNoResults) + "\n";
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& item = items[i];
    item.turn_index = turn_index;
    out += "[" + std::to_string(i + 1) + "] " + text::single_line(item.article_title) + " — " +
           text::single_line(item.section_heading) + ": " + text::single_line(item.text) + "\n";
  }
  out += "</evidence>";
  block.items = std::move(items);
  block.rendered = std::move(out);
  return block;
}

EvidenceBlock tool_error_evidence(int turn_index)
{
  EvidenceBlock block;
  block.turn_index = turn_index;
  block.tool_error = true;
  block.rendered = "<evidence>\n" + std::string(kToolError) + "\n</evidence>";
  return block;
}

std::optional<std::string> extract_final_answer(std::span<const TurnRecord> turns)
{
  for (auto it = turns.rbegin(); it != turns.rend(); ++it) {
    if (it->action == ActionKind::Answer) return it->action_payload;
  }
  return std::nullopt;
}

void to_json(nlohmann::json& j, const TurnRecord& turn)
{
  j = nlohmann::json{{"raw", turn.raw},
                     {"think", turn.think},
                     {"action", tag_name(turn.action)},
                     {"payload", turn.action_payload}};
  j["caption"] = turn.caption ? nlohmann::json(*turn.caption) : nlohmann::json(nullptr);
  if (!turn.unknown_tags.empty()) {
    auto& arr = j["unknown_tags"] = nlohmann::json::array();
    for (const auto& t : turn.unknown_tags) arr.push_back({{"name", t.name}, {"begin", t.span.begin}, {"end", t.span.end}});
  }
}

void from_json(const nlohmann::json& j, TurnRecord& turn)
{
  // The raw text is authoritative; parsed fields are re-derived from it.
  const auto raw = j.at("raw").get<std::string>();
  auto parsed = parse_turn(raw);
  if (!parsed.turn) {
    std::string codes;
    for (const auto& v : parsed.violations) codes += (codes.empty() ? "" : ",") + std::string(to_string(v.code));
    throw nlohmann::json::other_error::create(501, "turn violates protocol: " + codes, &j);
  }
  turn = std::move(*parsed.turn);
}

void to_json(nlohmann::json& j, const EvidenceBlock& block)
{
  auto hits = nlohmann::json::array();
  for (const auto& item : block.items) {
    hits.push_back({{"article_id", item.article_id},
                    {"section_id", item.section_id},
                    {"title", item.article_title},
                    {"heading", item.section_heading},
                    {"text", item.text},
                    {"score", item.score},
                    {"rank", item.rank}});
  }
  j = nlohmann::json{{"turn_index", block.turn_index},
                     {"tool_error", block.tool_error},
                     {"hits", std::move(hits)},
                     {"rendered", block.rendered}};
}

void from_json(const nlohmann::json& j, EvidenceBlock& block)
{
  block = EvidenceBlock{};
  block.turn_index = j.at("turn_index").get<int>();
  block.tool_error = j.value("tool_error", false);
  block.rendered = j.at("rendered").get<std::string>();
  for (const auto& h : j.at("hits")) {
    EvidenceItem item;
    item.article_id = h.at("article_id").get<std::string>();
    item.section_id = h.value("section_id", "");
    item.article_title = h.value("title", "");
    item.section_heading = h.value("heading", "");
    item.text = h.value("text", "");
    item.score = h.value("score", 0.0);
    item.rank = h.value("rank", 0);
    item.turn_index = block.turn_index;
    block.items.push_back(std::move(item));
  }
}

nlohmann::json to_json(const ProtocolViolation& violation)
{
  return {{"code", to_string(violation.code)},
          {"begin", violation.span.begin},
          {"end", violation.span.end},
          {"message", violation.message}};
}

}  // namespace dbagent::protocol
