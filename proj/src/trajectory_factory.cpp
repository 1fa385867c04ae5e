#include "dbagent/trajectory_factory.hpp"

#include <algorithm>
#include <set>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/parallel.hpp"
#include "dbagent/prompts.hpp"
#include "dbagent/rng.hpp"
#include "dbagent/text.hpp"

namespace dbagent::factory {

using gateway::ChatMessage;
using gateway::Role;
using protocol::ActionKind;
using protocol::EvidenceBlock;

std::string_view to_string(Split split)
{
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view name)
{
  if (name == "train") return Split::Train;
  if (name == "val" || name == "validation") return Split::Val;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

QaSample sample_from_json(const nlohmann::json& j)
{
  if (!j.is_object()) throw std::invalid_argument("sample must be a JSON object");
  static const std::set<std::string> known{"sample_id", "image_ref", "question", "answers", "gold_entity",
                                           "gold_article_id", "split", "tags"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown field '" + key + "'");
  }
  const auto required_string = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string() || text::is_blank(j[key].get<std::string>())) {
      throw std::invalid_argument(std::string("'") + key + "' must be a non-empty string");
    }
    return j[key].get<std::string>();
  };
  const auto optional_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string()) throw std::invalid_argument(std::string("'") + key + "' must be a string");
    auto v = j[key].get<std::string>();
    if (text::is_blank(v)) return std::nullopt;
    return v;
  };
  QaSample s;
  s.sample_id = required_string("sample_id");
  s.image_ref = required_string("image_ref");
  s.question = required_string("question");
  if (!j.contains("answers")) throw std::invalid_argument("'answers' is required");
  const auto& answers = j["answers"];
  if (answers.is_string()) {
    s.gold_answers = text::split_answers(answers.get<std::string>());
  } else if (answers.is_array()) {
    for (const auto& a : answers) {
      if (!a.is_string()) throw std::invalid_argument("'answers' entries must be strings");
      const auto t = text::trim(a.get<std::string>());
      if (!t.empty()) s.gold_answers.emplace_back(t);
    }
  } else {
    throw std::invalid_argument("'answers' must be a string or a list of strings");
  }
  if (s.gold_answers.empty()) throw std::invalid_argument("'answers' has no non-empty answer");
  s.gold_entity = optional_string("gold_entity");
  s.gold_article_id = optional_string("gold_article_id");
  s.split = split_from_string(required_string("split"));
  if (j.contains("tags")) {
    if (!j["tags"].is_array()) throw std::invalid_argument("'tags' must be a list of strings");
    for (const auto& t : j["tags"]) {
      if (!t.is_string()) throw std::invalid_argument("'tags' must be a list of strings");
      s.tags.push_back(t.get<std::string>());
    }
  }
  return s;
}

nlohmann::json to_json(const QaSample& s)
{
  nlohmann::json j{{"sample_id", s.sample_id},
                   {"image_ref", s.image_ref},
                   {"question", s.question},
                   {"answers", s.gold_answers},
                   {"split", to_string(s.split)}};
  if (s.gold_entity) j["gold_entity"] = *s.gold_entity;
  if (s.gold_article_id) j["gold_article_id"] = *s.gold_article_id;
  if (!s.tags.empty()) j["tags"] = s.tags;
  return j;
}

namespace {

std::pair<std::vector<QaSample>, std::vector<std::string>> read_dataset(const std::filesystem::path& path)
{
  std::vector<QaSample> samples;
  std::vector<std::string> problems;
  std::map<std::string, std::size_t> first_line;
  jsonl::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      auto s = sample_from_json(nlohmann::json::parse(line));
      const auto [it, inserted] = first_line.emplace(s.sample_id, line_no);
      if (!inserted) {
        problems.push_back(where + "duplicate sample_id '" + s.sample_id + "' (first on line " +
                           std::to_string(it->second) + ")");
        return;
      }
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      problems.push_back(where + e.what());
    }
  });
  return {std::move(samples), std::move(problems)};
}

}  // namespace

std::vector<QaSample> load_dataset(const std::filesystem::path& path)
{
  auto [samples, problems] = read_dataset(path);
  if (!problems.empty()) throw DataError("invalid dataset:\n  " + text::join(problems, "\n  "), path.string());
  return samples;
}

std::vector<std::string> lint_dataset(const std::filesystem::path& path)
{
  return read_dataset(path).second;
}

void save_dataset(const std::vector<QaSample>& samples, const std::filesystem::path& path)
{
  std::string out;
  for (const auto& s : samples) out += to_json(s).dump() + "\n";
  jsonl::write_file_atomic(path, out);
}

std::string_view to_string(JudgeMode mode)
{
  return mode == JudgeMode::NormalizedExact ? "normalized_exact" : "model_judge";
}

JudgeMode judge_mode_from_string(std::string_view name)
{
  if (name == "normalized_exact" || name == "exact") return JudgeMode::NormalizedExact;
  if (name == "model_judge" || name == "model") return JudgeMode::ModelJudge;
  throw UsageError("unknown judge mode '" + std::string(name) + "'");
}

bool exact_match(std::string_view pred, const std::vector<std::string>& gold_answers)
{
  const auto p = text::normalize_answer(pred);
  if (p.empty()) return false;
  return std::any_of(gold_answers.begin(), gold_answers.end(),
                     [&](const std::string& g) { return text::normalize_answer(g) == p; });
}

std::string stage_header(std::string_view prompt_id)
{
  return "[stage] " + std::string(prompt_id);
}

namespace {

struct Field
{
  std::string name;
  std::string value;
};

std::vector<ChatMessage> stage_messages(std::string_view prompt_id, const std::vector<Field>& fields,
                                        const std::string* image_ref)
{
  std::string user = stage_header(prompt_id) + "\n";
  for (const auto& f : fields) user += "[" + f.name + "]\n" + f.value + "\n";
  std::vector<ChatMessage> messages;
  messages.push_back({Role::System, std::string(prompts::get(prompt_id)), {}});
  ChatMessage m{Role::User, std::move(user), {}};
  if (image_ref) m.images.push_back(*image_ref);
  messages.push_back(std::move(m));
  return messages;
}

}  // namespace

std::optional<Verdict> read_verdict_marker(std::string_view reply)
{
  const auto t = text::trim(reply);
  if (t.starts_with("[correct]")) return Verdict::Correct;
  if (t.starts_with("[wrong]")) return Verdict::Wrong;
  return std::nullopt;
}

bool judge_answer(std::string_view pred, const std::vector<std::string>& gold_answers, JudgeMode mode,
                  const gateway::ChatBackend* judge)
{
  if (text::is_blank(pred)) throw UsageError("judge_answer needs a non-empty prediction");
  if (mode == JudgeMode::NormalizedExact) return exact_match(pred, gold_answers);
  if (!judge) throw UsageError("model_judge mode needs a chat backend");
  const auto messages = stage_messages(
      prompts::kStage3TextJudge, {{"stage3_answer", std::string(pred)}, {"gold_answer", text::join(gold_answers, "|")}},
      nullptr);
  gateway::GenerationParams params;
  params.stop_sequences.clear();
  const auto reply = judge->complete_free_form(messages, params, 0);
  const auto marker = read_verdict_marker(reply);
  if (!marker) throw JudgeParseFailure("judge reply has neither [correct] nor [wrong]: " + text::single_line(reply));
  return *marker == Verdict::Correct;
}

bool entity_matches(std::string_view predicted, std::string_view gold)
{
  const auto p = text::normalize_answer(predicted);
  const auto g = text::normalize_answer(gold);
  if (p.empty() || g.empty()) return false;
  return p == g || p.find(g) != std::string::npos || g.find(p) != std::string::npos;
}

std::string_view to_string(Verdict v)
{
  switch (v) {
    case Verdict::Correct: return "correct";
    case Verdict::Wrong: return "wrong";
    case Verdict::NotApplicable: return "n/a";
  }
  return "n/a";
}

Verdict verdict_from_string(std::string_view name)
{
  if (name == "correct") return Verdict::Correct;
  if (name == "wrong") return Verdict::Wrong;
  if (name == "n/a") return Verdict::NotApplicable;
  throw std::invalid_argument("unknown verdict '" + std::string(name) + "'");
}

StageOutput parse_stage_output(std::string_view text, const std::vector<std::string>& allowed_tags,
                               bool expect_marker)
{
  StageOutput out;
  std::string_view rest = text::trim(text);
  if (expect_marker) {
    out.marker = read_verdict_marker(rest);
    if (!out.marker) {
      out.problems.push_back("reply must start with [correct] or [wrong]");
      return out;
    }
    rest.remove_prefix(*out.marker == Verdict::Correct ? 9 : 7);
  }
  while (true) {
    rest = text::trim(rest);
    if (rest.empty()) break;
    if (rest.front() != '<') {
      out.problems.push_back("unexpected text outside tags: '" + text::single_line(rest.substr(0, 40)) + "'");
      break;
    }
    const auto close = rest.find('>');
    if (close == std::string_view::npos) {
      out.problems.push_back("unterminated tag");
      break;
    }
    const std::string name(rest.substr(1, close - 1));
    if (std::find(allowed_tags.begin(), allowed_tags.end(), name) == allowed_tags.end()) {
      out.problems.push_back("tag <" + name + "> is not allowed here");
      break;
    }
    const std::string end_tag = "</" + name + ">";
    const auto end = rest.find(end_tag, close + 1);
    if (end == std::string_view::npos) {
      out.problems.push_back("tag <" + name + "> is not closed");
      break;
    }
    const auto inner = text::trim(rest.substr(close + 1, end - close - 1));
    if (inner.find('<') != std::string_view::npos && inner.find('>') != std::string_view::npos) {
      out.problems.push_back("tag <" + name + "> contains nested markup");
    }
    if (!out.fields.emplace(name, std::string(inner)).second) out.problems.push_back("tag <" + name + "> repeated");
    rest.remove_prefix(end + end_tag.size());
  }
  return out;
}

std::string_view to_string(StageKind stage)
{
  switch (stage) {
    case StageKind::S1: return "S1";
    case StageKind::S2Image: return "S2_image";
    case StageKind::S2Text: return "S2_text";
    case StageKind::S3: return "S3";
  }
  return "S1";
}

StageKind stage_from_string(std::string_view name)
{
  if (name == "S1") return StageKind::S1;
  if (name == "S2_image") return StageKind::S2Image;
  if (name == "S2_text") return StageKind::S2Text;
  if (name == "S3") return StageKind::S3;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

std::string_view to_string(TrajectoryType type)
{
  switch (type) {
    case TrajectoryType::A: return "A";
    case TrajectoryType::IA: return "I→A";
    case TrajectoryType::TA: return "T→A";
    case TrajectoryType::ITA: return "I→T→A";
    case TrajectoryType::TTA: return "T→T→A";
    case TrajectoryType::Discarded: return "DISCARDED";
    case TrajectoryType::Failed: return "FAILED";
  }
  return "DISCARDED";
}

TrajectoryType trajectory_type_from_string(std::string_view label)
{
  std::string s(label);
  for (std::size_t pos; (pos = s.find("->")) != std::string::npos;) s.replace(pos, 2, "→");
  for (auto t : {TrajectoryType::A, TrajectoryType::IA, TrajectoryType::TA, TrajectoryType::ITA, TrajectoryType::TTA,
                 TrajectoryType::Discarded, TrajectoryType::Failed}) {
    if (s == to_string(t)) return t;
  }
  throw std::invalid_argument("unknown trajectory type '" + std::string(label) + "'");
}

std::string shape_label(const std::vector<ActionKind>& actions)
{
  std::string out;
  for (auto a : actions) {
    if (!out.empty()) out += "→";
    out += a == ActionKind::Answer ? "A" : a == ActionKind::TextSearch ? "T" : "I";
  }
  return out;
}

TrajectoryType type_from_stages(const std::vector<StageRecord>& stages, bool keep_failed)
{
  if (stages.empty() || stages.front().stage != StageKind::S1) return TrajectoryType::Discarded;
  const auto& s1 = stages.front();
  if (s1.verdict == Verdict::Correct) return stages.size() == 1 ? TrajectoryType::A : TrajectoryType::Discarded;
  if (s1.verdict != Verdict::Wrong || stages.size() < 2) return TrajectoryType::Discarded;
  const auto& s2 = stages[1];
  const bool image = s2.stage == StageKind::S2Image;
  if (!image && s2.stage != StageKind::S2Text) return TrajectoryType::Discarded;
  if (s2.verdict == Verdict::Correct) {
    if (stages.size() != 2) return TrajectoryType::Discarded;
    return image ? TrajectoryType::IA : TrajectoryType::TA;
  }
  if (s2.verdict != Verdict::Wrong || stages.size() != 3 || stages[2].stage != StageKind::S3) {
    return TrajectoryType::Discarded;
  }
  switch (stages[2].verdict) {
    case Verdict::Correct: return image ? TrajectoryType::ITA : TrajectoryType::TTA;
    case Verdict::Wrong: return keep_failed ? TrajectoryType::Failed : TrajectoryType::Discarded;
    case Verdict::NotApplicable: return TrajectoryType::Discarded;
  }
  return TrajectoryType::Discarded;
}

std::string_view to_string(Difficulty d)
{
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Hard: return "hard";
  }
  return "easy";
}

Difficulty difficulty_from_string(std::string_view name)
{
  if (name == "easy") return Difficulty::Easy;
  if (name == "medium") return Difficulty::Medium;
  if (name == "hard") return Difficulty::Hard;
  throw std::invalid_argument("unknown difficulty '" + std::string(name) + "'");
}

Difficulty assign_difficulty(const agent::Trajectory& traj)
{
  const auto tools = traj.tool_calls();
  if (tools == 0) return Difficulty::Easy;
  if (tools == 1) return Difficulty::Medium;
  return Difficulty::Hard;
}

namespace {

nlohmann::json fields_json(const std::map<std::string, std::string>& fields)
{
  auto j = nlohmann::json::object();
  for (const auto& [k, v] : fields) j[k] = v;
  return j;
}

std::map<std::string, std::string> fields_from_json(const nlohmann::json& j)
{
  std::map<std::string, std::string> out;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) out[k] = v.get<std::string>();
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const BranchOutcome& o)
{
  j = nlohmann::json::object();
  j["sample_id"] = o.sample_id;
  j["trajectory_type"] = to_string(o.type);
  j["difficulty"] = o.difficulty ? nlohmann::json(to_string(*o.difficulty)) : nlohmann::json(nullptr);
  j["rule_version"] = kDifficultyRuleVersion;
  if (!o.discard_reason.empty()) j["discard_reason"] = o.discard_reason;
  auto stages = nlohmann::json::array();
  for (const auto& s : o.stages) {
    nlohmann::json js{{"stage", to_string(s.stage)},
                      {"prompt_id", s.prompt_id},
                      {"model_output", s.model_output},
                      {"parsed_fields", fields_json(s.parsed_fields)},
                      {"judge_prompt_id", s.judge_prompt_id},
                      {"judge_output", s.judge_output},
                      {"judge_fields", fields_json(s.judge_fields)},
                      {"verdict", to_string(s.verdict)},
                      {"attempts", s.attempts}};
    js["query"] = s.query ? nlohmann::json(*s.query) : nlohmann::json(nullptr);
    js["evidence"] = s.evidence ? nlohmann::json(*s.evidence) : nlohmann::json(nullptr);
    stages.push_back(std::move(js));
  }
  j["stages"] = std::move(stages);
  j["assembled"] = o.assembled ? nlohmann::json(*o.assembled) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, BranchOutcome& o)
{
  if (!j.is_object()) throw std::invalid_argument("outcome must be a JSON object");
  o = BranchOutcome{};
  o.sample_id = j.at("sample_id").get<std::string>();
  o.type = trajectory_type_from_string(j.at("trajectory_type").get<std::string>());
  if (j.contains("difficulty") && !j["difficulty"].is_null()) {
    o.difficulty = difficulty_from_string(j["difficulty"].get<std::string>());
  }
  o.discard_reason = j.value("discard_reason", "");
  for (const auto& js : j.at("stages")) {
    StageRecord s;
    s.stage = stage_from_string(js.at("stage").get<std::string>());
    s.prompt_id = js.value("prompt_id", "");
    s.model_output = js.value("model_output", "");
    s.parsed_fields = fields_from_json(js.value("parsed_fields", nlohmann::json::object()));
    s.judge_prompt_id = js.value("judge_prompt_id", "");
    s.judge_output = js.value("judge_output", "");
    s.judge_fields = fields_from_json(js.value("judge_fields", nlohmann::json::object()));
    s.verdict = verdict_from_string(js.value("verdict", "n/a"));
    s.attempts = js.value("attempts", 0);
    if (js.contains("query") && !js["query"].is_null()) s.query = js["query"].get<std::string>();
    if (js.contains("evidence") && !js["evidence"].is_null()) s.evidence = js["evidence"].get<EvidenceBlock>();
    o.stages.push_back(std::move(s));
  }
  if (j.contains("assembled") && !j["assembled"].is_null()) o.assembled = j["assembled"].get<agent::Trajectory>();
}

void write_outcomes(const std::filesystem::path& path, const std::vector<BranchOutcome>& outcomes)
{
  std::string out;
  for (const auto& o : outcomes) out += nlohmann::json(o).dump() + "\n";
  jsonl::write_file_atomic(path, out);
}

std::vector<BranchOutcome> read_outcomes(const std::filesystem::path& path)
{
  std::vector<BranchOutcome> out;
  std::vector<std::string> problems;
  jsonl::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    try {
      out.push_back(nlohmann::json::parse(line).get<BranchOutcome>());
    } catch (const std::exception& e) {
      problems.push_back(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  });
  if (!problems.empty()) throw DataError("malformed outcomes:\n  " + text::join(problems, "\n  "), path.string());
  return out;
}

nlohmann::json FactoryConfig::snapshot() const
{
  agent::RolloutConfig rc;
  rc.system_prompt = agent_system_prompt;
  return {{"judge_mode", to_string(judge_mode)},
          {"k_text", k_text},
          {"k_image", k_image},
          {"keep_failed", keep_failed},
          {"stage_attempts", stage_attempts},
          {"image_evidence", image_evidence == agent::ImageEvidence::LeadSection ? "lead_section" : "full_article"},
          {"temperature", generation.temperature},
          {"system_prompt_sha256", jsonl::sha256_hex(rc.effective_system_prompt())},
          {"difficulty_rule", kDifficultyRuleVersion}};
}

namespace {

const std::vector<std::string> kAnswerTags{"think", "answer"};
const std::vector<std::string> kStage1AnswerTags{"think", "entity", "answer"};

/// Per-sample call state shared by all stages.
struct Pipeline
{
  const QaSample& sample;
  const FactoryBackends& backends;
  const agent::ToolBinding& tools;
  const FactoryConfig& config;
  int call_index = 0;

  const gateway::ChatBackend& judge_backend() const { return backends.judge ? *backends.judge : *backends.answer; }
  std::string gold() const { return text::join(sample.gold_answers, "|"); }
};

struct Call
{
  std::optional<StageOutput> parsed;
  std::string raw;
  int attempts = 0;
  std::string failure;
};

/// Calls the backend up to stage_attempts times until the reply parses and
/// satisfies `check`, which appends contract problems.
template <class Check>
Call call_stage(Pipeline& p, const gateway::ChatBackend& backend, bool free_form,
                const std::vector<ChatMessage>& messages, const std::vector<std::string>& tags, bool expect_marker,
                Check&& check)
{
  Call call;
  gateway::GenerationParams params = p.config.generation;
  if (free_form) params.stop_sequences.clear();
  for (int attempt = 0; attempt < std::max(1, p.config.stage_attempts); ++attempt) {
    ++call.attempts;
    std::string raw;
    try {
      raw = free_form ? backend.complete_free_form(messages, params, p.call_index++)
                      : backend.complete(messages, params, p.call_index++);
    } catch (const BackendError& e) {
      call.failure = e.what();
      continue;
    }
    auto parsed = parse_stage_output(raw, tags, expect_marker);
    if (parsed.ok()) check(parsed);
    call.raw = std::move(raw);
    if (parsed.ok()) {
      call.parsed = std::move(parsed);
      call.failure.clear();
      return call;
    }
    call.failure = text::join(parsed.problems, "; ");
  }
  return call;
}

void require(StageOutput& out, const std::vector<std::string>& names)
{
  for (const auto& n : names) {
    auto it = out.fields.find(n);
    if (it == out.fields.end()) {
      out.problems.push_back("missing <" + n + ">");
    } else if (text::is_blank(it->second)) {
      out.problems.push_back("<" + n + "> is empty");
    }
  }
  if (out.fields.size() > names.size()) out.problems.push_back("unexpected extra tags");
}

void require_query(StageOutput& out)
{
  auto it = out.fields.find("text_search");
  if (it != out.fields.end() && it->second.find('\n') != std::string::npos) {
    out.problems.push_back("<text_search> must be a single line");
  }
}

std::optional<EvidenceBlock> retrieve(const std::function<std::vector<protocol::EvidenceItem>(const std::string&, int)>& tool,
                                      const std::string& argument, int k)
{
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      return protocol::render_evidence(tool(argument, k), 0);
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

/// Judge step shared by stages: in exact mode a correct answer needs no
/// judge call and a [correct] reply to a wrong answer is a contract
/// problem; in model mode the marker decides.
struct Judged
{
  Verdict verdict = Verdict::NotApplicable;
  Call call;
  bool called = false;
};

template <class Check>
Judged judge_stage(Pipeline& p, std::string_view answer, std::string_view judge_prompt, bool with_image,
                   const std::vector<Field>& fields, const std::vector<std::string>& tags, Check&& check_wrong)
{
  Judged out;
  const bool exact = p.config.judge_mode == JudgeMode::NormalizedExact;
  const bool local_correct = exact_match(answer, p.sample.gold_answers);
  if (exact && local_correct) {
    out.verdict = Verdict::Correct;
    return out;
  }
  out.called = true;
  const auto messages = stage_messages(judge_prompt, fields, with_image ? &p.sample.image_ref : nullptr);
  out.call = call_stage(p, p.judge_backend(), true, messages, tags, true, [&](StageOutput& o) {
    if (*o.marker == Verdict::Correct) {
      if (exact) o.problems.push_back("judge marked [correct] but the answer does not match the gold answers");
      if (!o.fields.empty()) o.problems.push_back("nothing may follow [correct]");
      return;
    }
    check_wrong(o);
  });
  if (out.call.parsed) out.verdict = *out.call.parsed->marker;
  return out;
}

bool leaks_gold(const std::string& authored, const std::string& visible_evidence, const QaSample& sample)
{
  const auto a = text::normalize_answer(authored);
  const auto e = text::normalize_answer(visible_evidence);
  for (const auto& g : sample.gold_answers) {
    const auto ng = text::normalize_answer(g);
    if (ng.empty()) continue;
    if (text::contains_phrase(a, ng) && !text::contains_phrase(e, ng)) return true;
  }
  return false;
}

std::string evidence_text(const EvidenceBlock& block)
{
  std::string out;
  for (const auto& item : block.items) out += item.article_title + " " + item.section_heading + " " + item.text + "\n";
  return out;
}

}  // namespace

Assembly assemble_agent_trajectory(const QaSample& sample, TrajectoryType type, const std::vector<StageRecord>& stages,
                                   const FactoryConfig& config)
{
  Assembly out;
  if (type == TrajectoryType::Discarded || type == TrajectoryType::Failed) {
    out.failure = "only successful outcomes can be assembled";
    return out;
  }
  const std::size_t expected = type == TrajectoryType::A ? 1 : (type == TrajectoryType::IA || type == TrajectoryType::TA) ? 2 : 3;
  if (stages.size() != expected) {
    out.failure = "stage count does not fit type " + std::string(to_string(type));
    return out;
  }
  const auto field = [](const std::map<std::string, std::string>& m, const char* key) {
    auto it = m.find(key);
    return it == m.end() ? std::string() : it->second;
  };
  const auto& s1 = stages[0];
  std::string first_think = field(s1.parsed_fields, "think") + "\nEntity: " + field(s1.parsed_fields, "entity");

  agent::Trajectory traj;
  traj.task_id = sample.sample_id;
  traj.image_ref = sample.image_ref;
  traj.question = sample.question;
  traj.terminated_by = agent::Termination::Answer;
  traj.config = config.snapshot();

  std::vector<std::pair<std::string, std::string>> leak_checks;  // (authored text, evidence visible before it)
  std::string visible;

  if (type == TrajectoryType::A) {
    traj.turns.push_back(protocol::make_turn(first_think, std::nullopt, ActionKind::Answer, field(s1.parsed_fields, "answer")));
  } else {
    const bool image = stages[1].stage == StageKind::S2Image;
    const auto choose = field(s1.judge_fields, "choose");
    leak_checks.emplace_back(choose, visible);
    traj.turns.push_back(protocol::make_turn(first_think + "\n" + choose, std::nullopt,
                                             image ? ActionKind::ImageSearch : ActionKind::TextSearch,
                                             image ? std::string(protocol::kImagePlaceholder) : *s1.query));
    if (!stages[1].evidence) {
      out.failure = "stage 2 has no evidence";
      return out;
    }
    traj.observations.push_back(protocol::render_evidence(stages[1].evidence->items, 0));
    visible += evidence_text(*stages[1].evidence);
    const auto& s2 = stages[1];
    if (expected == 2) {
      traj.turns.push_back(protocol::make_turn(field(s2.parsed_fields, "think"), std::nullopt, ActionKind::Answer,
                                               field(s2.parsed_fields, "answer")));
    } else {
      const auto judge_think = field(s2.judge_fields, "think");
      std::optional<std::string> caption;
      if (image) caption = field(s2.judge_fields, "caption");
      leak_checks.emplace_back(judge_think, visible);
      if (caption) leak_checks.emplace_back(*caption, visible);
      traj.turns.push_back(protocol::make_turn(field(s2.parsed_fields, "think") + "\n" + judge_think, caption,
                                               ActionKind::TextSearch, field(s2.judge_fields, "text_search")));
      const auto& s3 = stages[2];
      if (!s3.evidence) {
        out.failure = "stage 3 has no evidence";
        return out;
      }
      traj.observations.push_back(protocol::render_evidence(s3.evidence->items, 1));
      traj.turns.push_back(protocol::make_turn(field(s3.parsed_fields, "think"), std::nullopt, ActionKind::Answer,
                                               field(s3.parsed_fields, "answer")));
    }
  }

  for (std::size_t i = 0; i < traj.turns.size(); ++i) {
    const auto history = std::span<const protocol::TurnRecord>(traj.turns.data(), i);
    const auto violations =
        protocol::validate_in_context(traj.turns[i], history, protocol::ValidationMode::Strict, {});
    if (!violations.empty()) {
      out.failure = "assembled turn " + std::to_string(i) + " fails strict validation: " +
                    std::string(protocol::to_string(violations.front().code)) + " (" + violations.front().message + ")";
      return out;
    }
  }
  for (const auto& [authored, evidence] : leak_checks) {
    if (leaks_gold(authored, evidence, sample)) {
      out.failure = "judge-authored text mentions a gold answer not present in earlier evidence";
      return out;
    }
  }
  traj.final_answer = protocol::extract_final_answer(traj.turns);
  out.trajectory = std::move(traj);
  return out;
}

BranchOutcome build_outcome(const QaSample& sample, const FactoryBackends& backends, const agent::ToolBinding& tools,
                            const FactoryConfig& config)
{
  if (!backends.answer) throw UsageError("factory needs an answering backend");
  if (!tools.resolvable()) throw UsageError("tool binding is incomplete");
  Pipeline p{sample, backends, tools, config};
  BranchOutcome outcome;
  outcome.sample_id = sample.sample_id;
  const auto discard = [&](std::string reason) {
    outcome.type = TrajectoryType::Discarded;
    outcome.discard_reason = std::move(reason);
    return outcome;
  };

  // Stage 1: closed-book answer, then routing.
  StageRecord s1;
  s1.stage = StageKind::S1;
  s1.prompt_id = prompts::kStage1Answer;
  auto a1 = call_stage(p, *backends.answer, false,
                       stage_messages(prompts::kStage1Answer, {{"question", sample.question}}, &sample.image_ref),
                       kStage1AnswerTags, false, [](StageOutput& o) { require(o, kStage1AnswerTags); });
  s1.model_output = a1.raw;
  s1.attempts = a1.attempts;
  if (!a1.parsed) {
    outcome.stages.push_back(std::move(s1));
    return discard("stage 1 answer unusable: " + a1.failure);
  }
  s1.parsed_fields = a1.parsed->fields;
  const auto entity = s1.parsed_fields["entity"];
  const auto s1_answer = s1.parsed_fields["answer"];

  s1.judge_prompt_id = prompts::kStage1Judge;
  auto j1 = judge_stage(
      p, s1_answer, prompts::kStage1Judge, false,
      {{"question", sample.question},
       {"stage1_think", s1.parsed_fields["think"]},
       {"stage1_entity", entity},
       {"stage1_answer", s1_answer},
       {"gold_answer", p.gold()},
       {"gold_entity", sample.gold_entity.value_or("")}},
      {"image_search", "text_search", "choose"}, [&](StageOutput& o) {
        const bool has_image = o.fields.contains("image_search");
        const bool has_text = o.fields.contains("text_search");
        if (has_image == has_text) {
          o.problems.push_back("[wrong] needs exactly one of <image_search> or <text_search>");
          return;
        }
        require(o, {has_image ? "image_search" : "text_search", "choose"});
        if (has_image && o.fields["image_search"] != protocol::kImagePlaceholder) {
          o.problems.push_back("<image_search> must contain only image_path");
        }
        require_query(o);
        if (sample.gold_entity) {
          const bool match = entity_matches(entity, *sample.gold_entity);
          if (match && has_image) o.problems.push_back("entity matches gold_entity, so text retrieval is required");
          if (!match && has_text) o.problems.push_back("entity differs from gold_entity, so image retrieval is required");
        }
      });
  s1.verdict = j1.verdict;
  if (j1.called) {
    s1.judge_output = j1.call.raw;
    s1.attempts += j1.call.attempts;
  } else {
    s1.judge_prompt_id.clear();
  }
  if (j1.called && !j1.call.parsed) {
    outcome.stages.push_back(std::move(s1));
    return discard("stage 1 judge unusable: " + j1.call.failure);
  }
  if (j1.verdict == Verdict::Correct) {
    outcome.stages.push_back(std::move(s1));
    outcome.type = TrajectoryType::A;
  } else {
    s1.judge_fields = j1.call.parsed->fields;
    const bool image = s1.judge_fields.contains("image_search");
    s1.query = image ? s1.judge_fields["image_search"] : s1.judge_fields["text_search"];
    const auto stage1_output = j1.call.raw;
    outcome.stages.push_back(s1);

    // Stage 2: one retrieval on the chosen branch, re-answer, judge.
    StageRecord s2;
    s2.stage = image ? StageKind::S2Image : StageKind::S2Text;
    s2.prompt_id = image ? prompts::kStage2ImageAnswer : prompts::kStage2TextAnswer;
    s2.query = *s1.query;
    s2.evidence = image ? retrieve(tools.image_retriever, sample.image_ref, config.k_image)
                        : retrieve(tools.text_retriever, *s1.query, config.k_text);
    if (!s2.evidence) {
      outcome.stages.push_back(std::move(s2));
      return discard("stage 2 retrieval failed");
    }
    const auto evidence2 = s2.evidence->rendered;
    auto a2 = call_stage(p, *backends.answer, false,
                         stage_messages(s2.prompt_id,
                                        {{"question", sample.question}, {"stage1_output", stage1_output}, {"evidence", evidence2}},
                                        &sample.image_ref),
                         kAnswerTags, false, [](StageOutput& o) { require(o, kAnswerTags); });
    s2.model_output = a2.raw;
    s2.attempts = a2.attempts;
    if (!a2.parsed) {
      outcome.stages.push_back(std::move(s2));
      return discard("stage 2 answer unusable: " + a2.failure);
    }
    s2.parsed_fields = a2.parsed->fields;
    const auto s2_answer = s2.parsed_fields["answer"];
    s2.judge_prompt_id = image ? prompts::kStage2ImageJudge : prompts::kStage2TextJudge;
    const std::vector<std::string> rewrite_tags =
        image ? std::vector<std::string>{"caption", "think", "text_search"} : std::vector<std::string>{"think", "text_search"};
    auto j2 = judge_stage(p, s2_answer, s2.judge_prompt_id, image,
                          {{"question", sample.question},
                           {"stage1_output", stage1_output},
                           {"evidence", evidence2},
                           {"stage2_answer", s2_answer},
                           {"gold_answer", p.gold()}},
                          rewrite_tags, [&](StageOutput& o) {
                            require(o, rewrite_tags);
                            require_query(o);
                            if (o.problems.empty() && !image &&
                                text::normalize_answer(o.fields["text_search"]) == text::normalize_answer(*s1.query)) {
                              o.problems.push_back("rewritten query equals the previous query");
                            }
                          });
    s2.verdict = j2.verdict;
    if (j2.called) {
      s2.judge_output = j2.call.raw;
      s2.attempts += j2.call.attempts;
    } else {
      s2.judge_prompt_id.clear();
    }
    if (j2.called && !j2.call.parsed) {
      outcome.stages.push_back(std::move(s2));
      return discard("stage 2 judge unusable: " + j2.call.failure);
    }
    if (j2.verdict == Verdict::Correct) {
      outcome.stages.push_back(std::move(s2));
      outcome.type = image ? TrajectoryType::IA : TrajectoryType::TA;
    } else {
      s2.judge_fields = j2.call.parsed->fields;
      const auto stage2_judge = j2.call.raw;
      const auto new_query = s2.judge_fields["text_search"];
      outcome.stages.push_back(s2);

      // Stage 3: retrieve with the rewritten query and answer with full history.
      StageRecord s3;
      s3.stage = StageKind::S3;
      s3.prompt_id = image ? prompts::kStage3ImageAnswer : prompts::kStage3TextAnswer;
      s3.query = new_query;
      s3.evidence = retrieve(tools.text_retriever, new_query, config.k_text);
      if (!s3.evidence) {
        outcome.stages.push_back(std::move(s3));
        return discard("stage 3 retrieval failed");
      }
      const auto evidence3 = s3.evidence->rendered;
      std::vector<Field> fields3;
      if (image) {
        fields3 = {{"question", sample.question},
                   {"stage1_output", stage1_output},
                   {"stage2_evidence", evidence2},
                   {"stage2_answer", s2_answer},
                   {"stage2_judge", stage2_judge},
                   {"stage3_new_evidence", evidence3}};
      } else {
        fields3 = {{"question", sample.question},
                   {"stage1_output", stage1_output},
                   {"stage2_answer", s2_answer},
                   {"stage2_new_think", s2.judge_fields["think"]},
                   {"new_text_search_query", new_query},
                   {"stage3_text_search_query", new_query},
                   {"stage3_new_evidence", evidence3}};
      }
      auto a3 = call_stage(p, *backends.answer, false, stage_messages(s3.prompt_id, fields3, &sample.image_ref),
                           kAnswerTags, false, [](StageOutput& o) { require(o, kAnswerTags); });
      s3.model_output = a3.raw;
      s3.attempts = a3.attempts;
      if (!a3.parsed) {
        outcome.stages.push_back(std::move(s3));
        return discard("stage 3 answer unusable: " + a3.failure);
      }
      s3.parsed_fields = a3.parsed->fields;
      const auto s3_answer = s3.parsed_fields["answer"];
      s3.judge_prompt_id = image ? prompts::kStage3ImageJudge : prompts::kStage3TextJudge;
      std::vector<Field> judge3;
      if (image) {
        judge3 = {{"question", sample.question},
                  {"stage1_output", stage1_output},
                  {"evidence_stage2", evidence2},
                  {"stage2_answer", s2_answer},
                  {"stage2_judge", stage2_judge},
                  {"stage2_new_caption", s2.judge_fields["caption"]},
                  {"new_text_search_query", new_query},
                  {"stage3_text_search_query", new_query},
                  {"stage3_new_evidence", evidence3},
                  {"stage3_answer", s3_answer},
                  {"gold_answer", p.gold()}};
      } else {
        judge3 = {{"question", sample.question},
                  {"stage1_output", stage1_output},
                  {"evidence", evidence2},
                  {"stage2_answer", s2_answer},
                  {"stage2_judge", stage2_judge},
                  {"stage2_new_think", s2.judge_fields["think"]},
                  {"new_text_search_query", new_query},
                  {"stage3_new_evidence", evidence3},
                  {"stage3_answer", s3_answer},
                  {"gold_answer", p.gold()}};
      }
      if (config.judge_mode == JudgeMode::NormalizedExact) {
        s3.verdict = exact_match(s3_answer, sample.gold_answers) ? Verdict::Correct : Verdict::Wrong;
        s3.judge_prompt_id.clear();
      } else {
        auto j3 = judge_stage(p, s3_answer, s3.judge_prompt_id, image, judge3, {}, [](StageOutput&) {});
        s3.verdict = j3.verdict;
        s3.judge_output = j3.call.raw;
        s3.attempts += j3.call.attempts;
        if (!j3.call.parsed) {
          outcome.stages.push_back(std::move(s3));
          return discard("stage 3 judge unusable: " + j3.call.failure);
        }
      }
      outcome.stages.push_back(std::move(s3));
      if (outcome.stages.back().verdict == Verdict::Wrong) {
        outcome.type = config.keep_failed ? TrajectoryType::Failed : TrajectoryType::Discarded;
        outcome.discard_reason = "stage 3 answer judged wrong";
        return outcome;
      }
      outcome.type = image ? TrajectoryType::ITA : TrajectoryType::TTA;
    }
  }

  auto assembly = assemble_agent_trajectory(sample, outcome.type, outcome.stages, config);
  if (!assembly.trajectory) return discard(assembly.failure);
  outcome.difficulty = assign_difficulty(*assembly.trajectory);
  outcome.assembled = std::move(assembly.trajectory);
  return outcome;
}

FactoryRun run_factory(const std::vector<QaSample>& samples, const FactoryBackends& backends,
                       const agent::ToolBinding& tools, const FactoryConfig& config, std::size_t workers)
{
  FactoryRun run;
  std::vector<const QaSample*> train;
  for (const auto& s : samples) {
    if (s.split == Split::Train) {
      train.push_back(&s);
    } else {
      ++run.skipped_non_train;
    }
  }
  run.outcomes.resize(train.size());
  parallel_for(train.size(), workers,
               [&](std::size_t i) { run.outcomes[i] = build_outcome(*train[i], backends, tools, config); });
  return run;
}

std::vector<BranchOutcome> sample_balanced(const std::vector<BranchOutcome>& outcomes, std::size_t n_per_tier,
                                           std::uint64_t seed)
{
  std::map<Difficulty, std::vector<std::size_t>> tiers{
      {Difficulty::Easy, {}}, {Difficulty::Medium, {}}, {Difficulty::Hard, {}}};
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].usable() && outcomes[i].difficulty) tiers[*outcomes[i].difficulty].push_back(i);
  }
  std::vector<std::string> deficient;
  for (const auto& [tier, members] : tiers) {
    if (members.size() < n_per_tier) {
      deficient.push_back(std::string(to_string(tier)) + " (" + std::to_string(members.size()) + " < " +
                          std::to_string(n_per_tier) + ")");
    }
  }
  if (!deficient.empty()) throw UsageError("not enough outcomes in tier: " + text::join(deficient, ", "));

  std::vector<std::size_t> chosen;
  for (auto& [tier, members] : tiers) {
    Rng rng(substream_seed(seed, "balanced/" + std::string(to_string(tier))));
    partial_shuffle(members, n_per_tier, rng);
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_per_tier));
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<BranchOutcome> out;
  out.reserve(chosen.size());
  for (auto i : chosen) out.push_back(outcomes[i]);
  return out;
}

}  // namespace dbagent::factory
