#include "dbagent/agent_runtime.hpp"

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/parallel.hpp"
#include "dbagent/prompts.hpp"
#include "dbagent/text.hpp"

namespace dbagent::agent {

using protocol::ActionKind;
using protocol::EvidenceBlock;
using protocol::EvidenceItem;
using protocol::TurnRecord;

void RolloutConfig::validate() const
{
  if (budget < 1) throw UsageError("budget must be >= 1");
  if (k_text < 1) throw UsageError("k_text must be >= 1");
  if (k_image < 1) throw UsageError("k_image must be >= 1");
  if (backend_attempts < 1) throw UsageError("backend_attempts must be >= 1");
  if (generation.temperature < 0.0) throw UsageError("temperature must be >= 0");
  if (generation.max_new_tokens < 1) throw UsageError("max_new_tokens must be >= 1");
}

const std::string& RolloutConfig::effective_system_prompt() const
{
  static const std::string bundled(prompts::get(prompts::kSearchAgent));
  return system_prompt.empty() ? bundled : system_prompt;
}

nlohmann::json RolloutConfig::snapshot() const
{
  return {{"budget", budget},
          {"k_text", k_text},
          {"k_image", k_image},
          {"strict_protocol", strict_protocol},
          {"allow_caption_before_answer", allow_caption_before_answer},
          {"image_evidence", image_evidence == ImageEvidence::LeadSection ? "lead_section" : "full_article"},
          {"temperature", generation.temperature},
          {"max_new_tokens", generation.max_new_tokens},
          {"system_prompt_sha256", jsonl::sha256_hex(effective_system_prompt())}};
}

ToolBinding make_tools(const kb::Corpus& corpus, const retrieval::VectorIndex& text_index,
                       const retrieval::Embedder& text_embedder, const retrieval::VectorIndex& image_index,
                       const retrieval::Embedder& image_embedder, ImageEvidence image_evidence)
{
  ToolBinding tools;
  tools.text_retriever = [&corpus, &text_index, &text_embedder](const std::string& query, int k) {
    std::vector<EvidenceItem> items;
    for (const auto& hit : retrieval::text_search(text_index, text_embedder, query, k)) {
      const auto* article = corpus.find(hit.article_id);
      const auto* section = article ? corpus.find_section(hit.article_id, *hit.section_id) : nullptr;
      if (!section) throw DataError("index refers to unknown section " + hit.article_id + "/" + *hit.section_id);
      items.push_back({hit.article_id, section->section_id, article->title, section->heading, section->text, hit.score,
                       hit.rank, 0});
    }
    return items;
  };
  tools.image_retriever = [&corpus, &image_index, &image_embedder, image_evidence](const std::string& image_ref,
                                                                                  int k) {
    std::vector<EvidenceItem> items;
    for (const auto& hit : retrieval::image_search(image_index, image_embedder, image_ref, k)) {
      const auto* article = corpus.find(hit.article_id);
      if (!article) throw DataError("index refers to unknown article " + hit.article_id);
      const auto n_sections = image_evidence == ImageEvidence::LeadSection
                                  ? std::min<std::size_t>(1, article->sections.size())
                                  : article->sections.size();
      for (std::size_t s = 0; s < n_sections; ++s) {
        const auto& section = article->sections[s];
        items.push_back({hit.article_id, section.section_id, article->title, section.heading, section.text, hit.score,
                         hit.rank, 0});
      }
    }
    return items;
  };
  return tools;
}

std::string question_prompt(const std::string& question)
{
  return "Question: " + question;
}

AgentState init_state(const std::string& image_ref, const std::string& question, const RolloutConfig& config)
{
  if (text::is_blank(question)) throw UsageError("question must be non-empty");
  if (text::is_blank(image_ref)) throw UsageError("image reference must be non-empty");
  AgentState state;
  state.image_ref = image_ref;
  state.question = question;
  state.messages.push_back({gateway::Role::System, config.effective_system_prompt(), {}});
  state.messages.push_back({gateway::Role::User, question_prompt(question), {image_ref}});
  return state;
}

namespace {

EvidenceBlock run_tool(const std::function<std::vector<EvidenceItem>(const std::string&, int)>& tool,
                       const std::string& argument, int k, int turn_index)
{
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      return protocol::render_evidence(tool(argument, k), turn_index);
    } catch (const std::exception&) {
      // Retried once, then reported to the model as a tool error.
    }
  }
  return protocol::tool_error_evidence(turn_index);
}

protocol::ValidationMode mode_of(const RolloutConfig& config)
{
  return config.strict_protocol ? protocol::ValidationMode::Strict : protocol::ValidationMode::Lenient;
}

std::string reflection_message(const std::vector<protocol::ProtocolViolation>& violations)
{
  std::string out = "Your previous output broke the required format:\n";
  for (const auto& v : violations) out += "- " + std::string(protocol::to_string(v.code)) + ": " + v.message + "\n";
  out += "Reply again: start with <think>...</think> and end with exactly one action tag.";
  return out;
}

}  // namespace

StepOutcome step(AgentState& state, const TurnRecord& turn, const ToolBinding& tools, const RolloutConfig& config)
{
  StepOutcome outcome;
  protocol::ValidationOptions options;
  options.allow_caption_before_answer = config.allow_caption_before_answer;
  outcome.violations = protocol::validate_in_context(turn, state.transcript, mode_of(config), options);
  if (!outcome.violations.empty()) {
    outcome.kind = StepKind::ProtocolError;
    return outcome;
  }
  if (!tools.resolvable()) throw UsageError("tool binding is incomplete");

  state.transcript.push_back(turn);
  state.messages.push_back({gateway::Role::Assistant, turn.raw, {}});
  outcome.caption_noted = turn.caption.has_value();
  const int turn_index = static_cast<int>(state.transcript.size()) - 1;

  switch (turn.action) {
    case ActionKind::Answer:
      outcome.kind = StepKind::Answered;
      outcome.answer = turn.action_payload;
      return outcome;
    case ActionKind::TextSearch:
      outcome.evidence = run_tool(tools.text_retriever, turn.action_payload, config.k_text, turn_index);
      break;
    case ActionKind::ImageSearch:
      // The payload is only a placeholder; the query is always the input image.
      outcome.evidence = run_tool(tools.image_retriever, state.image_ref, config.k_image, turn_index);
      break;
  }
  outcome.kind = StepKind::EvidenceAdded;
  state.evidence.push_back(*outcome.evidence);
  state.messages.push_back({gateway::Role::User, outcome.evidence->rendered, {}});
  return outcome;
}

std::string_view to_string(Termination t)
{
  switch (t) {
    case Termination::Answer: return "Answer";
    case Termination::BudgetExhausted: return "BudgetExhausted";
    case Termination::ProtocolFailure: return "ProtocolFailure";
  }
  return "Answer";
}

Termination termination_from_string(std::string_view name)
{
  if (name == "Answer") return Termination::Answer;
  if (name == "BudgetExhausted") return Termination::BudgetExhausted;
  if (name == "ProtocolFailure") return Termination::ProtocolFailure;
  throw std::invalid_argument("unknown terminated_by '" + std::string(name) + "'");
}

std::size_t Trajectory::tool_calls() const
{
  std::size_t n = 0;
  for (const auto& t : turns) n += t.action != ActionKind::Answer ? 1 : 0;
  return n;
}

void to_json(nlohmann::json& j, const Trajectory& t)
{
  j = nlohmann::json::object();
  j["task_id"] = t.task_id;
  j["image_ref"] = t.image_ref;
  j["question"] = t.question;
  j["turns"] = t.turns;
  j["observations"] = t.observations;
  j["final_answer"] = t.final_answer ? nlohmann::json(*t.final_answer) : nlohmann::json(nullptr);
  j["terminated_by"] = to_string(t.terminated_by);
  auto rejected = nlohmann::json::array();
  for (const auto& r : t.rejected) {
    nlohmann::json jr{{"generation_index", r.generation_index}, {"raw", r.raw}};
    auto vs = nlohmann::json::array();
    for (const auto& v : r.violations) vs.push_back(protocol::to_json(v));
    jr["violations"] = std::move(vs);
    if (!r.error.empty()) jr["error"] = r.error;
    rejected.push_back(std::move(jr));
  }
  j["rejected"] = std::move(rejected);
  j["context_chars"] = t.context_chars;
  j["config"] = t.config;
}

void from_json(const nlohmann::json& j, Trajectory& t)
{
  if (!j.is_object()) throw std::invalid_argument("trajectory must be a JSON object");
  t = Trajectory{};
  t.task_id = j.at("task_id").get<std::string>();
  t.image_ref = j.at("image_ref").get<std::string>();
  t.question = j.at("question").get<std::string>();
  t.turns = j.at("turns").get<std::vector<TurnRecord>>();
  t.observations = j.at("observations").get<std::vector<EvidenceBlock>>();
  if (j.contains("final_answer") && !j["final_answer"].is_null()) t.final_answer = j["final_answer"].get<std::string>();
  t.terminated_by = termination_from_string(j.at("terminated_by").get<std::string>());
  if (j.contains("rejected")) {
    for (const auto& jr : j["rejected"]) {
      RejectedTurn r;
      r.generation_index = jr.value("generation_index", 0);
      r.raw = jr.value("raw", "");
      r.error = jr.value("error", "");
      // Violations are re-derived from the raw text when needed.
      if (!r.raw.empty()) r.violations = protocol::parse_turn(r.raw).violations;
      t.rejected.push_back(std::move(r));
    }
  }
  t.context_chars = j.value("context_chars", std::size_t{0});
  if (j.contains("config")) t.config = j["config"];
}

std::vector<TranscriptPiece> interleave(const Trajectory& t)
{
  std::vector<TranscriptPiece> out;
  std::size_t next_obs = 0;
  for (std::size_t i = 0; i < t.turns.size(); ++i) {
    out.push_back({false, i});
    if (t.turns[i].action == ActionKind::Answer) continue;
    if (next_obs >= t.observations.size()) {
      throw DataError("trajectory '" + t.task_id + "': tool turn " + std::to_string(i) + " has no observation");
    }
    out.push_back({true, next_obs++});
  }
  if (next_obs != t.observations.size()) {
    throw DataError("trajectory '" + t.task_id + "': " + std::to_string(t.observations.size()) +
                    " observations for " + std::to_string(next_obs) + " tool turns");
  }
  return out;
}

Trajectory rollout(const std::string& task_id, const std::string& image_ref, const std::string& question,
                   const gateway::ChatBackend& backend, const ToolBinding& tools, const RolloutConfig& config)
{
  config.validate();
  if (!tools.resolvable()) throw UsageError("tool binding is incomplete");
  auto state = init_state(image_ref, question, config);

  Trajectory traj;
  traj.task_id = task_id;
  traj.image_ref = image_ref;
  traj.question = question;
  traj.config = config.snapshot();

  const auto mode = mode_of(config);
  protocol::ValidationOptions options;
  options.allow_caption_before_answer = config.allow_caption_before_answer;

  int generation_index = 0;
  int actions = 0;
  bool terminated = false;
  // Set while the previous generation was rejected; holds the reprompt.
  std::optional<std::vector<gateway::ChatMessage>> reprompt;

  while (actions < config.budget && !terminated) {
    const auto& context = reprompt ? *reprompt : state.messages;
    std::optional<std::string> raw;
    for (int attempt = 0; attempt < config.backend_attempts && !raw; ++attempt) {
      const int index = generation_index++;
      try {
        raw = backend.complete(context, config.generation, index);
      } catch (const BackendError& e) {
        traj.rejected.push_back({index, "", {}, e.what()});
      }
    }
    if (!raw) {
      traj.terminated_by = Termination::ProtocolFailure;
      terminated = true;
      break;
    }

    auto parsed = protocol::parse_turn(*raw);
    auto violations = parsed.violations;
    if (parsed.turn) violations = protocol::validate_in_context(*parsed.turn, state.transcript, mode, options);
    if (!violations.empty()) {
      traj.rejected.push_back({generation_index - 1, *raw, violations, ""});
      if (reprompt) {
        traj.terminated_by = Termination::ProtocolFailure;
        terminated = true;
        break;
      }
      reprompt = state.messages;
      reprompt->push_back({gateway::Role::Assistant, *raw, {}});
      reprompt->push_back({gateway::Role::User, reflection_message(violations), {}});
      continue;
    }
    reprompt.reset();

    const auto outcome = step(state, *parsed.turn, tools, config);
    ++actions;
    if (outcome.kind == StepKind::Answered) {
      traj.terminated_by = Termination::Answer;
      terminated = true;
    }
  }
  if (!terminated) traj.terminated_by = Termination::BudgetExhausted;

  traj.turns = state.transcript;
  traj.observations = state.evidence;
  traj.final_answer = protocol::extract_final_answer(traj.turns);
  for (const auto& m : state.messages) traj.context_chars += m.content.size();
  return traj;
}

std::vector<Trajectory> rollout_batch(const std::vector<AgentTask>& tasks, const gateway::ChatBackend& backend,
                                      const ToolBinding& tools, const RolloutConfig& config, std::size_t workers)
{
  config.validate();
  std::vector<Trajectory> out(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    out[i] = rollout(tasks[i].task_id, tasks[i].image_ref, tasks[i].question, backend, tools, config);
  });
  return out;
}

void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& trajectories)
{
  std::string out;
  for (const auto& t : trajectories) {
    out += nlohmann::json(t).dump();
    out += '\n';
  }
  jsonl::write_file_atomic(path, out);
}

std::vector<Trajectory> read_trajectories(const std::filesystem::path& path)
{
  std::vector<Trajectory> out;
  std::vector<std::string> problems;
  jsonl::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    try {
      auto t = nlohmann::json::parse(line).get<Trajectory>();
      (void)interleave(t);
      out.push_back(std::move(t));
    } catch (const std::exception& e) {
      problems.push_back(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  });
  if (!problems.empty()) throw DataError("malformed trajectories:\n  " + text::join(problems, "\n  "), path.string());
  return out;
}

std::string render_transcript(const Trajectory& t)
{
  std::string out = "task: " + t.task_id + "\nimage: " + t.image_ref + "\nquestion: " + t.question + "\n";
  for (const auto& piece : interleave(t)) {
    if (piece.is_observation) {
      out += t.observations[piece.index].rendered + "\n";
    } else {
      out += t.turns[piece.index].raw + "\n";
    }
  }
  out += "terminated_by: " + std::string(to_string(t.terminated_by)) + "\n";
  out += "final_answer: " + (t.final_answer ? *t.final_answer : std::string("(none)")) + "\n";
  return out;
}

}  // namespace dbagent::agent
