#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dbagent/knowledge_base.hpp"
#include "dbagent/model_gateway.hpp"
#include "dbagent/retrieval.hpp"
#include "dbagent/tag_protocol.hpp"
#include "json.hpp"

namespace dbagent::agent {

enum class ImageEvidence { LeadSection, FullArticle };

struct RolloutConfig
{
  int budget = 4;
  int k_text = retrieval::kDefaultTextTopK;
  int k_image = retrieval::kDefaultImageTopK;
  bool strict_protocol = true;
  bool allow_caption_before_answer = false;
  ImageEvidence image_evidence = ImageEvidence::LeadSection;
  /// Total backend calls per turn before giving up with ProtocolFailure.
  int backend_attempts = 2;
  gateway::GenerationParams generation;
  /// The agent instruction u. Empty means the bundled search-agent prompt.
  std::string system_prompt;

  /// Throws UsageError when a bound is out of range.
  void validate() const;
  const std::string& effective_system_prompt() const;
  /// Deterministic summary recorded with every trajectory.
  nlohmann::json snapshot() const;
};

/// Retrieval handles. Each returns ranked items (turn_index left unset) or
/// throws; the runtime retries a throwing tool once.
struct ToolBinding
{
  std::function<std::vector<protocol::EvidenceItem>(const std::string& query, int k)> text_retriever;
  std::function<std::vector<protocol::EvidenceItem>(const std::string& image_ref, int k)> image_retriever;

  bool resolvable() const { return static_cast<bool>(text_retriever) && static_cast<bool>(image_retriever); }
};

/// Binds exact search over the given indexes. All referenced objects must
/// outlive the binding.
ToolBinding make_tools(const kb::Corpus& corpus, const retrieval::VectorIndex& text_index,
                       const retrieval::Embedder& text_embedder, const retrieval::VectorIndex& image_index,
                       const retrieval::Embedder& image_embedder,
                       ImageEvidence image_evidence = ImageEvidence::LeadSection);

struct AgentState
{
  std::string image_ref;
  std::string question;
  std::vector<protocol::EvidenceBlock> evidence;
  std::vector<protocol::TurnRecord> transcript;
  /// Model context: system u, the question (with the image attached), then
  /// each accepted turn and each evidence block as a user message.
  std::vector<gateway::ChatMessage> messages;
};

/// Text of the first user message.
std::string question_prompt(const std::string& question);

/// Throws UsageError on an empty question or image reference.
AgentState init_state(const std::string& image_ref, const std::string& question, const RolloutConfig& config);

enum class StepKind { Answered, EvidenceAdded, ProtocolError };

struct StepOutcome
{
  StepKind kind = StepKind::ProtocolError;
  std::optional<std::string> answer;
  std::optional<protocol::EvidenceBlock> evidence;
  std::vector<protocol::ProtocolViolation> violations;
  /// The turn carried a caption; it was recorded in the transcript only.
  bool caption_noted = false;
};

/// Applies one parsed turn to state. A turn failing validation in the
/// configured mode yields ProtocolError and leaves state untouched.
StepOutcome step(AgentState& state, const protocol::TurnRecord& turn, const ToolBinding& tools,
                 const RolloutConfig& config);

enum class Termination { Answer, BudgetExhausted, ProtocolFailure };

std::string_view to_string(Termination t);
Termination termination_from_string(std::string_view name);

/// A generation the runtime refused (not part of the trajectory proper).
struct RejectedTurn
{
  int generation_index = 0;
  std::string raw;
  std::vector<protocol::ProtocolViolation> violations;
  std::string error;
};

struct Trajectory
{
  std::string task_id;
  std::string image_ref;
  std::string question;
  std::vector<protocol::TurnRecord> turns;
  std::vector<protocol::EvidenceBlock> observations;
  std::optional<std::string> final_answer;
  Termination terminated_by = Termination::Answer;
  std::vector<RejectedTurn> rejected;
  std::size_t context_chars = 0;
  nlohmann::json config = nlohmann::json::object();

  std::size_t tool_calls() const;
};

void to_json(nlohmann::json& j, const Trajectory& t);
/// Throws std::invalid_argument / json errors on schema problems.
void from_json(const nlohmann::json& j, Trajectory& t);

/// Turns of t interleaved with their observations, each evidence block
/// directly after the tool turn that produced it. Throws DataError when the
/// observations do not line up with the tool turns.
struct TranscriptPiece
{
  bool is_observation = false;
  std::size_t index = 0;
};
std::vector<TranscriptPiece> interleave(const Trajectory& t);

/// Rollout loop: generate, parse, validate, step until an answer, the budget
/// or a second consecutive protocol violation.
Trajectory rollout(const std::string& task_id, const std::string& image_ref, const std::string& question,
                   const gateway::ChatBackend& backend, const ToolBinding& tools, const RolloutConfig& config);

struct AgentTask
{
  std::string task_id;
  std::string image_ref;
  std::string question;
};

/// Independent rollouts on up to `workers` threads; results in task order.
std::vector<Trajectory> rollout_batch(const std::vector<AgentTask>& tasks, const gateway::ChatBackend& backend,
                                      const ToolBinding& tools, const RolloutConfig& config, std::size_t workers);

void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& trajectories);
/// All malformed lines are reported together in one DataError.
std::vector<Trajectory> read_trajectories(const std::filesystem::path& path);

/// Human-readable transcript (turns and evidence in order).
std::string render_transcript(const Trajectory& t);

}  // namespace dbagent::agent
