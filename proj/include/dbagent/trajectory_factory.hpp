#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbagent/agent_runtime.hpp"
#include "dbagent/model_gateway.hpp"
#include "json.hpp"

namespace dbagent::factory {

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

struct QaSample
{
  std::string sample_id;
  std::string image_ref;
  std::string question;
  std::vector<std::string> gold_answers;
  std::optional<std::string> gold_entity;
  std::optional<std::string> gold_article_id;
  Split split = Split::Train;
  /// Free-form evaluation tags such as unseen_q / unseen_e.
  std::vector<std::string> tags;

  bool operator==(const QaSample&) const = default;
};

/// "answers" may be an "a|b" string or a list of strings.
QaSample sample_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QaSample& sample);
/// Collects every malformed line (and duplicate sample_id) into one DataError.
std::vector<QaSample> load_dataset(const std::filesystem::path& path);
std::vector<std::string> lint_dataset(const std::filesystem::path& path);
void save_dataset(const std::vector<QaSample>& samples, const std::filesystem::path& path);

enum class JudgeMode { NormalizedExact, ModelJudge };

std::string_view to_string(JudgeMode mode);
JudgeMode judge_mode_from_string(std::string_view name);

/// Membership of the normalized prediction in the normalized gold set.
bool exact_match(std::string_view pred, const std::vector<std::string>& gold_answers);

/// model_judge sends the pair to `judge` with the final-stage judge prompt
/// and reads its [correct]/[wrong] marker; a reply with neither throws
/// JudgeParseFailure. Throws UsageError on an empty prediction, or when
/// model_judge is requested without a backend.
bool judge_answer(std::string_view pred, const std::vector<std::string>& gold_answers, JudgeMode mode,
                  const gateway::ChatBackend* judge = nullptr);

/// Entity routing rule: normalized equality or containment either way.
bool entity_matches(std::string_view predicted, std::string_view gold);

enum class Verdict { Correct, Wrong, NotApplicable };

std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view name);

/// [correct] / [wrong] prefix of a judge reply, if present.
std::optional<Verdict> read_verdict_marker(std::string_view reply);

struct StageOutput
{
  std::optional<Verdict> marker;
  std::map<std::string, std::string> fields;
  std::vector<std::string> problems;

  bool ok() const { return problems.empty(); }
};

/// Reads an optional verdict marker followed by `<tag>...</tag>` blocks.
/// Unknown or repeated tags, unclosed tags and stray text are problems.
StageOutput parse_stage_output(std::string_view text, const std::vector<std::string>& allowed_tags,
                               bool expect_marker);

enum class StageKind { S1, S2Image, S2Text, S3 };

std::string_view to_string(StageKind stage);
StageKind stage_from_string(std::string_view name);

struct StageRecord
{
  StageKind stage = StageKind::S1;
  std::string prompt_id;
  std::string model_output;
  /// Tags from the answering prompt (think / entity / answer).
  std::map<std::string, std::string> parsed_fields;
  std::string judge_prompt_id;
  std::string judge_output;
  /// Tags from the judge prompt (choose / caption / think / text_search / image_search).
  std::map<std::string, std::string> judge_fields;
  Verdict verdict = Verdict::NotApplicable;
  /// Query this stage retrieved with ("image_path" for image retrieval).
  std::optional<std::string> query;
  std::optional<protocol::EvidenceBlock> evidence;
  int attempts = 0;
};

enum class TrajectoryType { A, IA, TA, ITA, TTA, Discarded, Failed };

/// "A", "I→A", "T→A", "I→T→A", "T→T→A", "DISCARDED", "FAILED". Parsing
/// also accepts "->" for the arrow.
std::string_view to_string(TrajectoryType type);
TrajectoryType trajectory_type_from_string(std::string_view label);

/// Shape label of an action sequence: I for image search, T for text search,
/// A for answer, joined by arrows.
std::string shape_label(const std::vector<protocol::ActionKind>& actions);

/// Re-derives the type from stored stage verdicts.
TrajectoryType type_from_stages(const std::vector<StageRecord>& stages, bool keep_failed);

enum class Difficulty { Easy, Medium, Hard };

inline constexpr std::string_view kDifficultyRuleVersion = "depth-v1";

std::string_view to_string(Difficulty d);
Difficulty difficulty_from_string(std::string_view name);

/// easy: no tool action, medium: one, hard: two or more.
Difficulty assign_difficulty(const agent::Trajectory& traj);

struct BranchOutcome
{
  std::string sample_id;
  TrajectoryType type = TrajectoryType::Discarded;
  std::vector<StageRecord> stages;
  std::optional<agent::Trajectory> assembled;
  std::optional<Difficulty> difficulty;
  std::string discard_reason;

  bool usable() const { return assembled.has_value() && type != TrajectoryType::Discarded && type != TrajectoryType::Failed; }
};

void to_json(nlohmann::json& j, const BranchOutcome& outcome);
void from_json(const nlohmann::json& j, BranchOutcome& outcome);
void write_outcomes(const std::filesystem::path& path, const std::vector<BranchOutcome>& outcomes);
std::vector<BranchOutcome> read_outcomes(const std::filesystem::path& path);

struct FactoryConfig
{
  JudgeMode judge_mode = JudgeMode::NormalizedExact;
  int k_text = retrieval::kDefaultTextTopK;
  int k_image = retrieval::kDefaultImageTopK;
  /// Keep stage-3 failures labeled FAILED instead of DISCARDED.
  bool keep_failed = false;
  /// Backend calls allowed per stage step (one retry by default).
  int stage_attempts = 2;
  agent::ImageEvidence image_evidence = agent::ImageEvidence::LeadSection;
  gateway::GenerationParams generation;
  /// System prompt of assembled trajectories (empty: bundled agent prompt).
  std::string agent_system_prompt;

  nlohmann::json snapshot() const;
};

struct FactoryBackends
{
  const gateway::ChatBackend* answer = nullptr;
  /// Writes routing and query rewrites, and decides verdicts in model_judge
  /// mode. Defaults to the answering backend.
  const gateway::ChatBackend* judge = nullptr;
};

/// Runs stages 1-3 for one training sample and assembles the result.
BranchOutcome build_outcome(const QaSample& sample, const FactoryBackends& backends, const agent::ToolBinding& tools,
                            const FactoryConfig& config);

/// Maps stage records onto an agent-protocol trajectory. Returns the reason
/// when the result would not pass strict validation or leaks a gold answer.
struct Assembly
{
  std::optional<agent::Trajectory> trajectory;
  std::string failure;
};
Assembly assemble_agent_trajectory(const QaSample& sample, TrajectoryType type, const std::vector<StageRecord>& stages,
                                   const FactoryConfig& config);

struct FactoryRun
{
  std::vector<BranchOutcome> outcomes;
  std::size_t skipped_non_train = 0;
};

/// Only split=train samples are processed; results keep input order.
FactoryRun run_factory(const std::vector<QaSample>& samples, const FactoryBackends& backends,
                       const agent::ToolBinding& tools, const FactoryConfig& config, std::size_t workers);

/// n_per_tier usable outcomes from each difficulty tier, drawn without
/// replacement under seed, returned in input order. Throws UsageError naming
/// every tier with fewer than n_per_tier members.
std::vector<BranchOutcome> sample_balanced(const std::vector<BranchOutcome>& outcomes, std::size_t n_per_tier,
                                           std::uint64_t seed);

/// First line of every stage user message: "[stage] <prompt id>".
std::string stage_header(std::string_view prompt_id);

}  // namespace dbagent::factory
