#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbagent/agent_runtime.hpp"
#include "dbagent/trajectory_factory.hpp"
#include "json.hpp"

namespace dbagent::sft {

inline constexpr std::string_view kEmitterVersion = "sft-emitter/1";
inline constexpr std::size_t kDefaultMaxChars = 49152;

enum class SegmentRole { Instruction, Decision, Observation };

std::string_view to_string(SegmentRole role);
SegmentRole segment_role_from_string(std::string_view name);

struct Segment
{
  SegmentRole role = SegmentRole::Instruction;
  std::string text;
  bool supervise = false;

  bool operator==(const Segment&) const = default;
};

struct SampleMeta
{
  std::string task_id;
  std::string trajectory_type;
  std::optional<std::string> difficulty;

  bool operator==(const SampleMeta&) const = default;
};

struct LinearizedSample
{
  std::vector<Segment> segments;
  SampleMeta meta;

  std::string text() const;
  bool operator==(const LinearizedSample&) const = default;
};

/// u: the system prompt, an image placeholder and the question.
std::string instruction_text(const std::string& system_prompt, const std::string& question);

/// (u, a1, o1, ..., an). Decisions are the raw turns; each observation is its
/// evidence block on its own line ("\n" + rendered + "\n"). Throws DataError
/// when a turn fails strict validation or the evidence does not interleave.
LinearizedSample linearize(const agent::Trajectory& traj, const std::string& system_prompt, SampleMeta meta = {});

/// Rejects DISCARDED / FAILED outcomes with DataError.
LinearizedSample linearize(const factory::BranchOutcome& outcome, const std::string& system_prompt);

void to_json(nlohmann::json& j, const LinearizedSample& s);
void from_json(const nlohmann::json& j, LinearizedSample& s);

/// Structural checks on one sample: flags by role, no evidence markup in a
/// supervised segment, every agent tag inside a supervised segment.
std::vector<std::string> check_sample(const LinearizedSample& s);

struct EmitOptions
{
  std::size_t max_chars = kDefaultMaxChars;
  /// Empty: the bundled search-agent prompt.
  std::string system_prompt;
  /// Input files recorded with their SHA-256 in the manifest.
  std::vector<std::filesystem::path> sources;
  std::size_t workers = 1;
  std::size_t histogram_bin = 1024;
};

struct DatasetManifest
{
  std::size_t total = 0;
  std::map<std::string, std::size_t> per_type;
  std::map<std::string, std::size_t> per_difficulty;
  /// Lower bin edge -> count of emitted samples by character length.
  std::map<std::size_t, std::size_t> length_histogram;
  std::size_t histogram_bin = 1024;
  std::size_t dropped_over_cap = 0;
  /// Outcomes not emitted, by label (DISCARDED, FAILED).
  std::map<std::string, std::size_t> skipped;
  std::size_t max_chars = kDefaultMaxChars;
  std::string emitter_version{kEmitterVersion};
  std::string system_prompt_sha256;
  std::string output_sha256;
  std::vector<std::pair<std::string, std::string>> sources;
};

nlohmann::json to_json(const DatasetManifest& m);

inline std::filesystem::path manifest_path(const std::filesystem::path& dataset)
{
  return std::filesystem::path(dataset.string() + ".manifest.json");
}

/// Writes the JSON Lines dataset and its manifest beside it (both atomically).
DatasetManifest emit_dataset(const std::vector<factory::BranchOutcome>& outcomes, const std::filesystem::path& path,
                             const EmitOptions& options = {});

std::vector<LinearizedSample> read_dataset(const std::filesystem::path& path);

}  // namespace dbagent::sft
