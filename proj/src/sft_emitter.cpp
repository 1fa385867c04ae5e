#include "dbagent/sft_emitter.hpp"

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/parallel.hpp"
#include "dbagent/text.hpp"

namespace dbagent::sft {

std::string_view to_string(SegmentRole role)
{
  switch (role) {
    case SegmentRole::Instruction: return "instruction";
    case SegmentRole::Decision: return "decision";
    case SegmentRole::Observation: return "observation";
  }
  return "instruction";
}

SegmentRole segment_role_from_string(std::string_view name)
{
  if (name == "instruction") return SegmentRole::Instruction;
  if (name == "decision") return SegmentRole::Decision;
  if (name == "observation") return SegmentRole::Observation;
  throw std::invalid_argument("unknown segment role '" + std::string(name) + "'");
}

std::string LinearizedSample::text() const
{
  std::string out;
  for (const auto& s : segments) out += s.text;
  return out;
}

std::string instruction_text(const std::string& system_prompt, const std::string& question)
{
  return system_prompt + "\n\n<image>\n" + agent::question_prompt(question) + "\n";
}

LinearizedSample linearize(const agent::Trajectory& traj, const std::string& system_prompt, SampleMeta meta)
{
  for (std::size_t i = 0; i < traj.turns.size(); ++i) {
    const auto history = std::span<const protocol::TurnRecord>(traj.turns.data(), i);
    const auto v = protocol::validate_in_context(traj.turns[i], history, protocol::ValidationMode::Strict);
    if (!v.empty()) {
      throw DataError("trajectory '" + traj.task_id + "' turn " + std::to_string(i) + " violates " +
                      std::string(protocol::to_string(v.front().code)));
    }
  }
  if (traj.turns.empty()) throw DataError("trajectory '" + traj.task_id + "' has no turns");
  if (meta.task_id.empty()) meta.task_id = traj.task_id;
  if (meta.trajectory_type.empty()) {
    std::vector<protocol::ActionKind> actions;
    for (const auto& t : traj.turns) actions.push_back(t.action);
    meta.trajectory_type = factory::shape_label(actions);
  }

  LinearizedSample out;
  out.meta = std::move(meta);
  out.segments.push_back({SegmentRole::Instruction, instruction_text(system_prompt, traj.question), false});
  for (const auto& piece : agent::interleave(traj)) {
    if (piece.is_observation) {
      out.segments.push_back({SegmentRole::Observation, "\n" + traj.observations[piece.index].rendered + "\n", false});
    } else {
      out.segments.push_back({SegmentRole::Decision, traj.turns[piece.index].raw, true});
    }
  }
  return out;
}

LinearizedSample linearize(const factory::BranchOutcome& outcome, const std::string& system_prompt)
{
  if (!outcome.usable()) {
    throw DataError("outcome '" + outcome.sample_id + "' is labeled " + std::string(factory::to_string(outcome.type)) +
                    " and cannot be emitted");
  }
  SampleMeta meta{outcome.sample_id, std::string(factory::to_string(outcome.type)), std::nullopt};
  if (outcome.difficulty) meta.difficulty = std::string(factory::to_string(*outcome.difficulty));
  return linearize(*outcome.assembled, system_prompt, std::move(meta));
}

void to_json(nlohmann::json& j, const LinearizedSample& s)
{
  nlohmann::json meta{{"task_id", s.meta.task_id}, {"trajectory_type", s.meta.trajectory_type}};
  meta["difficulty"] = s.meta.difficulty ? nlohmann::json(*s.meta.difficulty) : nlohmann::json(nullptr);
  auto segments = nlohmann::json::array();
  for (const auto& seg : s.segments) {
    segments.push_back({{"role", to_string(seg.role)}, {"text", seg.text}, {"supervise", seg.supervise}});
  }
  j = nlohmann::json{{"meta", std::move(meta)}, {"segments", std::move(segments)}};
}

void from_json(const nlohmann::json& j, LinearizedSample& s)
{
  s = LinearizedSample{};
  const auto& meta = j.at("meta");
  s.meta.task_id = meta.at("task_id").get<std::string>();
  s.meta.trajectory_type = meta.at("trajectory_type").get<std::string>();
  if (meta.contains("difficulty") && !meta["difficulty"].is_null()) {
    s.meta.difficulty = meta["difficulty"].get<std::string>();
  }
  for (const auto& seg : j.at("segments")) {
    s.segments.push_back({segment_role_from_string(seg.at("role").get<std::string>()), seg.at("text").get<std::string>(),
                          seg.at("supervise").get<bool>()});
  }
}

std::vector<std::string> check_sample(const LinearizedSample& s)
{
  std::vector<std::string> problems;
  if (s.segments.empty() || s.segments.front().role != SegmentRole::Instruction) {
    problems.push_back("first segment must be the instruction");
  }
  static const char* kAgentTags[] = {"<think>", "<caption>", "<answer>", "<text_search>", "<image_search>"};
  for (std::size_t i = 0; i < s.segments.size(); ++i) {
    const auto& seg = s.segments[i];
    const auto where = "segment " + std::to_string(i) + ": ";
    if (i > 0 && seg.role == SegmentRole::Instruction) problems.push_back(where + "instruction after the start");
    const bool expected = seg.role == SegmentRole::Decision;
    if (seg.supervise != expected) problems.push_back(where + "wrong supervise flag");
    if (seg.supervise && (seg.text.find("<evidence>") != std::string::npos ||
                          seg.text.find("</evidence>") != std::string::npos)) {
      problems.push_back(where + "evidence markup in a supervised segment");
    }
    // The instruction legitimately names the tags while describing them.
    if (seg.role == SegmentRole::Observation) {
      for (const char* tag : kAgentTags) {
        if (seg.text.find(tag) != std::string::npos) problems.push_back(where + "agent tag " + tag + " in an observation");
      }
    }
  }
  return problems;
}

nlohmann::json to_json(const DatasetManifest& m)
{
  auto histogram = nlohmann::json::array();
  for (const auto& [lo, count] : m.length_histogram) {
    histogram.push_back({{"min_chars", lo}, {"max_chars", lo + m.histogram_bin - 1}, {"count", count}});
  }
  auto sources = nlohmann::json::array();
  for (const auto& [path, hash] : m.sources) sources.push_back({{"path", path}, {"sha256", hash}});
  return {{"emitter_version", m.emitter_version},
          {"total", m.total},
          {"per_type", m.per_type},
          {"per_difficulty", m.per_difficulty},
          {"length_histogram", std::move(histogram)},
          {"dropped_over_cap", m.dropped_over_cap},
          {"skipped", m.skipped},
          {"max_chars", m.max_chars},
          {"system_prompt_sha256", m.system_prompt_sha256},
          {"output_sha256", m.output_sha256},
          {"sources", std::move(sources)}};
}

DatasetManifest emit_dataset(const std::vector<factory::BranchOutcome>& outcomes, const std::filesystem::path& path,
                             const EmitOptions& options)
{
  agent::RolloutConfig rc;
  rc.system_prompt = options.system_prompt;
  const auto& system_prompt = rc.effective_system_prompt();

  DatasetManifest manifest;
  manifest.max_chars = options.max_chars;
  manifest.histogram_bin = std::max<std::size_t>(1, options.histogram_bin);
  manifest.system_prompt_sha256 = jsonl::sha256_hex(system_prompt);
  for (const auto& src : options.sources) {
    manifest.sources.emplace_back(src.string(), jsonl::sha256_hex(jsonl::read_file(src)));
  }

  std::vector<std::optional<LinearizedSample>> linearized(outcomes.size());
  parallel_for(outcomes.size(), options.workers, [&](std::size_t i) {
    if (outcomes[i].usable()) linearized[i] = linearize(outcomes[i], system_prompt);
  });

  std::string out;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!linearized[i]) {
      ++manifest.skipped[std::string(factory::to_string(outcomes[i].type))];
      continue;
    }
    const auto& sample = *linearized[i];
    const auto length = sample.text().size();
    if (length > options.max_chars) {
      ++manifest.dropped_over_cap;
      continue;
    }
    out += nlohmann::json(sample).dump() + "\n";
    ++manifest.total;
    ++manifest.per_type[sample.meta.trajectory_type];
    ++manifest.per_difficulty[sample.meta.difficulty.value_or("none")];
    ++manifest.length_histogram[length / manifest.histogram_bin * manifest.histogram_bin];
  }
  manifest.output_sha256 = jsonl::sha256_hex(out);
  jsonl::write_file_atomic(path, out);
  jsonl::write_file_atomic(manifest_path(path), to_json(manifest).dump(2) + "\n");
  return manifest;
}

std::vector<LinearizedSample> read_dataset(const std::filesystem::path& path)
{
  std::vector<LinearizedSample> out;
  std::vector<std::string> problems;
  jsonl::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      auto s = nlohmann::json::parse(line).get<LinearizedSample>();
      for (const auto& p : check_sample(s)) problems.push_back(where + p);
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      problems.push_back(where + e.what());
    }
  });
  if (!problems.empty()) throw DataError("invalid SFT file:\n  " + text::join(problems, "\n  "), path.string());
  return out;
}

}  // namespace dbagent::sft
