#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbagent/agent_runtime.hpp"
#include "dbagent/trajectory_factory.hpp"
#include "json.hpp"

namespace dbagent::eval {

/// em: normalized exact membership. raw: trimmed, case-sensitive equality.
/// judge: model judge (stands in for learned answer matching).
enum class Metric { Em, Raw, Judge };

std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view name);

/// An empty prediction is simply wrong. Judge replies without a verdict
/// marker throw JudgeParseFailure.
bool score_answer(std::string_view pred, const std::vector<std::string>& gold_answers, Metric metric,
                  const gateway::ChatBackend* judge = nullptr);

/// nullopt when the trajectory made no tool call.
std::optional<bool> hit_at_any_turn(const agent::Trajectory& traj, const std::string& gold_article_id);

/// Canonical type rows, in report order.
const std::vector<std::string>& canonical_types();

struct EvalRecord
{
  std::string sample_id;
  std::string trajectory_type;
  bool answer_correct = false;
  std::optional<bool> retrieval_hit;
  int n_tool_calls = 0;
  std::vector<std::string> split_tags;
  /// False when the judge could not be read; excluded from accuracy.
  bool scored = true;
  bool empty_prediction = false;

  bool operator==(const EvalRecord&) const = default;
};

void to_json(nlohmann::json& j, const EvalRecord& r);
void from_json(const nlohmann::json& j, EvalRecord& r);

/// Joins trajectories with their samples by id. Throws DataError for a
/// trajectory without a sample, or a tool-using one whose sample lacks
/// gold_article_id.
std::vector<EvalRecord> make_records(const std::vector<agent::Trajectory>& trajectories,
                                     const std::vector<factory::QaSample>& samples, Metric metric,
                                     const gateway::ChatBackend* judge = nullptr);

struct TypeRow
{
  std::string type;
  std::size_t count = 0;
  double proportion = 0.0;
  std::optional<double> recall;
  std::optional<double> accuracy;
};

struct SplitRow
{
  std::string tag;
  std::size_t count = 0;
  std::optional<double> accuracy;
};

/// Rows: retrieval correct / incorrect. Columns: answer correct / wrong.
struct Contingency
{
  std::size_t counts[2][2] = {{0, 0}, {0, 0}};
  std::optional<double> row_pct[2][2];
};

struct Report
{
  std::size_t n_records = 0;
  std::size_t n_unscored = 0;
  std::size_t n_empty_predictions = 0;
  std::optional<double> overall_accuracy;
  std::optional<double> overall_recall;
  std::vector<SplitRow> per_split;
  std::vector<TypeRow> types;
  Contingency contingency;
  nlohmann::json config = nlohmann::json::object();
  /// Sorted by sample_id.
  std::vector<EvalRecord> records;
};

/// Percentages in [0, 100]. Accuracy counts scored records; recall counts
/// records with at least one tool call. Throws UsageError on no records.
Report aggregate(std::vector<EvalRecord> records, nlohmann::json config = nlohmann::json::object());

std::string render_text(const Report& r);
std::string render_csv(const Report& r);
nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);

/// Writes <stem>.txt, <stem>.csv and <stem>.json.
void write_report(const Report& r, const std::filesystem::path& stem);

/// "%.1f", or "–" when absent.
std::string pct(const std::optional<double>& v);

struct EvalSetup
{
  const gateway::ChatBackend* backend = nullptr;
  agent::RolloutConfig rollout;
  Metric metric = Metric::Em;
  const gateway::ChatBackend* judge = nullptr;
  std::size_t workers = 1;
};

/// Rolls out every sample and aggregates.
Report evaluate(const std::vector<factory::QaSample>& samples, const agent::ToolBinding& tools, const EvalSetup& setup,
                std::vector<agent::Trajectory>* trajectories = nullptr);

struct GridCell
{
  int k_text = 0;
  int k_image = 0;
  std::optional<Report> report;
  std::string error;
};

struct Grid
{
  std::vector<int> text_ks;
  std::vector<int> image_ks;
  /// Row-major: text k outer, image k inner.
  std::vector<GridCell> cells;

  const GridCell& at(std::size_t text_i, std::size_t image_i) const { return cells[text_i * image_ks.size() + image_i]; }
};

/// One evaluation per (k_text, k_image); a failing cell is recorded and the
/// grid continues.
Grid run_topk_grid(const std::vector<factory::QaSample>& samples, const agent::ToolBinding& tools,
                   const EvalSetup& setup, const std::vector<int>& text_ks, const std::vector<int>& image_ks);

/// Text-k rows by image-k columns of overall accuracy.
std::string render_grid(const Grid& grid);
std::string render_grid_csv(const Grid& grid);

struct ScalePoint
{
  std::size_t size = 0;
  std::optional<Report> report;
  std::string error;
};

/// Subsamples the corpus to each size (same seed, gold articles pinned),
/// rebuilds both indexes with the given embedders and evaluates.
std::vector<ScalePoint> run_kb_scale(const std::vector<factory::QaSample>& samples, const kb::Corpus& corpus,
                                     const std::vector<std::size_t>& sizes, std::uint64_t seed,
                                     const retrieval::Embedder& text_embedder,
                                     const retrieval::Embedder& image_embedder, const EvalSetup& setup);

std::string render_scale(const std::vector<ScalePoint>& points);
std::string render_scale_csv(const std::vector<ScalePoint>& points);

}  // namespace dbagent::eval
