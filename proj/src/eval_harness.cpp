#include "dbagent/eval_harness.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <set>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/rng.hpp"
#include "dbagent/text.hpp"

namespace dbagent::eval {

std::string_view to_string(Metric m)
{
  switch (m) {
    case Metric::Em: return "em";
    case Metric::Raw: return "raw";
    case Metric::Judge: return "judge";
  }
  return "em";
}

Metric metric_from_string(std::string_view name)
{
  if (name == "em") return Metric::Em;
  if (name == "raw") return Metric::Raw;
  if (name == "judge") return Metric::Judge;
  throw UsageError("unknown metric '" + std::string(name) + "' (expected em, raw or judge)");
}

bool score_answer(std::string_view pred, const std::vector<std::string>& gold_answers, Metric metric,
                  const gateway::ChatBackend* judge)
{
  if (text::is_blank(pred)) return false;
  switch (metric) {
    case Metric::Em: return factory::exact_match(pred, gold_answers);
    case Metric::Raw: {
      const auto p = text::trim(pred);
      return std::any_of(gold_answers.begin(), gold_answers.end(),
                         [&](const std::string& g) { return text::trim(g) == p; });
    }
    case Metric::Judge: return factory::judge_answer(pred, gold_answers, factory::JudgeMode::ModelJudge, judge);
  }
  return false;
}

std::optional<bool> hit_at_any_turn(const agent::Trajectory& traj, const std::string& gold_article_id)
{
  if (traj.tool_calls() == 0) return std::nullopt;
  for (const auto& block : traj.observations) {
    for (const auto& item : block.items) {
      if (item.article_id == gold_article_id) return true;
    }
  }
  return false;
}

const std::vector<std::string>& canonical_types()
{
  static const std::vector<std::string> types{"A", "I→A", "T→A", "I→T→A", "T→T→A"};
  return types;
}

void to_json(nlohmann::json& j, const EvalRecord& r)
{
  j = nlohmann::json{{"sample_id", r.sample_id},
                     {"trajectory_type", r.trajectory_type},
                     {"answer_correct", r.answer_correct},
                     {"n_tool_calls", r.n_tool_calls},
                     {"split_tags", r.split_tags},
                     {"scored", r.scored},
                     {"empty_prediction", r.empty_prediction}};
  j["retrieval_hit"] = r.retrieval_hit ? nlohmann::json(*r.retrieval_hit) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EvalRecord& r)
{
  r = EvalRecord{};
  r.sample_id = j.at("sample_id").get<std::string>();
  r.trajectory_type = j.at("trajectory_type").get<std::string>();
  r.answer_correct = j.at("answer_correct").get<bool>();
  r.n_tool_calls = j.at("n_tool_calls").get<int>();
  r.split_tags = j.value("split_tags", std::vector<std::string>{});
  r.scored = j.value("scored", true);
  r.empty_prediction = j.value("empty_prediction", false);
  if (j.contains("retrieval_hit") && !j["retrieval_hit"].is_null()) r.retrieval_hit = j["retrieval_hit"].get<bool>();
  if (r.retrieval_hit.has_value() != (r.n_tool_calls > 0)) {
    throw std::invalid_argument("record '" + r.sample_id + "': retrieval_hit must be null exactly when n_tool_calls is 0");
  }
}

std::vector<EvalRecord> make_records(const std::vector<agent::Trajectory>& trajectories,
                                     const std::vector<factory::QaSample>& samples, Metric metric,
                                     const gateway::ChatBackend* judge)
{
  std::map<std::string, const factory::QaSample*> by_id;
  for (const auto& s : samples) by_id[s.sample_id] = &s;
  std::vector<EvalRecord> out;
  out.reserve(trajectories.size());
  for (const auto& t : trajectories) {
    auto it = by_id.find(t.task_id);
    if (it == by_id.end()) throw DataError("trajectory '" + t.task_id + "' has no matching sample");
    const auto& sample = *it->second;
    EvalRecord r;
    r.sample_id = t.task_id;
    std::vector<protocol::ActionKind> actions;
    for (const auto& turn : t.turns) actions.push_back(turn.action);
    r.trajectory_type = actions.empty() ? "none" : factory::shape_label(actions);
    r.n_tool_calls = static_cast<int>(t.tool_calls());
    r.split_tags = sample.tags;
    const auto pred = t.final_answer.value_or("");
    r.empty_prediction = text::is_blank(pred);
    try {
      r.answer_correct = score_answer(pred, sample.gold_answers, metric, judge);
    } catch (const JudgeParseFailure&) {
      r.scored = false;
    }
    if (r.n_tool_calls > 0) {
      if (!sample.gold_article_id) {
        throw DataError("sample '" + sample.sample_id + "' has no gold_article_id, needed for retrieval hits");
      }
      r.retrieval_hit = hit_at_any_turn(t, *sample.gold_article_id);
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

std::optional<double> percent(std::size_t num, std::size_t den)
{
  if (den == 0) return std::nullopt;
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json opt_json(const std::optional<double>& v)
{
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_from_json(const nlohmann::json& j, const char* key)
{
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

std::string pad(const std::string& s, std::size_t width)
{
  // Width counts code points so arrows line up.
  std::size_t cps = 0;
  for (unsigned char c : s) cps += (c & 0xC0) != 0x80 ? 1 : 0;
  return cps >= width ? s : s + std::string(width - cps, ' ');
}

}  // namespace

std::string pct(const std::optional<double>& v)
{
  if (!v) return "–";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v);
  return buf;
}

Report aggregate(std::vector<EvalRecord> records, nlohmann::json config)
{
  if (records.empty()) throw UsageError("aggregate needs at least one record");
  std::sort(records.begin(), records.end(),
            [](const EvalRecord& a, const EvalRecord& b) { return a.sample_id < b.sample_id; });
  Report r;
  r.config = std::move(config);
  r.n_records = records.size();

  std::size_t scored = 0, correct = 0, with_tools = 0, hits = 0;
  std::map<std::string, std::array<std::size_t, 5>> by_type;  // count, scored, correct, tool, hit
  std::map<std::string, std::array<std::size_t, 2>> by_tag;    // scored, correct
  std::map<std::string, std::size_t> tag_count;
  for (const auto& rec : records) {
    auto& t = by_type[rec.trajectory_type];
    ++t[0];
    if (rec.empty_prediction) ++r.n_empty_predictions;
    if (rec.scored) {
      ++scored;
      ++t[1];
      if (rec.answer_correct) {
        ++correct;
        ++t[2];
      }
    } else {
      ++r.n_unscored;
    }
    if (rec.retrieval_hit) {
      ++with_tools;
      ++t[3];
      if (*rec.retrieval_hit) {
        ++hits;
        ++t[4];
      }
      if (rec.scored) ++r.contingency.counts[*rec.retrieval_hit ? 0 : 1][rec.answer_correct ? 0 : 1];
    }
    for (const auto& tag : std::set<std::string>(rec.split_tags.begin(), rec.split_tags.end())) {
      ++tag_count[tag];
      if (rec.scored) {
        ++by_tag[tag][0];
        if (rec.answer_correct) ++by_tag[tag][1];
      }
    }
  }
  r.overall_accuracy = percent(correct, scored);
  r.overall_recall = percent(hits, with_tools);

  std::vector<std::string> order = canonical_types();
  for (const auto& [type, _] : by_type) {
    if (std::find(order.begin(), order.end(), type) == order.end()) order.push_back(type);
  }
  for (const auto& type : order) {
    const auto it = by_type.find(type);
    const std::array<std::size_t, 5> t = it == by_type.end() ? std::array<std::size_t, 5>{} : it->second;
    TypeRow row;
    row.type = type;
    row.count = t[0];
    row.proportion = *percent(t[0], records.size());
    row.recall = percent(t[4], t[3]);
    row.accuracy = percent(t[2], t[1]);
    r.types.push_back(std::move(row));
  }
  for (const auto& [tag, n] : tag_count) {
    const auto& t = by_tag[tag];
    r.per_split.push_back({tag, n, percent(t[1], t[0])});
  }
  for (int row = 0; row < 2; ++row) {
    const auto total = r.contingency.counts[row][0] + r.contingency.counts[row][1];
    for (int col = 0; col < 2; ++col) r.contingency.row_pct[row][col] = percent(r.contingency.counts[row][col], total);
  }
  r.records = std::move(records);
  return r;
}

std::string render_text(const Report& r)
{
  std::string out;
  out += "records: " + std::to_string(r.n_records) + "  unscored: " + std::to_string(r.n_unscored) +
         "  empty predictions: " + std::to_string(r.n_empty_predictions) + "\n";
  out += "overall accuracy: " + pct(r.overall_accuracy) + "\n";
  out += "overall retrieval recall: " + pct(r.overall_recall) + "\n";
  if (!r.per_split.empty()) {
    out += "\n" + pad("split", 14) + pad("count", 8) + "accuracy\n";
    for (const auto& s : r.per_split) out += pad(s.tag, 14) + pad(std::to_string(s.count), 8) + pct(s.accuracy) + "\n";
  }
  out += "\n" + pad("type", 10) + pad("count", 8) + pad("prop(%)", 10) + pad("recall(%)", 11) + "acc(%)\n";
  for (const auto& t : r.types) {
    out += pad(t.type, 10) + pad(std::to_string(t.count), 8) + pad(pct(t.proportion), 10) + pad(pct(t.recall), 11) +
           pct(t.accuracy) + "\n";
  }
  const auto& c = r.contingency;
  out += "\n" + pad("retrieval", 12) + pad("answer ok(%)", 14) + "answer wrong(%)\n";
  out += pad("correct", 12) + pad(pct(c.row_pct[0][0]), 14) + pct(c.row_pct[0][1]) + "\n";
  out += pad("incorrect", 12) + pad(pct(c.row_pct[1][0]), 14) + pct(c.row_pct[1][1]) + "\n";
  return out;
}

std::string render_csv(const Report& r)
{
  std::string out = "section,key,count,proportion,recall,accuracy\n";
  out += "overall,all," + std::to_string(r.n_records) + ",100.0," + pct(r.overall_recall) + "," +
         pct(r.overall_accuracy) + "\n";
  for (const auto& s : r.per_split) {
    out += "split," + s.tag + "," + std::to_string(s.count) + ",,," + pct(s.accuracy) + "\n";
  }
  for (const auto& t : r.types) {
    out += "type," + t.type + "," + std::to_string(t.count) + "," + pct(t.proportion) + "," + pct(t.recall) + "," +
           pct(t.accuracy) + "\n";
  }
  const char* rows[] = {"retrieval_correct", "retrieval_incorrect"};
  for (int row = 0; row < 2; ++row) {
    const auto& c = r.contingency;
    out += "contingency," + std::string(rows[row]) + "," + std::to_string(c.counts[row][0] + c.counts[row][1]) +
           ",,," + pct(c.row_pct[row][0]) + "\n";
  }
  return out;
}

nlohmann::json to_json(const Report& r)
{
  nlohmann::json j;
  j["n_records"] = r.n_records;
  j["n_unscored"] = r.n_unscored;
  j["n_empty_predictions"] = r.n_empty_predictions;
  j["overall_accuracy"] = opt_json(r.overall_accuracy);
  j["overall_recall"] = opt_json(r.overall_recall);
  auto splits = nlohmann::json::array();
  for (const auto& s : r.per_split) splits.push_back({{"tag", s.tag}, {"count", s.count}, {"accuracy", opt_json(s.accuracy)}});
  j["per_split"] = std::move(splits);
  auto types = nlohmann::json::array();
  for (const auto& t : r.types) {
    types.push_back({{"type", t.type},
                     {"count", t.count},
                     {"proportion", t.proportion},
                     {"recall", opt_json(t.recall)},
                     {"accuracy", opt_json(t.accuracy)}});
  }
  j["types"] = std::move(types);
  const auto& c = r.contingency;
  j["contingency"] = {
      {"retrieval_correct",
       {{"answer_correct", c.counts[0][0]}, {"answer_wrong", c.counts[0][1]},
        {"answer_correct_pct", opt_json(c.row_pct[0][0])}, {"answer_wrong_pct", opt_json(c.row_pct[0][1])}}},
      {"retrieval_incorrect",
       {{"answer_correct", c.counts[1][0]}, {"answer_wrong", c.counts[1][1]},
        {"answer_correct_pct", opt_json(c.row_pct[1][0])}, {"answer_wrong_pct", opt_json(c.row_pct[1][1])}}}};
  j["config"] = r.config;
  j["records"] = r.records;
  return j;
}

Report report_from_json(const nlohmann::json& j)
{
  auto records = j.at("records").get<std::vector<EvalRecord>>();
  return aggregate(std::move(records), j.value("config", nlohmann::json::object()));
}

void write_report(const Report& r, const std::filesystem::path& stem)
{
  const auto base = stem.string();
  jsonl::write_file_atomic(base + ".txt", render_text(r));
  jsonl::write_file_atomic(base + ".csv", render_csv(r));
  jsonl::write_file_atomic(base + ".json", to_json(r).dump(2) + "\n");
}

Report evaluate(const std::vector<factory::QaSample>& samples, const agent::ToolBinding& tools, const EvalSetup& setup,
                std::vector<agent::Trajectory>* trajectories)
{
  if (!setup.backend) throw UsageError("evaluation needs a chat backend");
  std::vector<agent::AgentTask> tasks;
  tasks.reserve(samples.size());
  for (const auto& s : samples) tasks.push_back({s.sample_id, s.image_ref, s.question});
  auto trajs = agent::rollout_batch(tasks, *setup.backend, tools, setup.rollout, setup.workers);
  auto config = setup.rollout.snapshot();
  config["metric"] = to_string(setup.metric);
  auto report = aggregate(make_records(trajs, samples, setup.metric, setup.judge), std::move(config));
  if (trajectories) *trajectories = std::move(trajs);
  return report;
}

Grid run_topk_grid(const std::vector<factory::QaSample>& samples, const agent::ToolBinding& tools,
                   const EvalSetup& setup, const std::vector<int>& text_ks, const std::vector<int>& image_ks)
{
  if (text_ks.empty() || image_ks.empty()) throw UsageError("top-k grid needs non-empty k lists");
  Grid grid;
  grid.text_ks = text_ks;
  grid.image_ks = image_ks;
  for (int kt : text_ks) {
    for (int ki : image_ks) {
      GridCell cell{kt, ki, std::nullopt, {}};
      try {
        auto cell_setup = setup;
        cell_setup.rollout.k_text = kt;
        cell_setup.rollout.k_image = ki;
        cell.report = evaluate(samples, tools, cell_setup);
      } catch (const Error& e) {
        cell.error = e.what();
      }
      grid.cells.push_back(std::move(cell));
    }
  }
  return grid;
}

std::string render_grid(const Grid& grid)
{
  std::string out = pad("", 8) + "image k\n" + pad("text k", 8);
  for (int ki : grid.image_ks) out += pad(std::to_string(ki), 8);
  out += "\n";
  for (std::size_t ti = 0; ti < grid.text_ks.size(); ++ti) {
    out += pad(std::to_string(grid.text_ks[ti]), 8);
    for (std::size_t ii = 0; ii < grid.image_ks.size(); ++ii) {
      const auto& cell = grid.at(ti, ii);
      out += pad(cell.report ? pct(cell.report->overall_accuracy) : "error", 8);
    }
    out += "\n";
  }
  return out;
}

std::string render_grid_csv(const Grid& grid)
{
  std::string out = "text_k";
  for (int ki : grid.image_ks) out += ",image_k=" + std::to_string(ki);
  out += "\n";
  for (std::size_t ti = 0; ti < grid.text_ks.size(); ++ti) {
    out += std::to_string(grid.text_ks[ti]);
    for (std::size_t ii = 0; ii < grid.image_ks.size(); ++ii) {
      const auto& cell = grid.at(ti, ii);
      out += "," + (cell.report ? pct(cell.report->overall_accuracy) : std::string("error"));
    }
    out += "\n";
  }
  return out;
}

std::vector<ScalePoint> run_kb_scale(const std::vector<factory::QaSample>& samples, const kb::Corpus& corpus,
                                     const std::vector<std::size_t>& sizes, std::uint64_t seed,
                                     const retrieval::Embedder& text_embedder,
                                     const retrieval::Embedder& image_embedder, const EvalSetup& setup)
{
  if (sizes.empty()) throw UsageError("kb-scale needs at least one size");
  std::set<std::string> gold;
  for (const auto& s : samples) {
    if (s.gold_article_id) gold.insert(*s.gold_article_id);
  }
  const auto subsample_seed = substream_seed(seed, "kb-scale/subsample");
  std::vector<ScalePoint> out;
  for (auto size : sizes) {
    ScalePoint point{size, std::nullopt, {}};
    try {
      const auto sub = kb::subsample_corpus(corpus, size, subsample_seed, gold);
      const auto text_index = retrieval::build_text_index(sub, text_embedder);
      const auto image_index = retrieval::build_image_index(sub, image_embedder);
      const auto tools = agent::make_tools(sub, text_index, text_embedder, image_index, image_embedder,
                                           setup.rollout.image_evidence);
      auto report = evaluate(samples, tools, setup);
      report.config["kb_size"] = size;
      report.config["seed"] = seed;
      point.report = std::move(report);
    } catch (const Error& e) {
      point.error = e.what();
    }
    out.push_back(std::move(point));
  }
  return out;
}

std::string render_scale(const std::vector<ScalePoint>& points)
{
  std::string out = pad("kb size", 10) + pad("acc(%)", 10) + "recall(%)\n";
  for (const auto& p : points) {
    out += pad(std::to_string(p.size), 10);
    if (p.report) {
      out += pad(pct(p.report->overall_accuracy), 10) + pct(p.report->overall_recall) + "\n";
    } else {
      out += "error: " + p.error + "\n";
    }
  }
  return out;
}

std::string render_scale_csv(const std::vector<ScalePoint>& points)
{
  std::string out = "kb_size,accuracy,recall\n";
  for (const auto& p : points) {
    out += std::to_string(p.size) + ",";
    out += p.report ? pct(p.report->overall_accuracy) + "," + pct(p.report->overall_recall) : std::string("error,error");
    out += "\n";
  }
  return out;
}

}  // namespace dbagent::eval
