#include <gtest/gtest.h>

#include <random>

#include "dbagent/error.hpp"
#include "dbagent/eval_harness.hpp"
#include "synth.hpp"

using namespace dbagent;
using namespace dbagent::eval;
namespace dt = dbagent::testing;

namespace {

struct OracleRow
{
  std::size_t count = 0, correct = 0, tool = 0, hits = 0;
};

// Independent tally straight from the records.
std::map<std::string, OracleRow> tally(const std::vector<EvalRecord>& records)
{
  std::map<std::string, OracleRow> rows;
  for (const auto& r : records) {
    auto& row = rows[r.trajectory_type];
    ++row.count;
    row.correct += r.answer_correct;
    if (r.n_tool_calls > 0) {
      ++row.tool;
      row.hits += r.retrieval_hit.value_or(false);
    }
  }
  return rows;
}

agent::Trajectory traj_with(const std::string& id, std::vector<std::vector<std::string>> evidence_articles,
                            const std::string& answer)
{
  agent::Trajectory t;
  t.task_id = id;
  t.question = "q";
  t.image_ref = "img";
  int turn = 0;
  for (const auto& block : evidence_articles) {
    t.turns.push_back(protocol::make_turn("t", std::nullopt, protocol::ActionKind::TextSearch, "query"));
    std::vector<protocol::EvidenceItem> items;
    for (const auto& a : block) items.push_back({a, "s0", a, "H", "text", 0.5, 1, turn});
    t.observations.push_back(protocol::render_evidence(items, turn++));
  }
  if (!answer.empty()) t.turns.push_back(protocol::make_turn("t", std::nullopt, protocol::ActionKind::Answer, answer));
  t.final_answer = protocol::extract_final_answer(t.turns);
  return t;
}

}  // namespace

TEST(Eval, TypeRowsMatchIndependentOracle)
{
  const auto records = dt::type_breakdown_fixture();
  const auto oracle = tally(records);
  const auto report = aggregate(records);
  ASSERT_EQ(report.types.size(), canonical_types().size());
  for (const auto& row : report.types) {
    const auto& o = oracle.at(row.type);
    EXPECT_EQ(row.count, o.count);
    EXPECT_NEAR(row.proportion, 100.0 * o.count / records.size(), 1e-9);
    EXPECT_NEAR(*row.accuracy, 100.0 * o.correct / o.count, 1e-9);
    if (o.tool == 0) {
      EXPECT_FALSE(row.recall);
    } else {
      EXPECT_NEAR(*row.recall, 100.0 * o.hits / o.tool, 1e-9);
    }
  }
}

TEST(Eval, TypeBreakdownFixtureRoundsToTargetRows)
{
  const auto report = aggregate(dt::type_breakdown_fixture());
  std::map<std::string, std::array<std::string, 3>> want{{"A", {"5.4", "–", "69.7"}},
                                                          {"I→A", {"25.7", "65.9", "56.0"}},
                                                          {"T→A", {"36.1", "81.6", "49.5"}},
                                                          {"I→T→A", {"15.7", "55.2", "43.5"}},
                                                          {"T→T→A", {"17.1", "70.3", "41.1"}}};
  for (const auto& row : report.types) {
    EXPECT_EQ(pct(row.proportion), want[row.type][0]) << row.type;
    EXPECT_EQ(pct(row.recall), want[row.type][1]) << row.type;
    EXPECT_EQ(pct(row.accuracy), want[row.type][2]) << row.type;
  }
}

TEST(Eval, ContingencyRowPercentages)
{
  const auto c = aggregate(dt::contingency_fixture()).contingency;
  EXPECT_EQ(c.counts[0][0], 704u);
  EXPECT_EQ(c.counts[0][1], 296u);
  EXPECT_EQ(c.counts[1][0], 114u);
  EXPECT_EQ(c.counts[1][1], 886u);
  EXPECT_EQ(pct(c.row_pct[0][0]), "70.4");
  EXPECT_EQ(pct(c.row_pct[0][1]), "29.6");
  EXPECT_EQ(pct(c.row_pct[1][0]), "11.4");
  EXPECT_EQ(pct(c.row_pct[1][1]), "88.6");
  for (int r = 0; r < 2; ++r) EXPECT_NEAR(*c.row_pct[r][0] + *c.row_pct[r][1], 100.0, 1e-9);
}

TEST(Eval, AggregateInvariantsOnRandomRecords)
{
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EvalRecord> recs;
    for (int i = 0, n = 1 + static_cast<int>(rng() % 200); i < n; ++i) {
      EvalRecord r;
      r.sample_id = "s" + std::to_string(i);
      r.trajectory_type = canonical_types()[rng() % canonical_types().size()];
      r.n_tool_calls = r.trajectory_type == "A" ? 0 : 1 + static_cast<int>(rng() % 2);
      if (r.n_tool_calls) r.retrieval_hit = rng() % 2;
      r.answer_correct = rng() % 2;
      r.scored = rng() % 10 != 0;
      recs.push_back(r);
    }
    const auto rep = aggregate(recs);
    double share = 0;
    std::size_t total = 0;
    for (const auto& row : rep.types) {
      share += row.proportion;
      total += row.count;
      if (row.accuracy) EXPECT_TRUE(*row.accuracy >= 0 && *row.accuracy <= 100);
    }
    EXPECT_EQ(total, recs.size());
    EXPECT_NEAR(share, 100.0, 1e-9);
    std::size_t in_table = 0;
    for (auto& row : rep.contingency.counts)
      for (auto n : row) in_table += n;
    std::size_t tool = 0;
    for (const auto& r : recs) tool += r.n_tool_calls > 0 && r.scored;
    EXPECT_EQ(in_table, tool);
    EXPECT_TRUE(std::is_sorted(rep.records.begin(), rep.records.end(),
                               [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; }));
  }
}

TEST(Eval, ReportJsonRoundTrip)
{
  auto rep = aggregate(dt::type_breakdown_fixture(), {{"seed", 7}});
  const auto back = report_from_json(to_json(rep));
  EXPECT_EQ(to_json(back), to_json(rep));
  EXPECT_EQ(render_text(back), render_text(rep));
  EXPECT_EQ(render_csv(back), render_csv(rep));
}

TEST(Eval, WriteReportCreatesAllThreeFiles)
{
  dt::TempDir dir("report");
  const auto rep = aggregate(dt::contingency_fixture());
  write_report(rep, dir / "r");
  EXPECT_EQ(dt::slurp(dir / "r.txt"), render_text(rep));
  EXPECT_EQ(dt::slurp(dir / "r.csv"), render_csv(rep));
  EXPECT_EQ(nlohmann::json::parse(dt::slurp(dir / "r.json")), to_json(rep));
}

TEST(Eval, EmptyAggregateIsAUsageError)
{
  EXPECT_THROW(aggregate({}), UsageError);
}

TEST(Eval, PctFormatting)
{
  EXPECT_EQ(pct(std::nullopt), "–");
  EXPECT_EQ(pct(0.0), "0.0");
  EXPECT_EQ(pct(100.0), "100.0");
  EXPECT_EQ(pct(12.25), "12.2");
  EXPECT_EQ(pct(12.35001), "12.4");
}

TEST(Eval, ScoreAnswerMetrics)
{
  EXPECT_TRUE(score_answer("the Eiffel Tower.", {"The Eiffel Tower"}, Metric::Em));
  EXPECT_FALSE(score_answer("the Eiffel Tower", {"The Eiffel Tower"}, Metric::Raw));
  EXPECT_TRUE(score_answer(" The Eiffel Tower ", {"The Eiffel Tower"}, Metric::Raw));
  EXPECT_FALSE(score_answer("", {"x"}, Metric::Em));
  const auto yes = dt::backend_from({{{"match", {{"pattern", "."}}}, {"output", "[correct]"}}});
  const auto junk = dt::backend_from({{{"match", {{"pattern", "."}}}, {"output", "hmm"}}});
  EXPECT_TRUE(score_answer("tower in paris", {"Eiffel Tower"}, Metric::Judge, &yes));
  EXPECT_THROW(score_answer("x", {"y"}, Metric::Judge, &junk), JudgeParseFailure);
}

TEST(Eval, HitAtAnyTurn)
{
  EXPECT_EQ(hit_at_any_turn(traj_with("t", {}, "x"), "gold"), std::nullopt);
  EXPECT_EQ(hit_at_any_turn(traj_with("t", {{"a", "b"}}, "x"), "gold"), false);
  EXPECT_EQ(hit_at_any_turn(traj_with("t", {{"a"}, {"b", "gold"}}, "x"), "gold"), true);
  EXPECT_EQ(hit_at_any_turn(traj_with("t", {{"gold"}, {"b"}}, "x"), "gold"), true);
}

TEST(Eval, MakeRecordsJoinsAndValidates)
{
  factory::QaSample s1{"s1", "img", "q", {"x"}, std::nullopt, "gold", factory::Split::Test, {"unseen_q"}};
  factory::QaSample s2{"s2", "img", "q", {"x"}, std::nullopt, std::nullopt, factory::Split::Test, {}};
  const auto recs = make_records({traj_with("s1", {{"gold"}}, "x"), traj_with("s2", {}, "y")}, {s1, s2}, Metric::Em);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].trajectory_type, "T→A");
  EXPECT_TRUE(recs[0].answer_correct);
  EXPECT_EQ(recs[0].retrieval_hit, true);
  EXPECT_EQ(recs[0].split_tags, std::vector<std::string>{"unseen_q"});
  EXPECT_EQ(recs[1].trajectory_type, "A");
  EXPECT_FALSE(recs[1].answer_correct);

  EXPECT_THROW(make_records({traj_with("nope", {}, "x")}, {s1}, Metric::Em), DataError);
  EXPECT_THROW(make_records({traj_with("s2", {{"a"}}, "x")}, {s2}, Metric::Em), DataError);
}

TEST(Eval, EvaluateIsDeterministicAcrossWorkers)
{
  auto world = dt::make_world({.n_articles = 80});
  const auto policy = dt::make_policy(*world, 20);
  const auto backend = dt::backend_from(policy.rules);
  EvalSetup setup;
  setup.backend = &backend;
  setup.workers = 1;
  const auto a = evaluate(policy.samples, world->tools, setup);
  setup.workers = 4;
  const auto b = evaluate(policy.samples, world->tools, setup);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.n_records, 20u);
  EXPECT_EQ(pct(a.overall_accuracy), "100.0");
}

TEST(Eval, GridHasOneCellPerPair)
{
  auto world = dt::make_world({.n_articles = 40});
  const auto policy = dt::make_policy(*world, 8);
  const auto backend = dt::backend_from(policy.rules);
  EvalSetup setup;
  setup.backend = &backend;
  const auto grid = run_topk_grid(policy.samples, world->tools, setup, {1, 3}, {1, 2, 0});
  ASSERT_EQ(grid.cells.size(), 6u);
  EXPECT_EQ(grid.at(1, 1).k_text, 3);
  EXPECT_EQ(grid.at(1, 1).k_image, 2);
  EXPECT_TRUE(grid.at(0, 0).report);
  EXPECT_FALSE(grid.at(0, 2).report);  // k_image = 0 is rejected, the grid carries on
  EXPECT_FALSE(grid.at(0, 2).error.empty());
  EXPECT_NE(render_grid(grid).find("3"), std::string::npos);
}
