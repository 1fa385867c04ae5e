#include <gtest/gtest.h>

#include <atomic>

#include "dbagent/agent_runtime.hpp"
#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "synth.hpp"

using namespace dbagent;
using namespace dbagent::agent;
namespace dt = dbagent::testing;

namespace {

nlohmann::json at(int turn, const std::string& out)
{
  return {{"match", {{"turn_index", turn}}}, {"output", out}};
}

const std::string kAnswer = "<think>known</think><answer>Paris</answer>";
const std::string kText = "<think>look</think><text_search>tower</text_search>";
const std::string kImage = "<think>see</think><image_search>image_path</image_search>";
const std::string kBad = "I think it is Paris.";

struct CountingTools
{
  std::atomic<int> text_calls{0};
  std::atomic<int> image_calls{0};
  int fail_first_text = 0;

  ToolBinding binding()
  {
    ToolBinding b;
    b.text_retriever = [this](const std::string& q, int k) {
      if (text_calls++ < fail_first_text) throw std::runtime_error("index offline");
      std::vector<protocol::EvidenceItem> items;
      for (int i = 0; i < k; ++i) items.push_back({"a" + std::to_string(i), "s0", "T" + std::to_string(i), "H", q, 1.0 - i * 0.1, i + 1, 0});
      return items;
    };
    b.image_retriever = [this](const std::string&, int) {
      ++image_calls;
      return std::vector<protocol::EvidenceItem>{{"img", "s0", "Tower", "Overview", "tall", 1.0, 1, 0}};
    };
    return b;
  }
};

}  // namespace

TEST(AgentRuntime, DirectAnswer)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kAnswer)});
  const auto t = rollout("t", "img.jpg", "Where is it?", b, tools.binding(), {});
  EXPECT_EQ(t.terminated_by, Termination::Answer);
  EXPECT_EQ(t.final_answer, "Paris");
  EXPECT_EQ(t.turns.size(), 1u);
  EXPECT_EQ(t.tool_calls(), 0u);
  EXPECT_TRUE(t.rejected.empty());
}

TEST(AgentRuntime, EvidenceFollowsEachToolTurnWithConfiguredK)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kImage), at(1, kText), at(2, kAnswer)});
  RolloutConfig cfg;
  cfg.k_text = 2;
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), cfg);
  ASSERT_EQ(t.observations.size(), 2u);
  EXPECT_EQ(t.observations[0].turn_index, 0);
  EXPECT_EQ(t.observations[1].turn_index, 1);
  EXPECT_EQ(t.observations[1].items.size(), 2u);
  EXPECT_EQ(t.tool_calls(), 2u);
  const auto pieces = interleave(t);
  std::vector<bool> kinds;
  for (const auto& p : pieces) kinds.push_back(p.is_observation);
  EXPECT_EQ(kinds, (std::vector<bool>{false, true, false, true, false}));
}

TEST(AgentRuntime, OneViolationIsReprompted)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kBad), at(1, kAnswer)});
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), {});
  EXPECT_EQ(t.terminated_by, Termination::Answer);
  ASSERT_EQ(t.rejected.size(), 1u);
  EXPECT_EQ(t.rejected[0].raw, kBad);
  EXPECT_EQ(t.rejected[0].generation_index, 0);
  EXPECT_FALSE(t.rejected[0].violations.empty());
  EXPECT_EQ(t.turns.size(), 1u);
}

TEST(AgentRuntime, ReflectionMessageIsTheLastUserMessage)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kBad), {{"match", {{"pattern", "broke the required format"}}}, {"output", kAnswer}}});
  EXPECT_EQ(rollout("t", "img.jpg", "q", b, tools.binding(), {}).terminated_by, Termination::Answer);
}

TEST(AgentRuntime, TwoConsecutiveViolationsEndTheRollout)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kText), at(1, kBad), at(2, kBad), at(3, kAnswer)});
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), {});
  EXPECT_EQ(t.terminated_by, Termination::ProtocolFailure);
  EXPECT_EQ(t.rejected.size(), 2u);
  EXPECT_EQ(t.turns.size(), 1u);
  EXPECT_EQ(t.final_answer, std::nullopt);
}

TEST(AgentRuntime, NonConsecutiveViolationsAreEachForgiven)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kBad), at(1, kText), at(2, kBad), at(3, kAnswer)});
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), {});
  EXPECT_EQ(t.terminated_by, Termination::Answer);
  EXPECT_EQ(t.rejected.size(), 2u);
}

TEST(AgentRuntime, BudgetCountsAcceptedActions)
{
  CountingTools tools;
  const auto b = dt::backend_from(dt::always_search_rules());
  for (int budget : {1, 2, 4, 6}) {
    RolloutConfig cfg;
    cfg.budget = budget;
    const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), cfg);
    EXPECT_EQ(t.terminated_by, Termination::BudgetExhausted);
    EXPECT_EQ(t.turns.size(), static_cast<std::size_t>(budget));
    EXPECT_EQ(t.observations.size(), static_cast<std::size_t>(budget));
  }
}

TEST(AgentRuntime, FailingToolIsRetriedOnce)
{
  CountingTools once;
  once.fail_first_text = 1;
  const auto b = dt::backend_from({at(0, kText), at(1, kAnswer)});
  auto t = rollout("t", "img.jpg", "q", b, once.binding(), {});
  EXPECT_EQ(once.text_calls.load(), 2);
  EXPECT_FALSE(t.observations[0].tool_error);

  CountingTools twice;
  twice.fail_first_text = 2;
  t = rollout("t", "img.jpg", "q", b, twice.binding(), {});
  EXPECT_EQ(twice.text_calls.load(), 2);
  ASSERT_EQ(t.observations.size(), 1u);
  EXPECT_TRUE(t.observations[0].tool_error);
  EXPECT_EQ(t.terminated_by, Termination::Answer);
}

TEST(AgentRuntime, EmptyGenerationsExhaustBackendAttempts)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(5, kAnswer)});
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), {});
  EXPECT_EQ(t.terminated_by, Termination::ProtocolFailure);
  EXPECT_EQ(t.rejected.size(), 2u);
  EXPECT_FALSE(t.rejected[0].error.empty());
}

TEST(AgentRuntime, CaptionWithoutImageSearchIsRejectedInStrictModeOnly)
{
  CountingTools tools;
  const std::string captioned = "<think>x</think><caption>a tower</caption><text_search>tower</text_search>";
  const auto b = dt::backend_from({at(0, captioned), at(1, captioned), at(2, kAnswer)});
  EXPECT_EQ(rollout("t", "img.jpg", "q", b, tools.binding(), {}).terminated_by, Termination::ProtocolFailure);
  RolloutConfig lenient;
  lenient.strict_protocol = false;
  const auto t = rollout("t", "img.jpg", "q", b, tools.binding(), lenient);
  EXPECT_EQ(t.terminated_by, Termination::Answer);
  EXPECT_EQ(t.turns[0].caption, "a tower");
}

TEST(AgentRuntime, StepLeavesStateUntouchedOnViolation)
{
  CountingTools tools;
  const auto cfg = RolloutConfig{};
  auto state = init_state("img.jpg", "q", cfg);
  const auto before = state.messages;
  auto turn = protocol::make_turn("x", "cap", protocol::ActionKind::TextSearch, "tower");
  const auto out = step(state, turn, tools.binding(), cfg);
  EXPECT_EQ(out.kind, StepKind::ProtocolError);
  EXPECT_EQ(state.messages, before);
  EXPECT_TRUE(state.transcript.empty());
  EXPECT_EQ(tools.text_calls.load(), 0);
}

TEST(AgentRuntime, InitStateShape)
{
  const auto s = init_state("img.jpg", "What is it?", {});
  ASSERT_EQ(s.messages.size(), 2u);
  EXPECT_EQ(s.messages[0].role, gateway::Role::System);
  EXPECT_EQ(s.messages[1].content, question_prompt("What is it?"));
  EXPECT_EQ(s.messages[1].images, std::vector<std::string>{"img.jpg"});
  EXPECT_THROW(init_state("", "q", {}), UsageError);
  EXPECT_THROW(init_state("i", "", {}), UsageError);
}

TEST(AgentRuntime, ConfigValidation)
{
  for (auto mutate : std::vector<std::function<void(RolloutConfig&)>>{
         [](auto& c) { c.budget = 0; }, [](auto& c) { c.k_text = 0; }, [](auto& c) { c.k_image = -1; },
         [](auto& c) { c.backend_attempts = 0; }}) {
    RolloutConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), UsageError);
  }
  EXPECT_NO_THROW(RolloutConfig{}.validate());
}

TEST(AgentRuntime, TrajectoryJsonRoundTripAndFileIo)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kBad), at(1, kImage), at(2, kText), at(3, kAnswer)});
  std::vector<Trajectory> ts;
  for (int i = 0; i < 3; ++i) ts.push_back(rollout("t" + std::to_string(i), "img.jpg", "q", b, tools.binding(), {}));
  dt::TempDir dir("traj");
  write_trajectories(dir / "t.jsonl", ts);
  const auto back = read_trajectories(dir / "t.jsonl");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(nlohmann::json(back[i]), nlohmann::json(ts[i]));
  EXPECT_NE(render_transcript(back[0]).find("<evidence>"), std::string::npos);
}

TEST(AgentRuntime, MisalignedObservationsAreDataErrors)
{
  CountingTools tools;
  const auto b = dt::backend_from({at(0, kText), at(1, kAnswer)});
  auto j = nlohmann::json(rollout("t", "img.jpg", "q", b, tools.binding(), {}));
  j["observations"] = nlohmann::json::array();
  dt::TempDir dir("traj");
  jsonl::write_file_atomic(dir / "bad.jsonl", j.dump() + "\nnot json\n");
  try {
    read_trajectories(dir / "bad.jsonl");
    FAIL();
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("bad.jsonl:1:"), std::string::npos);
    EXPECT_NE(what.find("bad.jsonl:2:"), std::string::npos);
  }
}

TEST(AgentRuntime, BatchMatchesSequentialAndKeepsOrder)
{
  auto world = dt::make_world({.n_articles = 60});
  const auto replays = dt::make_replays(4);
  const auto b = dt::backend_from(replays.rules);
  const auto seq = rollout_batch(replays.tasks, b, world->tools, {}, 1);
  const auto par = rollout_batch(replays.tasks, b, world->tools, {}, 6);
  ASSERT_EQ(seq.size(), replays.tasks.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_EQ(seq[i].task_id, replays.tasks[i].task_id);
    EXPECT_EQ(nlohmann::json(seq[i]).dump(), nlohmann::json(par[i]).dump());
    EXPECT_EQ(seq[i].final_answer, replays.expected_answers[i]);
  }
}
