#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "dbagent/embedding.hpp"
#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/model_gateway.hpp"
#include "httplib.h"
#include "synth.hpp"

using namespace dbagent;
using namespace dbagent::gateway;
namespace dt = dbagent::testing;

namespace {

std::vector<ChatMessage> convo(const std::string& user)
{
  return {{Role::System, "sys", {}}, {Role::User, user, {}}};
}

/// Loopback server on an ephemeral port; handlers are installed before start().
class FakeServer
{
public:
  ~FakeServer()
  {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Server& server() { return server_; }

  void start()
  {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  http::Endpoint endpoint(const std::string& prefix = {}) const
  {
    http::Endpoint e;
    e.base_url = "http://127.0.0.1:" + std::to_string(port_) + prefix;
    e.timeout_ms = 5000;
    e.retry_backoff_ms = 1;
    return e;
  }

private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST(Gateway, TruncateAtStop)
{
  const auto& stops = action_stops();
  EXPECT_EQ(truncate_at_stop("<think>a</think><answer>b</answer> extra", stops), "<think>a</think><answer>b</answer>");
  EXPECT_EQ(truncate_at_stop("<text_search>q</text_search><answer>x</answer>", stops), "<text_search>q</text_search>");
  EXPECT_EQ(truncate_at_stop("no stop here", stops), "no stop here");
  EXPECT_EQ(truncate_at_stop("abcd", {"bc", "bcd"}), "abcd");
  EXPECT_EQ(truncate_at_stop("abcd", {}), "abcd");
}

TEST(Gateway, EnsureActionStopsAddsMissingTags)
{
  GenerationParams p;
  p.stop_sequences = {"</answer>", "###"};
  p.ensure_action_stops();
  for (const auto& s : action_stops()) {
    EXPECT_EQ(std::count(p.stop_sequences.begin(), p.stop_sequences.end(), s), 1);
  }
  EXPECT_EQ(std::count(p.stop_sequences.begin(), p.stop_sequences.end(), "###"), 1);
}

TEST(Gateway, ScriptedRulesMatchInFileOrder)
{
  const auto backend = dt::backend_from({
    {{"match", {{"turn_index", 1}, {"pattern", "tower"}}}, {"output", "<think>1</think><answer>both</answer>"}},
    {{"match", {{"pattern", "tower"}}}, {"output", "<think>2</think><answer>pattern</answer> tail"}},
    {{"match", {{"turn_index", 2}}}, {"output", "<think>3</think><answer>turn</answer>"}},
  });
  GenerationParams p;
  EXPECT_EQ(backend.complete(convo("the tower"), p, 1), "<think>1</think><answer>both</answer>");
  EXPECT_EQ(backend.complete(convo("the tower"), p, 0), "<think>2</think><answer>pattern</answer>");
  EXPECT_EQ(backend.complete(convo("bridge"), p, 2), "<think>3</think><answer>turn</answer>");
  EXPECT_THROW(backend.complete(convo("bridge"), p, 0), EmptyGeneration);
}

TEST(Gateway, PatternsSeeOnlyTheLastUserMessage)
{
  const auto backend = dt::backend_from({{{"match", {{"pattern", "first"}}}, {"output", "<think>a</think><answer>x</answer>"}}});
  std::vector<ChatMessage> m{{Role::System, "first", {}}, {Role::User, "first", {}}, {Role::Assistant, "a", {}},
                             {Role::User, "second", {}}};
  EXPECT_THROW(backend.complete(m, {}, 1), EmptyGeneration);
}

TEST(Gateway, CompleteChecksTheConversationShape)
{
  const auto backend = dt::backend_from({{{"match", {{"pattern", "."}}}, {"output", "   "}}});
  EXPECT_THROW(backend.complete({}, {}, 0), UsageError);
  EXPECT_THROW(backend.complete({{Role::User, "q", {}}}, {}, 0), UsageError);
  EXPECT_THROW(backend.complete({{Role::System, "s", {}}, {Role::User, "", {}}}, {}, 0), UsageError);
  EXPECT_THROW(backend.complete(convo("q"), {}, 0), EmptyGeneration);
}

TEST(Gateway, FreeFormOnlyHonoursCallerStops)
{
  const auto backend =
    dt::backend_from({{{"match", {{"pattern", "."}}}, {"output", "<answer>x</answer>\n[correct] done\nmore"}}});
  GenerationParams p;
  p.stop_sequences = {"done"};
  EXPECT_EQ(backend.complete_free_form(convo("q"), p, 0), "<answer>x</answer>\n[correct] done");
  EXPECT_EQ(backend.complete(convo("q"), p, 0), "<answer>x</answer>");
}

TEST(Gateway, LoadScriptReportsEveryBadLine)
{
  dt::TempDir dir("script");
  jsonl::write_file_atomic(dir / "s.jsonl",
                           R"({"match":{"turn_index":0},"output":"a"})"
                           "\n"
                           R"({"match":{},"output":"b"})"
                           "\n"
                           R"({"match":{"pattern":"("},"output":"c"})"
                           "\n"
                           R"({"match":{"turn_index":-1},"output":"d"})"
                           "\n"
                           R"({"match":{"turn_index":0},"output":"e","extra":1})"
                           "\n");
  try {
    load_script(dir / "s.jsonl");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string what = e.what();
    for (int line : {2, 3, 4, 5}) EXPECT_NE(what.find("s.jsonl:" + std::to_string(line) + ":"), std::string::npos);
    EXPECT_EQ(what.find("s.jsonl:1:"), std::string::npos);
  }
}

TEST(Gateway, ScriptRulesRoundTripThroughJson)
{
  const nlohmann::json j{{"match", {{"turn_index", 3}, {"pattern", "a|b"}}}, {"output", "o"}};
  EXPECT_EQ(to_json(rule_from_json(j)), j);
}

TEST(Gateway, RemoteChatSendsMessagesAndRetries5xx)
{
  FakeServer fake;
  std::atomic<int> calls{0};
  std::mutex mu;
  nlohmann::json last_body;
  std::vector<std::string> request_ids, auth;
  fake.server().Post("/api/chat", [&](const httplib::Request& req, httplib::Response& res) {
    {
      std::lock_guard lock(mu);
      last_body = nlohmann::json::parse(req.body);
      request_ids.push_back(req.get_header_value("X-Request-Id"));
      auth.push_back(req.get_header_value("Authorization"));
    }
    if (calls++ < 2) {
      res.status = 503;
      res.set_content(R"({"error":"warming up"})", "application/json");
      return;
    }
    res.set_content(R"({"text":"<think>t</think><answer>A</answer> trailing"})", "application/json");
  });
  fake.start();

  auto ep = fake.endpoint("/api");
  ep.api_key = "secret-key";
  std::vector<std::string> logged;
  RemoteChatBackend backend(ep, [&](std::string_view s) { logged.emplace_back(s); });
  std::vector<ChatMessage> m{{Role::System, "sys", {}}, {Role::User, "q", {"img.jpg"}}};
  EXPECT_EQ(backend.complete(m, {}, 0), "<think>t</think><answer>A</answer>");
  EXPECT_EQ(calls.load(), 3);
  EXPECT_EQ(last_body["messages"][1]["images"], nlohmann::json::array({"img.jpg"}));
  EXPECT_EQ(last_body["messages"][0]["role"], "system");
  EXPECT_EQ(last_body["stop"].size(), action_stops().size());
  ASSERT_EQ(request_ids.size(), 3u);
  EXPECT_FALSE(request_ids[0].empty());
  EXPECT_EQ(request_ids[0], request_ids[2]);
  for (const auto& a : auth) EXPECT_EQ(a, "Bearer secret-key");
  ASSERT_EQ(logged.size(), 1u);
  EXPECT_EQ(logged[0].find("secret-key"), std::string::npos);
}

TEST(Gateway, RemoteChatErrorsCarryServerMessage)
{
  FakeServer fake;
  std::atomic<int> calls{0};
  fake.server().Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
    res.set_content(R"({"error":"context too long"})", "application/json");
  });
  fake.server().Post("/x/chat", [&](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("down", "text/plain");
  });
  fake.server().Post("/y/chat", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"nope":1})", "application/json");
  });
  fake.start();

  try {
    RemoteChatBackend(fake.endpoint()).complete(convo("q"), {}, 0);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_FALSE(e.retriable());
    EXPECT_NE(std::string(e.what()).find("context too long"), std::string::npos);
  }
  EXPECT_EQ(calls.load(), 1);

  try {
    RemoteChatBackend(fake.endpoint("/x")).complete(convo("q"), {}, 0);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_TRUE(e.retriable());
    EXPECT_EQ(e.attempts(), 3);
  }
  EXPECT_THROW(RemoteChatBackend(fake.endpoint("/y")).complete(convo("q"), {}, 0), BackendError);
}

TEST(Gateway, UnreachableServerIsRetriable)
{
  http::Endpoint ep;
  ep.base_url = "http://127.0.0.1:1";
  ep.max_attempts = 2;
  ep.retry_backoff_ms = 1;
  ep.timeout_ms = 500;
  try {
    RemoteChatBackend(ep).complete(convo("q"), {}, 0);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_TRUE(e.retriable());
    EXPECT_EQ(e.attempts(), 2);
  }
}

TEST(Gateway, RemoteEmbedderBatchesAndValidates)
{
  FakeServer fake;
  std::vector<std::size_t> batch_sizes;
  fake.server().Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const auto n = body["inputs"].size();
    batch_sizes.push_back(n);
    nlohmann::json vectors = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) vectors.push_back({3.0, 4.0});
    res.set_content(nlohmann::json{{"vectors", vectors}}.dump(), "application/json");
  });
  fake.server().Post("/bad/embed", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"vectors":[[1,2,3]]})", "application/json");
  });
  fake.start();

  retrieval::RemoteEmbedder e(fake.endpoint(), 2, retrieval::Modality::Image, 2);
  const std::vector<std::string> inputs{"a", "b", "c", "d", "e"};
  const auto out = e.embed_batch(inputs);
  ASSERT_EQ(out.size(), 5u);
  EXPECT_NEAR(out[0][0], 0.6, 1e-6);
  EXPECT_NEAR(out[0][1], 0.8, 1e-6);
  EXPECT_EQ(batch_sizes, (std::vector<std::size_t>{2, 2, 1}));

  retrieval::RemoteEmbedder bad(fake.endpoint("/bad"), 2, retrieval::Modality::Text);
  EXPECT_THROW(bad.embed("a"), BackendError);
}
