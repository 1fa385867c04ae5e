#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "dbagent/cli.hpp"
#include "dbagent/jsonl.hpp"
#include "synth.hpp"

using namespace dbagent;
namespace dt = dbagent::testing;

namespace {

struct Run
{
  int code = -1;
  std::string out, err;
};

Run run(const std::vector<std::string>& args)
{
  std::ostringstream out, err;
  Run r;
  r.code = cli::run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Sets an environment variable for the lifetime of the guard.
class EnvGuard
{
public:
  EnvGuard(const char* name, const char* value) : name_(name)
  {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~EnvGuard()
  {
    if (old_) {
      ::setenv(name_, old_->c_str(), 1);
    } else {
      ::unsetenv(name_);
    }
  }

private:
  const char* name_;
  std::optional<std::string> old_;
};

bool has_line(const std::string& text, const std::string& line)
{
  return ("\n" + text).find("\n" + line + "\n") != std::string::npos;
}

struct CliFiles : ::testing::Test
{
  void SetUp() override
  {
    world = dt::make_world({.n_articles = 40});
    kb::save_corpus(world->corpus, dir / "corpus.jsonl");
    const auto policy = dt::make_policy(*world, 10);
    factory::save_dataset(policy.samples, dir / "dataset.jsonl");
    dt::write_rules(dir / "policy.jsonl", policy.rules);
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  dt::TempDir dir{"cli"};
  std::unique_ptr<dt::World> world;
};

}  // namespace

TEST(Cli, HelpExitsZero)
{
  for (const auto& args : std::vector<std::vector<std::string>>{{"--help"}, {"eval", "report", "--help"}}) {
    const auto r = run(args);
    EXPECT_EQ(r.code, cli::kExitOk);
    EXPECT_NE(r.out.find("Usage"), std::string::npos);
  }
  EXPECT_NE(run({"eval", "topk-grid", "--help"}).out.find("--text-k"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne)
{
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"agent", "run", "--budget", "many"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"agent", "run", "--question", "q"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"--workers", "0", "validate", "--script", "x"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"validate"}).code, cli::kExitUsage);
  const auto r = run({"index", "build", "--out-dir", "/tmp/x"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--corpus"), std::string::npos);
}

TEST_F(CliFiles, DataErrorsExitTwo)
{
  jsonl::write_file_atomic(dir / "bad.jsonl", "{\"article_id\": 1}\n");
  auto r = run({"validate", "--corpus", path("bad.jsonl")});
  EXPECT_EQ(r.code, cli::kExitData);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.err.find("bad.jsonl:1"), std::string::npos);

  EXPECT_EQ(run({"index", "build", "--corpus", path("missing.jsonl"), "--out-dir", path("idx")}).code, cli::kExitUsage);
  EXPECT_EQ(run({"index", "build", "--corpus", path("bad.jsonl"), "--out-dir", path("idx")}).code, cli::kExitData);
}

TEST_F(CliFiles, ValidateAcceptsGoodFiles)
{
  const auto r = run({"validate", "--corpus", path("corpus.jsonl"), "--dataset", path("dataset.jsonl"), "--script",
                      path("policy.jsonl")});
  EXPECT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("ok   " + path("corpus.jsonl")), std::string::npos);
}

TEST_F(CliFiles, IndexBuildWritesLoadableIndexes)
{
  const auto r = run({"index", "build", "--corpus", path("corpus.jsonl"), "--out-dir", path("idx")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto text = retrieval::load_index(dir / "idx/text.index", 64, retrieval::Modality::Text);
  EXPECT_EQ(text.size(), world->corpus.stats().n_sections);
  EXPECT_EQ(retrieval::load_index(dir / "idx/image.index").size(), world->corpus.stats().n_images);
}

TEST_F(CliFiles, BatchThenReport)
{
  auto r = run({"--workers", "3", "agent", "batch", "--corpus", path("corpus.jsonl"), "--dataset",
                path("dataset.jsonl"), "--script", path("policy.jsonl"), "--out", path("traj.jsonl")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(agent::read_trajectories(dir / "traj.jsonl").size(), 10u);
  r = run({"eval", "report", "--dataset", path("dataset.jsonl"), "--trajectories", path("traj.jsonl"), "--out",
           path("report")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto j = nlohmann::json::parse(dt::slurp(dir / "report.json"));
  EXPECT_EQ(eval::report_from_json(j).n_records, 10u);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.csv"));
}

TEST_F(CliFiles, BackendSelectionErrors)
{
  // Neither script nor URL: usage. Unreachable URL: backend failure surfaces as exit 3.
  EXPECT_EQ(run({"agent", "run", "--corpus", path("corpus.jsonl"), "--question", "q", "--image", "img"}).code,
            cli::kExitUsage);
  const auto r = run({"agent", "run", "--corpus", path("corpus.jsonl"), "--question", "q", "--image", "img",
                      "--chat-url", "http://127.0.0.1:1", "--max-attempts", "1", "--timeout-ms", "200"});
  EXPECT_TRUE(r.code == cli::kExitBackend || r.code == cli::kExitOk) << r.err;
}

TEST_F(CliFiles, FlagsBeatEnvBeatConfig)
{
  jsonl::write_file_atomic(dir / "c.toml", "budget = 7\nchat-url = \"http://config\"\nk_text = 5\n");
  const auto dump = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"--config", path("c.toml"), "--dump-config", "agent", "run"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };

  auto r = dump({});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_TRUE(has_line(r.out, "budget = \"7\"")) << r.out;
  EXPECT_TRUE(has_line(r.out, "k-text = \"5\"")) << r.out;
  EXPECT_TRUE(has_line(r.out, "chat-url = \"http://config\"")) << r.out;

  {
    EnvGuard env("DBAGENT_CHAT_URL", "http://env");
    r = dump({});
    EXPECT_TRUE(has_line(r.out, "chat-url = \"http://env\"")) << r.out;
    r = dump({"--chat-url", "http://flag", "--budget", "2"});
    EXPECT_TRUE(has_line(r.out, "chat-url = \"http://flag\"")) << r.out;
    EXPECT_TRUE(has_line(r.out, "budget = \"2\"")) << r.out;
  }

  r = run({"--dump-config", "agent", "run"});
  EXPECT_TRUE(has_line(r.out, "budget = \"4\"")) << r.out;
  EXPECT_TRUE(has_line(r.out, "k-text = \"3\"")) << r.out;
  EXPECT_TRUE(has_line(r.out, "k-image = \"1\"")) << r.out;
}

TEST(Cli, DumpConfigNeverPrintsTheApiKey)
{
  EnvGuard key("DBAGENT_API_KEY", "sk-very-secret");
  const auto r = run({"--dump-config", "agent", "run"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_EQ(r.out.find("sk-very-secret"), std::string::npos);
  EXPECT_NE(r.out.find("DBAGENT_API_KEY is set"), std::string::npos);
}

TEST_F(CliFiles, BadConfigFileIsADataError)
{
  jsonl::write_file_atomic(dir / "bad.toml", "budget = [\n");
  EXPECT_EQ(run({"--config", path("bad.toml"), "--dump-config", "agent", "run"}).code, cli::kExitData);
  jsonl::write_file_atomic(dir / "typed.toml", "budget = \"lots\"\n");
  EXPECT_EQ(run({"--config", path("typed.toml"), "--dump-config", "agent", "run"}).code, cli::kExitData);
}
