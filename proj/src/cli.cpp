#include "dbagent/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dbagent/agent_runtime.hpp"
#include "dbagent/error.hpp"
#include "dbagent/eval_harness.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/knowledge_base.hpp"
#include "dbagent/model_gateway.hpp"
#include "dbagent/retrieval.hpp"
#include "dbagent/sft_emitter.hpp"
#include "dbagent/text.hpp"
#include "dbagent/trajectory_factory.hpp"

namespace dbagent::cli {

namespace {

namespace fs = std::filesystem;

struct Settings
{
  std::string config_file;
  bool dump_config = false;
  std::size_t workers = 1;
  std::uint64_t seed = 0;

  // backends
  std::string script;
  std::string chat_url;
  std::string judge_script;
  std::string judge_url;
  int timeout_ms = 60000;
  int max_attempts = 3;
  double temperature = 0.0;
  int max_tokens = 1024;

  // retrieval
  std::string corpus;
  std::string text_index;
  std::string image_index;
  std::string embed_url;
  std::size_t embed_dim = 64;
  std::uint64_t embed_seed = 0;
  std::size_t embed_batch = 64;
  std::string image_evidence = "lead";

  // rollout
  int budget = 4;
  int k_text = retrieval::kDefaultTextTopK;
  int k_image = retrieval::kDefaultImageTopK;
  bool lenient = false;
  bool allow_caption_before_answer = false;
  std::string system_prompt_file;

  // command inputs / outputs
  std::string question;
  std::string image;
  std::string task_id = "task-0";
  std::string dataset;
  std::string split = "all";
  std::string out;
  std::string out_dir;
  std::string outcomes;
  std::string trajectories;
  std::string sft;
  std::string judge_mode;
  bool keep_failed = false;
  std::size_t per_tier = 0;
  std::size_t max_chars = sft::kDefaultMaxChars;
  std::string metric = "em";
  std::vector<int> text_ks{1, 3, 5};
  std::vector<int> image_ks{1, 2, 3};
  std::vector<std::size_t> sizes;
};

std::string env_value(const char* name)
{
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

void require_file(const std::string& path, const char* flag)
{
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(flag) + ": file not found: " + path);
}

void require_value(const std::string& value, const char* flag)
{
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

void ensure_parent(const fs::path& path)
{
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

http::Endpoint endpoint(const Settings& s, const std::string& url)
{
  http::Endpoint e;
  e.base_url = url;
  e.timeout_ms = s.timeout_ms;
  e.max_attempts = s.max_attempts;
  e.api_key = env_value("DBAGENT_API_KEY");
  return e;
}

std::unique_ptr<gateway::ChatBackend> make_backend(const Settings& s, const std::string& script, const std::string& url,
                                                   std::ostream& err, bool required)
{
  if (!script.empty() && !url.empty()) throw UsageError("give either a script or a chat URL, not both");
  if (!script.empty()) {
    require_file(script, "--script");
    return std::make_unique<gateway::ScriptedBackend>(gateway::load_script(script));
  }
  if (!url.empty()) {
    auto* sink = &err;
    return std::make_unique<gateway::RemoteChatBackend>(endpoint(s, url), [sink](std::string_view line) {
      *sink << line << '\n';
    });
  }
  if (required) throw UsageError("no chat backend: pass --script or --chat-url (or set DBAGENT_CHAT_URL)");
  return nullptr;
}

std::unique_ptr<retrieval::Embedder> make_embedder(const Settings& s, retrieval::Modality modality)
{
  if (!s.embed_url.empty()) {
    return std::make_unique<retrieval::RemoteEmbedder>(endpoint(s, s.embed_url), s.embed_dim, modality, s.embed_batch);
  }
  return std::make_unique<retrieval::HashingEmbedder>(s.embed_dim, modality, s.embed_seed);
}

agent::ImageEvidence image_evidence(const Settings& s)
{
  if (s.image_evidence == "lead") return agent::ImageEvidence::LeadSection;
  if (s.image_evidence == "full") return agent::ImageEvidence::FullArticle;
  throw UsageError("--image-evidence must be lead or full");
}

agent::RolloutConfig rollout_config(const Settings& s)
{
  agent::RolloutConfig c;
  c.budget = s.budget;
  c.k_text = s.k_text;
  c.k_image = s.k_image;
  c.strict_protocol = !s.lenient;
  c.allow_caption_before_answer = s.allow_caption_before_answer;
  c.image_evidence = image_evidence(s);
  c.generation.temperature = s.temperature;
  c.generation.max_new_tokens = s.max_tokens;
  if (!s.system_prompt_file.empty()) {
    require_file(s.system_prompt_file, "--system-prompt");
    c.system_prompt = jsonl::read_file(s.system_prompt_file);
  }
  c.validate();
  return c;
}

/// Corpus, embedders, indexes and the tool binding over them.
struct Retrieval
{
  kb::Corpus corpus;
  std::unique_ptr<retrieval::Embedder> text_embedder;
  std::unique_ptr<retrieval::Embedder> image_embedder;
  retrieval::VectorIndex text_index;
  retrieval::VectorIndex image_index;
  agent::ToolBinding tools;
};

std::unique_ptr<Retrieval> open_retrieval(const Settings& s)
{
  require_file(s.corpus, "--corpus");
  if (!s.text_index.empty()) require_file(s.text_index, "--text-index");
  if (!s.image_index.empty()) require_file(s.image_index, "--image-index");
  auto r = std::make_unique<Retrieval>();
  r->corpus = kb::load_corpus(s.corpus);
  r->text_embedder = make_embedder(s, retrieval::Modality::Text);
  r->image_embedder = make_embedder(s, retrieval::Modality::Image);
  r->text_index = s.text_index.empty()
                      ? retrieval::build_text_index(r->corpus, *r->text_embedder, s.embed_batch)
                      : retrieval::load_index(s.text_index, s.embed_dim, retrieval::Modality::Text);
  r->image_index = s.image_index.empty()
                       ? retrieval::build_image_index(r->corpus, *r->image_embedder, s.embed_batch)
                       : retrieval::load_index(s.image_index, s.embed_dim, retrieval::Modality::Image);
  r->tools = agent::make_tools(r->corpus, r->text_index, *r->text_embedder, r->image_index, *r->image_embedder,
                               image_evidence(s));
  return r;
}

std::vector<factory::QaSample> load_samples(const Settings& s)
{
  require_file(s.dataset, "--dataset");
  auto samples = factory::load_dataset(s.dataset);
  if (s.split == "all") return samples;
  const auto wanted = factory::split_from_string(s.split);
  std::vector<factory::QaSample> out;
  for (auto& x : samples) {
    if (x.split == wanted) out.push_back(std::move(x));
  }
  return out;
}

// ---- subcommands ----

int cmd_index_build(const Settings& s, std::ostream& out)
{
  require_file(s.corpus, "--corpus");
  require_value(s.out_dir, "--out-dir");
  const auto corpus = kb::load_corpus(s.corpus);
  const auto text_embedder = make_embedder(s, retrieval::Modality::Text);
  const auto image_embedder = make_embedder(s, retrieval::Modality::Image);
  const auto text_index = retrieval::build_text_index(corpus, *text_embedder, s.embed_batch);
  const auto image_index = retrieval::build_image_index(corpus, *image_embedder, s.embed_batch);
  fs::create_directories(s.out_dir);
  retrieval::save_index(text_index, fs::path(s.out_dir) / "text.index");
  retrieval::save_index(image_index, fs::path(s.out_dir) / "image.index");
  out << "articles " << corpus.stats().n_articles << ", text entries " << text_index.size() << ", image entries "
      << image_index.size() << ", dimension " << s.embed_dim << "\n";
  out << "wrote " << (fs::path(s.out_dir) / "text.index").string() << " and "
      << (fs::path(s.out_dir) / "image.index").string() << "\n";
  return kExitOk;
}

int cmd_agent_run(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_value(s.question, "--question");
  require_value(s.image, "--image");
  const auto config = rollout_config(s);
  const auto backend = make_backend(s, s.script, s.chat_url, err, true);
  const auto r = open_retrieval(s);
  const auto traj = agent::rollout(s.task_id, s.image, s.question, *backend, r->tools, config);
  out << agent::render_transcript(traj);
  if (!s.out.empty()) {
    ensure_parent(s.out);
    agent::write_trajectories(s.out, {traj});
  }
  return kExitOk;
}

int cmd_agent_batch(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_value(s.out, "--out");
  const auto config = rollout_config(s);
  const auto samples = load_samples(s);
  const auto backend = make_backend(s, s.script, s.chat_url, err, true);
  const auto r = open_retrieval(s);
  std::vector<agent::AgentTask> tasks;
  for (const auto& x : samples) tasks.push_back({x.sample_id, x.image_ref, x.question});
  const auto trajs = agent::rollout_batch(tasks, *backend, r->tools, config, s.workers);
  ensure_parent(s.out);
  agent::write_trajectories(s.out, trajs);
  std::map<std::string, std::size_t> by_end;
  for (const auto& t : trajs) ++by_end[std::string(agent::to_string(t.terminated_by))];
  out << "wrote " << trajs.size() << " trajectories to " << s.out << " (";
  bool first = true;
  for (const auto& [k, v] : by_end) {
    out << (first ? "" : ", ") << k << " " << v;
    first = false;
  }
  out << ")\n";
  return kExitOk;
}

int cmd_factory_build(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_value(s.out, "--out");
  const auto samples = load_samples(s);
  const auto answer = make_backend(s, s.script, s.chat_url, err, true);
  const auto judge = make_backend(s, s.judge_script, s.judge_url, err, false);
  const auto r = open_retrieval(s);
  factory::FactoryConfig config;
  config.judge_mode = s.judge_mode.empty()
                          ? (judge ? factory::JudgeMode::ModelJudge : factory::JudgeMode::NormalizedExact)
                          : factory::judge_mode_from_string(s.judge_mode);
  config.k_text = s.k_text;
  config.k_image = s.k_image;
  config.keep_failed = s.keep_failed;
  config.image_evidence = image_evidence(s);
  config.generation.temperature = s.temperature;
  config.generation.max_new_tokens = s.max_tokens;
  factory::FactoryBackends backends{answer.get(), judge ? judge.get() : answer.get()};
  const auto run = factory::run_factory(samples, backends, r->tools, config, s.workers);
  ensure_parent(s.out);
  factory::write_outcomes(s.out, run.outcomes);
  std::map<std::string, std::size_t> by_type;
  for (const auto& o : run.outcomes) ++by_type[std::string(factory::to_string(o.type))];
  out << "wrote " << run.outcomes.size() << " outcomes to " << s.out << "; skipped " << run.skipped_non_train
      << " non-train samples\n";
  for (const auto& [k, v] : by_type) out << "  " << k << ": " << v << "\n";
  return kExitOk;
}

int cmd_dataset_emit(const Settings& s, std::ostream& out)
{
  require_file(s.outcomes, "--outcomes");
  require_value(s.out, "--out");
  auto outcomes = factory::read_outcomes(s.outcomes);
  if (s.per_tier > 0) outcomes = factory::sample_balanced(outcomes, s.per_tier, s.seed);
  sft::EmitOptions options;
  options.max_chars = s.max_chars;
  options.sources = {s.outcomes};
  options.workers = s.workers;
  if (!s.system_prompt_file.empty()) {
    require_file(s.system_prompt_file, "--system-prompt");
    options.system_prompt = jsonl::read_file(s.system_prompt_file);
  }
  ensure_parent(s.out);
  const auto manifest = sft::emit_dataset(outcomes, s.out, options);
  out << "emitted " << manifest.total << " samples to " << s.out << "; dropped " << manifest.dropped_over_cap
      << " over " << manifest.max_chars << " chars";
  for (const auto& [label, n] : manifest.skipped) out << "; skipped " << n << " " << label;
  out << "\nmanifest: " << sft::manifest_path(s.out).string() << "\n";
  return kExitOk;
}

eval::EvalSetup eval_setup(const Settings& s, const gateway::ChatBackend* backend, const gateway::ChatBackend* judge)
{
  eval::EvalSetup setup;
  setup.backend = backend;
  setup.rollout = rollout_config(s);
  setup.metric = eval::metric_from_string(s.metric);
  setup.judge = judge;
  setup.workers = s.workers;
  if (setup.metric == eval::Metric::Judge && !judge) throw UsageError("--metric judge needs --judge-script or --judge-url");
  return setup;
}

int cmd_eval_report(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_file(s.trajectories, "--trajectories");
  require_value(s.out, "--out");
  const auto metric = eval::metric_from_string(s.metric);
  const auto judge = make_backend(s, s.judge_script, s.judge_url, err, false);
  if (metric == eval::Metric::Judge && !judge) throw UsageError("--metric judge needs --judge-script or --judge-url");
  const auto samples = load_samples(s);
  const auto trajs = agent::read_trajectories(s.trajectories);
  nlohmann::json config{{"metric", to_string(metric)}, {"trajectories", s.trajectories}, {"dataset", s.dataset}};
  const auto report = eval::aggregate(eval::make_records(trajs, samples, metric, judge.get()), config);
  ensure_parent(s.out);
  eval::write_report(report, s.out);
  out << eval::render_text(report);
  return kExitOk;
}

int cmd_eval_topk(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_value(s.out_dir, "--out-dir");
  const auto samples = load_samples(s);
  const auto backend = make_backend(s, s.script, s.chat_url, err, true);
  const auto judge = make_backend(s, s.judge_script, s.judge_url, err, false);
  const auto r = open_retrieval(s);
  const auto setup = eval_setup(s, backend.get(), judge.get());
  const auto grid = eval::run_topk_grid(samples, r->tools, setup, s.text_ks, s.image_ks);
  fs::create_directories(s.out_dir);
  nlohmann::json summary{{"text_ks", grid.text_ks}, {"image_ks", grid.image_ks}, {"cells", nlohmann::json::array()}};
  for (const auto& cell : grid.cells) {
    const auto stem = "cell_t" + std::to_string(cell.k_text) + "_i" + std::to_string(cell.k_image);
    nlohmann::json jc{{"k_text", cell.k_text}, {"k_image", cell.k_image}, {"report", stem}};
    if (cell.report) {
      eval::write_report(*cell.report, fs::path(s.out_dir) / stem);
      jc["accuracy"] = cell.report->overall_accuracy ? nlohmann::json(*cell.report->overall_accuracy) : nlohmann::json(nullptr);
    } else {
      jc["error"] = cell.error;
    }
    summary["cells"].push_back(std::move(jc));
  }
  jsonl::write_file_atomic(fs::path(s.out_dir) / "grid.txt", eval::render_grid(grid));
  jsonl::write_file_atomic(fs::path(s.out_dir) / "grid.csv", eval::render_grid_csv(grid));
  jsonl::write_file_atomic(fs::path(s.out_dir) / "summary.json", summary.dump(2) + "\n");
  out << eval::render_grid(grid);
  return kExitOk;
}

int cmd_eval_kb_scale(const Settings& s, std::ostream& out, std::ostream& err)
{
  require_value(s.out_dir, "--out-dir");
  if (s.sizes.empty()) throw UsageError("--sizes is required");
  const auto samples = load_samples(s);
  require_file(s.corpus, "--corpus");
  const auto corpus = kb::load_corpus(s.corpus);
  const auto backend = make_backend(s, s.script, s.chat_url, err, true);
  const auto judge = make_backend(s, s.judge_script, s.judge_url, err, false);
  const auto text_embedder = make_embedder(s, retrieval::Modality::Text);
  const auto image_embedder = make_embedder(s, retrieval::Modality::Image);
  const auto setup = eval_setup(s, backend.get(), judge.get());
  const auto points = eval::run_kb_scale(samples, corpus, s.sizes, s.seed, *text_embedder, *image_embedder, setup);
  fs::create_directories(s.out_dir);
  nlohmann::json summary{{"seed", s.seed}, {"points", nlohmann::json::array()}};
  for (const auto& p : points) {
    const auto stem = "size_" + std::to_string(p.size);
    nlohmann::json jp{{"kb_size", p.size}, {"report", stem}};
    if (p.report) {
      eval::write_report(*p.report, fs::path(s.out_dir) / stem);
      jp["accuracy"] = p.report->overall_accuracy ? nlohmann::json(*p.report->overall_accuracy) : nlohmann::json(nullptr);
      jp["recall"] = p.report->overall_recall ? nlohmann::json(*p.report->overall_recall) : nlohmann::json(nullptr);
    } else {
      jp["error"] = p.error;
    }
    summary["points"].push_back(std::move(jp));
  }
  jsonl::write_file_atomic(fs::path(s.out_dir) / "scale.txt", eval::render_scale(points));
  jsonl::write_file_atomic(fs::path(s.out_dir) / "scale.csv", eval::render_scale_csv(points));
  jsonl::write_file_atomic(fs::path(s.out_dir) / "summary.json", summary.dump(2) + "\n");
  out << eval::render_scale(points);
  return kExitOk;
}

int cmd_validate(const Settings& s, std::ostream& out)
{
  std::vector<std::string> problems;
  int checked = 0;
  const auto collect = [&](const std::string& path, const char* flag, auto&& check) {
    if (path.empty()) return;
    require_file(path, flag);
    ++checked;
    try {
      check(path);
      out << "ok   " << path << "\n";
    } catch (const DataError& e) {
      out << "FAIL " << path << "\n";
      problems.push_back(e.what());
    }
  };
  collect(s.corpus, "--corpus", [&](const std::string& p) {
    std::vector<std::string> issues;
    for (const auto& i : kb::lint_corpus(p)) issues.push_back(p + ":" + std::to_string(i.line) + ": " + i.message);
    if (!issues.empty()) throw DataError(text::join(issues, "\n"));
  });
  collect(s.dataset, "--dataset", [&](const std::string& p) {
    const auto issues = factory::lint_dataset(p);
    if (!issues.empty()) throw DataError(text::join(issues, "\n"));
  });
  collect(s.trajectories, "--trajectories", [&](const std::string& p) { (void)agent::read_trajectories(p); });
  collect(s.outcomes, "--outcomes", [&](const std::string& p) { (void)factory::read_outcomes(p); });
  collect(s.sft, "--sft", [&](const std::string& p) { (void)sft::read_dataset(p); });
  collect(s.script, "--script", [&](const std::string& p) { (void)gateway::load_script(p); });
  if (checked == 0) {
    throw UsageError("validate needs at least one of --corpus, --dataset, --trajectories, --outcomes, --sft, --script");
  }
  if (!problems.empty()) throw DataError(text::join(problems, "\n"));
  return kExitOk;
}

// ---- option wiring ----

std::string normalize_key(std::string key)
{
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  while (!key.empty() && key.front() == '-') key.erase(key.begin());
  return key;
}

std::string long_name(const CLI::Option* opt)
{
  const auto& names = opt->get_lnames();
  return names.empty() ? std::string() : names.front();
}

void set_option(CLI::Option* opt, const std::vector<std::string>& values)
{
  opt->clear();
  for (const auto& v : values) opt->add_result(v);
  opt->run_callback();
}

/// Options reachable from the selected subcommand path.
std::vector<CLI::Option*> active_options(CLI::App& app)
{
  std::vector<CLI::Option*> out;
  for (auto* opt : app.get_options()) out.push_back(opt);
  CLI::App* current = &app;
  while (true) {
    const auto subs = current->get_subcommands();
    if (subs.empty()) break;
    current = subs.front();
    for (auto* opt : current->get_options()) out.push_back(opt);
  }
  return out;
}

/// Fills options not given on the command line: environment first, then the
/// config file (flat `name = value` TOML keys, matching long option names).
void apply_env_and_config(CLI::App& app, const Settings& s)
{
  std::map<std::string, CLI::Option*> by_name;
  std::set<std::string> from_flags;
  for (auto* opt : active_options(app)) {
    const auto name = long_name(opt);
    if (name.empty() || by_name.contains(name)) continue;
    by_name[name] = opt;
    if (opt->count() > 0) from_flags.insert(name);
  }
  std::set<std::string> from_env;
  const std::pair<const char*, const char*> env_bound[] = {{"chat-url", "DBAGENT_CHAT_URL"},
                                                           {"embed-url", "DBAGENT_EMBED_URL"}};
  for (const auto& [name, env] : env_bound) {
    auto it = by_name.find(name);
    const auto value = env_value(env);
    if (it == by_name.end() || from_flags.contains(name) || value.empty()) continue;
    set_option(it->second, {value});
    from_env.insert(name);
  }
  if (s.config_file.empty()) return;
  require_file(s.config_file, "--config");
  std::ifstream in(s.config_file);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw DataError(std::string("cannot read config: ") + e.what(), s.config_file);
  }
  for (const auto& item : items) {
    const auto name = normalize_key(item.name);
    if (name == "config" || name == "dump-config") continue;
    auto it = by_name.find(name);
    if (it == by_name.end() || from_flags.contains(name) || from_env.contains(name)) continue;
    std::vector<std::string> values;
    for (auto v : item.inputs) {
      if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) v = v.substr(1, v.size() - 2);
      values.push_back(v);
    }
    try {
      set_option(it->second, values);
    } catch (const CLI::Error& e) {
      throw DataError("config key '" + item.name + "': " + e.what(), s.config_file);
    }
  }
}

std::string dump_config(CLI::App& app)
{
  std::string out = "# effective configuration\n";
  std::set<std::string> seen;
  for (auto* opt : active_options(app)) {
    const auto name = long_name(opt);
    if (name.empty() || name == "help" || name == "config" || name == "dump-config" || !seen.insert(name).second) {
      continue;
    }
    std::string value;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      value = results.size() == 1 ? results.front() : "[" + text::join(results, ",") + "]";
    } else {
      value = opt->get_default_str();
    }
    out += name + " = \"" + value + "\"\n";
  }
  out += std::string("# DBAGENT_API_KEY is ") + (env_value("DBAGENT_API_KEY").empty() ? "unset" : "set") + "\n";
  return out;
}

void add_backend_options(CLI::App* cmd, Settings& s, bool judge)
{
  cmd->add_option("--script", s.script, "Scripted backend rules (JSON Lines)");
  cmd->add_option("--chat-url", s.chat_url, "Remote chat endpoint base URL (env DBAGENT_CHAT_URL)");
  if (judge) {
    cmd->add_option("--judge-script", s.judge_script, "Scripted judge backend rules");
    cmd->add_option("--judge-url", s.judge_url, "Remote judge endpoint base URL");
  }
  cmd->add_option("--temperature", s.temperature, "Decoding temperature")->capture_default_str();
  cmd->add_option("--max-tokens", s.max_tokens, "Generation cap per turn")->capture_default_str();
}

void add_retrieval_options(CLI::App* cmd, Settings& s, bool indexes)
{
  cmd->add_option("--corpus", s.corpus, "Knowledge base (JSON Lines)");
  if (indexes) {
    cmd->add_option("--text-index", s.text_index, "Prebuilt text index (default: build in memory)");
    cmd->add_option("--image-index", s.image_index, "Prebuilt image index (default: build in memory)");
  }
  cmd->add_option("--embed-url", s.embed_url, "Remote embedding endpoint base URL (env DBAGENT_EMBED_URL)");
  cmd->add_option("--embed-dim", s.embed_dim, "Embedding dimension")->capture_default_str();
  cmd->add_option("--embed-seed", s.embed_seed, "Seed of the deterministic embedder")->capture_default_str();
  cmd->add_option("--embed-batch", s.embed_batch, "Inputs per embedding request")->capture_default_str();
}

void add_http_options(CLI::App* cmd, Settings& s)
{
  cmd->add_option("--timeout-ms", s.timeout_ms, "HTTP timeout per request")->capture_default_str();
  cmd->add_option("--max-attempts", s.max_attempts, "HTTP attempts per request")->capture_default_str();
}

void add_rollout_options(CLI::App* cmd, Settings& s)
{
  cmd->add_option("--budget", s.budget, "Maximum action turns")->capture_default_str();
  cmd->add_option("--k-text", s.k_text, "Sections per text search")->capture_default_str();
  cmd->add_option("--k-image", s.k_image, "Articles per image search")->capture_default_str();
  cmd->add_flag("--lenient", s.lenient, "Skip contextual protocol checks");
  cmd->add_flag("--allow-caption-before-answer", s.allow_caption_before_answer, "Accept a caption on the answer turn");
  cmd->add_option("--image-evidence", s.image_evidence, "lead or full article text for image hits")->capture_default_str();
  cmd->add_option("--system-prompt", s.system_prompt_file, "Override the agent system prompt (file)");
}

void add_dataset_options(CLI::App* cmd, Settings& s)
{
  cmd->add_option("--dataset", s.dataset, "QA samples (JSON Lines)");
  cmd->add_option("--split", s.split, "train, val, test or all")->capture_default_str();
}

int exit_for(const std::exception& e)
{
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const BackendError*>(&e)) return kExitBackend;
  return kExitData;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
  Settings s;
  CLI::App app{"Decision-based search agent toolkit: retrieval indexes, rollouts, trajectory factory, SFT export and "
               "evaluation.",
               "dbagent"};
  app.require_subcommand(1);
  app.add_option("--config", s.config_file, "TOML config file (flags > environment > config > defaults)");
  app.add_flag("--dump-config", s.dump_config, "Print the merged configuration and exit");
  app.add_option("--workers", s.workers, "Worker threads")->capture_default_str();
  app.add_option("--seed", s.seed, "Root seed for all random draws")->capture_default_str();

  auto* index = app.add_subcommand("index", "Retrieval indexes")->require_subcommand(1);
  auto* index_build = index->add_subcommand("build", "Embed a corpus into text and image indexes");
  add_retrieval_options(index_build, s, false);
  add_http_options(index_build, s);
  index_build->add_option("--out-dir", s.out_dir, "Directory for text.index and image.index");

  auto* agent_cmd = app.add_subcommand("agent", "Agent rollouts")->require_subcommand(1);
  auto* agent_run = agent_cmd->add_subcommand("run", "Answer one question and print the transcript");
  add_backend_options(agent_run, s, false);
  add_retrieval_options(agent_run, s, true);
  add_http_options(agent_run, s);
  add_rollout_options(agent_run, s);
  agent_run->add_option("--question", s.question, "Question text");
  agent_run->add_option("--image", s.image, "Image reference");
  agent_run->add_option("--task-id", s.task_id, "Task id recorded in the trajectory")->capture_default_str();
  agent_run->add_option("--out", s.out, "Also write the trajectory (JSON Lines)");

  auto* agent_batch = agent_cmd->add_subcommand("batch", "Roll out every sample of a dataset");
  add_backend_options(agent_batch, s, false);
  add_retrieval_options(agent_batch, s, true);
  add_http_options(agent_batch, s);
  add_rollout_options(agent_batch, s);
  add_dataset_options(agent_batch, s);
  agent_batch->add_option("--out", s.out, "Trajectory file (JSON Lines)");

  auto* factory_cmd = app.add_subcommand("factory", "Training trajectory construction")->require_subcommand(1);
  auto* factory_build = factory_cmd->add_subcommand("build", "Run the staged answer/judge pipeline on train samples");
  add_backend_options(factory_build, s, true);
  add_retrieval_options(factory_build, s, true);
  add_http_options(factory_build, s);
  add_dataset_options(factory_build, s);
  factory_build->add_option("--k-text", s.k_text, "Sections per text search")->capture_default_str();
  factory_build->add_option("--k-image", s.k_image, "Articles per image search")->capture_default_str();
  factory_build->add_option("--image-evidence", s.image_evidence, "lead or full")->capture_default_str();
  factory_build->add_option("--judge-mode", s.judge_mode,
                            "normalized_exact or model_judge (default: model_judge when a judge backend is given)");
  factory_build->add_flag("--keep-failed", s.keep_failed, "Keep stage-3 failures labeled FAILED");
  factory_build->add_option("--out", s.out, "Outcome file (JSON Lines)");

  auto* dataset_cmd = app.add_subcommand("dataset", "SFT datasets")->require_subcommand(1);
  auto* dataset_emit = dataset_cmd->add_subcommand("emit", "Linearize outcomes into a masked SFT file");
  dataset_emit->add_option("--outcomes", s.outcomes, "Outcome file from factory build");
  dataset_emit->add_option("--out", s.out, "SFT file (JSON Lines); the manifest goes beside it");
  dataset_emit->add_option("--max-chars", s.max_chars, "Drop samples longer than this")->capture_default_str();
  dataset_emit->add_option("--per-tier", s.per_tier, "Balanced sampling: outcomes per difficulty tier (0: all)")
      ->capture_default_str();
  dataset_emit->add_option("--system-prompt", s.system_prompt_file, "Override the agent system prompt (file)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluation")->require_subcommand(1);
  auto* eval_report = eval_cmd->add_subcommand("report", "Score a trajectory file against its dataset");
  add_dataset_options(eval_report, s);
  eval_report->add_option("--trajectories", s.trajectories, "Trajectory file");
  eval_report->add_option("--metric", s.metric, "em, raw or judge")->capture_default_str();
  eval_report->add_option("--judge-script", s.judge_script, "Scripted judge backend rules");
  eval_report->add_option("--judge-url", s.judge_url, "Remote judge endpoint base URL");
  add_http_options(eval_report, s);
  eval_report->add_option("--out", s.out, "Report path stem (.txt, .csv, .json are written)");

  auto* eval_topk = eval_cmd->add_subcommand("topk-grid", "Evaluate every (text k, image k) pair");
  add_backend_options(eval_topk, s, true);
  add_retrieval_options(eval_topk, s, true);
  add_http_options(eval_topk, s);
  add_rollout_options(eval_topk, s);
  add_dataset_options(eval_topk, s);
  eval_topk->add_option("--metric", s.metric, "em, raw or judge")->capture_default_str();
  eval_topk->add_option("--text-k", s.text_ks, "Text k values")->delimiter(',')->capture_default_str();
  eval_topk->add_option("--image-k", s.image_ks, "Image k values")->delimiter(',')->capture_default_str();
  eval_topk->add_option("--out-dir", s.out_dir, "Directory for per-cell reports and the grid");

  auto* eval_scale = eval_cmd->add_subcommand("kb-scale", "Evaluate over nested corpus subsamples");
  add_backend_options(eval_scale, s, true);
  add_retrieval_options(eval_scale, s, false);
  add_http_options(eval_scale, s);
  add_rollout_options(eval_scale, s);
  add_dataset_options(eval_scale, s);
  eval_scale->add_option("--metric", s.metric, "em, raw or judge")->capture_default_str();
  eval_scale->add_option("--sizes", s.sizes, "Corpus sizes in articles")->delimiter(',');
  eval_scale->add_option("--out-dir", s.out_dir, "Directory for per-size reports and the series");

  auto* validate = app.add_subcommand("validate", "Lint corpus, dataset, trajectory, outcome, SFT or script files");
  validate->add_option("--corpus", s.corpus, "Corpus file");
  validate->add_option("--dataset", s.dataset, "QA dataset file");
  validate->add_option("--trajectories", s.trajectories, "Trajectory file");
  validate->add_option("--outcomes", s.outcomes, "Outcome file");
  validate->add_option("--sft", s.sft, "SFT file");
  validate->add_option("--script", s.script, "Scripted backend rules");

  std::vector<std::string> storage{"dbagent"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand help requests surface here too.
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\nrun with --help for usage\n";
    return kExitUsage;
  }

  try {
    apply_env_and_config(app, s);
    if (s.dump_config) {
      out << dump_config(app);
      return kExitOk;
    }
    if (s.workers == 0) throw UsageError("--workers must be >= 1");
    if (index_build->parsed()) return cmd_index_build(s, out);
    if (agent_run->parsed()) return cmd_agent_run(s, out, err);
    if (agent_batch->parsed()) return cmd_agent_batch(s, out, err);
    if (factory_build->parsed()) return cmd_factory_build(s, out, err);
    if (dataset_emit->parsed()) return cmd_dataset_emit(s, out);
    if (eval_report->parsed()) return cmd_eval_report(s, out, err);
    if (eval_topk->parsed()) return cmd_eval_topk(s, out, err);
    if (eval_scale->parsed()) return cmd_eval_kb_scale(s, out, err);
    if (validate->parsed()) return cmd_validate(s, out);
    throw UsageError("no command given");
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  }
}

int run_command(int argc, char** argv)
{
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace dbagent::cli
