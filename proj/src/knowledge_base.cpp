#include "dbagent/knowledge_base.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/rng.hpp"

namespace dbagent::kb {

namespace {

std::string require_string(const nlohmann::json& obj, const char* key, const std::string& where)
{
  auto it = obj.find(key);
  if (it == obj.end()) throw std::invalid_argument(where + "missing field '" + key + "'");
  if (!it->is_string()) throw std::invalid_argument(where + "field '" + key + "' must be a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const nlohmann::json& obj, const char* key, const std::string& where)
{
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw std::invalid_argument(where + "field '" + key + "' must be a string");
  return it->get<std::string>();
}

struct ParsedLine
{
  std::size_t line;
  KbArticle article;
};

// Shared by load and lint: parses every line, then checks corpus-wide ids.
std::vector<ParsedLine> parse_lines(const std::filesystem::path& path, std::vector<LoadIssue>& issues)
{
  std::vector<ParsedLine> parsed;
  jsonl::for_each_line(path, [&](std::size_t line, std::string_view text) {
    try {
      auto j = nlohmann::json::parse(text);
      parsed.push_back({line, article_from_json(j)});
    } catch (const nlohmann::json::parse_error& e) {
      issues.push_back({line, std::string("invalid JSON: ") + e.what()});
    } catch (const std::invalid_argument& e) {
      issues.push_back({line, e.what()});
    }
  });

  std::map<std::string, std::size_t> article_lines;
  std::map<std::string, std::size_t> image_lines;
  for (const auto& p : parsed) {
    auto [it, inserted] = article_lines.emplace(p.article.article_id, p.line);
    if (!inserted) {
      issues.push_back({p.line, "duplicate article_id '" + p.article.article_id + "' (lines " +
                                    std::to_string(it->second) + " and " + std::to_string(p.line) + ")"});
    }
    for (const auto& img : p.article.images) {
      auto [iit, ok] = image_lines.emplace(img.image_id, p.line);
      if (!ok) {
        issues.push_back({p.line, "duplicate image_id '" + img.image_id + "' (lines " +
                                      std::to_string(iit->second) + " and " + std::to_string(p.line) + ")"});
      }
    }
  }
  std::sort(issues.begin(), issues.end(), [](const LoadIssue& a, const LoadIssue& b) { return a.line < b.line; });
  return parsed;
}

}  // namespace

KbArticle article_from_json(const nlohmann::json& j)
{
  if (!j.is_object()) throw std::invalid_argument("article must be a JSON object");
  KbArticle a;
  a.article_id = require_string(j, "article_id", "");
  if (a.article_id.empty()) throw std::invalid_argument("article_id must be non-empty");
  const std::string where = "article '" + a.article_id + "': ";
  a.title = require_string(j, "title", where);
  a.url = optional_string(j, "url", where);

  auto sections = j.find("sections");
  if (sections == j.end() || !sections->is_array()) throw std::invalid_argument(where + "'sections' must be an array");
  if (sections->empty()) throw std::invalid_argument(where + "'sections' must be non-empty");
  std::set<std::string> section_ids;
  for (const auto& s : *sections) {
    if (!s.is_object()) throw std::invalid_argument(where + "section must be an object");
    SectionChunk chunk;
    chunk.section_id = require_string(s, "section_id", where);
    chunk.heading = require_string(s, "heading", where);
    chunk.text = require_string(s, "text", where);
    if (chunk.text.empty()) throw std::invalid_argument(where + "section '" + chunk.section_id + "' has empty text");
    if (!section_ids.insert(chunk.section_id).second) {
      throw std::invalid_argument(where + "duplicate section_id '" + chunk.section_id + "'");
    }
    a.sections.push_back(std::move(chunk));
  }

  auto images = j.find("images");
  if (images != j.end() && !images->is_null()) {
    if (!images->is_array()) throw std::invalid_argument(where + "'images' must be an array");
    for (const auto& im : *images) {
      if (!im.is_object()) throw std::invalid_argument(where + "image must be an object");
      ImageAttachment att;
      att.image_id = require_string(im, "image_id", where);
      if (att.image_id.empty()) throw std::invalid_argument(where + "image_id must be non-empty");
      att.uri = require_string(im, "uri", where);
      att.caption = optional_string(im, "caption", where);
      a.images.push_back(std::move(att));
    }
  }
  return a;
}

void to_json(nlohmann::json& j, const KbArticle& article)
{
  auto sections = nlohmann::json::array();
  for (const auto& s : article.sections) {
    sections.push_back({{"section_id", s.section_id}, {"heading", s.heading}, {"text", s.text}});
  }
  auto images = nlohmann::json::array();
  for (const auto& im : article.images) {
    nlohmann::json o{{"image_id", im.image_id}, {"uri", im.uri}};
    if (im.caption) o["caption"] = *im.caption;
    images.push_back(std::move(o));
  }
  j = nlohmann::json{{"article_id", article.article_id}, {"title", article.title},
                     {"sections", std::move(sections)}, {"images", std::move(images)}};
  if (article.url) j["url"] = *article.url;
}

Corpus Corpus::from_articles(std::vector<KbArticle> articles)
{
  Corpus c;
  for (auto& a : articles) {
    if (a.sections.empty()) throw DataError("article '" + a.article_id + "' has no sections");
    const std::string id = a.article_id;
    for (const auto& im : a.images) {
      if (!c.image_to_article_.emplace(im.image_id, id).second) {
        throw DataError("duplicate image_id '" + im.image_id + "'");
      }
    }
    c.stats_.n_sections += a.sections.size();
    c.stats_.n_images += a.images.size();
    if (!c.articles_.emplace(id, std::move(a)).second) throw DataError("duplicate article_id '" + id + "'");
  }
  c.stats_.n_articles = c.articles_.size();
  return c;
}

const KbArticle* Corpus::find(const std::string& article_id) const
{
  auto it = articles_.find(article_id);
  return it == articles_.end() ? nullptr : &it->second;
}

const SectionChunk* Corpus::find_section(const std::string& article_id, const std::string& section_id) const
{
  const auto* a = find(article_id);
  if (!a) return nullptr;
  for (const auto& s : a->sections) {
    if (s.section_id == section_id) return &s;
  }
  return nullptr;
}

std::set<std::string> Corpus::ids() const
{
  std::set<std::string> out;
  for (const auto& [id, _] : articles_) out.insert(id);
  return out;
}

Corpus load_corpus(const std::filesystem::path& path)
{
  std::vector<LoadIssue> issues;
  auto parsed = parse_lines(path, issues);
  if (!issues.empty()) {
    std::ostringstream msg;
    msg << issues.size() << " problem(s) in corpus";
    for (const auto& issue : issues) msg << "\n  " << path.string() << ":" << issue.line << ": " << issue.message;
    throw DataError(msg.str(), path.string(), issues.front().line);
  }
  std::vector<KbArticle> articles;
  articles.reserve(parsed.size());
  for (auto& p : parsed) articles.push_back(std::move(p.article));
  return Corpus::from_articles(std::move(articles));
}

std::vector<LoadIssue> lint_corpus(const std::filesystem::path& path)
{
  std::vector<LoadIssue> issues;
  parse_lines(path, issues);
  return issues;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path)
{
  std::string out;
  for (const auto& [id, article] : corpus.articles()) {
    out += nlohmann::json(article).dump();
    out += '\n';
  }
  jsonl::write_file_atomic(path, out);
}

Corpus subsample_corpus(const Corpus& corpus, std::size_t n, std::uint64_t seed,
                        const std::set<std::string>& must_include)
{
  if (n > corpus.stats().n_articles) {
    throw UsageError("subsample size " + std::to_string(n) + " exceeds corpus size " +
                     std::to_string(corpus.stats().n_articles));
  }
  if (n < must_include.size()) {
    throw UsageError("subsample size " + std::to_string(n) + " is smaller than the " +
                     std::to_string(must_include.size()) + " required articles");
  }
  for (const auto& id : must_include) {
    if (!corpus.find(id)) throw UsageError("required article '" + id + "' is not in the corpus");
  }

  std::vector<std::string> candidates;
  for (const auto& [id, _] : corpus.articles()) {
    if (!must_include.count(id)) candidates.push_back(id);
  }
  Rng rng(seed);
  const std::size_t extra = n - must_include.size();
  partial_shuffle(candidates, extra, rng);

  std::vector<KbArticle> picked;
  picked.reserve(n);
  for (const auto& id : must_include) picked.push_back(*corpus.find(id));
  for (std::size_t i = 0; i < extra; ++i) picked.push_back(*corpus.find(candidates[i]));
  return Corpus::from_articles(std::move(picked));
}

}  // namespace dbagent::kb
