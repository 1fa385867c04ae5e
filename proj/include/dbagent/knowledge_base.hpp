#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace dbagent::kb {

struct SectionChunk
{
  std::string section_id;
  std::string heading;
  std::string text;

  bool operator==(const SectionChunk&) const = default;
};

struct ImageAttachment
{
  std::string image_id;
  std::string uri;
  std::optional<std::string> caption;

  bool operator==(const ImageAttachment&) const = default;
};

struct KbArticle
{
  std::string article_id;
  std::string title;
  std::optional<std::string> url;
  std::vector<SectionChunk> sections;
  std::vector<ImageAttachment> images;

  bool operator==(const KbArticle&) const = default;
};

struct CorpusStats
{
  std::size_t n_articles = 0;
  std::size_t n_sections = 0;
  std::size_t n_images = 0;

  bool operator==(const CorpusStats&) const = default;
};

/// Immutable after construction. Articles are keyed (and iterated) by id, so
/// the value does not depend on input line order.
class Corpus
{
public:
  Corpus() = default;

  /// Validates uniqueness and non-emptiness; throws DataError.
  static Corpus from_articles(std::vector<KbArticle> articles);

  const std::map<std::string, KbArticle>& articles() const { return articles_; }
  const std::map<std::string, std::string>& image_to_article() const { return image_to_article_; }
  const CorpusStats& stats() const { return stats_; }

  const KbArticle* find(const std::string& article_id) const;
  const SectionChunk* find_section(const std::string& article_id, const std::string& section_id) const;
  std::set<std::string> ids() const;

  bool operator==(const Corpus&) const = default;

private:
  std::map<std::string, KbArticle> articles_;
  std::map<std::string, std::string> image_to_article_;
  CorpusStats stats_;
};

struct LoadIssue
{
  std::size_t line = 0;
  std::string message;
};

/// Reads a JSON Lines corpus. Every schema problem is collected (with its
/// line number) and reported together in one DataError.
Corpus load_corpus(const std::filesystem::path& path);

/// Same checks as load_corpus, returning the issues instead of throwing.
std::vector<LoadIssue> lint_corpus(const std::filesystem::path& path);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

/// Keeps every id in must_include and draws the rest uniformly without
/// replacement. For a fixed seed and must_include, results for smaller n are
/// subsets of results for larger n.
Corpus subsample_corpus(const Corpus& corpus, std::size_t n, std::uint64_t seed,
                        const std::set<std::string>& must_include);

void to_json(nlohmann::json& j, const KbArticle& article);
/// Throws std::invalid_argument describing the first schema problem.
KbArticle article_from_json(const nlohmann::json& j);

}  // namespace dbagent::kb
