#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"
#include "dbagent/retrieval.hpp"
#include "synth.hpp"

using namespace dbagent;
using namespace dbagent::retrieval;
namespace dt = dbagent::testing;

namespace {

// Independent reference: FNV-1a written out here, trigram counts, normalize in
// double precision.
std::uint64_t ref_fnv(const std::string& s, std::uint64_t h)
{
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<double> ref_embed(const std::string& input, std::size_t dim, std::uint64_t seed)
{
  const auto basis = ref_fnv(std::to_string(seed), 14695981039346656037ULL);
  std::string padded = " ";
  for (unsigned char c : input) padded += static_cast<char>(std::tolower(c));
  padded += " ";
  std::vector<double> v(dim, 0.0);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) v[ref_fnv(padded.substr(i, 3), basis) % dim] += 1.0;
  double norm = 0;
  for (double x : v) norm += x * x;
  for (double& x : v) x /= std::sqrt(norm);
  return v;
}

double norm_of(const Vector& v)
{
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Embedding, HashingEmbedderMatchesReference)
{
  const std::vector<std::string> inputs{"a", "Eiffel Tower", "EIFFEL tower", "Zürich 1848", "   ", "image_path"};
  for (std::uint64_t seed : {0, 3}) {
    HashingEmbedder e(64, Modality::Text, seed);
    for (const auto& in : inputs) {
      const auto got = e.embed(in);
      const auto want = ref_embed(in, 64, seed);
      ASSERT_EQ(got.size(), 64u);
      for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << in << " [" << i << "]";
    }
  }
  EXPECT_EQ(HashingEmbedder().embed("Eiffel Tower"), HashingEmbedder().embed("eiffel tower"));
  EXPECT_NE(HashingEmbedder(64, Modality::Text, 0).embed("x y z"), HashingEmbedder(64, Modality::Text, 1).embed("x y z"));
}

TEST(Embedding, OutputsAreUnitNormAndBatchInvariant)
{
  HashingEmbedder e(32);
  std::mt19937_64 rng(3);
  std::vector<std::string> inputs;
  for (int i = 0; i < 200; ++i) {
    std::string s(1 + rng() % 40, ' ');
    for (auto& c : s) c = static_cast<char>('a' + rng() % 26);
    inputs.push_back(s);
  }
  const auto batch = e.embed_batch(inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    EXPECT_NEAR(norm_of(batch[i]), 1.0, 1e-6);
    EXPECT_EQ(batch[i], e.embed(inputs[i]));
  }
}

TEST(Embedding, RejectsEmptyInputsAndZeroDimension)
{
  HashingEmbedder e;
  EXPECT_THROW(e.embed(""), Error);
  EXPECT_THROW(HashingEmbedder(0), UsageError);
  Vector zero(4, 0.0f);
  EXPECT_THROW(normalize(zero), BackendError);
}

TEST(Retrieval, TopKMatchesBruteForceWithTieBreak)
{
  auto world = dt::make_world({.n_articles = 60, .duplicate_every = 5});
  const auto& idx = world->text_index;
  std::mt19937_64 rng(9);
  std::size_t ties = 0;
  for (int q = 0; q < 100; ++q) {
    const auto i = rng() % 60;
    const std::string query = q % 2 ? dt::title_of(i) : dt::section_text(world->corpus, i, rng() % 3);
    const auto qv = ref_embed(query, 64, 0);
    struct Row
    {
      double score;
      std::string article, item;
    };
    std::vector<Row> rows;
    for (const auto& e : idx.entries()) {
      double dot = 0;
      for (std::size_t d = 0; d < 64; ++d) dot += qv[d] * e.vector[d];
      rows.push_back({std::clamp(dot, -1.0, 1.0), e.article_id, e.item_id});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (std::abs(a.score - b.score) > 1e-9) return a.score > b.score;
      return std::tie(a.article, a.item) < std::tie(b.article, b.item);
    });
    const auto hits = text_search(idx, world->text_embedder, query, 5);
    ASSERT_EQ(hits.size(), 5u);
    for (std::size_t r = 0; r < 5; ++r) {
      EXPECT_EQ(hits[r].article_id, rows[r].article);
      EXPECT_EQ(hits[r].section_id, rows[r].item);
      EXPECT_NEAR(hits[r].score, rows[r].score, 1e-5);
      EXPECT_EQ(hits[r].rank, static_cast<int>(r + 1));
      if (r > 0 && hits[r].score == hits[r - 1].score) ++ties;
    }
  }
  EXPECT_GT(ties, 0u) << "fixture should exercise the tie-break";
}

TEST(Retrieval, KLargerThanIndexReturnsEverything)
{
  auto world = dt::make_world({.n_articles = 3});
  EXPECT_EQ(text_search(world->text_index, world->text_embedder, "Landmark", 100).size(), world->text_index.size());
  EXPECT_THROW(text_search(world->text_index, world->text_embedder, "Landmark", 0), UsageError);
}

TEST(Retrieval, ImageSearchCollapsesToDistinctArticles)
{
  auto world = dt::make_world({.n_articles = 40, .extra_image_every = 2});
  for (std::size_t i = 0; i < 40; ++i) {
    const auto hits = image_search(world->image_index, world->image_embedder, dt::image_of(i), 5);
    ASSERT_EQ(hits.size(), 5u);
    std::set<std::string> articles;
    for (const auto& h : hits) {
      EXPECT_TRUE(articles.insert(h.article_id).second);
      EXPECT_TRUE(h.image_id.has_value());
      EXPECT_FALSE(h.section_id.has_value());
    }
    EXPECT_EQ(hits.front().article_id, dt::article_id(i));
    EXPECT_NEAR(hits.front().score, 1.0, 1e-6);
    for (std::size_t r = 1; r < hits.size(); ++r) EXPECT_GE(hits[r - 1].score, hits[r].score);
  }
}

TEST(Retrieval, IndexBuildCoversEverySectionAndImage)
{
  auto world = dt::make_world({.n_articles = 25, .extra_image_every = 3});
  EXPECT_EQ(world->text_index.size(), world->corpus.stats().n_sections);
  EXPECT_EQ(world->image_index.size(), world->corpus.stats().n_images);
  const auto& e = world->text_index.entries();
  EXPECT_TRUE(std::is_sorted(e.begin(), e.end(), [](const IndexEntry& a, const IndexEntry& b) {
    return std::tie(a.article_id, a.item_id) < std::tie(b.article_id, b.item_id);
  }));
}

TEST(Retrieval, SaveLoadRoundTripIsBitExact)
{
  auto world = dt::make_world({.n_articles = 20});
  dt::TempDir dir("idx");
  save_index(world->text_index, dir / "t.idx");
  const auto loaded = load_index(dir / "t.idx", 64, Modality::Text);
  EXPECT_EQ(loaded, world->text_index);
  EXPECT_THROW(load_index(dir / "t.idx", 32), DataError);
  EXPECT_THROW(load_index(dir / "t.idx", std::nullopt, Modality::Image), DataError);
}

TEST(Retrieval, CorruptIndexFilesAreDataErrors)
{
  auto world = dt::make_world({.n_articles = 5});
  dt::TempDir dir("idx");
  save_index(world->text_index, dir / "t.idx");
  const auto good = dt::slurp(dir / "t.idx");

  jsonl::write_file_atomic(dir / "trunc.idx", good.substr(0, good.size() - 3));
  EXPECT_THROW(load_index(dir / "trunc.idx"), DataError);
  jsonl::write_file_atomic(dir / "extra.idx", good + "x");
  EXPECT_THROW(load_index(dir / "extra.idx"), DataError);
  jsonl::write_file_atomic(dir / "magic.idx", "XX" + good.substr(2));
  EXPECT_THROW(load_index(dir / "magic.idx"), DataError);
  auto header = good;
  header.replace(header.find("\"format_version\":1"), 18, "\"format_version\":9");
  jsonl::write_file_atomic(dir / "ver.idx", header);
  EXPECT_THROW(load_index(dir / "ver.idx"), DataError);
  EXPECT_THROW(load_index(dir / "absent.idx"), DataError);
}

TEST(Retrieval, DimensionMismatchIsRejectedAtQueryTime)
{
  auto world = dt::make_world({.n_articles = 5});
  HashingEmbedder other(32);
  EXPECT_THROW(text_search(world->text_index, other, "Landmark"), Error);
}
