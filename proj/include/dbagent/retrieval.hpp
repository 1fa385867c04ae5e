#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dbagent/embedding.hpp"
#include "dbagent/knowledge_base.hpp"

namespace dbagent::retrieval {

inline constexpr int kDefaultTextTopK = 3;
inline constexpr int kDefaultImageTopK = 1;
inline constexpr int kIndexFormatVersion = 1;

struct IndexEntry
{
  std::string article_id;
  /// section_id in a text index, image_id in an image index.
  std::string item_id;
  Vector vector;

  bool operator==(const IndexEntry&) const = default;
};

/// Flat exact index. Entries are kept sorted by (article_id, item_id), which
/// is also the tie-break order for equal scores.
class VectorIndex
{
public:
  VectorIndex() = default;
  VectorIndex(Modality modality, std::size_t dimension, std::vector<IndexEntry> entries);

  Modality modality() const { return modality_; }
  std::size_t dimension() const { return dimension_; }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Cosine (dot product of unit vectors), clamped to [-1, 1].
  double score(const Vector& query, std::size_t entry) const;

  bool operator==(const VectorIndex&) const = default;

private:
  Modality modality_ = Modality::Text;
  std::size_t dimension_ = 0;
  std::vector<IndexEntry> entries_;
};

struct RetrievalHit
{
  std::string article_id;
  std::optional<std::string> section_id;
  std::optional<std::string> image_id;
  double score = 0.0;
  int rank = 0;

  bool operator==(const RetrievalHit&) const = default;
};

/// One entry per section, embedding the section text. An embedding failure is
/// rethrown naming the (article, section) that caused it.
VectorIndex build_text_index(const kb::Corpus& corpus, const Embedder& embedder, std::size_t batch_size = 64);

/// One entry per image attachment, embedding its uri.
VectorIndex build_image_index(const kb::Corpus& corpus, const Embedder& embedder, std::size_t batch_size = 64);

std::vector<RetrievalHit> text_search(const VectorIndex& index, const Embedder& embedder, const std::string& query,
                                      int k = kDefaultTextTopK);

/// Ranks images, then collapses hits to distinct articles keeping each
/// article's best image, returning up to k articles.
std::vector<RetrievalHit> image_search(const VectorIndex& index, const Embedder& embedder,
                                       const std::string& image_ref, int k = kDefaultImageTopK);

/// Top-k by score over a precomputed query vector (no dedup).
std::vector<RetrievalHit> search_vector(const VectorIndex& index, const Vector& query, std::size_t k);

void save_index(const VectorIndex& index, const std::filesystem::path& path);

/// Throws DataError on a malformed file, or when expected_dimension /
/// expected_modality are given and do not match the header.
VectorIndex load_index(const std::filesystem::path& path, std::optional<std::size_t> expected_dimension = {},
                       std::optional<Modality> expected_modality = {});

}  // namespace dbagent::retrieval
