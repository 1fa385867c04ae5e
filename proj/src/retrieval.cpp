#include "dbagent/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "dbagent/error.hpp"
#include "dbagent/jsonl.hpp"

namespace dbagent::retrieval {

namespace {

constexpr std::string_view kMagic = "DBAGENT-INDEX";

bool entry_less(const IndexEntry& a, const IndexEntry& b)
{
  if (a.article_id != b.article_id) return a.article_id < b.article_id;
  return a.item_id < b.item_id;
}

struct Pending
{
  std::string article_id;
  std::string item_id;
  std::string input;
};

VectorIndex build(const std::vector<Pending>& pending, const Embedder& embedder, Modality modality,
                  std::size_t batch_size, const char* item_label)
{
  if (embedder.modality() != modality) {
    throw UsageError(std::string("building a ") + std::string(to_string(modality)) + " index needs a " +
                     std::string(to_string(modality)) + " embedder");
  }
  if (batch_size == 0) batch_size = 64;
  std::vector<IndexEntry> entries;
  entries.reserve(pending.size());
  for (std::size_t start = 0; start < pending.size(); start += batch_size) {
    const auto count = std::min(batch_size, pending.size() - start);
    std::vector<std::string> inputs;
    for (std::size_t i = start; i < start + count; ++i) inputs.push_back(pending[i].input);
    std::vector<Vector> vectors;
    try {
      vectors = embedder.embed_batch(inputs);
    } catch (const Error& batch_error) {
      // Find which item the batch failed on; fall back to the batch range.
      for (std::size_t i = start; i < start + count; ++i) {
        try {
          (void)embedder.embed(pending[i].input);
        } catch (const Error& e) {
          throw BackendError("embedding failed for article '" + pending[i].article_id + "' " + item_label + " '" +
                                 pending[i].item_id + "': " + e.what(),
                             false);
        }
      }
      throw BackendError("embedding failed for articles '" + pending[start].article_id + "'..'" +
                             pending[start + count - 1].article_id + "': " + batch_error.what(),
                         false);
    }
    for (std::size_t i = 0; i < count; ++i) {
      entries.push_back({pending[start + i].article_id, pending[start + i].item_id, std::move(vectors[i])});
    }
  }
  return VectorIndex(modality, embedder.dimension(), std::move(entries));
}

void write_u32(std::string& out, std::uint32_t v)
{
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t read_u32(const std::string& in, std::size_t& pos)
{
  if (pos + 4 > in.size()) throw DataError("truncated index file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

void write_string(std::string& out, const std::string& s)
{
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

std::string read_string(const std::string& in, std::size_t& pos)
{
  const auto n = read_u32(in, pos);
  if (pos + n > in.size()) throw DataError("truncated index file");
  std::string s = in.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace

VectorIndex::VectorIndex(Modality modality, std::size_t dimension, std::vector<IndexEntry> entries)
  : modality_(modality), dimension_(dimension), entries_(std::move(entries))
{
  for (const auto& e : entries_) {
    if (e.vector.size() != dimension_) {
      throw DataError("index entry '" + e.article_id + "/" + e.item_id + "' has dimension " +
                      std::to_string(e.vector.size()) + ", expected " + std::to_string(dimension_));
    }
  }
  std::sort(entries_.begin(), entries_.end(), entry_less);
}

double VectorIndex::score(const Vector& query, std::size_t entry) const
{
  const auto& v = entries_[entry].vector;
  double dot = 0.0;
  for (std::size_t i = 0; i < dimension_; ++i) dot += static_cast<double>(query[i]) * static_cast<double>(v[i]);
  return std::clamp(dot, -1.0, 1.0);
}

VectorIndex build_text_index(const kb::Corpus& corpus, const Embedder& embedder, std::size_t batch_size)
{
  std::vector<Pending> pending;
  for (const auto& [id, article] : corpus.articles()) {
    for (const auto& section : article.sections) pending.push_back({id, section.section_id, section.text});
  }
  return build(pending, embedder, Modality::Text, batch_size, "section");
}

VectorIndex build_image_index(const kb::Corpus& corpus, const Embedder& embedder, std::size_t batch_size)
{
  std::vector<Pending> pending;
  for (const auto& [id, article] : corpus.articles()) {
    for (const auto& image : article.images) pending.push_back({id, image.image_id, image.uri});
  }
  return build(pending, embedder, Modality::Image, batch_size, "image");
}

std::vector<RetrievalHit> search_vector(const VectorIndex& index, const Vector& query, std::size_t k)
{
  if (query.size() != index.dimension() && index.size() > 0) {
    throw UsageError("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                     std::to_string(index.dimension()));
  }
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) scored.emplace_back(index.score(query, i), i);
  const auto better = [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };
  const auto take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);

  const bool text = index.modality() == Modality::Text;
  std::vector<RetrievalHit> hits;
  hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const auto& e = index.entries()[scored[i].second];
    RetrievalHit hit;
    hit.article_id = e.article_id;
    if (text) {
      hit.section_id = e.item_id;
    } else {
      hit.image_id = e.item_id;
    }
    hit.score = scored[i].first;
    hit.rank = static_cast<int>(i) + 1;
    hits.push_back(std::move(hit));
  }
  return hits;
}

std::vector<RetrievalHit> text_search(const VectorIndex& index, const Embedder& embedder, const std::string& query,
                                      int k)
{
  if (k < 1) throw UsageError("text_search needs k >= 1");
  if (index.modality() != Modality::Text) throw UsageError("text_search needs a text index");
  if (index.size() > 0 && embedder.dimension() != index.dimension()) {
    throw UsageError("embedder dimension " + std::to_string(embedder.dimension()) + " does not match index dimension " +
                     std::to_string(index.dimension()));
  }
  if (query.empty()) throw UsageError("text_search query is empty");
  const auto q = embedder.embed(query);
  return search_vector(index, q, static_cast<std::size_t>(k));
}

std::vector<RetrievalHit> image_search(const VectorIndex& index, const Embedder& embedder,
                                       const std::string& image_ref, int k)
{
  if (k < 1) throw UsageError("image_search needs k >= 1");
  if (index.modality() != Modality::Image) throw UsageError("image_search needs an image index");
  if (image_ref.empty()) throw UsageError("image reference is empty");
  if (index.size() > 0 && embedder.dimension() != index.dimension()) {
    throw UsageError("embedder dimension " + std::to_string(embedder.dimension()) + " does not match index dimension " +
                     std::to_string(index.dimension()));
  }
  Vector q;
  try {
    q = embedder.embed(image_ref);
  } catch (const BackendError& e) {
    throw BackendError("cannot embed image '" + image_ref + "': " + e.what(), e.retriable(), e.attempts());
  }
  // Full ranking so dedup can reach past duplicate images of one article.
  auto ranked = search_vector(index, q, index.size());
  std::vector<RetrievalHit> hits;
  std::set<std::string> seen;
  for (auto& hit : ranked) {
    if (!seen.insert(hit.article_id).second) continue;
    hit.rank = static_cast<int>(hits.size()) + 1;
    hits.push_back(std::move(hit));
    if (hits.size() == static_cast<std::size_t>(k)) break;
  }
  return hits;
}

void save_index(const VectorIndex& index, const std::filesystem::path& path)
{
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  nlohmann::json header{{"format_version", kIndexFormatVersion},
                        {"dimension", index.dimension()},
                        {"count", index.size()},
                        {"modality", to_string(index.modality())}};
  std::string out(kMagic);
  out += '\n';
  out += header.dump();
  out += '\n';
  for (const auto& e : index.entries()) {
    write_string(out, e.article_id);
    write_string(out, e.item_id);
    for (float f : e.vector) write_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  jsonl::write_file_atomic(path, out);
}

VectorIndex load_index(const std::filesystem::path& path, std::optional<std::size_t> expected_dimension,
                       std::optional<Modality> expected_modality)
{
  const auto data = jsonl::read_file(path);
  const auto where = path.string();
  const auto magic_end = data.find('\n');
  if (magic_end == std::string::npos || std::string_view(data).substr(0, magic_end) != kMagic) {
    throw DataError(where + ": not an index file");
  }
  const auto header_end = data.find('\n', magic_end + 1);
  if (header_end == std::string::npos) throw DataError(where + ": missing index header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(magic_end + 1, header_end - magic_end - 1));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": bad index header: " + e.what());
  }
  std::size_t dimension = 0;
  std::size_t count = 0;
  Modality modality = Modality::Text;
  try {
    if (header.at("format_version").get<int>() != kIndexFormatVersion) {
      throw DataError(where + ": unsupported index format_version " + header["format_version"].dump());
    }
    dimension = header.at("dimension").get<std::size_t>();
    count = header.at("count").get<std::size_t>();
    modality = modality_from_string(header.at("modality").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": bad index header: " + e.what());
  }
  if (expected_dimension && *expected_dimension != dimension) {
    throw DataError(where + ": index dimension " + std::to_string(dimension) + " does not match expected " +
                    std::to_string(*expected_dimension));
  }
  if (expected_modality && *expected_modality != modality) {
    throw DataError(where + ": index modality is " + std::string(to_string(modality)) + ", expected " +
                    std::string(to_string(*expected_modality)));
  }
  std::vector<IndexEntry> entries;
  entries.reserve(count);
  std::size_t pos = header_end + 1;
  try {
    for (std::size_t i = 0; i < count; ++i) {
      IndexEntry e;
      e.article_id = read_string(data, pos);
      e.item_id = read_string(data, pos);
      e.vector.resize(dimension);
      for (auto& f : e.vector) f = std::bit_cast<float>(read_u32(data, pos));
      entries.push_back(std::move(e));
    }
  } catch (const DataError& e) {
    throw DataError(where + ": " + e.what());
  }
  if (pos != data.size()) throw DataError(where + ": trailing bytes after " + std::to_string(count) + " entries");
  return VectorIndex(modality, dimension, std::move(entries));
}

}  // namespace dbagent::retrieval
