#include "dbagent/embedding.hpp"

#include <cctype>
#include <cmath>

#include "dbagent/error.hpp"
#include "dbagent/text.hpp"

namespace dbagent::retrieval {

std::string_view to_string(Modality modality)
{
  return modality == Modality::Text ? "text" : "image";
}

Modality modality_from_string(std::string_view name)
{
  if (name == "text") return Modality::Text;
  if (name == "image") return Modality::Image;
  throw DataError("unknown modality '" + std::string(name) + "'");
}

void normalize(Vector& v)
{
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw BackendError("embedding has zero or non-finite norm", false);
  for (auto& x : v) x = static_cast<float>(static_cast<double>(x) / norm);
}

std::vector<Vector> Embedder::embed_batch(std::span<const std::string> inputs) const
{
  if (inputs.empty()) throw UsageError("embed_batch needs at least one input");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].empty()) throw UsageError("embed_batch input " + std::to_string(i) + " is empty");
  }
  auto out = embed_raw(inputs);
  if (out.size() != inputs.size()) {
    throw BackendError("embedding count mismatch: expected " + std::to_string(inputs.size()) + " vectors, received " +
                           std::to_string(out.size()),
                       false);
  }
  for (auto& v : out) {
    if (v.size() != dimension()) {
      throw BackendError("embedding dimension mismatch: expected " + std::to_string(dimension()) + ", received " +
                             std::to_string(v.size()),
                         false);
    }
    normalize(v);
  }
  return out;
}

Vector Embedder::embed(const std::string& input) const
{
  return std::move(embed_batch(std::span<const std::string>(&input, 1)).front());
}

HashingEmbedder::HashingEmbedder(std::size_t dimension, Modality modality, std::uint64_t seed)
  : dimension_(dimension), modality_(modality), seed_(seed)
{
  if (dimension_ == 0) throw UsageError("embedding dimension must be positive");
}

nlohmann::json HashingEmbedder::describe() const
{
  return {{"kind", kind()}, {"dimension", dimension_}, {"modality", to_string(modality_)}, {"seed", seed_}};
}

std::vector<Vector> HashingEmbedder::embed_raw(std::span<const std::string> inputs) const
{
  const std::uint64_t basis = text::fnv1a64(std::to_string(seed_));
  std::vector<Vector> out;
  out.reserve(inputs.size());
  for (const auto& input : inputs) {
    std::string padded = " ";
    for (char c : input) padded.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    padded.push_back(' ');
    Vector v(dimension_, 0.0f);
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
      const auto h = text::fnv1a64(std::string_view(padded).substr(i, 3), basis);
      v[h % dimension_] += 1.0f;
    }
    out.push_back(std::move(v));
  }
  return out;
}

RemoteEmbedder::RemoteEmbedder(http::Endpoint endpoint, std::size_t dimension, Modality modality,
                               std::size_t batch_size)
  : endpoint_(std::move(endpoint)), dimension_(dimension), modality_(modality), batch_size_(batch_size)
{
  if (dimension_ == 0) throw UsageError("remote embedder needs an explicit dimension");
  if (batch_size_ == 0) batch_size_ = 64;
}

nlohmann::json RemoteEmbedder::describe() const
{
  return {{"kind", kind()},
          {"dimension", dimension_},
          {"modality", to_string(modality_)},
          {"url", endpoint_.base_url},
          {"batch_size", batch_size_}};
}

std::vector<Vector> RemoteEmbedder::embed_raw(std::span<const std::string> inputs) const
{
  std::vector<Vector> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch_size_) {
    const auto count = std::min(batch_size_, inputs.size() - start);
    nlohmann::json request{{"modality", to_string(modality_)},
                           {"inputs", std::vector<std::string>(inputs.begin() + start, inputs.begin() + start + count)}};
    auto reply = http::post_json(endpoint_, "/embed", request);
    if (!reply.is_object() || !reply.contains("vectors") || !reply["vectors"].is_array()) {
      throw BackendError("embedding response lacks a 'vectors' array", false);
    }
    const auto& vectors = reply["vectors"];
    if (vectors.size() != count) {
      throw BackendError("embedding count mismatch: expected " + std::to_string(count) + " vectors, received " +
                             std::to_string(vectors.size()),
                         false);
    }
    for (const auto& vec : vectors) {
      try {
        out.push_back(vec.get<Vector>());
      } catch (const nlohmann::json::exception&) {
        throw BackendError("embedding vector is not an array of numbers", false);
      }
    }
  }
  return out;
}

}  // namespace dbagent::retrieval
