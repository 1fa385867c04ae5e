#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dbagent/http.hpp"
#include "json.hpp"

namespace dbagent::retrieval {

enum class Modality { Text, Image };

std::string_view to_string(Modality modality);
Modality modality_from_string(std::string_view name);

using Vector = std::vector<float>;

/// Scales v to unit L2 norm in double precision. Throws BackendError on a
/// zero or non-finite vector.
void normalize(Vector& v);

class Embedder
{
public:
  virtual ~Embedder() = default;

  virtual std::string_view kind() const = 0;
  virtual std::size_t dimension() const = 0;
  virtual Modality modality() const = 0;
  virtual nlohmann::json describe() const = 0;

  /// Embeds inputs in order. Inputs must be non-empty strings; the result has
  /// one unit-normalized vector of length dimension() per input.
  std::vector<Vector> embed_batch(std::span<const std::string> inputs) const;
  Vector embed(const std::string& input) const;

protected:
  virtual std::vector<Vector> embed_raw(std::span<const std::string> inputs) const = 0;
};

/// Feature hashing of lowercase character trigrams (input padded with one
/// space on each side) into `dimension` buckets. Counts are non-negative, so
/// every non-empty input maps to a non-zero vector.
class HashingEmbedder final : public Embedder
{
public:
  explicit HashingEmbedder(std::size_t dimension = 64, Modality modality = Modality::Text, std::uint64_t seed = 0);

  std::string_view kind() const override { return "deterministic_test"; }
  std::size_t dimension() const override { return dimension_; }
  Modality modality() const override { return modality_; }
  nlohmann::json describe() const override;

protected:
  std::vector<Vector> embed_raw(std::span<const std::string> inputs) const override;

private:
  std::size_t dimension_;
  Modality modality_;
  std::uint64_t seed_;
};

/// POST {base}/embed {"modality", "inputs"} -> {"vectors"}.
class RemoteEmbedder final : public Embedder
{
public:
  RemoteEmbedder(http::Endpoint endpoint, std::size_t dimension, Modality modality, std::size_t batch_size = 64);

  std::string_view kind() const override { return "remote_http"; }
  std::size_t dimension() const override { return dimension_; }
  Modality modality() const override { return modality_; }
  nlohmann::json describe() const override;

protected:
  std::vector<Vector> embed_raw(std::span<const std::string> inputs) const override;

private:
  http::Endpoint endpoint_;
  std::size_t dimension_;
  Modality modality_;
  std::size_t batch_size_;
};

}  // namespace dbagent::retrieval
