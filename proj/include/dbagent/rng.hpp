#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

#include "dbagent/text.hpp"

namespace dbagent {

/// Portable seeded generator. std::mt19937_64 has a fully specified output
/// sequence; the standard distributions do not, so bounded draws are done here.
class Rng
{
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound)
  {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % bound;
  }

private:
  std::mt19937_64 engine_;
};

/// Derives an independent seed for a named consumer of the run seed.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name)
{
  std::uint64_t h = text::fnv1a64(name);
  h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  // splitmix64 finalizer
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

/// Moves a uniformly drawn k-subset to the front of `items` (partial
/// Fisher-Yates). Prefixes are nested: the first j draws for j < k are the
/// same for the same seed.
template <class T>
void partial_shuffle(std::vector<T>& items, std::size_t k, Rng& rng)
{
  const std::size_t n = items.size();
  for (std::size_t i = 0; i < k && i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(items[i], items[j]);
  }
}

}  // namespace dbagent
