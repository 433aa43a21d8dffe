#include "deprl/rng.hpp"

#include <algorithm>
#include <numeric>

namespace deprl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t worker, std::uint64_t round,
                          std::uint64_t phase) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ worker);
  h = splitmix64(h ^ round);
  h = splitmix64(h ^ phase);
  return h;
}

std::vector<std::ptrdiff_t> sample_without_replacement(std::ptrdiff_t population,
                                                       std::ptrdiff_t count, Rng& rng) {
  std::vector<std::ptrdiff_t> idx(static_cast<std::size_t>(population));
  std::iota(idx.begin(), idx.end(), 0);
  if (count >= population) return idx;
  // Partial Fisher-Yates.
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::ptrdiff_t> pick(i, population - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace deprl
