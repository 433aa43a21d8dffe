#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace deprl {

using Rng = std::mt19937_64;

// Named phases for substream derivation. Head steps use their step index
// directly (0..tau-1), so named phases start well above any realistic tau.
enum class Phase : std::uint64_t {
  kRepresentationStep = 1ull << 32,
  kDpsgdStep,
  kInitRepresentation,
  kInitHead,
  kGeneralizeStep,
  kGeneralizeInit,
  kTopology,
  kData,
  kPartition,
  kProbe,
};

// Counter-based seed split: hashes (master, worker, round, phase) with
// SplitMix64 finalizers. Independent of call order, so adding workers or
// changing thread counts never shifts anybody else's draws.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t worker, std::uint64_t round,
                          std::uint64_t phase);

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t worker, std::uint64_t round,
                                 Phase phase) {
  return derive_seed(master, worker, round, static_cast<std::uint64_t>(phase));
}

template <typename PhaseT>
Rng substream(std::uint64_t master, std::uint64_t worker, std::uint64_t round, PhaseT phase) {
  return Rng(derive_seed(master, worker, round, phase));
}

// Sorted sample of `count` distinct indices from [0, population). When
// count >= population every index is returned in order.
std::vector<std::ptrdiff_t> sample_without_replacement(std::ptrdiff_t population,
                                                       std::ptrdiff_t count, Rng& rng);

}  // namespace deprl
