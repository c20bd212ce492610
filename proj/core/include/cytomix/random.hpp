#pragma once

#include <cstdint>
#include <random>

namespace cytomix {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a master seed.
///
/// Stream k is seeded with two rounds of the SplitMix64 finalizer applied to
/// (master, k), so adding streams never changes the seeds of existing ones.
std::uint64_t split_seed(std::uint64_t master, std::uint64_t stream);

inline Rng make_rng(std::uint64_t master, std::uint64_t stream) {
  return Rng{split_seed(master, stream)};
}

}  // namespace cytomix
