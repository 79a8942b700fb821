#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mvae {

using Rng = std::mt19937_64;

// Child seed for a named random substream.
//
// derive_seed(root, purpose, index) =
//   splitmix64(root ^ splitmix64(fnv1a64(purpose) ^ splitmix64(index)))
//
// Every stochastic step (mask placement, MNAR assignment, weight init,
// shuffling, posterior noise) draws from its own substream, so results do not
// depend on the order in which independent pieces of work are executed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose,
                          std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view purpose,
                    std::uint64_t index = 0) {
  return Rng{derive_seed(root, purpose, index)};
}

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace mvae
