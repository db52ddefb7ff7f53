#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace lesion {

/// Uniform integer in [0, bound) from a 64-bit engine by rejection sampling.
/// Unlike std::uniform_int_distribution the result sequence is the same on
/// every standard library, which keeps persisted plans portable.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound);

/// Fisher-Yates shuffle driven by bounded_draw.
template <typename T>
void portable_shuffle(std::span<T> items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(bounded_draw(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace lesion
