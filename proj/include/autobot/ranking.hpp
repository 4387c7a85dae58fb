#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/mask.hpp"

namespace autobot {

/// Global channel order by decreasing gate value (ties: lower flat index
/// first). Channels are numbered by concatenating the groups.
inline std::vector<std::size_t> channel_ranking(const GateValues& gates) {
  std::vector<float> flat;
  for (const auto& g : gates) flat.insert(flat.end(), g.begin(), g.end());
  std::vector<std::size_t> order(flat.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return flat[a] > flat[b]; });
  return order;
}

/// Normalized Kendall tau distance between two rankings of the same items:
/// discordant pairs / (n (n - 1) / 2).
inline double kendall_tau_distance(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) throw ValueError("kendall_tau_distance: rankings have different lengths");
  const std::size_t n = a.size();
  if (n < 2) throw ValueError("kendall_tau_distance: need at least two items");
  std::vector<std::size_t> pos_a(n, n), pos_b(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] >= n || pos_a[a[i]] != n || b[i] >= n || pos_b[b[i]] != n) {
      throw ValueError("kendall_tau_distance: inputs must be permutations of 0..n-1");
    }
    pos_a[a[i]] = i;
    pos_b[b[i]] = i;
  }
  std::size_t discordant = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if ((pos_a[i] < pos_a[j]) != (pos_b[i] < pos_b[j])) ++discordant;
    }
  }
  return double(discordant) / (double(n) * double(n - 1) / 2.0);
}

}  // namespace autobot
