#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "autobot/error.hpp"
#include "autobot/groups.hpp"

namespace autobot {

/// Gate values per pruning group (index = group index - 1).
using GateValues = std::vector<std::vector<float>>;

/// Binary keep/prune decision per channel of every pruning group.
struct PruningMask {
  std::vector<std::vector<bool>> keep;

  static PruningMask all_ones(const std::vector<PruningGroup>& groups) {
    PruningMask m;
    for (const auto& g : groups) m.keep.emplace_back(g.channels, true);
    return m;
  }

  std::size_t kept(std::size_t group_pos) const {
    const auto& k = keep.at(group_pos);
    return static_cast<std::size_t>(std::count(k.begin(), k.end(), true));
  }

  std::size_t total_kept() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) n += kept(i);
    return n;
  }

  /// Exact 0/1 gates.
  GateValues as_gates() const {
    GateValues out;
    for (const auto& k : keep) {
      std::vector<float> v(k.size());
      for (std::size_t i = 0; i < k.size(); ++i) v[i] = k[i] ? 1.0f : 0.0f;
      out.push_back(std::move(v));
    }
    return out;
  }

  /// Throws unless the mask matches `groups` and keeps at least one channel
  /// per group.
  void check(const std::vector<PruningGroup>& groups) const {
    if (keep.size() != groups.size()) {
      throw ValueError("mask: " + std::to_string(keep.size()) + " groups, model has " +
                       std::to_string(groups.size()));
    }
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (keep[i].size() != groups[i].channels) {
        throw ValueError("mask: group " + std::to_string(i + 1) + " has " +
                         std::to_string(keep[i].size()) + " entries, expected " +
                         std::to_string(groups[i].channels));
      }
      if (kept(i) == 0) throw ValueError("mask: group " + std::to_string(i + 1) + " keeps no channel");
    }
  }

  nlohmann::json groups_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < keep.size(); ++i) {
      arr.push_back({{"index", i + 1}, {"keep", keep[i]}});
    }
    return arr;
  }

  static PruningMask from_groups_json(const nlohmann::json& arr) {
    PruningMask m;
    try {
      for (const auto& g : arr) {
        const auto index = g.at("index").get<std::size_t>();
        if (index != m.keep.size() + 1) throw ValueError("mask json: group indices must be 1..L in order");
        m.keep.push_back(g.at("keep").get<std::vector<bool>>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("mask json: ") + e.what());
    }
    return m;
  }

  friend bool operator==(const PruningMask&, const PruningMask&) = default;
};

}  // namespace autobot
