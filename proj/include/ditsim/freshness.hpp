#pragma once

// Which diffusion step produced the K/V each attention reads.
//
// Stamps are timestep indices. Steps count down from T to 1, so the entry
// computed in the current step t carries stamp t and a stale one carries t+1.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace ditsim {

enum class StaleStrategy { pipefusion, distrifusion };

struct FreshKey {
  std::size_t t = 0;      // diffusion step
  std::size_t micro = 0;  // micro-step; the patch being computed (0 for warmup)
  std::size_t block = 0;
  std::size_t patch = 0;  // patch whose K/V is read
  auto operator<=>(const FreshKey&) const = default;
};

class FreshnessTable {
 public:
  /// Records a stamp; a conflicting second record for the same key throws.
  void record(const FreshKey& key, std::size_t stamp);
  std::size_t stamp(const FreshKey& key) const;
  bool contains(const FreshKey& key) const { return stamps_.count(key) != 0; }
  bool empty() const { return stamps_.empty(); }
  std::size_t size() const { return stamps_.size(); }
  const std::map<FreshKey, std::size_t>& entries() const { return stamps_; }

  /// Patches read fresh (stamp == t) at (t, micro, block), ascending.
  std::vector<std::size_t> fresh_patches(std::size_t t, std::size_t micro,
                                         std::size_t block) const;
  /// Micro-steps recorded for step t, ascending.
  std::vector<std::size_t> micro_steps(std::size_t t) const;

  bool operator==(const FreshnessTable&) const = default;

 private:
  std::map<FreshKey, std::size_t> stamps_;
};

struct StalenessQuery {
  StaleStrategy strategy = StaleStrategy::pipefusion;
  std::size_t devices = 1;   // N
  std::size_t patches = 1;   // M (DistriFusion: must equal N)
  std::size_t layers = 1;    // L
  std::size_t steps = 1;     // T
  std::size_t warmup = 1;
};

/// Discrete-event replay of the schedule with no numerics.
FreshnessTable staleness_oracle(const StalenessQuery& q);

/// Human-readable dump, one line per (t, micro, block).
std::string format_freshness(const FreshnessTable& table);

}  // namespace ditsim
