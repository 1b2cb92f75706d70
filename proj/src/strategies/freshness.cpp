#include "ditsim/freshness.hpp"

#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ditsim/tensor.hpp"

namespace ditsim {

void FreshnessTable::record(const FreshKey& key, std::size_t stamp) {
  auto [it, inserted] = stamps_.emplace(key, stamp);
  if (!inserted && it->second != stamp)
    throw std::logic_error("conflicting freshness stamps at t=" + std::to_string(key.t) +
                           " micro=" + std::to_string(key.micro) +
                           " block=" + std::to_string(key.block) +
                           " patch=" + std::to_string(key.patch));
}

std::size_t FreshnessTable::stamp(const FreshKey& key) const {
  auto it = stamps_.find(key);
  if (it == stamps_.end()) throw std::out_of_range("no freshness stamp for key");
  return it->second;
}

std::vector<std::size_t> FreshnessTable::fresh_patches(std::size_t t, std::size_t micro,
                                                       std::size_t block) const {
  std::vector<std::size_t> out;
  for (auto it = stamps_.lower_bound({t, micro, block, 0});
       it != stamps_.end() && it->first.t == t && it->first.micro == micro &&
       it->first.block == block;
       ++it)
    if (it->second == t) out.push_back(it->first.patch);
  return out;
}

std::vector<std::size_t> FreshnessTable::micro_steps(std::size_t t) const {
  std::set<std::size_t> seen;
  for (auto it = stamps_.lower_bound({t, 0, 0, 0}); it != stamps_.end() && it->first.t == t;
       ++it)
    seen.insert(it->first.micro);
  return {seen.begin(), seen.end()};
}

namespace {

constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();

FreshnessTable replay_pipefusion(const StalenessQuery& q) {
  const std::size_t per_stage = q.layers / q.devices;
  struct Unit {
    std::size_t t, micro;
    std::vector<std::size_t> patches;
  };
  std::vector<Unit> units;
  for (std::size_t t = q.steps; t >= 1; --t) {
    if (q.steps - t < q.warmup) {
      Unit u{t, 0, {}};
      for (std::size_t j = 0; j < q.patches; ++j) u.patches.push_back(j);
      units.push_back(u);
    } else {
      for (std::size_t m = 0; m < q.patches; ++m) units.push_back({t, m, {m}});
    }
  }
  // last[block][patch]: step that last wrote this patch's K/V for the block.
  std::vector<std::vector<std::size_t>> last(q.layers,
                                             std::vector<std::size_t>(q.patches, kNever));
  FreshnessTable table;
  // Slot s: stage d works on unit s - d.
  for (std::size_t s = 0; s + 1 < units.size() + q.devices; ++s) {
    for (std::size_t d = 0; d < q.devices; ++d) {
      if (s < d || s - d >= units.size()) continue;
      const Unit& u = units[s - d];
      for (std::size_t b = d * per_stage; b < (d + 1) * per_stage; ++b) {
        for (std::size_t j : u.patches) last[b][j] = u.t;
        for (std::size_t j = 0; j < q.patches; ++j) table.record({u.t, u.micro, b, j}, last[b][j]);
      }
    }
  }
  return table;
}

FreshnessTable replay_distrifusion(const StalenessQuery& q) {
  const std::size_t n = q.devices;
  // view[device][block][patch]
  std::vector<std::vector<std::vector<std::size_t>>> view(
      n, std::vector<std::vector<std::size_t>>(q.layers, std::vector<std::size_t>(n, kNever)));
  FreshnessTable table;
  for (std::size_t t = q.steps; t >= 1; --t) {
    const bool warm = q.steps - t < q.warmup;
    for (std::size_t b = 0; b < q.layers; ++b) {
      if (warm)
        for (std::size_t d = 0; d < n; ++d)
          for (std::size_t j = 0; j < n; ++j) view[d][b][j] = t;
      for (std::size_t d = 0; d < n; ++d) {
        view[d][b][d] = t;
        for (std::size_t j = 0; j < n; ++j) table.record({t, d, b, j}, view[d][b][j]);
      }
      // Asynchronous refresh lands after every device has attended.
      for (std::size_t d = 0; d < n; ++d)
        for (std::size_t j = 0; j < n; ++j) view[d][b][j] = t;
    }
  }
  return table;
}

}  // namespace

FreshnessTable staleness_oracle(const StalenessQuery& q) {
  if (q.devices == 0 || q.patches == 0 || q.layers == 0)
    throw ContractError("staleness_oracle: degrees must be positive");
  if (q.strategy == StaleStrategy::pipefusion) {
    if (q.layers % q.devices != 0)
      throw ContractError("staleness_oracle: layers must split evenly into stages");
    if (q.patches > 1 && q.warmup == 0)
      throw ContractError("staleness_oracle: patched pipelines need a warmup step");
    return replay_pipefusion(q);
  }
  if (q.patches != q.devices) throw ContractError("staleness_oracle: DistriFusion needs M == N");
  if (q.devices > 1 && q.warmup == 0)
    throw ContractError("staleness_oracle: DistriFusion needs a warmup step");
  return replay_distrifusion(q);
}

std::string format_freshness(const FreshnessTable& table) {
  std::ostringstream os;
  const FreshKey* prev = nullptr;
  for (const auto& [key, stamp] : table.entries()) {
    if (!prev || prev->t != key.t || prev->micro != key.micro || prev->block != key.block) {
      if (prev) os << '\n';
      os << "t=" << key.t << " micro=" << key.micro << " block=" << key.block << ':';
    }
    os << ' ' << (stamp == key.t ? 'F' : 'S');
    prev = &key;
  }
  if (prev) os << '\n';
  return os.str();
}

}  // namespace ditsim
