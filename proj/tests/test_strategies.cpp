#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ditsim/strategies.hpp"
#include "test_support.hpp"

using namespace ditsim;
using ditsim::testing::Problem;
using ditsim::testing::desk_spec;
using ditsim::testing::make_problem;

namespace {

constexpr double kExactTol = 1e-10;
constexpr std::size_t kSteps = 8;

const ConditioningMode kModes[] = {ConditioningMode::adaln_zero,
                                   ConditioningMode::cross_attention,
                                   ConditioningMode::in_context};
const BlockTopology kTopologies[] = {BlockTopology::linear, BlockTopology::u_skip};

DiffusionSpec desk_sched(double guidance = 0.0) {
  return DiffusionSpec::uniform(kSteps, 0.125, guidance, 1);
}

sim::Topology nvlink(std::size_t n) {
  return sim::Topology::single_node(n, sim::Link{sim::LinkKind::nvlink, 100e9, 1e-6});
}

RunResult run(const ParallelConfig& c, const Problem& p) {
  sim::Simulator s(nvlink(c.num_devices()));
  return run_strategy(s, c, p.spec, p.sched, p.weights, p.x_T, p.prompt);
}

std::vector<LatentState> serial(const Problem& p) {
  return serial_diffusion(p.spec, p.sched, p.weights, p.x_T, p.prompt);
}

ParallelConfig cfg_of(ParallelConfig inner) {
  inner.cfg = 2;
  inner.strategy = Strategy::cfg_parallel;
  return inner;
}

ParallelConfig hybrid(std::size_t cfg, std::size_t pp, std::size_t u, std::size_t r,
                      std::size_t m, std::size_t warmup = 1) {
  ParallelConfig c;
  c.strategy = Strategy::hybrid;
  c.cfg = cfg;
  c.pipefusion = pp;
  c.ulysses = u;
  c.ring = r;
  c.num_patches = m;
  c.warmup_steps = warmup;
  return c;
}

std::string label(ConditioningMode m, BlockTopology t) {
  return to_string(m) + "/" + to_string(t);
}

}  // namespace

TEST_CASE("exact strategies match serial for every conditioning mode and topology") {
  const std::vector<ParallelConfig> configs = {
      ParallelConfig::tp(2),         ParallelConfig::tp(4),
      ParallelConfig::ulysses_sp(2), ParallelConfig::ulysses_sp(4),
      ParallelConfig::ring_sp(2),    ParallelConfig::ring_sp(4),
      ParallelConfig::usp(2, 2)};
  for (auto mode : kModes)
    for (auto topo : kTopologies) {
      const Problem p = make_problem(desk_spec(mode, topo), desk_sched(), false);
      const auto ref = serial(p);
      for (const auto& c : configs) {
        CAPTURE(label(mode, topo));
        CAPTURE(c.label());
        const auto r = run(c, p);
        CHECK(max_trace_relative_error(r.trace, ref) <= kExactTol);
        if (c.strategy == Strategy::sp_ulysses) CHECK(traces_bitwise_equal(r.trace, ref));
      }
    }
}

TEST_CASE("cfg parallelism matches serial guided execution") {
  for (auto mode : kModes)
    for (auto topo : kTopologies) {
      CAPTURE(label(mode, topo));
      const Problem p = make_problem(desk_spec(mode, topo), desk_sched(1.5), true);
      const auto ref = serial(p);
      CHECK(traces_bitwise_equal(run(cfg_of(ParallelConfig::serial()), p).trace, ref));
      CHECK(max_trace_relative_error(run(cfg_of(ParallelConfig::ulysses_sp(2)), p).trace, ref) <=
            kExactTol);
      CHECK(max_trace_relative_error(run(cfg_of(ParallelConfig::ring_sp(2)), p).trace, ref) <=
            kExactTol);
    }
}

TEST_CASE("cfg with zero guidance reproduces the unconditional run") {
  Problem p = make_problem(desk_spec(ConditioningMode::cross_attention, BlockTopology::linear),
                           desk_sched(0.0), true);
  const auto r = run(cfg_of(ParallelConfig::serial()), p);
  const auto uncond = serial_diffusion(p.spec, p.sched, p.weights, p.x_T, *p.prompt.uncond);
  CHECK(traces_bitwise_equal(r.trace, uncond));

  // One latent all_gather per step, independent of depth.
  const double per_step = static_cast<double>(p.spec.image_tokens * p.spec.latent_channels * 8);
  CHECK(r.cost.comm_bytes == per_step * kSteps);
  CHECK(r.cost.sim.collective_counts.at("all_gather") == kSteps);
}

TEST_CASE("every strategy at total degree one is bit-identical to serial") {
  for (auto mode : kModes)
    for (auto topo : kTopologies) {
      CAPTURE(label(mode, topo));
      const Problem p = make_problem(desk_spec(mode, topo), desk_sched(), false);
      const auto ref = serial(p);
      for (const auto& c :
           {ParallelConfig::serial(), ParallelConfig::tp(1), ParallelConfig::ulysses_sp(1),
            ParallelConfig::ring_sp(1), ParallelConfig::usp(1, 1),
            ParallelConfig::pipefusion_only(1, 1, 1), ParallelConfig::distrifusion_only(1, 1)}) {
        CAPTURE(c.label());
        const auto r = run(c, p);
        CHECK(traces_bitwise_equal(r.trace, ref));
        CHECK(r.cost.comm_bytes == 0.0);
      }
    }
}

TEST_CASE("warmup over every step makes stale-KV strategies exact") {
  for (auto mode : kModes)
    for (auto topo : kTopologies) {
      CAPTURE(label(mode, topo));
      const Problem p = make_problem(desk_spec(mode, topo), desk_sched(), false);
      const auto ref = serial(p);
      for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 2}, {2, 4}, {4, 4}, {4, 8}}) {
        CAPTURE(n);
        CAPTURE(m);
        CHECK(traces_bitwise_equal(run(ParallelConfig::pipefusion_only(n, m, kSteps), p).trace,
                                   ref));
      }
      for (std::size_t n : {2u, 4u}) {
        CAPTURE(n);
        CHECK(traces_bitwise_equal(run(ParallelConfig::distrifusion_only(n, kSteps), p).trace,
                                   ref));
      }
    }
}

TEST_CASE("PipeFusion and DistriFusion buffers follow the staleness oracle") {
  const Problem p = make_problem(desk_spec(ConditioningMode::adaln_zero, BlockTopology::linear),
                                 desk_sched(), false);
  struct Case {
    std::size_t n, m, warmup;
  };
  for (const Case& c : {Case{4, 4, 1}, Case{2, 2, 1}, Case{2, 4, 2}, Case{4, 8, 1}, Case{1, 4, 3}}) {
    CAPTURE(c.n);
    CAPTURE(c.m);
    const auto r = run(ParallelConfig::pipefusion_only(c.n, c.m, c.warmup), p);
    const auto oracle = staleness_oracle(
        {StaleStrategy::pipefusion, c.n, c.m, p.spec.num_layers, kSteps, c.warmup});
    CHECK(r.freshness == oracle);
  }
  for (std::size_t n : {2u, 4u}) {
    CAPTURE(n);
    const auto r = run(ParallelConfig::distrifusion_only(n, 1), p);
    const auto oracle =
        staleness_oracle({StaleStrategy::distrifusion, n, n, p.spec.num_layers, kSteps, 1});
    CHECK(r.freshness == oracle);
  }
}

TEST_CASE("oracle reproduces the PipeFusion fresh-area fixture") {
  std::ifstream in(std::string(DITSIM_FIXTURE_DIR) + "/pipefusion_fresh_n4_m4.txt");
  REQUIRE(in);
  std::vector<std::vector<bool>> expected;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t micro;
    ls >> micro;
    REQUIRE(micro == expected.size());
    std::vector<bool> row;
    for (std::string cell; ls >> cell;) row.push_back(cell == "F");
    expected.push_back(row);
  }
  REQUIRE(expected.size() == 4);

  const std::size_t L = 4, T = 8, warmup = 1;
  const auto table = staleness_oracle({StaleStrategy::pipefusion, 4, 4, L, T, warmup});
  for (std::size_t t = T - warmup; t >= 1; --t) {
    REQUIRE(table.micro_steps(t).size() == 4);
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < 4; ++j)
          CHECK((table.stamp({t, m, l, j}) == t) == expected[m][j]);
  }
  // Warmup is fully fresh.
  for (std::size_t l = 0; l < L; ++l)
    CHECK(table.fresh_patches(T, 0, l).size() == 4);
}

TEST_CASE("fresh area grows monotonically for PipeFusion and stays one patch for DistriFusion") {
  const auto pf = staleness_oracle({StaleStrategy::pipefusion, 2, 8, 4, 6, 2});
  for (std::size_t t = 4; t >= 1; --t)
    for (std::size_t l = 0; l < 4; ++l) {
      std::size_t prev = 0;
      for (std::size_t m : pf.micro_steps(t)) {
        const auto fresh = pf.fresh_patches(t, m, l);
        CHECK(fresh.size() >= prev);
        CHECK(fresh.size() == m + 1);
        prev = fresh.size();
      }
    }

  const auto spec = desk_spec(ConditioningMode::in_context, BlockTopology::linear);
  const std::size_t n = 4;
  const auto df = staleness_oracle({StaleStrategy::distrifusion, n, n, 4, kSteps, 1});
  const PatchPlan plan(spec, n, 1, TextPlacement::spread);
  for (std::size_t t = kSteps - 1; t >= 1; --t)
    for (std::size_t d = 0; d < n; ++d)
      for (std::size_t l = 0; l < 4; ++l) {
        const auto fresh = df.fresh_patches(t, d, l);
        REQUIRE(fresh == std::vector<std::size_t>{d});
        const auto [i0, i1] = plan.image_range(d);
        CHECK(i1 - i0 == spec.image_tokens / n);
      }
  const auto all_warm = staleness_oracle({StaleStrategy::distrifusion, n, n, 4, 3, 3});
  for (const auto& [key, stamp] : all_warm.entries()) CHECK(stamp == key.t);
}

TEST_CASE("hybrid PipeFusion x SP equals pure PipeFusion") {
  for (auto [mode, topo] : {std::pair{ConditioningMode::adaln_zero, BlockTopology::linear},
                            std::pair{ConditioningMode::in_context, BlockTopology::u_skip},
                            std::pair{ConditioningMode::cross_attention, BlockTopology::u_skip}}) {
    CAPTURE(label(mode, topo));
    const Problem p = make_problem(desk_spec(mode, topo), desk_sched(), false);
    const auto pure4 = run(ParallelConfig::pipefusion_only(4, 4, 1), p);
    const auto h1 = run(hybrid(1, 4, 2, 1, 4), p);
    CHECK(max_trace_relative_error(h1.trace, pure4.trace) <= kExactTol);
    CHECK(h1.freshness == pure4.freshness);

    const Problem g = make_problem(desk_spec(mode, topo), desk_sched(2.0), true);
    const auto pure2 = run(ParallelConfig::pipefusion_only(2, 4, 1), g);
    const auto h2 = run(hybrid(2, 2, 1, 2, 4), g);
    CHECK(max_trace_relative_error(h2.trace, pure2.trace) <= kExactTol);
    const auto h3 = run(hybrid(2, 2, 2, 1, 4), g);
    CHECK(max_trace_relative_error(h3.trace, pure2.trace) <= kExactTol);
    const auto h4 = run(hybrid(1, 2, 2, 2, 4), g);
    CHECK(max_trace_relative_error(h4.trace, pure2.trace) <= kExactTol);
  }
}

TEST_CASE("naive SP inside PipeFusion breaks KV consistency and is caught") {
  const Problem p = make_problem(desk_spec(ConditioningMode::adaln_zero, BlockTopology::linear),
                                 desk_sched(), false);
  for (auto c : {hybrid(1, 4, 2, 1, 4), hybrid(1, 2, 1, 2, 4)}) {
    CAPTURE(c.label());
    c.naive_sp = true;
    CHECK_THROWS_AS(run(c, p), KVConsistencyError);

    c.assert_kv_consistency = false;
    const auto r = run(c, p);
    CHECK(r.cost.kv_violations > 0);
    c.naive_sp = false;
    const auto good = run(c, p);
    CHECK(good.cost.kv_violations == 0);
    CHECK(max_trace_relative_error(r.trace, good.trace) > 1e-6);
  }
}

namespace {

void check_same_log(const sim::Simulator& a, const sim::Simulator& b) {
  REQUIRE(a.messages().size() == b.messages().size());
  for (std::size_t i = 0; i < a.messages().size(); ++i) {
    const auto &x = a.messages()[i], &y = b.messages()[i];
    CHECK(x.src == y.src);
    CHECK(x.dst == y.dst);
    CHECK(x.tag == y.tag);
    CHECK(x.bytes == y.bytes);
    CHECK(x.deliver_time == y.deliver_time);
  }
  REQUIRE(a.collectives().size() == b.collectives().size());
  for (std::size_t i = 0; i < a.collectives().size(); ++i) {
    const auto &x = a.collectives()[i], &y = b.collectives()[i];
    CHECK(x.kind == y.kind);
    CHECK(x.group == y.group);
    CHECK(x.charged_bytes == y.charged_bytes);
    CHECK(x.end == y.end);
  }
}

}  // namespace

TEST_CASE("degenerate USP and hybrid axes reproduce the pure SP message logs") {
  const Problem p = make_problem(desk_spec(ConditioningMode::in_context, BlockTopology::linear),
                                 desk_sched(), false);
  sim::Simulator a(nvlink(4)), b(nvlink(4)), c(nvlink(4)), d(nvlink(4)), e(nvlink(4));
  run_usp(a, 4, 1, p.spec, p.sched, p.weights, p.x_T, p.prompt);
  run_sp_ulysses(b, p.spec, p.sched, p.weights, p.x_T, p.prompt);
  check_same_log(a, b);
  run_usp(c, 1, 4, p.spec, p.sched, p.weights, p.x_T, p.prompt);
  run_sp_ring(d, p.spec, p.sched, p.weights, p.x_T, p.prompt);
  check_same_log(c, d);
  run_hybrid(e, hybrid(1, 1, 4, 1, 1), p.spec, p.sched, p.weights, p.x_T, p.prompt);
  check_same_log(e, b);
  CHECK(b.messages().empty());
  CHECK_FALSE(d.messages().empty());
  CHECK(d.collectives().empty());
}

TEST_CASE("communication volume of the exact strategies") {
  const Problem p = make_problem(desk_spec(ConditioningMode::adaln_zero, BlockTopology::linear),
                                 desk_sched(), false);
  const double L = 4, S = 64, hs = 32, e = 8, T = kSteps;
  // TP at N=2: two all-reduces per block, factor 2(n-1)/n = 1.
  CHECK(run(ParallelConfig::tp(2), p).cost.comm_bytes == 2 * L * S * hs * e * T);
  CHECK(run(ParallelConfig::tp(4), p).cost.comm_bytes == 2 * L * 1.5 * S * hs * e * T);
  // Ulysses: 4 all_to_all of S/N rows per block.
  const double u2 = run(ParallelConfig::ulysses_sp(2), p).cost.comm_bytes;
  const double u4 = run(ParallelConfig::ulysses_sp(4), p).cost.comm_bytes;
  CHECK(u2 == 4 * S * hs * e / 2 * L * T);
  CHECK(u4 * 2 == u2);
  // Ring: K and V circulate (n-1) hops of S/N rows.
  CHECK(run(ParallelConfig::ring_sp(4), p).cost.comm_bytes == 2 * 3 * (S / 4) * hs * e * L * T);
}

TEST_CASE("PipeFusion memory and divergence") {
  const Problem p = make_problem(desk_spec(ConditioningMode::adaln_zero, BlockTopology::linear),
                                 desk_sched(), false);
  const auto ref = serial(p);
  const auto r = run(ParallelConfig::pipefusion_only(4, 4, 1), p);
  const auto rows = divergence_report(r.trace, ref);
  REQUIRE(rows.size() == kSteps + 1);
  CHECK(rows[0].max_abs == 0.0);
  CHECK(rows[1].max_abs == 0.0);  // the warmup step
  double worst = 0;
  for (const auto& row : rows) {
    CHECK(std::isfinite(row.max_abs));
    CHECK(std::isfinite(row.rel_l2));
    worst = std::max(worst, row.max_abs);
  }
  CHECK(worst > 0.0);

  std::ostringstream csv;
  write_divergence_csv(csv, rows);
  CHECK(csv.str().rfind("step,max_abs,rel_l2\n8,0,0\n7,0,0\n", 0) == 0);

  // Parameters split across stages; io lives on stage 0.
  double total = 0;
  for (double b : r.cost.param_bytes) total += b;
  CHECK(total == static_cast<double>(p.weights.parameter_count() * 8));
  // Full-sequence K/V for the stage's L/N blocks.
  for (double kv : r.cost.kv_bytes) CHECK(kv == 2.0 * 64 * 32 * 8 * (4 / 4));

  const auto df2 = run(ParallelConfig::distrifusion_only(2, 1), p);
  const auto df4 = run(ParallelConfig::distrifusion_only(4, 1), p);
  CHECK(df2.cost.max_kv_bytes() == df4.cost.max_kv_bytes());
  CHECK(df4.cost.max_kv_bytes() == 2.0 * 64 * 32 * 8 * 4);
}

TEST_CASE("configuration validation") {
  const auto spec = desk_spec(ConditioningMode::in_context, BlockTopology::linear);
  auto bad = [&](ParallelConfig c, bool guided = false) {
    CHECK_THROWS_AS(c.validate(spec, guided), ContractError);
  };
  bad(ParallelConfig::ulysses_sp(3));            // heads
  bad(ParallelConfig::pipefusion_only(3, 3, 1));  // layers
  bad(ParallelConfig::pipefusion_only(4, 2, 1));  // M < stages
  bad(ParallelConfig::pipefusion_only(2, 4, 0));  // no warmup
  bad(ParallelConfig::tp(8));                     // heads
  bad(hybrid(1, 1, 1, 1, 64 + 1));                // more patches than tokens
  bad(hybrid(2, 1, 1, 1, 1));                     // cfg without uncond
  bad(ParallelConfig::ring_sp(16));               // text does not shard evenly
  ParallelConfig df = ParallelConfig::distrifusion_only(4, 1);
  df.num_patches = 2;
  bad(df);
  CHECK_NOTHROW(hybrid(2, 2, 2, 1, 4).validate(spec, true));

  const Problem p = make_problem(spec, desk_sched(), false);
  sim::Simulator s(nvlink(3));
  CHECK_THROWS_AS(run_strategy(s, ParallelConfig::ulysses_sp(2), p.spec, p.sched, p.weights,
                               p.x_T, p.prompt),
                  ContractError);
}

TEST_CASE("patch plan partitions the sequence") {
  const auto spec = desk_spec(ConditioningMode::in_context, BlockTopology::linear);
  const PatchPlan plan(spec, 4, 2);
  std::vector<int> seen(spec.sequence_length(), 0);
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<std::size_t> joined;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t id : plan.shard(m, i)) {
        ++seen[id];
        joined.push_back(id);
      }
    std::sort(joined.begin(), joined.end());
    CHECK(joined == plan.patch(m));
    for (std::size_t id : plan.patch(m)) CHECK(plan.patch_of(id) == m);
  }
  for (int s : seen) CHECK(s == 1);
  // Text rides with patch 0 and is split across its shards.
  CHECK(plan.shard(0, 0).front() == 0);
  CHECK(plan.shard(0, 1).front() == 4);
  CHECK(plan.shard(0, 1)[4] == 8 + 16 / 2);
  CHECK(plan.patch(1).front() == 8 + 16);

  const PatchPlan spread(spec, 4, 1, TextPlacement::spread);
  CHECK(spread.shard(3, 0).front() == 6);
  CHECK(spread.shard(3, 0)[2] == 8 + 48);
}
