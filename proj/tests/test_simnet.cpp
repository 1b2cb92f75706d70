#include <map>
#include <string>

#include "doctest.h"
#include "ditsim/kernels.hpp"
#include "ditsim/rng.hpp"
#include "ditsim/simnet.hpp"

using namespace ditsim;
using namespace ditsim::sim;

namespace {

Topology desk(std::size_t n, double gbps = 1.0, double latency = 1e-6) {
  return Topology::single_node(n, Link{LinkKind::nvlink, gbps * 1e9, latency});
}

Tensor tagged(double v) { return Tensor({1, 1}, v); }

}  // namespace

TEST_CASE("p2p delivery time follows latency plus bytes over bandwidth") {
  Simulator sim(desk(2));
  const Tensor empty({0});
  const auto& m0 = sim.p2p_send(0, 1, empty, "zero", true);
  CHECK(m0.deliver_time - m0.send_time == doctest::Approx(1e-6).epsilon(1e-15));

  // 1 MB = 125000 doubles.
  const Tensor mb({125000}, 1.0);
  REQUIRE(mb.bytes() == 1000000);
  const auto& m1 = sim.p2p_send(0, 1, mb, "mb", true);
  CHECK(m1.deliver_time - m1.send_time == doctest::Approx(1.001e-3).epsilon(1e-12));
}

TEST_CASE("p2p payload round-trips bit-identically and in order") {
  Simulator sim(desk(3));
  SeededRng rng(7);
  const Tensor a = rng.uniform_tensor<double>({4, 5}, -1, 1);
  const Tensor b = rng.uniform_tensor<double>({2, 3}, -1, 1);
  sim.p2p_send(0, 2, a, "x", false);
  sim.p2p_send(0, 2, b, "x", true);
  CHECK(sim.pending(2, 0, "x"));
  CHECK_FALSE(sim.pending(2, 1, "x"));
  CHECK(bitwise_equal(sim.receive(2, 0, "x"), a));
  CHECK(bitwise_equal(sim.receive(2, 0, "x"), b));
  CHECK(sim.undelivered() == 0);
  CHECK_THROWS(sim.receive(2, 0, "x"));
  CHECK_THROWS_AS(sim.p2p_send(1, 1, a, "self", false), ContractError);
  CHECK_THROWS_AS(sim.p2p_send(0, 9, a, "far", false), ContractError);
}

TEST_CASE("overlap lets the receiver's compute hide the transfer") {
  // 8000 bytes at 1 GB/s = 8 us, no latency; compute of 20 us.
  Topology t = desk(2, 1.0, 0.0);
  t.device_flops = 1e9;
  const Tensor payload({1000}, 0.0);

  Simulator blocking(t);
  blocking.p2p_send(0, 1, payload, "a", false);
  CHECK(blocking.now(0) == doctest::Approx(8e-6));
  blocking.compute(0, 20e3);
  CHECK(blocking.now(0) == doctest::Approx(28e-6));

  Simulator overlapped(t);
  overlapped.p2p_send(0, 1, payload, "a", true);
  CHECK(overlapped.now(0) == 0.0);
  overlapped.compute(1, 20e3);
  overlapped.receive(1, 0, "a");
  // max(compute, transfer), not their sum
  CHECK(overlapped.now(1) == doctest::Approx(20e-6));
}

TEST_CASE("algobw factors") {
  CHECK(algobw_factor(CollectiveKind::all_reduce, 8) == 1.75);
  CHECK(algobw_factor(CollectiveKind::all_gather, 4) == 0.75);
  CHECK(algobw_factor(CollectiveKind::all_to_all, 4) == 1.0);
  for (auto k : {CollectiveKind::all_reduce, CollectiveKind::all_gather,
                 CollectiveKind::all_to_all})
    CHECK(collective_bytes(k, 1, 4096) == 0.0);
  CHECK(collective_bytes(CollectiveKind::all_reduce, 8, 800) == 1400.0);
}

TEST_CASE("all_reduce sums one-hot vectors into all-ones") {
  Simulator sim(desk(4));
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor e({4}, 0.0);
    e[i] = 1.0;
    parts.push_back(e);
  }
  auto r = sim.all_reduce({0, 1, 2, 3}, parts, "ar");
  REQUIRE(r.results.size() == 4);
  for (const Tensor& t : r.results) CHECK(t == Tensor({4}, 1.0));
  const auto& rec = sim.collectives().back();
  CHECK(rec.charged_bytes == 2.0 * 3.0 * 32.0 / 4.0);
  CHECK(sim.elapsed_report().device_bytes[2] == 48.0);
}

TEST_CASE("singleton collectives are free and return the input") {
  Simulator sim(desk(2));
  const Tensor x({2, 3}, 1.5);
  CHECK(sim.all_reduce({1}, {x}, "s").results[0] == x);
  CHECK(sim.all_gather({1}, {x}, "s").results[0] == x);
  auto a2a = sim.all_to_all({1}, {{x}}, "s");
  CHECK(a2a.results[0][0] == x);
  const auto rep = sim.elapsed_report();
  CHECK(rep.max_device_bytes() == 0.0);
  CHECK(rep.makespan() == 0.0);
}

TEST_CASE("all_gather concatenates and all_to_all transposes shards") {
  Simulator sim(desk(3));
  std::vector<Tensor> parts{tagged(0), tagged(1), tagged(2)};
  auto g = sim.all_gather({0, 1, 2}, parts, "g");
  for (const Tensor& t : g.results) CHECK(t == Tensor::from_rows({{0}, {1}, {2}}));
  CHECK(sim.collectives().back().charged_bytes == 16.0);

  std::vector<std::vector<Tensor>> shards(3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) shards[i].push_back(tagged(10.0 * i + j));
  auto t = sim.all_to_all({0, 1, 2}, shards, "t");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(t.results[j][i] == tagged(10.0 * i + j));
  CHECK(sim.collectives().back().charged_bytes == 24.0);

  CHECK_THROWS_AS(sim.all_gather({0, 1}, {tagged(0), Tensor({2, 1}, 0.0)}, "r"), ContractError);
  CHECK_THROWS_AS(sim.all_reduce({0, 0}, {tagged(0), tagged(0)}, "d"), ContractError);
}

TEST_CASE("collective time uses the slowest link and hop latency") {
  Topology t;
  t.nodes = 2;
  t.devices_per_node = 2;
  t.intra_node = Link{LinkKind::nvlink, 100e9, 1e-6};
  t.inter_node = Link{LinkKind::ethernet, 1e9, 5e-6};
  Simulator sim(t);
  const Tensor x({1000}, 1.0);  // 8000 bytes
  auto intra = sim.all_reduce({0, 1}, {x, x}, "intra");
  CHECK(intra.done == doctest::Approx(2 * 1e-6 + 8000.0 / 100e9));
  auto cross = sim.all_reduce({0, 1, 2, 3}, {x, x, x, x}, "cross");
  CHECK(cross.done - intra.done == doctest::Approx(6 * 5e-6 + 12000.0 / 1e9));
  CHECK(sim.bottleneck({0, 1, 2}).kind == LinkKind::ethernet);

  // Numerics do not depend on the link parameters.
  Simulator fast(desk(4, 1000.0));
  auto same = fast.all_reduce({0, 1, 2, 3}, {x, x, x, x}, "cross");
  CHECK(bitwise_equal(same.results[0], cross.results[0]));
}

TEST_CASE("overlapped all_gather leaves clocks for the consumer to wait on") {
  Simulator sim(desk(2, 1.0, 0.0));
  auto g = sim.all_gather({0, 1}, {Tensor({1000}, 0.0).reshaped({1, 1000}),
                                   Tensor({1000}, 0.0).reshaped({1, 1000})},
                          "kv", true);
  CHECK(sim.now(0) == 0.0);
  CHECK(g.done == doctest::Approx(8e-6));
  sim.wait_until(0, g.done);
  CHECK(sim.now(0) == g.done);
}

TEST_CASE("ring_shift matches the rotation oracle") {
  for (std::size_t n : {1u, 2u, 4u}) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < n; ++i) group.push_back(n - 1 - i);  // arbitrary ring order
    for (std::size_t steps : {0u, 1u, 2u, 3u, 4u, 5u}) {
      Simulator sim(desk(4));
      std::vector<Tensor> in;
      for (std::size_t i = 0; i < n; ++i) in.push_back(tagged(100.0 + i));
      auto out = sim.ring_shift(group, in, steps, "r");
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t from = (i + n * 8 - steps) % n;
        CHECK(out[i] == in[from]);
      }
      CHECK(sim.messages().size() == (n == 1 ? 0 : n * steps));
    }
  }
}

TEST_CASE("elapsed report agrees with a replay of the message log") {
  Simulator empty(desk(3));
  const auto zero = empty.elapsed_report();
  CHECK(zero.makespan() == 0.0);
  CHECK(zero.link_bytes.empty());
  CHECK(zero.collective_counts.empty());

  Simulator one(desk(2));
  one.p2p_send(0, 1, Tensor({128}, 0.0), "kb", false);
  CHECK(one.elapsed_report().link_bytes.at({0, 1}) == 1024.0);

  Simulator sim(desk(4));
  SeededRng rng(3);
  double collective_total = 0;
  for (int k = 0; k < 40; ++k) {
    const std::size_t src = rng.next_u64() % 4;
    const std::size_t dst = (src + 1 + rng.next_u64() % 3) % 4;
    const std::size_t len = rng.next_u64() % 17;
    sim.p2p_send(src, dst, Tensor({len}, 0.5), "m" + std::to_string(k % 3), k % 2 == 0);
    if (k % 7 == 0) {
      auto r = sim.all_reduce({0, 1, 2, 3}, std::vector<Tensor>(4, Tensor({4}, 1.0)), "c");
      collective_total += sim.collectives().back().charged_bytes;
      (void)r;
    }
  }
  std::map<std::pair<std::size_t, std::size_t>, double> links;
  std::vector<double> sent(4, collective_total);
  for (const auto& m : sim.messages()) {
    links[{m.src, m.dst}] += m.bytes;
    sent[m.src] += m.bytes;
    CHECK(m.deliver_time == m.send_time + sim.topology().link(m.src, m.dst).transfer_time(m.bytes));
  }
  const auto rep = sim.elapsed_report();
  CHECK(rep.link_bytes == links);
  CHECK(rep.device_bytes == sent);
  CHECK(rep.collective_counts.at("all_reduce") == 6);
  CHECK(rep.messages == 40);

  const auto ev = sim.events();
  for (std::size_t i = 1; i < ev.size(); ++i)
    CHECK((ev[i - 1].time < ev[i].time ||
           (ev[i - 1].time == ev[i].time && ev[i - 1].seq < ev[i].seq)));
}

TEST_CASE("identical programs give identical simulations") {
  auto run = [] {
    Simulator sim(desk(4));
    for (std::size_t i = 0; i < 4; ++i) sim.compute(i, 1e6 * (i + 1));
    sim.ring_shift({0, 1, 2, 3}, std::vector<Tensor>(4, Tensor({3, 3}, 2.0)), 2, "r", true);
    sim.all_gather({0, 2}, {tagged(1), tagged(2)}, "g");
    return sim.elapsed_report();
  };
  const auto a = run(), b = run();
  CHECK(a.device_time == b.device_time);
  CHECK(a.device_bytes == b.device_bytes);
  CHECK(a.link_bytes == b.link_bytes);
}

TEST_CASE("topology JSON parsing") {
  const std::string text = R"({
    "nodes": 2, "devices_per_node": 8,
    "intra_node": {"kind": "pcie", "bandwidth_GBps": 25, "latency_us": 2},
    "inter_node": {"kind": "ethernet", "bandwidth_Gbps": 100, "latency_us": 10},
    "device_gflops": 180000,
    "cross_socket": {"sockets_per_node": 2, "kind": "qpi", "bandwidth_GBps": 20, "latency_us": 3}
  })";
  const Topology t = parse_topology(text);
  CHECK(t.num_devices() == 16);
  CHECK(t.inter_node.bandwidth == 12.5e9);
  CHECK(t.intra_node.latency == doctest::Approx(2e-6));
  CHECK(t.link(0, 1).kind == LinkKind::pcie);
  CHECK(t.link(0, 4).kind == LinkKind::qpi);
  CHECK(t.link(7, 8).kind == LinkKind::ethernet);

  const Topology back = parse_topology(topology_to_json(t));
  CHECK(back.inter_node.bandwidth == doctest::Approx(t.inter_node.bandwidth));
  CHECK(back.cross_socket.has_value());

  CHECK_THROWS_AS(parse_topology("{"), ContractError);
  CHECK_THROWS_AS(parse_topology(R"({"nodes": 1})"), ContractError);
  CHECK_THROWS_AS(parse_topology(R"({"nodes": 1, "devices_per_node": 2,
      "intra_node": {"kind": "carrier-pigeon", "bandwidth_GBps": 1}, "device_gflops": 1})"),
                  ContractError);
  CHECK_THROWS_AS(parse_topology(R"({"nodes": 1, "devices_per_node": 2,
      "intra_node": {"kind": "pcie", "bandwidth_GBps": 0}, "device_gflops": 1})"),
                  ContractError);
}

TEST_CASE("device mesh places cfg outermost and ulysses innermost") {
  Topology t;
  t.nodes = 2;
  t.devices_per_node = 4;
  const DeviceMesh mesh(t, MeshGrid{2, 2, 2, 1});
  CHECK(mesh.rank({1, 0, 0, 1}) == 5);
  CHECK(mesh.coord(6) == MeshCoord{1, 1, 0, 0});
  CHECK(mesh.group(5, Axis::cfg) == std::vector<std::size_t>{1, 5});
  CHECK(mesh.group(5, Axis::ulysses) == std::vector<std::size_t>{4, 5});
  CHECK(mesh.group(5, Axis::pipefusion) == std::vector<std::size_t>{5, 7});
  CHECK(mesh.sp_group(3) == std::vector<std::size_t>{2, 3});
  for (std::size_t r = 0; r < 8; ++r) CHECK(mesh.rank(mesh.coord(r)) == r);
  CHECK_THROWS_AS(DeviceMesh(t, MeshGrid{2, 2, 1, 1}), ContractError);
}
