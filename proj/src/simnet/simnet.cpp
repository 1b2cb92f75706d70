#include "ditsim/simnet.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "ditsim/kernels.hpp"

namespace ditsim::sim {

using nlohmann::json;

std::string to_string(LinkKind kind) {
  switch (kind) {
    case LinkKind::nvlink: return "nvlink";
    case LinkKind::pcie: return "pcie";
    case LinkKind::ethernet: return "ethernet";
    case LinkKind::qpi: return "qpi";
    case LinkKind::local: return "local";
  }
  return "?";
}

LinkKind parse_link_kind(const std::string& name) {
  for (LinkKind k : {LinkKind::nvlink, LinkKind::pcie, LinkKind::ethernet, LinkKind::qpi})
    if (to_string(k) == name) return k;
  throw ContractError("unknown link kind '" + name + "'");
}

void Link::validate() const {
  if (!(bandwidth > 0)) throw ContractError("link bandwidth must be positive");
  if (!(latency >= 0)) throw ContractError("link latency must be non-negative");
}

std::size_t Topology::node_of(std::size_t device) const {
  if (device >= num_devices()) throw ContractError("unknown device " + std::to_string(device));
  return device / devices_per_node;
}

std::size_t Topology::socket_of(std::size_t device) const {
  const std::size_t local = device % devices_per_node;
  return local / (devices_per_node / sockets_per_node);
}

const Link& Topology::link(std::size_t a, std::size_t b) const {
  if (node_of(a) != node_of(b)) return inter_node;
  if (cross_socket && socket_of(a) != socket_of(b)) return *cross_socket;
  return intra_node;
}

void Topology::validate() const {
  if (nodes == 0 || devices_per_node == 0) throw ContractError("topology has no devices");
  if (!(device_flops > 0)) throw ContractError("device throughput must be positive");
  if (sockets_per_node == 0 || devices_per_node % sockets_per_node != 0)
    throw ContractError("devices_per_node must divide evenly into sockets");
  intra_node.validate();
  inter_node.validate();
  if (cross_socket) cross_socket->validate();
}

Topology Topology::single_node(std::size_t devices, Link link, double flops) {
  Topology t;
  t.devices_per_node = devices;
  t.intra_node = link;
  t.device_flops = flops;
  t.validate();
  return t;
}

namespace {

Link parse_link(const json& j, bool gigabits) {
  Link l;
  l.kind = parse_link_kind(j.at("kind").get<std::string>());
  l.bandwidth = gigabits ? j.at("bandwidth_Gbps").get<double>() * 1e9 / 8
                         : j.at("bandwidth_GBps").get<double>() * 1e9;
  l.latency = j.value("latency_us", 0.0) * 1e-6;
  return l;
}

}  // namespace

Topology parse_topology(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ContractError(std::string("topology is not valid JSON: ") + e.what());
  }
  try {
    Topology t;
    t.nodes = j.at("nodes").get<std::size_t>();
    t.devices_per_node = j.at("devices_per_node").get<std::size_t>();
    t.intra_node = parse_link(j.at("intra_node"), false);
    if (j.contains("inter_node")) t.inter_node = parse_link(j.at("inter_node"), true);
    t.device_flops = j.at("device_gflops").get<double>() * 1e9;
    if (j.contains("cross_socket")) {
      const json& cs = j.at("cross_socket");
      t.sockets_per_node = cs.at("sockets_per_node").get<std::size_t>();
      t.cross_socket = parse_link(cs, false);
    }
    t.validate();
    return t;
  } catch (const json::exception& e) {
    throw ContractError(std::string("bad topology: ") + e.what());
  }
}

Topology load_topology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open topology " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_topology(ss.str());
}

std::string topology_to_json(const Topology& t) {
  auto link = [](const Link& l, bool gigabits) {
    json j{{"kind", to_string(l.kind)}, {"latency_us", l.latency * 1e6}};
    if (gigabits)
      j["bandwidth_Gbps"] = l.bandwidth * 8 / 1e9;
    else
      j["bandwidth_GBps"] = l.bandwidth / 1e9;
    return j;
  };
  json j{{"nodes", t.nodes},
         {"devices_per_node", t.devices_per_node},
         {"intra_node", link(t.intra_node, false)},
         {"inter_node", link(t.inter_node, true)},
         {"device_gflops", t.device_flops / 1e9}};
  if (t.cross_socket) {
    json cs = link(*t.cross_socket, false);
    cs["sockets_per_node"] = t.sockets_per_node;
    j["cross_socket"] = cs;
  }
  return j.dump(2);
}

// ---- Mesh --------------------------------------------------------------------

std::size_t MeshGrid::degree(Axis axis) const {
  switch (axis) {
    case Axis::cfg: return cfg;
    case Axis::pipefusion: return pipefusion;
    case Axis::ring: return ring;
    case Axis::ulysses: return ulysses;
  }
  return 1;
}

DeviceMesh::DeviceMesh(Topology topology, MeshGrid grid)
    : topology_(std::move(topology)), grid_(grid) {
  topology_.validate();
  if (grid_.cfg == 0 || grid_.pipefusion == 0 || grid_.ulysses == 0 || grid_.ring == 0)
    throw ContractError("mesh degrees must be positive");
  if (grid_.size() != topology_.num_devices())
    throw ContractError("mesh degrees multiply to " + std::to_string(grid_.size()) +
                        " but the topology has " +
                        std::to_string(topology_.num_devices()) + " devices");
}

std::size_t DeviceMesh::rank(const MeshCoord& c) const {
  if (c.cfg >= grid_.cfg || c.pipefusion >= grid_.pipefusion || c.ring >= grid_.ring ||
      c.ulysses >= grid_.ulysses)
    throw ContractError("mesh coordinate out of range");
  return ((c.cfg * grid_.pipefusion + c.pipefusion) * grid_.ring + c.ring) * grid_.ulysses +
         c.ulysses;
}

MeshCoord DeviceMesh::coord(std::size_t r) const {
  if (r >= size()) throw ContractError("unknown device " + std::to_string(r));
  MeshCoord c;
  c.ulysses = r % grid_.ulysses;
  r /= grid_.ulysses;
  c.ring = r % grid_.ring;
  r /= grid_.ring;
  c.pipefusion = r % grid_.pipefusion;
  c.cfg = r / grid_.pipefusion;
  return c;
}

std::vector<std::size_t> DeviceMesh::group(std::size_t r, Axis axis) const {
  const MeshCoord base = coord(r);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < grid_.degree(axis); ++i) {
    MeshCoord c = base;
    switch (axis) {
      case Axis::cfg: c.cfg = i; break;
      case Axis::pipefusion: c.pipefusion = i; break;
      case Axis::ring: c.ring = i; break;
      case Axis::ulysses: c.ulysses = i; break;
    }
    out.push_back(rank(c));
  }
  return out;
}

std::vector<std::size_t> DeviceMesh::sp_group(std::size_t r) const {
  MeshCoord c = coord(r);
  std::vector<std::size_t> out;
  for (std::size_t ri = 0; ri < grid_.ring; ++ri)
    for (std::size_t ui = 0; ui < grid_.ulysses; ++ui) {
      c.ring = ri;
      c.ulysses = ui;
      out.push_back(rank(c));
    }
  return out;
}

// ---- Collective accounting ---------------------------------------------------

std::string to_string(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::all_reduce: return "all_reduce";
    case CollectiveKind::all_gather: return "all_gather";
    case CollectiveKind::all_to_all: return "all_to_all";
  }
  return "?";
}

double algobw_factor(CollectiveKind kind, std::size_t n) {
  if (n == 0) throw ContractError("empty group");
  if (n == 1) return 0.0;
  const double nn = static_cast<double>(n);
  switch (kind) {
    case CollectiveKind::all_reduce: return 2.0 * (nn - 1.0) / nn;
    case CollectiveKind::all_gather: return (nn - 1.0) / nn;
    case CollectiveKind::all_to_all: return 1.0;
  }
  return 0.0;
}

double collective_bytes(CollectiveKind kind, std::size_t n, double payload_bytes) {
  if (n <= 1) return 0.0;
  const double nn = static_cast<double>(n);
  // Multiply before dividing so byte counts stay exact integers whenever n
  // divides the payload.
  switch (kind) {
    case CollectiveKind::all_reduce: return 2.0 * (nn - 1.0) * payload_bytes / nn;
    case CollectiveKind::all_gather: return (nn - 1.0) * payload_bytes / nn;
    case CollectiveKind::all_to_all: return payload_bytes;
  }
  return 0.0;
}

std::size_t collective_hops(CollectiveKind kind, std::size_t n) {
  if (n <= 1) return 0;
  switch (kind) {
    case CollectiveKind::all_reduce: return 2 * (n - 1);
    case CollectiveKind::all_gather: return n - 1;
    case CollectiveKind::all_to_all: return 1;
  }
  return 0;
}

double ElapsedReport::makespan() const {
  return device_time.empty() ? 0.0 : *std::max_element(device_time.begin(), device_time.end());
}

double ElapsedReport::max_device_bytes() const {
  return device_bytes.empty() ? 0.0
                              : *std::max_element(device_bytes.begin(), device_bytes.end());
}

// ---- Simulator ---------------------------------------------------------------

Simulator::Simulator(Topology topology)
    : topology_(std::move(topology)),
      clocks_(topology_.num_devices(), 0.0),
      sent_bytes_(topology_.num_devices(), 0.0) {
  topology_.validate();
}

void Simulator::check_device(std::size_t device) const {
  if (device >= clocks_.size()) throw ContractError("unknown device " + std::to_string(device));
}

void Simulator::check_group(const std::vector<std::size_t>& group) const {
  if (group.empty()) throw ContractError("empty collective group");
  std::vector<std::size_t> sorted = group;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ContractError("collective group lists a device twice");
  for (std::size_t d : group) check_device(d);
}

double Simulator::now(std::size_t device) const {
  check_device(device);
  return clocks_[device];
}

void Simulator::compute(std::size_t device, double flops) {
  check_device(device);
  if (flops < 0) throw ContractError("negative flop count");
  clocks_[device] += flops / topology_.device_flops;
}

void Simulator::wait_until(std::size_t device, double time) {
  check_device(device);
  clocks_[device] = std::max(clocks_[device], time);
}

const MessageRecord& Simulator::p2p_send(std::size_t src, std::size_t dst,
                                         const Tensor& payload, const std::string& tag,
                                         bool overlap) {
  check_device(src);
  check_device(dst);
  if (src == dst) throw ContractError("p2p_send to self");
  MessageRecord m;
  m.seq = seq_++;
  m.src = src;
  m.dst = dst;
  m.tag = tag;
  m.bytes = static_cast<double>(payload.bytes());
  m.send_time = clocks_[src];
  m.deliver_time = m.send_time + topology_.link(src, dst).transfer_time(m.bytes);
  m.overlap = overlap;
  if (!overlap) clocks_[src] = m.deliver_time;
  sent_bytes_[src] += m.bytes;
  mailbox_[{src, dst, tag}].emplace_back(m.deliver_time, payload);
  messages_.push_back(m);
  return messages_.back();
}

Tensor Simulator::receive(std::size_t dst, std::size_t src, const std::string& tag) {
  check_device(dst);
  check_device(src);
  auto it = mailbox_.find({src, dst, tag});
  if (it == mailbox_.end() || it->second.empty())
    throw std::logic_error("no message from " + std::to_string(src) + " to " +
                           std::to_string(dst) + " tagged '" + tag + "'");
  auto [deliver, payload] = std::move(it->second.front());
  it->second.pop_front();
  if (it->second.empty()) mailbox_.erase(it);
  clocks_[dst] = std::max(clocks_[dst], deliver);
  return std::move(payload);
}

bool Simulator::pending(std::size_t dst, std::size_t src, const std::string& tag) const {
  auto it = mailbox_.find({src, dst, tag});
  return it != mailbox_.end() && !it->second.empty();
}

std::size_t Simulator::undelivered() const {
  std::size_t n = 0;
  for (const auto& [key, queue] : mailbox_) n += queue.size();
  return n;
}

Link Simulator::bottleneck(const std::vector<std::size_t>& group) const {
  if (group.size() <= 1) return Link{LinkKind::local, 1.0, 0.0};
  Link worst = topology_.link(group[0], group[1]);
  for (std::size_t i = 0; i < group.size(); ++i)
    for (std::size_t j = i + 1; j < group.size(); ++j) {
      const Link& l = topology_.link(group[i], group[j]);
      if (l.bandwidth < worst.bandwidth) {
        worst.bandwidth = l.bandwidth;
        worst.kind = l.kind;
      }
      worst.latency = std::max(worst.latency, l.latency);
    }
  return worst;
}

double Simulator::sync_start(const std::vector<std::size_t>& group) const {
  double t = 0.0;
  for (std::size_t d : group) t = std::max(t, clocks_[d]);
  return t;
}

CollectiveRecord& Simulator::record(CollectiveKind kind, const std::vector<std::size_t>& group,
                                    const std::string& tag, double payload_bytes,
                                    bool overlap) {
  const std::size_t n = group.size();
  CollectiveRecord r;
  r.seq = seq_++;
  r.kind = kind;
  r.group = group;
  r.tag = tag;
  r.payload_bytes = payload_bytes;
  r.charged_bytes = collective_bytes(kind, n, payload_bytes);
  r.overlap = overlap;
  if (n == 1) {
    r.start = r.end = clocks_[group[0]];
  } else {
    const Link l = bottleneck(group);
    r.start = sync_start(group);
    r.end = r.start + static_cast<double>(collective_hops(kind, n)) * l.latency +
            r.charged_bytes / l.bandwidth;
  }
  for (std::size_t d : group) {
    sent_bytes_[d] += r.charged_bytes;
    if (!overlap) clocks_[d] = std::max(clocks_[d], r.end);
  }
  collectives_.push_back(std::move(r));
  return collectives_.back();
}

Collective<Tensor> Simulator::all_reduce(const std::vector<std::size_t>& group,
                                         const std::vector<Tensor>& parts,
                                         const std::string& tag) {
  check_group(group);
  if (parts.size() != group.size()) throw ContractError("all_reduce needs one part per member");
  Tensor sum = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].shape() != sum.shape()) throw ContractError("all_reduce parts are ragged");
    sum.array() += parts[i].array();
  }
  const double bytes = static_cast<double>(sum.bytes());
  const auto& r = record(CollectiveKind::all_reduce, group, tag, bytes, false);
  return {std::vector<Tensor>(group.size(), sum), r.end};
}

Collective<Tensor> Simulator::all_gather(const std::vector<std::size_t>& group,
                                         const std::vector<Tensor>& parts,
                                         const std::string& tag, bool overlap) {
  check_group(group);
  if (parts.size() != group.size()) throw ContractError("all_gather needs one part per member");
  for (const Tensor& p : parts)
    if (p.shape() != parts[0].shape()) throw ContractError("all_gather parts are ragged");
  Tensor gathered = concat_rows<double>(parts);
  const double bytes = static_cast<double>(gathered.bytes());
  const auto& r = record(CollectiveKind::all_gather, group, tag, bytes, overlap);
  return {std::vector<Tensor>(group.size(), gathered), r.end};
}

Collective<std::vector<Tensor>> Simulator::all_to_all(
    const std::vector<std::size_t>& group, const std::vector<std::vector<Tensor>>& shards,
    const std::string& tag) {
  check_group(group);
  const std::size_t n = group.size();
  if (shards.size() != n) throw ContractError("all_to_all needs one shard row per member");
  for (const auto& row : shards) {
    if (row.size() != n) throw ContractError("all_to_all needs n shards per member");
    for (const Tensor& s : row)
      if (s.shape() != shards[0][0].shape()) throw ContractError("all_to_all shards are ragged");
  }
  std::vector<std::vector<Tensor>> out(n, std::vector<Tensor>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j][i] = shards[i][j];
  const double bytes = static_cast<double>(n * shards[0][0].bytes());
  const auto& r = record(CollectiveKind::all_to_all, group, tag, bytes, false);
  return {std::move(out), r.end};
}

std::vector<Tensor> Simulator::ring_shift(const std::vector<std::size_t>& group,
                                          std::vector<Tensor> tensors, std::size_t steps,
                                          const std::string& tag, bool overlap) {
  check_group(group);
  const std::size_t n = group.size();
  if (tensors.size() != n) throw ContractError("ring_shift needs one tensor per member");
  if (n == 1) return tensors;
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < n; ++i)
      p2p_send(group[i], group[(i + 1) % n], tensors[i], tag, overlap);
    std::vector<Tensor> next(n);
    for (std::size_t i = 0; i < n; ++i)
      next[i] = receive(group[i], group[(i + n - 1) % n], tag);
    tensors = std::move(next);
  }
  return tensors;
}

std::vector<Event> Simulator::events() const {
  std::vector<Event> ev;
  for (const auto& m : messages_)
    ev.push_back({m.send_time, m.seq,
                  "p2p " + std::to_string(m.src) + "->" + std::to_string(m.dst) + " " + m.tag});
  for (const auto& c : collectives_)
    ev.push_back({c.start, c.seq, to_string(c.kind) + " " + c.tag});
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) {
    return a.time != b.time ? a.time < b.time : a.seq < b.seq;
  });
  return ev;
}

ElapsedReport Simulator::elapsed_report() const {
  ElapsedReport r;
  r.device_time = clocks_;
  r.device_bytes = sent_bytes_;
  for (const auto& m : messages_) r.link_bytes[{m.src, m.dst}] += m.bytes;
  for (const auto& c : collectives_) ++r.collective_counts[to_string(c.kind)];
  r.messages = messages_.size();
  return r;
}

}  // namespace ditsim::sim
