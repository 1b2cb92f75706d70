#pragma once

// Deterministic simulated device mesh.
//
// Every device owns a clock. compute() advances it, p2p messages are charged
// latency + bytes/bandwidth on the link between the endpoints, and
// collectives synchronize their group and are charged
//   hops·latency + factor·S / (slowest bandwidth in the group)
// with algobw factors 2(n-1)/n (all_reduce), (n-1)/n (all_gather) and 1
// (all_to_all). Collectives are accounted analytically rather than being
// decomposed into individual messages; the message log only holds p2p traffic.

#include <array>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "ditsim/tensor.hpp"

namespace ditsim::sim {

enum class LinkKind { nvlink, pcie, ethernet, qpi, local };

std::string to_string(LinkKind kind);
LinkKind parse_link_kind(const std::string& name);

struct Link {
  LinkKind kind = LinkKind::nvlink;
  double bandwidth = 1e9;  // bytes per second
  double latency = 0.0;    // seconds

  void validate() const;
  double transfer_time(double bytes) const { return latency + bytes / bandwidth; }
};

/// Cluster description. Devices are numbered node-major: device d lives on
/// node d / devices_per_node.
struct Topology {
  std::size_t nodes = 1;
  std::size_t devices_per_node = 1;
  Link intra_node;
  Link inter_node{LinkKind::ethernet, 12.5e9, 10e-6};
  /// When set, devices on the same node but different sockets talk over this
  /// link instead of intra_node.
  std::optional<Link> cross_socket;
  std::size_t sockets_per_node = 1;
  double device_flops = 1e12;  // FLOP/s

  std::size_t num_devices() const { return nodes * devices_per_node; }
  std::size_t node_of(std::size_t device) const;
  std::size_t socket_of(std::size_t device) const;
  /// Link used between two distinct devices.
  const Link& link(std::size_t a, std::size_t b) const;
  void validate() const;

  /// One node of `devices` devices joined by `link`.
  static Topology single_node(std::size_t devices, Link link, double flops = 1e12);
};

/// Parses the JSON topology format:
///   { "nodes": 2, "devices_per_node": 8,
///     "intra_node": {"kind": "pcie", "bandwidth_GBps": 25, "latency_us": 2},
///     "inter_node": {"kind": "ethernet", "bandwidth_Gbps": 100, "latency_us": 10},
///     "device_gflops": 180000,
///     "cross_socket": {"sockets_per_node": 2, "kind": "qpi",
///                      "bandwidth_GBps": 20, "latency_us": 3} }
/// "cross_socket" is optional.
Topology parse_topology(const std::string& json_text);
Topology load_topology(const std::filesystem::path& path);
std::string topology_to_json(const Topology& topology);

// ---- Mesh --------------------------------------------------------------------

enum class Axis { cfg, pipefusion, ring, ulysses };

struct MeshGrid {
  std::size_t cfg = 1;
  std::size_t pipefusion = 1;
  std::size_t ulysses = 1;
  std::size_t ring = 1;

  std::size_t size() const { return cfg * pipefusion * ulysses * ring; }
  std::size_t sp() const { return ulysses * ring; }
  std::size_t degree(Axis axis) const;
};

struct MeshCoord {
  std::size_t cfg = 0, pipefusion = 0, ring = 0, ulysses = 0;
  bool operator==(const MeshCoord&) const = default;
};

/// Places the 4D grid onto devices with cfg outermost and ulysses innermost:
///   rank = ((cfg·P + pipe)·R + ring)·U + ulysses.
class DeviceMesh {
 public:
  DeviceMesh(Topology topology, MeshGrid grid);

  const Topology& topology() const { return topology_; }
  const MeshGrid& grid() const { return grid_; }
  std::size_t size() const { return grid_.size(); }

  std::size_t rank(const MeshCoord& c) const;
  MeshCoord coord(std::size_t rank) const;

  /// Devices sharing every coordinate with `rank` except along `axis`, in
  /// ascending coordinate order.
  std::vector<std::size_t> group(std::size_t rank, Axis axis) const;
  /// Ulysses x ring sub-mesh containing `rank`, ring-major.
  std::vector<std::size_t> sp_group(std::size_t rank) const;

 private:
  Topology topology_;
  MeshGrid grid_;
};

// ---- Simulation --------------------------------------------------------------

enum class CollectiveKind { all_reduce, all_gather, all_to_all };

std::string to_string(CollectiveKind kind);

/// algobw factor for a group of n devices.
double algobw_factor(CollectiveKind kind, std::size_t n);
/// Bytes charged to every member: factor·S, where S is the reduced tensor
/// (all_reduce), the gathered output (all_gather) or one device's send buffer
/// (all_to_all). Zero for n = 1.
double collective_bytes(CollectiveKind kind, std::size_t n, double payload_bytes);
std::size_t collective_hops(CollectiveKind kind, std::size_t n);

struct MessageRecord {
  std::size_t seq = 0;
  std::size_t src = 0, dst = 0;
  std::string tag;
  double bytes = 0;
  double send_time = 0, deliver_time = 0;
  bool overlap = false;
};

struct CollectiveRecord {
  std::size_t seq = 0;
  CollectiveKind kind = CollectiveKind::all_reduce;
  std::vector<std::size_t> group;
  std::string tag;
  double payload_bytes = 0;  // S
  double charged_bytes = 0;  // per member
  double start = 0, end = 0;
  bool overlap = false;
};

/// One entry of the global event order.
struct Event {
  double time = 0;
  std::size_t seq = 0;
  std::string what;
};

struct ElapsedReport {
  std::vector<double> device_time;
  std::vector<double> device_bytes;  // p2p + collective bytes sent per device
  std::map<std::pair<std::size_t, std::size_t>, double> link_bytes;  // p2p only
  std::map<std::string, std::size_t> collective_counts;
  std::size_t messages = 0;

  double makespan() const;
  double max_device_bytes() const;
};

template <typename T>
struct Collective {
  std::vector<T> results;  // one per group member, in group order
  double done = 0;         // simulated completion time
};

class Simulator {
 public:
  explicit Simulator(Topology topology);

  const Topology& topology() const { return topology_; }
  std::size_t num_devices() const { return clocks_.size(); }

  double now(std::size_t device) const;
  /// Charges flops / device_flops seconds.
  void compute(std::size_t device, double flops);
  void wait_until(std::size_t device, double time);

  /// Enqueues `payload` for `dst`. Without overlap the sender blocks until
  /// delivery; with overlap it continues immediately.
  const MessageRecord& p2p_send(std::size_t src, std::size_t dst, const Tensor& payload,
                                const std::string& tag, bool overlap);
  /// Pops the oldest message from (src, dst, tag) and advances the receiver's
  /// clock to its delivery time if that is later.
  Tensor receive(std::size_t dst, std::size_t src, const std::string& tag);
  bool pending(std::size_t dst, std::size_t src, const std::string& tag) const;
  std::size_t undelivered() const;

  /// Elementwise sum in group order.
  Collective<Tensor> all_reduce(const std::vector<std::size_t>& group,
                                const std::vector<Tensor>& parts, const std::string& tag);
  /// Row concatenation of equally shaped parts in group order. With overlap
  /// the member clocks are left alone; consumers wait on `done`.
  Collective<Tensor> all_gather(const std::vector<std::size_t>& group,
                                const std::vector<Tensor>& parts, const std::string& tag,
                                bool overlap = false);
  /// shards[i][j] goes from member i to member j; result[j][i] = shards[i][j].
  Collective<std::vector<Tensor>> all_to_all(const std::vector<std::size_t>& group,
                                             const std::vector<std::vector<Tensor>>& shards,
                                             const std::string& tag);
  /// Member i ends up with the tensor of member (i - steps) mod n, moved one
  /// hop at a time.
  std::vector<Tensor> ring_shift(const std::vector<std::size_t>& group,
                                 std::vector<Tensor> tensors, std::size_t steps,
                                 const std::string& tag, bool overlap = false);

  const std::vector<MessageRecord>& messages() const { return messages_; }
  const std::vector<CollectiveRecord>& collectives() const { return collectives_; }
  /// Every message and collective ordered by (time, sequence number).
  std::vector<Event> events() const;
  ElapsedReport elapsed_report() const;

  /// Slowest link between any two members; `local` link for singletons.
  Link bottleneck(const std::vector<std::size_t>& group) const;

 private:
  void check_device(std::size_t device) const;
  void check_group(const std::vector<std::size_t>& group) const;
  double sync_start(const std::vector<std::size_t>& group) const;
  CollectiveRecord& record(CollectiveKind kind, const std::vector<std::size_t>& group,
                           const std::string& tag, double payload_bytes, bool overlap);

  Topology topology_;
  std::vector<double> clocks_;
  std::vector<double> sent_bytes_;
  std::size_t seq_ = 0;
  std::vector<MessageRecord> messages_;
  std::vector<CollectiveRecord> collectives_;
  std::map<std::tuple<std::size_t, std::size_t, std::string>,
           std::deque<std::pair<double, Tensor>>> mailbox_;
};

}  // namespace ditsim::sim
