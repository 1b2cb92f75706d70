#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ditsim/cli.hpp"

using namespace ditsim;
using namespace ditsim::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ditsim_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int invoke(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "ditsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log, err;
  const int code = main_entry(static_cast<int>(argv.size()), argv.data(), log, err);
  if (out) *out = log.str() + err.str();
  return code;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("config round-trips through JSON") {
  ExperimentConfig c;
  c.model.conditioning = ConditioningMode::in_context;
  c.model.topology = BlockTopology::u_skip;
  c.guided = true;
  c.diffusion.guidance_scale = 3.5;
  c.parallel = ParallelConfig::pipefusion_only(4, 8, 2);
  c.seed = 99;
  c.sweep.strategies = {Strategy::sp_ring, Strategy::pipefusion};
  c.sweep.devices = {2, 4};
  c.plan.preset = "tokens-64k";
  const auto j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);
  CHECK(j.at("schema_version") == kSchemaVersion);
}

TEST_CASE("config errors") {
  using nlohmann::json;
  CHECK_THROWS_AS(config_from_json(json{{"model", json::object()}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"schema_version", 2}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"schema_version", 1}, {"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(
      config_from_json(json{{"schema_version", 1}, {"parallel", {{"strategy", "warp"}}}}),
      ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"schema_version", 1}, {"seed", "x"}}), ConfigError);
  ExperimentConfig c;
  c.topology = "/nonexistent/topology.json";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(find_preset("nope"), ConfigError);
}

TEST_CASE("presets and the resolution helper") {
  CHECK(tokens_for_resolution(1024) == 4096);
  CHECK(tokens_for_resolution(2048) == 16384);
  CHECK(tokens_for_resolution(1024, 16, 1) == 4096);
  CHECK_THROWS_AS(tokens_for_resolution(1000), ConfigError);
  CHECK(find_preset("tokens-64k").image_tokens == 65536);
  CHECK(find_preset("tokens-256k").image_tokens == 262144);
  CHECK(find_preset("tokens-262k").image_tokens == 262000);
}

TEST_CASE("topology resizing keeps the links") {
  sim::Topology t = sim::Topology::single_node(8, {sim::LinkKind::pcie, 25e9, 5e-6});
  t.nodes = 2;
  const auto small = resize_topology(t, 4);
  CHECK(small.num_devices() == 4);
  CHECK(small.nodes == 1);
  CHECK(small.intra_node.bandwidth == 25e9);
  CHECK(resize_topology(t, 16).nodes == 2);
  CHECK_THROWS_AS(resize_topology(t, 12), ConfigError);
}

TEST_CASE("verify exits 0 on the desk spec and 1 on the naive ablation") {
  const fs::path dir = scratch("verify");
  std::string out;
  CHECK(invoke({"verify", "--out", dir.string()}, &out) == kOk);
  const auto report = nlohmann::json::parse(slurp(dir / "verify.json"));
  CHECK(report.at("passed") == true);
  CHECK(report.at("checks").size() >= 20);

  CHECK(invoke({"verify", "--out", dir.string(), "--strategy", "hybrid", "--pipefusion", "2",
                "--ulysses", "2", "--patches", "4", "--naive-sp"},
               &out) == kInvariantFailure);
  CHECK(out.find("kv_consistency") != std::string::npos);
}

TEST_CASE("guided verify includes the cfg checks") {
  const fs::path dir = scratch("guided");
  put(dir / "c.json", R"({"schema_version": 1,
    "model": {"conditioning": "cross_attention", "topology": "u_skip"},
    "diffusion": {"guided": true, "guidance_scale": 2.0}, "out": "o"})");
  std::string out;
  CHECK(invoke({"verify", "--config", (dir / "c.json").string()}, &out) == kOk);
  CHECK(out.find("PASS exact/cfg2") != std::string::npos);
  CHECK(out.find("PASS hybrid/cfg2") != std::string::npos);
  CHECK(fs::exists(dir / "o" / "verify.json"));
}

TEST_CASE("usage and config errors exit 2") {
  const fs::path dir = scratch("usage");
  CHECK(invoke({"run", "--topology", (dir / "missing.json").string(), "--out", dir.string()}) ==
        kUsageError);
  CHECK(invoke({"bogus"}) == kUsageError);
  CHECK(invoke({}) == kUsageError);
  CHECK(invoke({"run", "--strategy", "warp", "--out", dir.string()}) == kUsageError);
  CHECK(invoke({"run", "--config", (dir / "none.json").string()}) == kUsageError);
  put(dir / "bad.json", R"({"schema_version": 7})");
  CHECK(invoke({"run", "--config", (dir / "bad.json").string()}) == kUsageError);
  std::string out;
  CHECK(invoke({"run", "--strategy", "sp_ulysses", "--ulysses", "8", "--out", dir.string()},
               &out) == kUsageError);
  CHECK(out.find("heads") != std::string::npos);
}

TEST_CASE("run: serial divergence is zero, pipefusion only after warmup") {
  const fs::path dir = scratch("run");
  CHECK(invoke({"run", "--out", (dir / "serial").string()}) == kOk);
  for (const auto& row : csv_rows(slurp(dir / "serial" / "divergence.csv"))) {
    if (row[0] == "step") continue;
    CHECK(row[1] == "0");
    CHECK(row[2] == "0");
  }

  const std::vector<std::string> pf = {"run", "--strategy", "pipefusion", "--pipefusion", "4",
                                       "--patches", "4", "--warmup", "2", "--out"};
  auto args = pf;
  args.push_back((dir / "pf").string());
  CHECK(invoke(args) == kOk);
  const auto rows = csv_rows(slurp(dir / "pf" / "divergence.csv"));
  REQUIRE(rows.size() == 10);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::size_t step = std::stoul(rows[i][0]);
    const double max_abs = std::stod(rows[i][1]);
    if (step >= 6) CHECK(max_abs == 0);
    else CHECK(max_abs > 0);
  }
  CHECK(fs::exists(dir / "pf" / "cost.csv"));
  const auto run_json = nlohmann::json::parse(slurp(dir / "pf" / "run.json"));
  CHECK(run_json.at("devices") == 4);
  CHECK(run_json.at("kv_violations") == 0);

  args.back() = (dir / "pf2").string();
  CHECK(invoke(args) == kOk);
  for (const char* f : {"divergence.csv", "cost.csv", "run.json"})
    CHECK(slurp(dir / "pf" / f) == slurp(dir / "pf2" / f));
}

TEST_CASE("sweep: rows, infeasible cells and ulysses bytes") {
  const fs::path dir = scratch("sweep");
  put(dir / "c.json", R"({"schema_version": 1,
    "model": {"num_heads": 8},
    "sweep": {"strategies": ["sp_ulysses", "pipefusion"], "devices": [1, 2, 4, 8, 16],
              "patches": [4, 8]},
    "out": "o"})");
  CHECK(invoke({"sweep", "--config", (dir / "c.json").string()}) == kOk);
  const auto ok = csv_rows(slurp(dir / "o" / "sweep.csv"));
  const auto bad = csv_rows(slurp(dir / "o" / "sweep_infeasible.csv"));
  // 5 ulysses cells + 5 x 2 pipefusion cells.
  CHECK(ok.size() - 1 + bad.size() - 1 == 15);
  for (std::size_t i = 1; i < bad.size(); ++i) CHECK(bad[i].size() == 5);

  std::map<std::size_t, double> bytes;
  for (std::size_t i = 1; i < ok.size(); ++i)
    if (ok[i][0] == "sp_ulysses") bytes[std::stoul(ok[i][1])] = std::stod(ok[i][7]);
  REQUIRE(bytes.count(8));
  CHECK(bytes[2] == 2 * bytes[4]);
  CHECK(bytes[4] == 2 * bytes[8]);
  CHECK(bytes[1] == 0);
}

TEST_CASE("a one-cell sweep reproduces run") {
  const fs::path dir = scratch("cell");
  put(dir / "c.json", R"({"schema_version": 1,
    "parallel": {"strategy": "sp_ring", "ring": 2},
    "sweep": {"strategies": ["sp_ring"], "devices": [2]}, "out": "o"})");
  const std::string cfg = (dir / "c.json").string();
  CHECK(invoke({"sweep", "--config", cfg}) == kOk);
  CHECK(invoke({"run", "--config", cfg}) == kOk);
  const auto sweep_rows = csv_rows(slurp(dir / "o" / "sweep.csv"));
  const auto run_rows = csv_rows(slurp(dir / "o" / "cost.csv"));
  REQUIRE(sweep_rows.size() == 2);
  REQUIRE(run_rows.size() == 2);
  CHECK(sweep_rows[1][4] == run_rows[1][0]);  // config label
  CHECK(sweep_rows[1][5] == run_rows[1][3]);  // predicted
  CHECK(sweep_rows[1][6] == run_rows[1][2]);  // simulated
  CHECK(sweep_rows[1][7] == run_rows[1][4]);  // bytes
}

TEST_CASE("plan: one device, and cfg across nodes on a two-node cluster") {
  const fs::path dir = scratch("plan");
  CHECK(invoke({"plan", "--out", (dir / "one").string()}) == kOk);
  CHECK(csv_rows(slurp(dir / "one" / "plans.csv")).size() == 2);

  put(dir / "topo.json", R"({"nodes": 2, "devices_per_node": 8,
    "intra_node": {"kind": "pcie", "bandwidth_GBps": 25, "latency_us": 5},
    "inter_node": {"kind": "ethernet", "bandwidth_Gbps": 100, "latency_us": 20},
    "device_gflops": 150000})");
  put(dir / "c.json", R"({"schema_version": 1,
    "model": {"num_layers": 28, "hidden_size": 1152, "num_heads": 16, "image_tokens": 4096,
              "text_tokens": 120, "conditioning": "cross_attention"},
    "diffusion": {"num_steps": 20, "guidance_scale": 4.5, "guided": true},
    "topology": "topo.json", "out": "two", "plan": {"element_size": 2}})");
  std::string out;
  CHECK(invoke({"plan", "--config", (dir / "c.json").string()}, &out) == kOk);
  CHECK(out.find("recommended cfg2") != std::string::npos);
  const auto rows = csv_rows(slurp(dir / "two" / "plans.csv"));
  CHECK(rows[1][0] == "2");
  const auto j = nlohmann::json::parse(slurp(dir / "two" / "plans.json"));
  CHECK(j.size() == rows.size() - 1);
}

TEST_CASE("shipped sample config verifies, ring hybrid included") {
  const fs::path dir = scratch("sample");
  std::string out;
  CHECK(invoke({"verify", "--config", std::string(DITSIM_CONFIG_DIR) + "/desk.json", "--out",
                dir.string()},
               &out) == kOk);
  CHECK(out.find("PASS configured/cfg2-pp2-u1-r2-M4") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
}
