#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "ditsim/cli.hpp"

namespace ditsim::cli {

using nlohmann::json;

namespace {

constexpr double kExactTol = 1e-10;

struct Problem {
  DiTSpec spec;
  DiffusionSpec sched;
  Weights weights;
  Tensor x_T;
  Prompt prompt;
};

Problem make_problem(const DiTSpec& spec, const DiffusionSpec& sched, bool guided,
                     std::uint64_t seed) {
  Problem p{spec, sched, init_weights(spec, seed), {}, {}};
  SeededRng rng(seed + 1);
  p.x_T = random_latent(spec, rng);
  p.prompt.cond = Conditioning::random(spec, rng);
  if (guided) p.prompt.uncond = Conditioning::zeros_like(spec);
  return p;
}

RunResult simulate(const ParallelConfig& c, const Problem& p, const sim::Topology& topo) {
  sim::Simulator s(topo);
  return run_strategy(s, c, p.spec, p.sched, p.weights, p.x_T, p.prompt);
}

bool feasible(const ParallelConfig& c, const Problem& p, std::string* why = nullptr) {
  try {
    c.validate(p.spec, p.prompt.guided());
    return true;
  } catch (const ContractError& e) {
    if (why) *why = e.what();
    return false;
  }
}

/// Whether the strategy reproduces serial numerics for this schedule.
bool exact(const ParallelConfig& c, std::size_t steps) {
  const bool stale = (c.strategy == Strategy::distrifusion && c.distrifusion > 1) ||
                     (c.pipefusion > 1 && c.num_patches > 1);
  return !stale || c.warmup_steps >= steps;
}

bool finite(const std::vector<LatentState>& trace) {
  for (const auto& s : trace)
    for (double v : s.x.flat())
      if (!std::isfinite(v)) return false;
  return true;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string());
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

ParallelConfig hybrid(std::size_t cfg, std::size_t pp, std::size_t u, std::size_t r,
                      std::size_t m) {
  ParallelConfig c;
  c.strategy = Strategy::hybrid;
  c.cfg = cfg;
  c.pipefusion = pp;
  c.ulysses = u;
  c.ring = r;
  c.num_patches = m;
  return c;
}

planner::CostReport predict(const ExperimentConfig& config, const DiTSpec& spec,
                            const ParallelConfig& c, const sim::Topology& topo) {
  planner::PlanCandidate cand;
  cand.config = c;
  return planner::predict_latency(cand, planner::ModelDims::from_spec(spec), config.diffusion,
                                  topo, config.guided);
}

RunSummary summarize(const ExperimentConfig& config, const Problem& p, const ParallelConfig& c,
                     const std::vector<LatentState>& reference) {
  const sim::Topology topo = resolve_topology(config, c.num_devices());
  RunResult r = simulate(c, p, topo);
  RunSummary s;
  s.parallel = c;
  s.divergence = divergence_report(r.trace, reference);
  s.cost = std::move(r.cost);
  s.predicted = predict(config, p.spec, c, topo);
  return s;
}

}  // namespace

// ---- verify -----------------------------------------------------------------------

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

json VerifyReport::to_json() const {
  json list = json::array();
  for (const auto& c : checks)
    list.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  return {{"passed", passed()}, {"checks", list}};
}

VerifyReport verify(const ExperimentConfig& config) {
  config.validate();
  const Problem p = make_problem(config.model, config.diffusion, config.guided, config.seed);
  const std::vector<LatentState> ref =
      serial_diffusion(p.spec, p.sched, p.weights, p.x_T, p.prompt);
  const std::size_t T = p.sched.num_steps;
  VerifyReport report;

  auto check = [&](const std::string& name, const std::function<std::string()>& body) {
    CheckResult r{name, false, ""};
    try {
      r.detail = body();
      r.passed = r.detail.empty();
      if (r.passed) r.detail = "ok";
    } catch (const KVConsistencyError& e) {
      r.detail = std::string("kv_consistency: ") + e.what();
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    report.checks.push_back(std::move(r));
  };
  auto run_of = [&](const ParallelConfig& c) {
    return simulate(c, p, resolve_topology(config, c.num_devices()));
  };
  auto close = [&](const ParallelConfig& c) {
    const double err = max_trace_relative_error(run_of(c).trace, ref);
    return err <= kExactTol ? std::string() : "max relative error " + fmt(err);
  };
  auto bitwise = [&](const ParallelConfig& c) {
    return traces_bitwise_equal(run_of(c).trace, ref) ? std::string() : "trace differs from serial";
  };

  std::vector<ParallelConfig> exact_configs;
  for (std::size_t n : {2, 4}) {
    exact_configs.push_back(ParallelConfig::tp(n));
    exact_configs.push_back(ParallelConfig::ulysses_sp(n));
    exact_configs.push_back(ParallelConfig::ring_sp(n));
  }
  exact_configs.push_back(ParallelConfig::usp(2, 2));
  if (config.guided) {
    ParallelConfig c = ParallelConfig::ulysses_sp(2);
    c.strategy = Strategy::cfg_parallel;
    c.cfg = 2;
    exact_configs.push_back(c);
  }
  for (const auto& c : exact_configs)
    if (feasible(c, p)) check("exact/" + c.label(), [&] { return close(c); });

  std::vector<ParallelConfig> unit = {ParallelConfig::serial(), ParallelConfig::tp(1),
                                      ParallelConfig::ulysses_sp(1), ParallelConfig::ring_sp(1),
                                      ParallelConfig::pipefusion_only(1, 1, 1),
                                      ParallelConfig::distrifusion_only(1, 1)};
  for (const auto& c : unit)
    if (feasible(c, p)) check("degree1/" + to_string(c.strategy), [&] { return bitwise(c); });

  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 2}, {2, 4}, {4, 4}, {4, 8}}) {
    const ParallelConfig c = ParallelConfig::pipefusion_only(n, m, T);
    if (feasible(c, p)) check("warmup/" + c.label(), [&] { return bitwise(c); });
  }
  for (std::size_t n : {2, 4}) {
    const ParallelConfig c = ParallelConfig::distrifusion_only(n, T);
    if (feasible(c, p)) check("warmup/" + c.label(), [&] { return bitwise(c); });
  }

  const std::size_t L = p.spec.num_layers;
  const ParallelConfig pf = ParallelConfig::pipefusion_only(4, 4, 1);
  if (feasible(pf, p))
    check("staleness/" + pf.label(), [&] {
      const auto table = staleness_oracle({StaleStrategy::pipefusion, 4, 4, L, T, 1});
      return run_of(pf).freshness == table ? std::string() : "stamps differ from the oracle";
    });
  const ParallelConfig df = ParallelConfig::distrifusion_only(4, 1);
  if (feasible(df, p))
    check("staleness/" + df.label(), [&] {
      const auto table = staleness_oracle({StaleStrategy::distrifusion, 4, 4, L, T, 1});
      return run_of(df).freshness == table ? std::string() : "stamps differ from the oracle";
    });

  std::vector<ParallelConfig> hybrids = {hybrid(1, 4, 2, 1, 4), hybrid(1, 2, 1, 2, 4)};
  if (config.guided) hybrids.push_back(hybrid(2, 2, 1, 2, 4));
  for (const auto& h : hybrids) {
    const ParallelConfig pure = ParallelConfig::pipefusion_only(h.pipefusion, h.num_patches, 1);
    if (feasible(h, p) && feasible(pure, p))
      check("hybrid/" + h.label(), [&] {
        const double err = max_trace_relative_error(run_of(h).trace, run_of(pure).trace);
        return err <= kExactTol ? std::string() : "differs from pipefusion by " + fmt(err);
      });
  }

  const ParallelConfig& c = config.parallel;
  check("configured/" + c.label(), [&] {
    std::string why;
    if (!feasible(c, p, &why)) return "infeasible: " + why;
    const RunResult r = run_of(c);
    if (r.cost.kv_violations > 0)
      return "kv_consistency: " + std::to_string(r.cost.kv_violations) + " violations";
    if (!finite(r.trace)) return std::string("trace is not finite");
    if (exact(c, T)) {
      const double err = max_trace_relative_error(r.trace, ref);
      return err <= kExactTol ? std::string() : "max relative error " + fmt(err);
    }
    for (const auto& row : divergence_report(r.trace, ref))
      if (row.step + c.warmup_steps >= T && row.step < T && row.rel_l2 > kExactTol)
        return "divergence " + fmt(row.rel_l2) + " at warmup step " + std::to_string(row.step);
    return std::string();
  });
  return report;
}

// ---- run --------------------------------------------------------------------------

json RunSummary::to_json() const {
  json div = json::array();
  for (const auto& r : divergence)
    div.push_back({{"step", r.step}, {"max_abs", r.max_abs}, {"rel_l2", r.rel_l2}});
  json counts = json::object();
  for (const auto& [k, v] : cost.sim.collective_counts) counts[k] = v;
  return {{"config", parallel.label()},
          {"devices", parallel.num_devices()},
          {"simulated_latency_s", cost.makespan()},
          {"predicted_latency_s", predicted.end_to_end},
          {"comm_bytes", cost.comm_bytes},
          {"device_bytes", cost.sim.device_bytes},
          {"collective_counts", counts},
          {"messages", cost.sim.messages},
          {"max_param_bytes", cost.max_param_bytes()},
          {"max_kv_bytes", cost.max_kv_bytes()},
          {"kv_violations", cost.kv_violations},
          {"divergence", div}};
}

RunSummary run(const ExperimentConfig& config) {
  config.validate();
  const Problem p = make_problem(config.model, config.diffusion, config.guided, config.seed);
  std::string why;
  if (!feasible(config.parallel, p, &why)) throw ConfigError("infeasible parallel config: " + why);
  const auto ref = serial_diffusion(p.spec, p.sched, p.weights, p.x_T, p.prompt);
  return summarize(config, p, config.parallel, ref);
}

// ---- sweep ------------------------------------------------------------------------

std::vector<SweepCell> sweep(const ExperimentConfig& config) {
  config.validate();
  const SweepGrid& g = config.sweep;
  if (g.strategies.empty() || g.devices.empty())
    throw ConfigError("sweep grid is empty: list strategies and devices");
  const std::vector<std::size_t> tokens =
      g.tokens.empty() ? std::vector<std::size_t>{config.model.image_tokens} : g.tokens;

  std::vector<SweepCell> cells;
  for (std::size_t tok : tokens) {
    ExperimentConfig cell_config = config;
    cell_config.model.image_tokens = tok;
    const Problem p =
        make_problem(cell_config.model, config.diffusion, config.guided, config.seed);
    std::vector<LatentState> ref;
    for (Strategy s : g.strategies)
      for (std::size_t n : g.devices) {
        const std::vector<std::size_t> patches =
            s == Strategy::pipefusion ? g.patches : std::vector<std::size_t>{n};
        for (std::size_t m : patches) {
          SweepCell cell{s, n, s == Strategy::pipefusion ? m : 1, tok, "", std::nullopt};
          try {
            const ParallelConfig c = config_for(s, n, m, config.parallel.warmup_steps);
            std::string why;
            if (!feasible(c, p, &why)) throw ConfigError(why);
            if (ref.empty()) ref = serial_diffusion(p.spec, p.sched, p.weights, p.x_T, p.prompt);
            cell.result = summarize(cell_config, p, c, ref);
          } catch (const std::exception& e) {
            cell.violation = e.what();
          }
          cells.push_back(std::move(cell));
        }
      }
  }
  auto key = [](const SweepCell& c) {
    return std::make_tuple(to_string(c.strategy), c.tokens, c.devices, c.patches);
  };
  std::stable_sort(cells.begin(), cells.end(),
                   [&](const SweepCell& a, const SweepCell& b) { return key(a) < key(b); });
  return cells;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepCell>& cells) {
  out << "strategy,devices,patches,tokens,config,predicted_latency_s,simulated_latency_s,"
         "comm_bytes,param_bytes,kv_bytes,max_rel_l2\n";
  for (const auto& c : cells) {
    if (!c.result) continue;
    const RunSummary& r = *c.result;
    double worst = 0;
    for (const auto& d : r.divergence) worst = std::max(worst, d.rel_l2);
    out << to_string(c.strategy) << ',' << c.devices << ',' << c.patches << ',' << c.tokens << ','
        << r.parallel.label() << ',' << fmt(r.predicted.end_to_end) << ','
        << fmt(r.cost.makespan()) << ',' << fmt(r.cost.comm_bytes) << ','
        << fmt(r.cost.max_param_bytes()) << ',' << fmt(r.cost.max_kv_bytes()) << ','
        << fmt(worst) << '\n';
  }
}

void write_infeasible_csv(std::ostream& out, const std::vector<SweepCell>& cells) {
  out << "strategy,devices,patches,tokens,reason\n";
  for (const auto& c : cells) {
    if (c.result) continue;
    std::string reason = c.violation;
    std::replace(reason.begin(), reason.end(), ',', ';');
    out << to_string(c.strategy) << ',' << c.devices << ',' << c.patches << ',' << c.tokens << ','
        << reason << '\n';
  }
}

// ---- plan -------------------------------------------------------------------------

std::vector<planner::PlanCandidate> plan(const ExperimentConfig& config) {
  config.validate();
  DiTSpec spec = config.model;
  if (!config.plan.preset.empty()) spec.image_tokens = find_preset(config.plan.preset).image_tokens;
  const std::size_t n = config.topology.empty() ? config.parallel.num_devices()
                                                : sim::load_topology(config.topology).num_devices();
  const sim::Topology topo = resolve_topology(config, n);
  planner::PlanOptions opts;
  opts.guided = config.guided;
  opts.warmup_steps = config.parallel.warmup_steps;
  opts.patch_sweep = config.plan.patch_sweep;
  opts.exhaustive_placement = config.plan.exhaustive_placement;
  const auto dims = planner::ModelDims::from_spec(spec, config.plan.element_size);
  try {
    return planner::rank_plans(
        planner::enumerate_plans(n, dims, spec, config.diffusion, topo, opts));
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

// ---- front end ----------------------------------------------------------------------

int main_entry(int argc, const char* const* argv, std::ostream& log, std::ostream& err) {
  CLI::App app{"Simulated parallel inference for diffusion transformers"};
  app.require_subcommand(1);

  std::string config_path, topology, out_dir, strategy;
  std::uint64_t seed = 0;
  std::size_t cfg = 0, pipefusion = 0, ulysses = 0, ring = 0, patches = 0, warmup = 0,
              devices = 0;
  bool naive_sp = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)");
    sub->add_option("--topology", topology, "Topology file (JSON)");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Seed");
    sub->add_option("--strategy", strategy, "Strategy name");
    sub->add_option("--devices", devices, "Device count for single-degree strategies");
    sub->add_option("--cfg", cfg, "cfg degree");
    sub->add_option("--pipefusion", pipefusion, "PipeFusion degree");
    sub->add_option("--ulysses", ulysses, "Ulysses degree");
    sub->add_option("--ring", ring, "Ring degree");
    sub->add_option("--patches", patches, "Patch count M");
    sub->add_option("--warmup", warmup, "Warmup steps");
    sub->add_flag("--naive-sp", naive_sp, "Ablation: SP devices keep only their own K/V");
  };
  CLI::App* verify_cmd = app.add_subcommand("verify", "Run the oracle suites");
  CLI::App* run_cmd = app.add_subcommand("run", "Simulate one configuration");
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Simulate a strategy x degree grid");
  CLI::App* plan_cmd = app.add_subcommand("plan", "Rank hybrid plans with the cost model");
  for (CLI::App* sub : {verify_cmd, run_cmd, sweep_cmd, plan_cmd}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, log, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, err);
    return kUsageError;
  }
  CLI::App* sub = app.get_subcommands().front();

  try {
    ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (sub->count("--topology")) config.topology = topology;
    if (sub->count("--out")) config.out = out_dir;
    if (sub->count("--seed")) config.seed = seed;
    ParallelConfig& pc = config.parallel;
    if (sub->count("--warmup")) pc.warmup_steps = warmup;
    if (sub->count("--patches")) pc.num_patches = patches;
    if (sub->count("--strategy")) {
      try {
        pc.strategy = parse_strategy(strategy);
      } catch (const ContractError& e) {
        throw ConfigError(e.what());
      }
      if (sub->count("--devices"))
        pc = config_for(pc.strategy, devices, sub->count("--patches") ? patches : devices,
                        pc.warmup_steps);
    }
    if (sub->count("--cfg")) pc.cfg = cfg;
    if (sub->count("--pipefusion")) pc.pipefusion = pipefusion;
    if (sub->count("--ulysses")) pc.ulysses = ulysses;
    if (sub->count("--ring")) pc.ring = ring;
    if (naive_sp) pc.naive_sp = true;
    config.diffusion.warmup_steps = pc.warmup_steps;
    config.validate();
    ensure_dir(config.out);

    if (sub == verify_cmd) {
      const VerifyReport report = verify(config);
      for (const auto& c : report.checks)
        log << (c.passed ? "PASS " : "FAIL ") << c.name << (c.passed ? "" : ": " + c.detail)
            << '\n';
      write_file(config.out / "verify.json", report.to_json().dump(2) + "\n");
      return report.passed() ? kOk : kInvariantFailure;
    }
    if (sub == run_cmd) {
      const RunSummary s = run(config);
      std::ostringstream div, cost;
      write_divergence_csv(div, s.divergence);
      cost << "config,devices,simulated_latency_s,predicted_latency_s,comm_bytes,"
              "max_param_bytes,max_kv_bytes,kv_violations\n"
           << s.parallel.label() << ',' << s.parallel.num_devices() << ','
           << fmt(s.cost.makespan()) << ',' << fmt(s.predicted.end_to_end) << ','
           << fmt(s.cost.comm_bytes) << ',' << fmt(s.cost.max_param_bytes()) << ','
           << fmt(s.cost.max_kv_bytes()) << ',' << s.cost.kv_violations << '\n';
      write_file(config.out / "divergence.csv", div.str());
      write_file(config.out / "cost.csv", cost.str());
      write_file(config.out / "run.json", s.to_json().dump(2) + "\n");
      log << s.parallel.label() << " simulated " << fmt(s.cost.makespan()) << " s, "
          << fmt(s.cost.comm_bytes) << " bytes\n";
      return kOk;
    }
    if (sub == sweep_cmd) {
      const auto cells = sweep(config);
      std::ostringstream ok, bad;
      write_sweep_csv(ok, cells);
      write_infeasible_csv(bad, cells);
      json list = json::array();
      for (const auto& c : cells) {
        json row = {{"strategy", to_string(c.strategy)},
                    {"devices", c.devices},
                    {"patches", c.patches},
                    {"tokens", c.tokens}};
        if (c.result) row["result"] = c.result->to_json();
        else row["violation"] = c.violation;
        list.push_back(row);
      }
      write_file(config.out / "sweep.csv", ok.str());
      write_file(config.out / "sweep_infeasible.csv", bad.str());
      write_file(config.out / "sweep.json", list.dump(2) + "\n");
      log << cells.size() << " cells\n";
      return kOk;
    }
    const auto plans = plan(config);
    std::ostringstream csv;
    planner::write_plans_csv(csv, plans);
    write_file(config.out / "plans.csv", csv.str());
    write_file(config.out / "plans.json", planner::plans_to_json(plans).dump(2) + "\n");
    log << "recommended " << plans.front().config.label() << " ("
        << planner::to_string(plans.front().placement) << ") "
        << fmt(plans.front().cost->end_to_end) << " s\n";
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvariantFailure;
  }
}

}  // namespace ditsim::cli
