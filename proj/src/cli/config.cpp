#include <fstream>
#include <set>
#include <sstream>

#include "ditsim/cli.hpp"

namespace ditsim::cli {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_keys(const json& j, const char* block, const std::set<std::string>& allowed) {
  require(j.is_object(), std::string(block) + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    require(allowed.count(key) != 0, std::string("unknown key '") + key + "' in " + block);
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

DiTSpec model_from_json(const json& j) {
  check_keys(j, "model",
             {"num_layers", "hidden_size", "num_heads", "ffn_multiplier", "conditioning",
              "topology", "image_tokens", "text_tokens", "latent_channels"});
  DiTSpec s;
  read(j, "num_layers", s.num_layers);
  read(j, "hidden_size", s.hidden_size);
  read(j, "num_heads", s.num_heads);
  read(j, "ffn_multiplier", s.ffn_multiplier);
  read(j, "image_tokens", s.image_tokens);
  read(j, "text_tokens", s.text_tokens);
  read(j, "latent_channels", s.latent_channels);
  if (j.contains("conditioning"))
    s.conditioning = parse_conditioning_mode(j.at("conditioning").get<std::string>());
  if (j.contains("topology")) s.topology = parse_block_topology(j.at("topology").get<std::string>());
  return s;
}

ParallelConfig parallel_from_json(const json& j) {
  check_keys(j, "parallel",
             {"strategy", "cfg", "pipefusion", "ulysses", "ring", "tensor_parallel",
              "distrifusion", "patches", "warmup", "naive_sp", "assert_kv_consistency"});
  ParallelConfig c;
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  read(j, "cfg", c.cfg);
  read(j, "pipefusion", c.pipefusion);
  read(j, "ulysses", c.ulysses);
  read(j, "ring", c.ring);
  read(j, "tensor_parallel", c.tensor_parallel);
  read(j, "distrifusion", c.distrifusion);
  read(j, "patches", c.num_patches);
  read(j, "warmup", c.warmup_steps);
  read(j, "naive_sp", c.naive_sp);
  read(j, "assert_kv_consistency", c.assert_kv_consistency);
  return c;
}

}  // namespace

// ---- Presets and helpers --------------------------------------------------------

const std::vector<TokenPreset>& token_presets() {
  static const std::vector<TokenPreset> presets = {
      {"tokens-64k", 65536, "image sequence length of 64K, quoted for 1024px-class tasks"},
      {"tokens-256k", 262144, "image sequence length of 256K, quoted for 2048px-class tasks"},
      {"tokens-262k", 262000, "262 thousand tokens, quoted for a 1024px image"},
      {"pixart-1024", tokens_for_resolution(1024), "1024px, 8x VAE, 2x2 patches"},
  };
  return presets;
}

const TokenPreset& find_preset(const std::string& name) {
  for (const auto& p : token_presets())
    if (p.name == name) return p;
  throw ConfigError("unknown preset '" + name + "'");
}

std::size_t tokens_for_resolution(std::size_t pixels, std::size_t vae_factor, std::size_t patch) {
  require(vae_factor > 0 && patch > 0 && pixels % (vae_factor * patch) == 0,
          "resolution must be a multiple of vae_factor * patch");
  const std::size_t side = pixels / (vae_factor * patch);
  return side * side;
}

sim::Topology resize_topology(const sim::Topology& t, std::size_t devices) {
  require(devices >= 1, "device count must be positive");
  sim::Topology r = t;
  if (devices <= t.devices_per_node) {
    r.nodes = 1;
    r.devices_per_node = devices;
  } else {
    require(devices % t.devices_per_node == 0,
            std::to_string(devices) + " devices do not fill whole nodes of " +
                std::to_string(t.devices_per_node));
    r.nodes = devices / t.devices_per_node;
  }
  if (r.devices_per_node % r.sockets_per_node != 0) {
    r.sockets_per_node = 1;
    r.cross_socket.reset();
  }
  r.validate();
  return r;
}

sim::Topology resolve_topology(const ExperimentConfig& config, std::size_t devices) {
  if (config.topology.empty())
    return sim::Topology::single_node(devices, sim::Link{sim::LinkKind::nvlink, 600e9, 2e-6},
                                      3e14);
  sim::Topology t;
  try {
    t = sim::load_topology(config.topology);
  } catch (const std::exception& e) {
    throw ConfigError("topology " + config.topology.string() + ": " + e.what());
  }
  if (t.num_devices() == devices) return t;
  return resize_topology(t, devices);
}

ParallelConfig config_for(Strategy strategy, std::size_t n, std::size_t patches,
                          std::size_t warmup) {
  ParallelConfig c;
  switch (strategy) {
    case Strategy::serial:
      require(n == 1, "serial runs on one device");
      break;
    case Strategy::tensor_parallel: c = ParallelConfig::tp(n); break;
    case Strategy::sp_ulysses: c = ParallelConfig::ulysses_sp(n); break;
    case Strategy::sp_ring: c = ParallelConfig::ring_sp(n); break;
    case Strategy::usp: {
      // Most balanced split with ulysses >= ring.
      std::size_t r = 1;
      for (std::size_t d = 1; d * d <= n; ++d)
        if (n % d == 0) r = d;
      c = ParallelConfig::usp(n / r, r);
      break;
    }
    case Strategy::distrifusion: c = ParallelConfig::distrifusion_only(n, warmup); break;
    case Strategy::pipefusion: c = ParallelConfig::pipefusion_only(n, patches, warmup); break;
    case Strategy::cfg_parallel:
      require(n == 2, "cfg_parallel alone runs on two devices");
      c.strategy = Strategy::cfg_parallel;
      c.cfg = 2;
      break;
    case Strategy::hybrid:
      throw ConfigError("hybrid needs explicit degrees");
  }
  c.warmup_steps = warmup;
  return c;
}

// ---- Config ---------------------------------------------------------------------

void ExperimentConfig::validate() const {
  require(schema_version == kSchemaVersion,
          "unsupported schema_version " + std::to_string(schema_version));
  try {
    model.validate();
    diffusion.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  require(diffusion.guidance_scale == 0 || guided, "guidance_scale needs \"guided\": true");
  if (!topology.empty())
    require(std::filesystem::is_regular_file(topology),
            "topology file not found: " + topology.string());
  require(plan.element_size > 0, "element_size must be positive");
  if (!plan.preset.empty()) find_preset(plan.preset);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["model"] = {{"num_layers", c.model.num_layers},
                {"hidden_size", c.model.hidden_size},
                {"num_heads", c.model.num_heads},
                {"ffn_multiplier", c.model.ffn_multiplier},
                {"conditioning", to_string(c.model.conditioning)},
                {"topology", to_string(c.model.topology)},
                {"image_tokens", c.model.image_tokens},
                {"text_tokens", c.model.text_tokens},
                {"latent_channels", c.model.latent_channels}};
  j["diffusion"] = {{"num_steps", c.diffusion.num_steps},
                    {"alpha_schedule", c.diffusion.alpha_schedule},
                    {"guidance_scale", c.diffusion.guidance_scale},
                    {"guided", c.guided}};
  const ParallelConfig& p = c.parallel;
  j["parallel"] = {{"strategy", to_string(p.strategy)},
                   {"cfg", p.cfg},
                   {"pipefusion", p.pipefusion},
                   {"ulysses", p.ulysses},
                   {"ring", p.ring},
                   {"tensor_parallel", p.tensor_parallel},
                   {"distrifusion", p.distrifusion},
                   {"patches", p.num_patches},
                   {"warmup", p.warmup_steps},
                   {"naive_sp", p.naive_sp},
                   {"assert_kv_consistency", p.assert_kv_consistency}};
  j["topology"] = c.topology.string();
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  json strategies = json::array();
  for (Strategy s : c.sweep.strategies) strategies.push_back(to_string(s));
  j["sweep"] = {{"strategies", strategies},
                {"devices", c.sweep.devices},
                {"patches", c.sweep.patches},
                {"tokens", c.sweep.tokens}};
  j["plan"] = {{"preset", c.plan.preset},
               {"element_size", c.plan.element_size},
               {"exhaustive_placement", c.plan.exhaustive_placement},
               {"patch_sweep", c.plan.patch_sweep}};
  return j;
}

ExperimentConfig config_from_json(const json& j, const std::filesystem::path& base) {
  ExperimentConfig c;
  try {
    check_keys(j, "config",
               {"schema_version", "model", "diffusion", "parallel", "topology", "seed", "out",
                "sweep", "plan"});
    require(j.contains("schema_version"), "schema_version is required");
    c.schema_version = j.at("schema_version").get<int>();
    require(c.schema_version == kSchemaVersion,
            "unsupported schema_version " + std::to_string(c.schema_version));
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    if (j.contains("diffusion")) {
      const json& d = j.at("diffusion");
      check_keys(d, "diffusion", {"num_steps", "alpha", "alpha_schedule", "guidance_scale", "guided"});
      read(d, "num_steps", c.diffusion.num_steps);
      if (d.contains("alpha_schedule")) {
        c.diffusion.alpha_schedule = d.at("alpha_schedule").get<std::vector<double>>();
      } else {
        const double alpha = d.value("alpha", 1.0 / static_cast<double>(c.diffusion.num_steps));
        c.diffusion.alpha_schedule.assign(c.diffusion.num_steps, alpha);
      }
      read(d, "guidance_scale", c.diffusion.guidance_scale);
      read(d, "guided", c.guided);
    }
    if (j.contains("parallel")) c.parallel = parallel_from_json(j.at("parallel"));
    c.diffusion.warmup_steps = c.parallel.warmup_steps;
    if (j.contains("topology")) c.topology = resolve(j.at("topology").get<std::string>(), base);
    read(j, "seed", c.seed);
    if (j.contains("out")) c.out = resolve(j.at("out").get<std::string>(), base);
    if (j.contains("sweep")) {
      const json& s = j.at("sweep");
      check_keys(s, "sweep", {"strategies", "devices", "patches", "tokens"});
      for (const auto& name : s.value("strategies", std::vector<std::string>{}))
        c.sweep.strategies.push_back(parse_strategy(name));
      read(s, "devices", c.sweep.devices);
      read(s, "patches", c.sweep.patches);
      read(s, "tokens", c.sweep.tokens);
    }
    if (j.contains("plan")) {
      const json& p = j.at("plan");
      check_keys(p, "plan", {"preset", "element_size", "exhaustive_placement", "patch_sweep"});
      read(p, "preset", c.plan.preset);
      read(p, "element_size", c.plan.element_size);
      read(p, "exhaustive_placement", c.plan.exhaustive_placement);
      read(p, "patch_sweep", c.plan.patch_sweep);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

}  // namespace ditsim::cli
