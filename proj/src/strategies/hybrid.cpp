// The 4D-mesh engine: cfg x pipefusion x ring x ulysses.
//
// Every diffusion step is cut into units: one unit holding the whole
// sequence for warmup steps (or when M = 1), otherwise one unit per patch.
// A unit flows through the pipeline stages; inside a stage every SP group
// runs each block with Ulysses all_to_all and ring rotation. With M > 1 the
// received K/V are retained in per-device buffers so that later patches of
// the same step see them, and patches not yet recomputed are read stale.
//
// Stage 0 embeds, unembeds and updates the latent. The last stage hands
// hidden rows back to stage 0, so stage traffic forms a ring. Results of a
// unit are collected lazily, right before the next unit touching the same
// latent rows is embedded, which keeps the pipeline full in simulated time.

#include <cmath>
#include <deque>
#include <map>
#include <sstream>
#include <tuple>

#include "engine_common.hpp"

namespace ditsim {

namespace {

using detail::KVBuffer;

struct Unit {
  std::size_t t = 0;
  std::size_t micro = 0;
  bool warm = false;
  bool whole = false;
  bool last_of_step = false;
  std::vector<std::size_t> patches;
  std::vector<std::vector<std::size_t>> shards;  // token ids per SP index
  std::vector<char> member;                      // token id -> belongs to unit
};

std::string tag(const char* what, std::size_t b) { return std::string(what) + "/" + std::to_string(b); }

class HybridEngine {
 public:
  HybridEngine(sim::Simulator& sim, const ParallelConfig& config, const DiTSpec& spec,
               const DiffusionSpec& sched, const Weights& weights, const Prompt& prompt)
      : sim_(sim),
        config_(config),
        spec_(spec),
        sched_(sched),
        weights_(weights),
        prompt_(prompt),
        mesh_(sim.topology(), config.grid()),
        plan_(spec, config.num_patches, config.sp(), TextPlacement::first_patch),
        P_(config.pipefusion),
        U_(config.ulysses),
        R_(config.ring),
        M_(config.num_patches),
        sp_(config.sp()),
        per_stage_(spec.num_layers / config.pipefusion),
        branches_(prompt.branches()),
        width_(spec.hidden_size / config.ulysses),
        hidden_(mesh_.size()) {
    if (M_ > 1) {
      for (std::size_t r = 0; r < mesh_.size(); ++r) {
        const sim::MeshCoord co = mesh_.coord(r);
        for (std::size_t b = 0; b < branches_; ++b) {
          if (branch_cfg(b) != co.cfg) continue;
          for (std::size_t l = co.pipefusion * per_stage_; l < (co.pipefusion + 1) * per_stage_; ++l)
            kv_.emplace(std::make_tuple(r, b, l), KVBuffer(plan_.sequence_length(), width_));
        }
      }
    }
  }

  RunResult run(const Tensor& x_T) {
    build_units();
    latent_.assign(config_.cfg, x_T);
    trace_.push_back({x_T, sched_.num_steps});
    for (std::size_t idx = 0; idx < units_.size(); ++idx) {
      finish_overlapping(units_[idx]);
      for (std::size_t b = 0; b < branches_; ++b) forward_unit(units_[idx], b);
      pending_.push_back(idx);
    }
    while (!pending_.empty()) finish_front();
    if (sim_.undelivered() != 0) throw std::logic_error("hybrid engine left messages undelivered");

    RunResult out;
    out.trace = std::move(trace_);
    out.freshness = std::move(fresh_);
    out.cost.sim = sim_.elapsed_report();
    out.cost.comm_bytes = out.cost.sim.max_device_bytes();
    out.cost.kv_violations = violations_;
    out.cost.param_bytes.assign(mesh_.size(), 0.0);
    out.cost.kv_bytes.assign(mesh_.size(), 0.0);
    for (std::size_t r = 0; r < mesh_.size(); ++r) {
      const std::size_t d = mesh_.coord(r).pipefusion;
      if (d == 0) out.cost.param_bytes[r] += detail::io_weight_bytes(weights_);
      for (std::size_t l = d * per_stage_; l < (d + 1) * per_stage_; ++l)
        out.cost.param_bytes[r] += detail::block_weight_bytes(weights_, l);
    }
    for (const auto& [key, buf] : kv_) out.cost.kv_bytes[std::get<0>(key)] += buf.bytes();
    return out;
  }

 private:
  std::size_t branch_cfg(std::size_t b) const { return config_.cfg == 2 ? b : 0; }

  std::size_t rank(std::size_t c, std::size_t d, std::size_t i) const {
    return mesh_.rank({c, d, i / U_, i % U_});
  }

  std::size_t stage_of(std::size_t block) const { return block / per_stage_; }

  void build_units() {
    const std::size_t T = sched_.num_steps;
    const std::size_t S = plan_.sequence_length();
    auto make = [&](std::size_t t, std::size_t micro, bool warm, std::vector<std::size_t> patches) {
      Unit u;
      u.t = t;
      u.micro = micro;
      u.warm = warm;
      u.patches = std::move(patches);
      u.whole = u.patches.size() == M_;
      u.shards.resize(sp_);
      u.member.assign(S, 0);
      for (std::size_t m : u.patches) {
        for (std::size_t i = 0; i < sp_; ++i) {
          const auto& ids = plan_.shard(m, i);
          u.shards[i].insert(u.shards[i].end(), ids.begin(), ids.end());
        }
        for (std::size_t id : plan_.patch(m)) u.member[id] = 1;
      }
      return u;
    };
    for (std::size_t t = T; t >= 1; --t) {
      const bool warm = T - t < config_.warmup_steps;
      if (warm || M_ == 1) {
        std::vector<std::size_t> all(M_);
        for (std::size_t m = 0; m < M_; ++m) all[m] = m;
        units_.push_back(make(t, 0, warm, all));
      } else {
        for (std::size_t m = 0; m < M_; ++m) units_.push_back(make(t, m, false, {m}));
      }
      units_.back().last_of_step = true;
    }
  }

  void finish_overlapping(const Unit& next) {
    auto overlaps = [&](const Unit& u) {
      for (std::size_t m : u.patches)
        for (std::size_t n : next.patches)
          if (m == n) return true;
      return false;
    };
    std::size_t last = pending_.size();
    for (std::size_t k = 0; k < pending_.size(); ++k)
      if (overlaps(units_[pending_[k]])) last = k;
    if (last == pending_.size()) return;
    for (std::size_t k = 0; k <= last; ++k) finish_front();
  }

  void forward_unit(const Unit& u, std::size_t b) {
    const std::size_t c = branch_cfg(b);
    const StepConditioning ctx = condition_step(spec_, prompt_.branch(b), u.t);
    const double hs = static_cast<double>(spec_.hidden_size);
    const double lat = static_cast<double>(spec_.latent_channels);
    for (std::size_t d = 0; d < P_; ++d) {
      for (std::size_t i = 0; i < sp_; ++i) {
        const std::size_t r = rank(c, d, i);
        if (d == 0) {
          hidden_[r] = detail::embed_shard(spec_, weights_, latent_[c], ctx, u.shards[i]);
          sim_.compute(r, 2.0 * u.shards[i].size() * lat * hs);
        } else {
          hidden_[r] = sim_.receive(r, rank(c, d - 1, i), tag("act", b));
        }
      }
      for (std::size_t l = d * per_stage_; l < (d + 1) * per_stage_; ++l)
        run_block(u, b, c, d, l, ctx);
      for (std::size_t i = 0; i < sp_; ++i) {
        const std::size_t r = rank(c, d, i);
        if (P_ == 1) {
          outputs_[{b, i}].push_back(std::move(hidden_[r]));
        } else {
          const bool last = d + 1 == P_;
          sim_.p2p_send(r, rank(c, (d + 1) % P_, i), hidden_[r], tag(last ? "out" : "act", b),
                        true);
        }
      }
    }
  }

  void finish_front() {
    const Unit& u = units_[pending_.front()];
    pending_.pop_front();
    const std::size_t off = spec_.image_offset();
    const double hs = static_cast<double>(spec_.hidden_size);
    const double lat = static_cast<double>(spec_.latent_channels);
    std::vector<std::vector<Tensor>> eps(branches_, std::vector<Tensor>(sp_));
    for (std::size_t b = 0; b < branches_; ++b) {
      const std::size_t c = branch_cfg(b);
      for (std::size_t i = 0; i < sp_; ++i) {
        const std::size_t r0 = rank(c, 0, i);
        Tensor h;
        if (P_ == 1) {
          auto& q = outputs_.at({b, i});
          h = std::move(q.front());
          q.pop_front();
        } else {
          h = sim_.receive(r0, rank(c, P_ - 1, i), tag("out", b));
        }
        const auto pos = detail::positions_below(u.shards[i], off, false);
        eps[b][i] = unembed_tokens(weights_, gather_rows(h, pos));
        sim_.compute(r0, 2.0 * pos.size() * hs * lat);
      }
    }
    for (std::size_t i = 0; i < sp_; ++i) {
      const auto rows = detail::image_rows(spec_, u.shards[i]);
      Tensor e;
      if (branches_ == 2) {
        Tensor e_c = eps[0][i], e_u = eps[1][i];
        if (config_.cfg == 2) {
          auto g = sim_.all_gather({rank(0, 0, i), rank(1, 0, i)}, {eps[0][i], eps[1][i]}, "cfg");
          e_c = slice_rows(g.results[0], 0, rows.size());
          e_u = slice_rows(g.results[0], rows.size(), 2 * rows.size());
        }
        e = cfg_combine(e_c, e_u, sched_.guidance_scale);
      } else {
        e = std::move(eps[0][i]);
      }
      for (std::size_t c = 0; c < config_.cfg; ++c) {
        const Tensor x = gather_rows(latent_[c], rows);
        scatter_rows(latent_[c], scheduler_update(x, e, u.t, sched_), rows);
      }
    }
    if (u.last_of_step) {
      if (config_.cfg == 2 && !bitwise_equal(latent_[0], latent_[1]))
        throw std::logic_error("cfg replicas disagree on the latent");
      trace_.push_back({latent_[0], u.t - 1});
    }
  }

  void run_block(const Unit& u, std::size_t b, std::size_t c, std::size_t d, std::size_t block,
                 const StepConditioning& ctx) {
    const BlockWeights& bw = weights_.blocks[block];
    const Modulation mod = block_modulation(bw, ctx);
    const std::size_t L = spec_.num_layers;
    const std::size_t hd = spec_.head_dim();
    const std::size_t heads = spec_.num_heads / U_;
    const std::size_t S = plan_.sequence_length();
    const double hs = static_cast<double>(spec_.hidden_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool naive_now = config_.naive_sp && !u.warm;

    std::vector<std::size_t> ranks(sp_);
    for (std::size_t i = 0; i < sp_; ++i) ranks[i] = rank(c, d, i);

    // Pre-attention, row-wise on every shard.
    std::vector<Tensor> xin(sp_), q(sp_), k(sp_), v(sp_);
    for (std::size_t i = 0; i < sp_; ++i) {
      const std::size_t r = ranks[i];
      Tensor x = std::move(hidden_[r]);
      const double rows = static_cast<double>(x.rows());
      if (spec_.has_skip(block)) {
        const std::size_t src = L - 1 - block;
        const std::size_t src_stage = stage_of(src);
        const Tensor saved = src_stage == d
                                 ? saved_.at({r, b, src})
                                 : sim_.receive(r, rank(c, src_stage, i),
                                                tag("skip", b) + "/" + std::to_string(src));
        x = skip_merge(bw, x, saved);
        sim_.compute(r, 2.0 * rows * hs * hs);
      }
      QKV p = project_qkv(bw, attention_norm(bw, mod, x));
      sim_.compute(r, 6.0 * rows * hs * hs);
      xin[i] = std::move(x);
      q[i] = std::move(p.q);
      k[i] = std::move(p.k);
      v[i] = std::move(p.v);
    }

    // Ulysses: sequence shards -> head shards within every ring row.
    std::vector<std::vector<std::size_t>> union_ids(R_);
    std::vector<std::vector<std::size_t>> shard_offset(R_);
    for (std::size_t ri = 0; ri < R_; ++ri)
      for (std::size_t ui = 0; ui < U_; ++ui) {
        shard_offset[ri].push_back(union_ids[ri].size());
        const auto& ids = u.shards[ri * U_ + ui];
        union_ids[ri].insert(union_ids[ri].end(), ids.begin(), ids.end());
      }
    std::vector<Tensor> qu(sp_), ku(sp_), vu(sp_);
    for (std::size_t ri = 0; ri < R_; ++ri) {
      if (U_ == 1) {
        qu[ri] = std::move(q[ri]);
        ku[ri] = std::move(k[ri]);
        vu[ri] = std::move(v[ri]);
        continue;
      }
      std::vector<std::size_t> group(ranks.begin() + ri * U_, ranks.begin() + (ri + 1) * U_);
      auto exchange = [&](std::vector<Tensor>& src, std::vector<Tensor>& dst, const char* name) {
        std::vector<std::vector<Tensor>> shards(U_);
        for (std::size_t ui = 0; ui < U_; ++ui)
          for (std::size_t uj = 0; uj < U_; ++uj)
            shards[ui].push_back(slice_cols(src[ri * U_ + ui], uj * width_, (uj + 1) * width_));
        auto res = sim_.all_to_all(group, shards, tag(name, b));
        for (std::size_t uj = 0; uj < U_; ++uj)
          dst[ri * U_ + uj] = concat_rows<double>(res.results[uj]);
      };
      exchange(q, qu, "q");
      exchange(k, ku, "k");
      exchange(v, vu, "v");
    }

    // Retain what this device received (or, in the ablation, only its own rows).
    auto buffer = [&](std::size_t i) -> KVBuffer* {
      if (M_ == 1) return nullptr;
      return &kv_.at({ranks[i], b, block});
    };
    for (std::size_t i = 0; i < sp_; ++i) {
      KVBuffer* buf = buffer(i);
      if (!buf) continue;
      const std::size_t ri = i / U_, ui = i % U_;
      if (naive_now) {
        const std::size_t o = shard_offset[ri][ui], n = u.shards[i].size();
        buf->write(u.shards[i], slice_rows(ku[i], o, o + n), slice_rows(vu[i], o, o + n), u.t);
      } else {
        buf->write(union_ids[ri], ku[i], vu[i], u.t);
      }
    }

    std::vector<Tensor> o(sp_);
    if (R_ == 1) {
      for (std::size_t i = 0; i < sp_; ++i) {
        KVBuffer* buf = buffer(i);
        Tensor kf, vf;
        if (buf) {
          kf = buf->k;
          vf = buf->v;
          if (naive_now) {
            scatter_rows(kf, ku[i], union_ids[0]);
            scatter_rows(vf, vu[i], union_ids[0]);
          }
        } else {
          if (union_ids[0].size() != S) throw std::logic_error("unit does not cover the sequence");
          kf = Tensor({S, width_});
          vf = Tensor({S, width_});
          scatter_rows(kf, ku[i], union_ids[0]);
          scatter_rows(vf, vu[i], union_ids[0]);
        }
        o[i] = multi_head_attention(qu[i], kf, vf, heads);
        sim_.compute(ranks[i], 4.0 * qu[i].rows() * S * width_);
      }
    } else {
      ring_attention(u, b, ranks, union_ids, qu, ku, vu, o, heads, scale, naive_now, buffer);
    }

    // Back from head shards to sequence shards.
    std::vector<Tensor> attn(sp_);
    for (std::size_t ri = 0; ri < R_; ++ri) {
      if (U_ == 1) {
        attn[ri] = std::move(o[ri]);
        continue;
      }
      std::vector<std::size_t> group(ranks.begin() + ri * U_, ranks.begin() + (ri + 1) * U_);
      std::vector<std::vector<Tensor>> shards(U_);
      for (std::size_t uj = 0; uj < U_; ++uj)
        for (std::size_t ui = 0; ui < U_; ++ui) {
          const std::size_t off = shard_offset[ri][ui];
          shards[uj].push_back(
              slice_rows(o[ri * U_ + uj], off, off + u.shards[ri * U_ + ui].size()));
        }
      auto res = sim_.all_to_all(group, shards, tag("o", b));
      for (std::size_t ui = 0; ui < U_; ++ui)
        attn[ri * U_ + ui] = concat_cols<double>(res.results[ui]);
    }

    const std::size_t consumer = L - 1 - block;
    const bool feeds_skip = block < consumer && spec_.has_skip(consumer);
    for (std::size_t i = 0; i < sp_; ++i) {
      const std::size_t r = ranks[i];
      const double rows = static_cast<double>(xin[i].rows());
      Tensor out = detail::block_tail(spec_, bw, mod, ctx, xin[i], attn[i]);
      sim_.compute(r, 2.0 * rows * hs * hs + 4.0 * rows * hs * spec_.ffn_hidden());
      if (feeds_skip) {
        const std::size_t cs = stage_of(consumer);
        if (cs == d)
          saved_[{r, b, block}] = out;
        else
          sim_.p2p_send(r, rank(c, cs, i), out, tag("skip", b) + "/" + std::to_string(block),
                        false);
      }
      hidden_[r] = std::move(out);
    }

    if (M_ > 1) {
      check_consistency(u, b, block, ranks);
      if (!config_.naive_sp) record_freshness(u, b, block, ranks);
    }
  }

  template <typename BufferFn>
  void ring_attention(const Unit& u, std::size_t b, const std::vector<std::size_t>& ranks,
                      const std::vector<std::vector<std::size_t>>& union_ids,
                      const std::vector<Tensor>& qu, const std::vector<Tensor>& ku,
                      const std::vector<Tensor>& vu, std::vector<Tensor>& o, std::size_t heads,
                      double scale, bool naive_now, BufferFn buffer) {
    const std::size_t hd = spec_.head_dim();
    std::vector<std::size_t> rest;
    if (M_ > 1 && !u.whole)
      for (std::size_t id = 0; id < plan_.sequence_length(); ++id)
        if (!u.member[id]) rest.push_back(id);

    for (std::size_t uj = 0; uj < U_; ++uj) {
      std::vector<std::vector<SoftmaxAccumulator>> acc(R_, std::vector<SoftmaxAccumulator>(heads));
      std::vector<Tensor> cur_k(R_), cur_v(R_);
      std::vector<std::size_t> group(R_);
      for (std::size_t ri = 0; ri < R_; ++ri) {
        cur_k[ri] = ku[ri * U_ + uj];
        cur_v[ri] = vu[ri * U_ + uj];
        group[ri] = ranks[ri * U_ + uj];
      }
      auto merge = [&](std::size_t ri, const Tensor& kb, const Tensor& vb) {
        const Tensor& qq = qu[ri * U_ + uj];
        for (std::size_t h = 0; h < heads; ++h)
          acc[ri][h].merge_block(slice_cols(qq, h * hd, (h + 1) * hd),
                                 slice_cols(kb, h * hd, (h + 1) * hd),
                                 slice_cols(vb, h * hd, (h + 1) * hd), scale);
        sim_.compute(group[ri], 4.0 * qq.rows() * kb.rows() * width_);
      };
      for (std::size_t s = 0; s < R_; ++s) {
        const bool more = s + 1 < R_;
        if (more)
          for (std::size_t ri = 0; ri < R_; ++ri) {
            sim_.p2p_send(group[ri], group[(ri + 1) % R_], cur_k[ri], tag("ring_k", b), true);
            sim_.p2p_send(group[ri], group[(ri + 1) % R_], cur_v[ri], tag("ring_v", b), true);
          }
        for (std::size_t ri = 0; ri < R_; ++ri) merge(ri, cur_k[ri], cur_v[ri]);
        if (!more) break;
        for (std::size_t ri = 0; ri < R_; ++ri) {
          const std::size_t prev = (ri + R_ - 1) % R_;
          cur_k[ri] = sim_.receive(group[ri], group[prev], tag("ring_k", b));
          cur_v[ri] = sim_.receive(group[ri], group[prev], tag("ring_v", b));
          const std::size_t origin = (ri + R_ - s - 1) % R_;
          if (KVBuffer* buf = buffer(ri * U_ + uj); buf && !naive_now)
            buf->write(union_ids[origin], cur_k[ri], cur_v[ri], u.t);
        }
      }
      for (std::size_t ri = 0; ri < R_; ++ri) {
        if (!rest.empty()) {
          const KVBuffer* buf = buffer(ri * U_ + uj);
          merge(ri, gather_rows(buf->k, rest), gather_rows(buf->v, rest));
        }
        std::vector<Tensor> parts;
        for (std::size_t h = 0; h < heads; ++h) parts.push_back(acc[ri][h].finalize());
        o[ri * U_ + uj] = concat_cols<double>(parts);
      }
    }
  }

  void check_consistency(const Unit& u, std::size_t b, std::size_t block,
                         const std::vector<std::size_t>& ranks) {
    std::ostringstream why;
    for (std::size_t i = 0; i < sp_ && why.tellp() == 0; ++i)
      for (std::size_t j = i + 1; j < sp_; ++j) {
        const KVBuffer& a = kv_.at({ranks[i], b, block});
        const KVBuffer& z = kv_.at({ranks[j], b, block});
        const bool same_scope = i % U_ == j % U_;
        if (a.stamp != z.stamp) {
          why << "devices " << ranks[i] << " and " << ranks[j] << " hold K/V from different steps";
          break;
        }
        if (same_scope && (!bitwise_equal(a.k, z.k) || !bitwise_equal(a.v, z.v))) {
          why << "devices " << ranks[i] << " and " << ranks[j] << " hold different K/V values";
          break;
        }
      }
    if (why.tellp() == 0) return;
    ++violations_;
    if (config_.assert_kv_consistency)
      throw KVConsistencyError("KV buffers diverged in an SP group at step " +
                               std::to_string(u.t) + ", micro-step " + std::to_string(u.micro) +
                               ", block " + std::to_string(block) + ": " + why.str());
  }

  void record_freshness(const Unit& u, std::size_t b, std::size_t block,
                        const std::vector<std::size_t>& ranks) {
    for (std::size_t i = 0; i < sp_; ++i) {
      const KVBuffer& buf = kv_.at({ranks[i], b, block});
      for (std::size_t m = 0; m < M_; ++m) {
        const auto& ids = plan_.patch(m);
        const std::size_t s = buf.stamp[ids.front()];
        for (std::size_t id : ids)
          if (buf.stamp[id] != s) throw std::logic_error("patch K/V mixes steps within a buffer");
        fresh_.record({u.t, u.micro, block, m}, s);
      }
    }
  }

  sim::Simulator& sim_;
  const ParallelConfig& config_;
  const DiTSpec& spec_;
  const DiffusionSpec& sched_;
  const Weights& weights_;
  const Prompt& prompt_;
  sim::DeviceMesh mesh_;
  PatchPlan plan_;
  std::size_t P_, U_, R_, M_, sp_, per_stage_, branches_, width_;

  std::vector<Unit> units_;
  std::deque<std::size_t> pending_;
  std::vector<Tensor> hidden_;
  std::vector<Tensor> latent_;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, KVBuffer> kv_;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, Tensor> saved_;
  std::map<std::pair<std::size_t, std::size_t>, std::deque<Tensor>> outputs_;
  std::vector<LatentState> trace_;
  FreshnessTable fresh_;
  std::size_t violations_ = 0;
};

}  // namespace

RunResult run_hybrid(sim::Simulator& sim, const ParallelConfig& config, const DiTSpec& spec,
                     const DiffusionSpec& sched, const Weights& weights, const Tensor& x_T,
                     const Prompt& prompt) {
  if (config.strategy == Strategy::tensor_parallel || config.strategy == Strategy::distrifusion)
    throw ContractError("run_hybrid cannot execute " + to_string(config.strategy));
  config.validate(spec, prompt.guided());
  sched.validate();
  if (x_T.shape() != Shape{spec.image_tokens, spec.latent_channels})
    throw ContractError("x_T must be [image_tokens, latent_channels]");
  if (sim.num_devices() != config.num_devices())
    throw ContractError("topology has " + std::to_string(sim.num_devices()) +
                        " devices but the configuration needs " +
                        std::to_string(config.num_devices()));
  return HybridEngine(sim, config, spec, sched, weights, prompt).run(x_T);
}

}  // namespace ditsim
