#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmem/common.hpp"
#include "latentmem/composer.hpp"
#include "latentmem/mas.hpp"
#include "latentmem/model.hpp"
#include "latentmem/optim.hpp"
#include "latentmem/tensor.hpp"

namespace latentmem {

struct LmpoConfig {
  int group_size = 8;           // G
  double clip_eps = 0.2;        // surrogate clip range
  double adv_eps = 1e-8;        // advantage denominator epsilon
  double learning_rate = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;   // matrix parameters only
  double grad_clip_norm = 1.0;
  double train_temperature = 1.0;
  double eval_temperature = 0.0;
  int epochs_per_batch = 1;
  int macro_batch = 32;
  double kl_weight = 0.0;       // fixed 0: the KL term is omitted
  int total_steps = 200;
  double warmup_ratio = 0.1;
  int topk = 1;
  int gen_budget = 24;
  int render_char_budget = 1200;
  int workers = 1;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("LmpoConfig: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("LmpoConfig: clip_eps must be in (0,1)");
    if (macro_batch < 1 || total_steps < 0) throw std::invalid_argument("LmpoConfig: bad batch/step counts");
    if (kl_weight != 0.0) throw std::invalid_argument("LmpoConfig: KL penalty is fixed at 0 and omitted");
  }
};

// (R_i - mean) / (population std + adv_eps)
inline std::vector<double> compute_advantages(const std::vector<double>& rewards, double adv_eps) {
  if (rewards.size() < 2) throw std::invalid_argument("compute_advantages: need a group of size >= 2");
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  const double denom = std::sqrt(var) + adv_eps;
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / denom);
  return out;
}

// min(r*A, clip(r, 1-eps, 1+eps)*A) -- the per-token surrogate to maximize
inline double clipped_token_loss(double r, double adv, double eps) {
  const double clipped = std::min(1.0 + eps, std::max(1.0 - eps, r));
  return std::min(r * adv, clipped * adv);
}

// -J over a flat token stream: J = sum clipped / token count
inline double lmpo_objective_value(const std::vector<double>& ratios, const std::vector<double>& token_advs,
                                   double eps) {
  if (ratios.empty() || ratios.size() != token_advs.size())
    throw std::invalid_argument("lmpo_objective_value: empty or mismatched token stream");
  double s = 0;
  for (size_t i = 0; i < ratios.size(); ++i) s += clipped_token_loss(ratios[i], token_advs[i], eps);
  return -s / static_cast<double>(ratios.size());
}

// One query's G rollouts with everything the scoring pass needs frozen in:
// the retrieved context, the role profiles actually used, per-token ids and
// the old-policy log-probabilities cached at sampling time.
template <class Real>
struct RolloutGroup {
  TaskInstance task;
  std::vector<Trajectory> retrieved;   // T_q, frozen for the group
  std::string rendered_context;
  std::map<int, std::string> profiles; // agent -> profile fed to the composer
  std::vector<EpisodeResult<Real>> episodes;
  std::vector<std::vector<std::vector<Real>>> old_logprobs;  // [episode][step][token]
  std::vector<double> rewards;
  std::vector<double> advantages;
  int64_t token_count = 0;
};

// Samples G independent episodes against an immutable snapshot (phi_old is
// whatever composer X.composer currently points at), then caches teacher-forced
// old-policy log-probabilities and group advantages. Returns nothing when the
// group produced no tokens at all.
template <class Real>
std::optional<RolloutGroup<Real>> sample_group(const TaskInstance& task, const MasSystem<Real>& x,
                                               const LmpoConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (x.mode != Mode::latentmem) throw std::invalid_argument("sample_group: latentmem mode required");
  x.validate();

  RolloutGroup<Real> group;
  group.task = task;
  const int64_t snapshot = static_cast<int64_t>(x.bank->size());
  group.retrieved = x.bank->retrieve_topk(task.query, cfg.topk, snapshot);
  group.rendered_context = render_context(group.retrieved, cfg.render_char_budget);

  std::map<int, std::vector<Real>> role_memory;
  for (int agent : x.graph) {
    if (group.profiles.count(agent)) continue;
    const std::string profile =
        x.role_ablation ? kPlaceholderProfile : x.agents[static_cast<size_t>(agent)].role_profile;
    group.profiles[agent] = profile;
    Tensor<Real> m = compose(*x.composer, *x.backbone, profile, group.rendered_context);
    role_memory[agent] = *m.data;
  }

  EpisodeOptions<Real> opts;
  opts.topk = cfg.topk;
  opts.temperature = cfg.train_temperature;
  opts.max_output_tokens = cfg.gen_budget;
  opts.render_char_budget = cfg.render_char_budget;
  opts.append_to_bank = false;
  opts.bank_snapshot = snapshot;
  opts.preset_retrieved = &group.retrieved;
  opts.preset_memory = &role_memory;

  group.episodes.resize(static_cast<size_t>(cfg.group_size));
  parallel_for(cfg.group_size, cfg.workers, [&](int64_t i) {
    group.episodes[static_cast<size_t>(i)] =
        run_episode(x, task, opts, mix_seed(seed, mix_seed(hash_str("member"), static_cast<uint64_t>(i))));
  });

  group.old_logprobs.resize(group.episodes.size());
  for (size_t i = 0; i < group.episodes.size(); ++i) {
    const auto& ep = group.episodes[i];
    group.rewards.push_back(ep.reward);
    for (const auto& rec : ep.records) {
      Tensor<Real> m;
      const Tensor<Real>* mem = nullptr;
      if (rec.memory_rows > 0) {
        m = Tensor<Real>::from_vector({rec.memory_rows, x.backbone->cfg.d_model}, rec.memory);
        mem = &m;
      }
      Tensor<Real> lp = sequence_token_logprobs(*x.backbone, rec.prompt_ids, mem, rec.output_ids);
      group.old_logprobs[i].push_back(*lp.data);
      group.token_count += static_cast<int64_t>(rec.output_ids.size());
    }
  }
  if (group.token_count == 0) {
    std::fprintf(stderr, "[lmpo] group for query '%s' produced no tokens, discarding\n", task.query.c_str());
    return std::nullopt;
  }
  group.advantages = compute_advantages(group.rewards, cfg.adv_eps);
  return group;
}

namespace detail {

// Builds the group's surrogate sum on the tape. Returns the (unnormalized)
// sum of per-token clipped terms; ratio values and the count of clipped
// tokens come back through the out-parameters.
template <class Real>
Tensor<Real> build_group_surrogate(const RolloutGroup<Real>& group, const ComposerParams<Real>& phi,
                                   const BackboneParams<Real>& backbone, double clip_eps,
                                   std::vector<double>* ratios_out, int64_t* clipped_out) {
  std::map<int, Tensor<Real>> role_memory;
  for (const auto& [agent, profile] : group.profiles)
    role_memory.emplace(agent, compose(phi, backbone, profile, group.rendered_context));

  Tensor<Real> total;
  bool have_total = false;
  for (size_t i = 0; i < group.episodes.size(); ++i) {
    const auto& ep = group.episodes[i];
    const Real adv = static_cast<Real>(group.advantages[i]);
    for (size_t s = 0; s < ep.records.size(); ++s) {
      const auto& rec = ep.records[s];
      const Tensor<Real>* mem = nullptr;
      auto it = role_memory.find(rec.agent_idx);
      if (rec.memory_rows > 0) {
        if (it == role_memory.end()) throw std::logic_error("build_group_surrogate: missing role memory");
        mem = &it->second;
      }
      Tensor<Real> lp = sequence_token_logprobs(backbone, rec.prompt_ids, mem, rec.output_ids);
      Tensor<Real> old_lp = Tensor<Real>::from_vector({static_cast<int>(rec.output_ids.size())},
                                                      group.old_logprobs[i][s]);
      Tensor<Real> ratio = exp_elem(sub(lp, old_lp));
      if (ratios_out)
        for (Real r : *ratio.data) ratios_out->push_back(static_cast<double>(r));
      if (clipped_out)
        for (Real r : *ratio.data)
          if (std::abs(static_cast<double>(r) - 1.0) > clip_eps) ++*clipped_out;
      Tensor<Real> clipped = clamp(ratio, static_cast<Real>(1.0 - clip_eps), static_cast<Real>(1.0 + clip_eps));
      Tensor<Real> term = min_elem(scale(ratio, adv), scale(clipped, adv));
      Tensor<Real> contrib = sum(term);
      total = have_total ? add(total, contrib) : contrib;
      have_total = true;
    }
  }
  if (!have_total) throw std::invalid_argument("build_group_surrogate: group holds no tokens");
  return total;
}

}  // namespace detail

// Per-token importance ratios of the whole group under the given phi,
// flattened in (episode, step, token) order. Differentiation is not needed
// here, so everything runs off-tape.
template <class Real>
std::vector<double> importance_ratios(const RolloutGroup<Real>& group, const ComposerParams<Real>& phi,
                                      const BackboneParams<Real>& backbone) {
  std::vector<double> ratios;
  detail::build_group_surrogate(group, phi, backbone, 0.2, &ratios, nullptr);
  return ratios;
}

// -J for a set of groups under phi: single flat normalizer over every
// generated token (no per-trajectory means).
template <class Real>
double lmpo_objective(const std::vector<RolloutGroup<Real>>& groups, const ComposerParams<Real>& phi,
                      const BackboneParams<Real>& backbone, double clip_eps) {
  int64_t tokens = 0;
  for (const auto& g : groups) tokens += g.token_count;
  if (groups.empty() || tokens == 0) throw std::invalid_argument("lmpo_objective: zero generated tokens");
  double s = 0;
  for (const auto& g : groups)
    s += static_cast<double>(
        detail::build_group_surrogate(g, phi, backbone, clip_eps, nullptr, nullptr).value());
  return -s / static_cast<double>(tokens);
}

struct StepMetrics {
  double loss = 0.0;
  double mean_reward = 0.0;
  double clip_frac = 0.0;
  double grad_norm = 0.0;
  int64_t tokens = 0;
};

// One optimizer update from a macro batch of groups sampled under phi_old.
// Gradients exist only for composer parameters; the backbone participates as
// frozen tape leaves and is never touched.
template <class Real>
StepMetrics train_step(const std::vector<RolloutGroup<Real>>& groups, ComposerParams<Real>& composer,
                       const BackboneParams<Real>& backbone, AdamW<Real>& opt, const LmpoConfig& cfg,
                       int step_index) {
  cfg.validate();
  if (groups.empty()) throw std::invalid_argument("train_step: empty group batch");
  int64_t tokens = 0;
  for (const auto& g : groups) tokens += g.token_count;
  if (tokens == 0) throw std::invalid_argument("train_step: zero generated tokens");

  std::vector<Tensor<Real>*> params = composer.trainable_parameters();
  const size_t n_params = params.size();

  std::vector<std::vector<std::vector<Real>>> group_grads(groups.size());
  std::vector<double> group_loss(groups.size(), 0.0);
  std::vector<int64_t> group_clipped(groups.size(), 0);

  parallel_for(static_cast<int64_t>(groups.size()), cfg.workers, [&](int64_t gi) {
    Tape<Real> tape;
    ComposerParams<Real> phi_w = composer.watch(tape, false);
    BackboneParams<Real> theta_w = backbone.watch(tape, /*frozen=*/true);
    Tensor<Real> surrogate = detail::build_group_surrogate(groups[static_cast<size_t>(gi)], phi_w, theta_w,
                                                           cfg.clip_eps, nullptr,
                                                           &group_clipped[static_cast<size_t>(gi)]);
    Tensor<Real> loss = scale(surrogate, static_cast<Real>(-1.0 / static_cast<double>(tokens)));
    group_loss[static_cast<size_t>(gi)] = static_cast<double>(loss.value());
    GradMap<Real> gm = tape.backward(loss);
    std::vector<Tensor<Real>*> leaves = phi_w.trainable_parameters();
    auto& grads = group_grads[static_cast<size_t>(gi)];
    grads.reserve(n_params);
    for (Tensor<Real>* leaf : leaves) {
      if (gm.contains(leaf->node))
        grads.push_back(*gm.at(leaf->node).data);
      else
        grads.push_back(std::vector<Real>(leaf->data->size(), Real(0)));
    }
  });

  std::vector<std::vector<Real>> grads(n_params);
  for (size_t k = 0; k < n_params; ++k) grads[k].assign(params[k]->data->size(), Real(0));
  for (size_t gi = 0; gi < groups.size(); ++gi)
    for (size_t k = 0; k < n_params; ++k)
      for (size_t j = 0; j < grads[k].size(); ++j) grads[k][j] += group_grads[gi][k][j];

  StepMetrics m;
  for (double l : group_loss) m.loss += l;
  if (!std::isfinite(m.loss)) throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step_index));
  m.grad_norm = clip_grad_norm(grads, cfg.grad_clip_norm);
  if (!std::isfinite(m.grad_norm))
    throw std::runtime_error("train_step: non-finite gradient at step " + std::to_string(step_index));

  opt.step(params, grads, warmup_lr(cfg.learning_rate, step_index, cfg.total_steps, cfg.warmup_ratio),
           cfg.weight_decay);

  int64_t clipped = 0;
  size_t n_eps = 0;
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    clipped += group_clipped[gi];
    for (double r : groups[gi].rewards) {
      m.mean_reward += r;
      ++n_eps;
    }
  }
  m.mean_reward /= static_cast<double>(n_eps);
  m.clip_frac = static_cast<double>(clipped) / static_cast<double>(tokens);
  m.tokens = tokens;
  return m;
}

// Mean reward over a task list at a fixed temperature. With updates_on the
// episodes run sequentially and every trajectory is offered to the bank
// (continual adaptation); otherwise episodes run independently against the
// starting snapshot.
template <class Real>
double evaluate(const MasSystem<Real>& x, const std::vector<TaskInstance>& tasks, double temperature,
                int gen_budget, int topk, int render_char_budget, uint64_t seed, bool updates_on,
                int workers = 1) {
  if (tasks.empty()) return 0.0;
  EpisodeOptions<Real> opts;
  opts.topk = topk;
  opts.temperature = temperature;
  opts.max_output_tokens = gen_budget;
  opts.render_char_budget = render_char_budget;
  opts.append_to_bank = updates_on;
  double total = 0;
  if (updates_on || workers <= 1) {
    for (size_t i = 0; i < tasks.size(); ++i) {
      opts.bank_snapshot = x.bank ? static_cast<int64_t>(x.bank->size()) : -1;
      total += run_episode(x, tasks[i], opts, mix_seed(seed, mix_seed(hash_str("eval"), i))).reward;
    }
  } else {
    opts.bank_snapshot = x.bank ? static_cast<int64_t>(x.bank->size()) : -1;
    opts.append_to_bank = false;
    std::vector<double> rewards(tasks.size(), 0.0);
    parallel_for(static_cast<int64_t>(tasks.size()), workers, [&](int64_t i) {
      rewards[static_cast<size_t>(i)] =
          run_episode(x, tasks[static_cast<size_t>(i)], opts,
                      mix_seed(seed, mix_seed(hash_str("eval"), static_cast<uint64_t>(i))))
              .reward;
    });
    for (double r : rewards) total += r;
  }
  return total / static_cast<double>(tasks.size());
}

// snapshot phi_old -> sample macro_batch groups -> one train_step, repeating
// for cfg.total_steps. Periodic evaluation and checkpointing are the caller's
// hooks so the loop itself stays storage-free.
template <class Real>
void train_loop(MasSystem<Real>& x, ComposerParams<Real>& composer, const LmpoConfig& cfg, uint64_t seed,
                const std::function<TaskInstance(int step, int g)>& next_task,
                const std::function<void(int step, const StepMetrics&)>& on_step,
                const std::function<void(int step)>& periodic = nullptr, int periodic_interval = 0) {
  cfg.validate();
  AdamW<Real> opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  for (int step = 0; step < cfg.total_steps; ++step) {
    ComposerParams<Real> phi_old = composer.snapshot();
    MasSystem<Real> x_old = x;
    x_old.composer = &phi_old;

    std::vector<std::optional<RolloutGroup<Real>>> slots(static_cast<size_t>(cfg.macro_batch));
    std::vector<TaskInstance> tasks;
    tasks.reserve(static_cast<size_t>(cfg.macro_batch));
    for (int g = 0; g < cfg.macro_batch; ++g) tasks.push_back(next_task(step, g));
    // groups fan out across workers; episodes inside a group stay sequential
    parallel_for(cfg.macro_batch, cfg.workers, [&](int64_t g) {
      LmpoConfig inner = cfg;
      inner.workers = 1;
      slots[static_cast<size_t>(g)] =
          sample_group(tasks[static_cast<size_t>(g)], x_old, inner,
                       mix_seed(seed, mix_seed(static_cast<uint64_t>(step), static_cast<uint64_t>(g))));
    });
    std::vector<RolloutGroup<Real>> groups;
    for (auto& s : slots)
      if (s.has_value()) groups.push_back(std::move(*s));
    if (groups.empty()) {
      std::fprintf(stderr, "[lmpo] step %d: every group was discarded, skipping update\n", step);
      continue;
    }
    StepMetrics metrics = train_step(groups, composer, *x.backbone, opt, cfg, step);
    if (on_step) on_step(step, metrics);
    if (periodic && periodic_interval > 0 && (step + 1) % periodic_interval == 0) periodic(step);
  }
}

}  // namespace latentmem
