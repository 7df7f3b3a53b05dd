#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "latentmem/lmpo.hpp"
#include "latentmem/runconfig.hpp"

namespace latentmem {

inline std::string resolve_path(const std::string& run_dir, const std::string& p) {
  if (p.empty() || p.front() == '/' || run_dir.empty()) return p;
  return run_dir + "/" + p;
}

inline TransformerConfig transformer_config_from(const RunConfig& cfg) {
  TransformerConfig c;
  c.n_layers = cfg.n_layers;
  c.n_heads = cfg.n_heads;
  c.d_model = cfg.d_model;
  c.d_ff = cfg.d_ff;
  c.max_seq_len = cfg.max_seq_len;
  c.validate();
  return c;
}

inline ComposerConfig composer_config_from(const RunConfig& cfg) {
  ComposerConfig c =
      ComposerConfig::for_backbone(transformer_config_from(cfg), cfg.latent_len, cfg.composer_blocks,
                                   cfg.composer_ctx_budget);
  c.validate();
  return c;
}

inline LmpoConfig lmpo_config_from(const RunConfig& cfg) {
  LmpoConfig c;
  c.group_size = cfg.group_size;
  c.clip_eps = cfg.clip_eps;
  c.adv_eps = cfg.adv_eps;
  c.learning_rate = cfg.learning_rate;
  c.adam_beta1 = cfg.adam_beta1;
  c.adam_beta2 = cfg.adam_beta2;
  c.adam_eps = cfg.adam_eps;
  c.weight_decay = cfg.weight_decay;
  c.grad_clip_norm = cfg.grad_clip_norm;
  c.train_temperature = cfg.train_temperature;
  c.eval_temperature = cfg.eval_temperature;
  c.epochs_per_batch = cfg.epochs_per_batch;
  c.macro_batch = cfg.macro_batch;
  c.kl_weight = cfg.kl_weight;
  c.total_steps = cfg.total_steps;
  c.warmup_ratio = cfg.warmup_ratio;
  c.topk = cfg.topk;
  c.gen_budget = cfg.gen_budget;
  c.render_char_budget = cfg.render_char_budget;
  c.workers = cfg.workers;
  c.validate();
  return c;
}

inline std::vector<TaskFamily> families_from(const RunConfig& cfg) {
  std::vector<TaskFamily> out;
  std::string cur;
  for (char c : cfg.task_families + ",") {
    if (c == ',') {
      const std::string name = RunConfig::trim(cur);
      if (!name.empty()) out.push_back(parse_family(name));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (out.empty()) throw std::invalid_argument("config: task_families is empty");
  return out;
}

// Deterministic task list: `count` instances cycling over families and
// worlds, then shuffled by the seed.
inline std::vector<TaskInstance> build_task_list(const RunConfig& cfg, const std::string& split, int count,
                                                 uint64_t salt) {
  std::vector<TaskFamily> families = families_from(cfg);
  std::vector<TaskInstance> tasks;
  int i = 0;
  while (static_cast<int>(tasks.size()) < count) {
    const TaskFamily f = families[static_cast<size_t>(i) % families.size()];
    const int world = (i / static_cast<int>(families.size())) % cfg.worlds;
    const int index = i / (static_cast<int>(families.size()) * cfg.worlds);
    tasks.push_back(generate_task(f, world_seed_for(cfg.seed, f, world), split, index));
    ++i;
  }
  Rng rng(mix_seed(cfg.seed, mix_seed(hash_str(split), salt)));
  for (size_t k = tasks.size(); k > 1; --k) std::swap(tasks[k - 1], tasks[static_cast<size_t>(rng.uniform_int(static_cast<int>(k)))]);
  return tasks;
}

template <class Real>
MasSystem<Real> make_system(const RunConfig& cfg, Mode mode, const BackboneParams<Real>* backbone,
                            ExperienceBank<Real>* bank, const ComposerParams<Real>* composer) {
  MasSystem<Real> x = build_system<Real>(cfg.topology, mode);
  x.backbone = backbone;
  x.bank = mode == Mode::no_memory ? nullptr : bank;
  x.composer = mode == Mode::latentmem ? composer : nullptr;
  x.role_ablation = cfg.role_ablation;
  x.validate();
  return x;
}

template <class Real>
void save_backbone(const BackboneParams<Real>& p, const std::string& path) {
  save_container(path, p.to_entries());
}

template <class Real>
BackboneParams<Real> load_backbone(const RunConfig& cfg, const std::string& path) {
  BackboneParams<Real> p = BackboneParams<Real>::init(transformer_config_from(cfg), cfg.seed);
  p.load_entries(load_container(path));
  return p;
}

template <class Real>
void save_composer(const ComposerParams<Real>& p, const std::string& path) {
  save_container(path, p.to_entries());
}

template <class Real>
ComposerParams<Real> load_composer(const RunConfig& cfg, const std::string& path) {
  ComposerParams<Real> p = ComposerParams<Real>::init(composer_config_from(cfg), cfg.seed);
  p.load_entries(load_container(path));
  return p;
}

struct TrainOutputs {
  std::string metrics_path;
  std::string final_checkpoint_path;
  std::string theta_hash_before;
  std::string theta_hash_after;
  double last_eval_reward = -1.0;
};

// The full `train` command: LMPO over the train split with periodic
// temperature-0 evaluation rows and LMC1 checkpoints in run_dir.
template <class Real>
TrainOutputs run_training(const RunConfig& cfg, const BackboneParams<Real>& backbone,
                          ExperienceBank<Real>& bank, ComposerParams<Real>& composer,
                          const std::string& run_dir) {
  LmpoConfig lcfg = lmpo_config_from(cfg);
  std::vector<TaskInstance> train_tasks = build_task_list(cfg, "train", cfg.train_queries, 1);
  std::vector<TaskInstance> eval_tasks = build_task_list(cfg, "eval", cfg.eval_queries, 2);

  ExperienceBank<Real>* bank_ptr = &bank;
  MasSystem<Real> x = make_system<Real>(cfg, Mode::latentmem, &backbone, bank_ptr, &composer);

  TrainOutputs out;
  out.metrics_path = run_dir + "/metrics.csv";
  out.final_checkpoint_path = resolve_path(run_dir, cfg.composer_path);
  out.theta_hash_before = backbone.sha256_hex();

  MetricsWriter metrics(out.metrics_path);
  auto eval_now = [&]() {
    return evaluate(x, eval_tasks, cfg.eval_temperature, cfg.gen_budget, cfg.topk, cfg.render_char_budget,
                    mix_seed(cfg.seed, hash_str("train-eval")), /*updates_on=*/false, cfg.workers);
  };

  train_loop<Real>(
      x, composer, lcfg, cfg.seed,
      [&](int step, int g) {
        return train_tasks[static_cast<size_t>(step * lcfg.macro_batch + g) % train_tasks.size()];
      },
      [&](int step, const StepMetrics& m) {
        metrics.train_row(step, m.mean_reward, m.loss, m.clip_frac, m.grad_norm, m.tokens);
        if (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) {
          out.last_eval_reward = eval_now();
          metrics.eval_row(step, out.last_eval_reward);
        }
        if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
          char name[64];
          std::snprintf(name, sizeof(name), "composer_step%05d.lmc", step + 1);
          save_composer(composer, run_dir + "/" + name);
        }
      });

  save_composer(composer, out.final_checkpoint_path);
  out.theta_hash_after = backbone.sha256_hex();
  if (out.theta_hash_before != out.theta_hash_after)
    throw std::runtime_error("run_training: frozen backbone hash changed during LMPO");
  return out;
}

struct EvalRow {
  std::string family;
  std::string mode;
  int queries = 0;
  double mean_reward = 0.0;
};

// Per-family, per-mode evaluation report at the configured eval temperature.
template <class Real>
std::vector<EvalRow> run_eval_report(const RunConfig& cfg, const std::vector<Mode>& modes,
                                     const BackboneParams<Real>& backbone, ExperienceBank<Real>& bank,
                                     const ComposerParams<Real>* composer) {
  std::vector<EvalRow> rows;
  for (TaskFamily f : families_from(cfg)) {
    RunConfig fam_cfg = cfg;
    fam_cfg.task_families = family_name(f);
    std::vector<TaskInstance> tasks = build_task_list(fam_cfg, "eval", cfg.eval_queries, 2);
    for (Mode mode : modes) {
      MasSystem<Real> x = make_system<Real>(cfg, mode, &backbone, &bank, composer);
      if (x.bank) {
        x.bank->set_update_enabled(cfg.bank_update);
        x.bank->set_min_reward(cfg.bank_min_reward);
      }
      EvalRow row;
      row.family = family_name(f);
      row.mode = mode_name(mode);
      row.queries = static_cast<int>(tasks.size());
      row.mean_reward = evaluate(x, tasks, cfg.eval_temperature, cfg.gen_budget, cfg.topk,
                                 cfg.render_char_budget, mix_seed(cfg.seed, hash_str("eval-cmd")),
                                 /*updates_on=*/cfg.bank_update && mode != Mode::no_memory, cfg.workers);
      rows.push_back(row);
    }
  }
  return rows;
}

// Mean-latent vectors per (agent, eval query) for external projection.
template <class Real>
void export_latents_csv(const RunConfig& cfg, const BackboneParams<Real>& backbone,
                        ExperienceBank<Real>& bank, const ComposerParams<Real>& composer,
                        const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export-latents: cannot open " + path);
  f << "family,world_id,query_idx,agent_idx,role";
  for (int d = 0; d < cfg.d_model; ++d) f << ",m" << d;
  f << '\n';
  std::vector<TaskInstance> tasks = build_task_list(cfg, "eval", cfg.eval_queries, 2);
  MasSystem<Real> x = make_system<Real>(cfg, Mode::latentmem, &backbone, &bank, &composer);
  for (size_t qi = 0; qi < tasks.size(); ++qi) {
    const auto& task = tasks[qi];
    auto retrieved = bank.retrieve_topk(task.query, cfg.topk);
    const std::string rendered = render_context(retrieved, cfg.render_char_budget);
    for (int agent = 0; agent < x.n_agents(); ++agent) {
      const std::string& profile =
          x.role_ablation ? kPlaceholderProfile : x.agents[static_cast<size_t>(agent)].role_profile;
      Tensor<Real> m = compose(composer, backbone, profile, rendered);
      auto mean = mean_latent_embedding(m);
      f << family_name(task.family) << ',' << task.world_id << ',' << qi << ',' << agent << ','
        << x.agents[static_cast<size_t>(agent)].name;
      for (Real v : mean) f << ',' << detail::fmt_double(static_cast<double>(v));
      f << '\n';
    }
  }
  if (!f) throw std::runtime_error("export-latents: write failed");
}

}  // namespace latentmem
