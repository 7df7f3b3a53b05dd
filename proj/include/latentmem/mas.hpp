#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmem/bank.hpp"
#include "latentmem/common.hpp"
#include "latentmem/composer.hpp"
#include "latentmem/model.hpp"
#include "latentmem/tasks.hpp"

namespace latentmem {

enum class Mode { no_memory, raw_context, latentmem };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::no_memory: return "no_memory";
    case Mode::raw_context: return "raw_context";
    case Mode::latentmem: return "latentmem";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "no_memory") return Mode::no_memory;
  if (s == "raw_context") return Mode::raw_context;
  if (s == "latentmem") return Mode::latentmem;
  throw std::invalid_argument("unknown mode '" + s + "' (no_memory|raw_context|latentmem)");
}

struct AgentSpec {
  std::string name;          // short role header used in prompts
  std::string role_profile;  // the profile text fed to the composer
};

// Substituted for every profile in the role-ablation condition.
inline const char* kPlaceholderProfile = "agent: generic role profile";

// Versioned prompt template: task text, every prior step output under the
// acting agent's header, then the role header and an output cue. The trailing
// space is part of the prompt so generation starts directly on the answer.
inline std::string step_prompt(const std::string& task_text,
                               const std::vector<std::pair<std::string, std::string>>& prior,
                               const std::string& role_name) {
  std::string p = "TASK: " + task_text;
  for (const auto& [name, out] : prior) {
    std::string up = name;
    for (char& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    p += " " + up + ": " + out;
  }
  p += " ROLE: " + role_name + " OUT: ";
  return p;
}

template <class Real>
struct MasSystem {
  std::vector<AgentSpec> agents;
  std::vector<int> graph;  // execution order; horizon H == graph.size()
  Mode mode = Mode::latentmem;
  const BackboneParams<Real>* backbone = nullptr;
  ExperienceBank<Real>* bank = nullptr;
  const ComposerParams<Real>* composer = nullptr;
  bool role_ablation = false;

  int n_agents() const { return static_cast<int>(agents.size()); }
  int horizon() const { return static_cast<int>(graph.size()); }

  void validate() const {
    if (agents.empty() || graph.empty()) throw std::invalid_argument("MasSystem: needs agents and a graph");
    for (int g : graph)
      if (g < 0 || g >= n_agents()) throw std::invalid_argument("MasSystem: graph index out of range");
    if (!backbone) throw std::invalid_argument("MasSystem: missing backbone");
    if (mode == Mode::latentmem && (!bank || !composer))
      throw std::invalid_argument("MasSystem: latentmem mode requires a bank and composer params");
    if (mode == Mode::raw_context && !bank)
      throw std::invalid_argument("MasSystem: raw_context mode requires a bank");
    if (!role_ablation)
      for (size_t i = 0; i < agents.size(); ++i)
        for (size_t j = i + 1; j < agents.size(); ++j)
          if (agents[i].role_profile == agents[j].role_profile)
            throw std::invalid_argument("MasSystem: role profiles must be pairwise distinct");
  }
};

template <class Real>
MasSystem<Real> build_system(const std::string& topology_name, Mode mode) {
  MasSystem<Real> x;
  x.mode = mode;
  const AgentSpec planner{"planner", "planner: outline how to solve the task before anyone answers"};
  const AgentSpec solver{"solver", "solver: draft a short candidate answer for the task"};
  const AgentSpec checker{"checker", "checker: verify the draft and give the final answer inside answer tags"};
  if (topology_name == "chain2") {
    x.agents = {solver, checker};
    x.graph = {0, 1};
  } else if (topology_name == "chain3") {
    x.agents = {planner, solver, checker};
    x.graph = {0, 1, 2};
  } else {
    throw std::invalid_argument("unknown topology '" + topology_name + "' (chain2|chain3)");
  }
  return x;
}

// Binary verifiable reward: the substring between <answer> tags in the final
// agent's output, else the last non-empty whitespace-trimmed line, compared
// case-insensitively against gold.
inline std::string extract_answer(const std::string& output) {
  const std::string open = "<answer>", close = "</answer>";
  const size_t a = output.find(open);
  if (a != std::string::npos) {
    const size_t b = output.find(close, a + open.size());
    if (b != std::string::npos) return output.substr(a + open.size(), b - a - open.size());
  }
  // fallback: last non-empty line
  std::string last;
  std::string cur;
  for (char c : output) {
    if (c == '\n') {
      if (!cur.empty()) last = cur;
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) last = cur;
  return last;
}

namespace detail {
inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}
inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}
}  // namespace detail

inline double compute_reward(const Trajectory& traj, const TaskInstance& task) {
  if (traj.steps.empty()) throw std::invalid_argument("compute_reward: empty trajectory");
  const std::string answer = detail::trim(extract_answer(traj.steps.back().output));
  return detail::lower(answer) == detail::lower(detail::trim(task.gold)) ? 1.0 : 0.0;
}

// Per-step bookkeeping the trainer needs beyond the text trajectory.
template <class Real>
struct StepRecord {
  int agent_idx = 0;
  std::vector<int> prompt_ids;   // post-truncation, BOS included
  std::vector<int> output_ids;   // includes terminating EOS when emitted
  std::vector<Real> sample_logprobs;
  std::vector<Real> memory;      // flattened L' x D, empty when absent
  int memory_rows = 0;
};

template <class Real>
struct EpisodeResult {
  Trajectory trajectory;
  double reward = 0.0;
  std::vector<StepRecord<Real>> records;
  std::vector<Trajectory> retrieved;
  // trace
  int retrieval_count = 0;
  int compose_calls = 0;
  std::vector<int> seq_lengths;  // prompt rows + latent rows per step
};

template <class Real>
struct EpisodeOptions {
  int topk = 1;
  double temperature = 1.0;
  int max_output_tokens = 24;
  int render_char_budget = 1200;
  bool append_to_bank = true;
  int64_t bank_snapshot = -1;  // <0: whole bank
  // trainer-supplied overrides so a whole rollout group shares one retrieval
  // and one compose per role
  const std::vector<Trajectory>* preset_retrieved = nullptr;
  const std::map<int, std::vector<Real>>* preset_memory = nullptr;
};

// One episode under the static execution graph: retrieve once, then for each
// step build the prompt from the template, compose (or reuse) the agent's
// latent memory, sample, and finally score and optionally append to the bank.
template <class Real>
EpisodeResult<Real> run_episode(const MasSystem<Real>& x, const TaskInstance& task,
                                const EpisodeOptions<Real>& opts, uint64_t seed) {
  x.validate();
  EpisodeResult<Real> ep;
  const ComposerConfig* ccfg = x.composer ? &x.composer->cfg : nullptr;
  const int latent_rows = x.mode == Mode::latentmem ? ccfg->latent_len : 0;

  if (x.mode != Mode::no_memory) {
    if (opts.preset_retrieved) {
      ep.retrieved = *opts.preset_retrieved;
    } else {
      ep.retrieved = x.bank->retrieve_topk(task.query, opts.topk, opts.bank_snapshot);
      ep.retrieval_count = 1;
    }
  }
  const std::string rendered =
      x.mode == Mode::no_memory ? std::string() : render_context(ep.retrieved, opts.render_char_budget);

  std::map<int, std::vector<Real>> memory_cache;
  std::vector<std::pair<std::string, std::string>> prior;
  ep.trajectory.query = task.query;
  ep.trajectory.task_tag = family_name(task.family);

  for (size_t j = 0; j < x.graph.size(); ++j) {
    const int agent = x.graph[j];
    const AgentSpec& spec = x.agents[static_cast<size_t>(agent)];
    std::string prompt_text = step_prompt(task.query, prior, spec.name);
    if (x.mode == Mode::raw_context && !rendered.empty()) prompt_text = rendered + " " + prompt_text;

    StepRecord<Real> rec;
    rec.agent_idx = agent;
    std::vector<int> ids;
    ids.push_back(Tokenizer::bos_id);
    for (int id : Tokenizer::encode(prompt_text)) ids.push_back(id);
    rec.prompt_ids =
        clip_prompt_ids(x.backbone->cfg, std::move(ids), latent_rows + opts.max_output_tokens, "run_episode");

    const std::vector<Real>* mem = nullptr;
    if (x.mode == Mode::latentmem) {
      if (opts.preset_memory) {
        auto it = opts.preset_memory->find(agent);
        if (it == opts.preset_memory->end()) throw std::logic_error("run_episode: missing preset memory");
        mem = &it->second;
      } else {
        auto it = memory_cache.find(agent);
        if (it == memory_cache.end()) {
          const std::string& profile = x.role_ablation ? kPlaceholderProfile : spec.role_profile;
          Tensor<Real> m = compose(*x.composer, *x.backbone, profile, rendered);
          ++ep.compose_calls;
          it = memory_cache.emplace(agent, *m.data).first;
        }
        mem = &it->second;
      }
      rec.memory = *mem;
      rec.memory_rows = latent_rows;
    }

    SampleResult<Real> sample =
        sample_completion(*x.backbone, rec.prompt_ids, mem, latent_rows, opts.temperature,
                          opts.max_output_tokens, mix_seed(seed, mix_seed(hash_str("step"), j)));
    rec.output_ids = sample.output_ids;
    rec.sample_logprobs = sample.logprobs;
    ep.seq_lengths.push_back(static_cast<int>(rec.prompt_ids.size()) + latent_rows);

    TrajectoryStep ts;
    ts.agent_idx = agent;
    ts.prompt = prompt_text;
    ts.output = Tokenizer::decode(rec.output_ids);
    ep.trajectory.steps.push_back(ts);
    prior.emplace_back(spec.name, ts.output);
    ep.records.push_back(std::move(rec));
  }

  ep.reward = compute_reward(ep.trajectory, task);
  ep.trajectory.reward = ep.reward;
  if (opts.append_to_bank && x.bank && x.mode != Mode::no_memory) x.bank->append_trajectory(ep.trajectory);
  return ep;
}

// Scripted reference outputs used for bank bootstrapping and the pretraining
// corpus: the solver drafts the bare answer, the checker wraps it in answer
// tags, a planner (chain3) emits a fixed plan line.
inline std::vector<std::pair<std::string, std::string>> scripted_outputs(
    const std::vector<AgentSpec>& agents, const std::vector<int>& graph, const TaskInstance& task) {
  std::vector<std::pair<std::string, std::string>> outs;
  for (int idx : graph) {
    const std::string& name = agents[static_cast<size_t>(idx)].name;
    if (name == "planner")
      outs.emplace_back(name, "plan: recall the answer then verify it");
    else if (name == "checker")
      outs.emplace_back(name, "<answer>" + task.gold + "</answer>");
    else
      outs.emplace_back(name, task.gold);
  }
  return outs;
}

inline Trajectory scripted_trajectory(const std::vector<AgentSpec>& agents, const std::vector<int>& graph,
                                      const TaskInstance& task) {
  Trajectory t;
  t.query = task.query;
  t.task_tag = family_name(task.family);
  t.reward = 1.0;
  std::vector<std::pair<std::string, std::string>> prior;
  auto outs = scripted_outputs(agents, graph, task);
  for (size_t j = 0; j < graph.size(); ++j) {
    TrajectoryStep s;
    s.agent_idx = graph[j];
    s.prompt = step_prompt(task.query, prior, agents[static_cast<size_t>(graph[j])].name);
    s.output = outs[j].second;
    t.steps.push_back(s);
    prior.emplace_back(outs[j].first, outs[j].second);
  }
  return t;
}

inline uint64_t world_seed_for(uint64_t seed, TaskFamily f, int world_index) {
  return mix_seed(mix_seed(seed, hash_str(family_name(f))), static_cast<uint64_t>(world_index));
}

// Seeds the bank with per_world solved reference trajectories per world and
// family (split "demo" cycles through the whole hidden rule surface).
template <class Real>
void bootstrap_bank(ExperienceBank<Real>& bank, const std::vector<TaskFamily>& families, int worlds,
                    int per_world, uint64_t seed, const std::vector<AgentSpec>& agents,
                    const std::vector<int>& graph) {
  if (per_world < 1) throw std::invalid_argument("bootstrap_bank: per_world must be >= 1");
  for (TaskFamily f : families) {
    for (int w = 0; w < worlds; ++w) {
      const uint64_t world_seed = world_seed_for(seed, f, w);
      for (int d = 0; d < per_world; ++d) {
        TaskInstance task = generate_task(f, world_seed, "demo", d);
        bank.append_trajectory(scripted_trajectory(agents, graph, task));
      }
    }
  }
  bank.mark_initialized();
}

// Task-format transcript lines for backbone pretraining. kv_recall lines use a
// digit sampled independently of the hidden table so the checker's only viable
// strategy is copying the draft; the other families use true golds.
inline std::vector<std::string> make_pretrain_corpus(const std::vector<TaskFamily>& families,
                                                     const std::vector<AgentSpec>& agents,
                                                     const std::vector<int>& graph, int worlds,
                                                     int samples_per_world, uint64_t seed) {
  std::vector<std::string> lines;
  Rng rng(mix_seed(seed, hash_str("pretrain-corpus")));
  for (TaskFamily f : families) {
    for (int w = 0; w < worlds; ++w) {
      const uint64_t world_seed = mix_seed(mix_seed(seed, hash_str("pretrain-worlds")),
                                           mix_seed(hash_str(family_name(f)), static_cast<uint64_t>(w)));
      for (int s = 0; s < samples_per_world; ++s) {
        TaskInstance task = generate_task(f, world_seed, s % 2 == 0 ? "train" : "eval", s);
        if (f == TaskFamily::kv_recall) task.gold = std::string(1, static_cast<char>('0' + rng.uniform_int(10)));
        std::vector<std::pair<std::string, std::string>> prior;
        auto outs = scripted_outputs(agents, graph, task);
        for (size_t j = 0; j < graph.size(); ++j) {
          const std::string prompt =
              step_prompt(task.query, prior, agents[static_cast<size_t>(graph[j])].name);
          lines.push_back(prompt + outs[j].second);
          prior.emplace_back(outs[j].first, outs[j].second);
        }
      }
    }
  }
  return lines;
}

}  // namespace latentmem
