#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentmem/model.hpp"
#include "latentmem/tensor.hpp"
#include "latentmem/tokenizer.hpp"

namespace latentmem {

struct TrajectoryStep {
  int agent_idx = 0;
  std::string prompt;
  std::string output;
};

struct Trajectory {
  uint64_t id = 0;
  std::string query;
  std::vector<TrajectoryStep> steps;
  std::optional<double> reward;
  std::string task_tag;

  int horizon() const { return static_cast<int>(steps.size()); }
};

// Mean of the frozen backbone's token-embedding rows, L2-normalized. Empty
// text yields the all-zero sentinel, which retrieval treats as non-retrievable.
template <class Real>
std::vector<Real> embed_text(const BackboneParams<Real>& backbone, const std::string& text) {
  const int D = backbone.cfg.d_model;
  std::vector<Real> v(static_cast<size_t>(D), Real(0));
  std::vector<int> ids = Tokenizer::encode(text);
  if (ids.empty()) return v;
  const Real* emb = backbone.tok_emb.data->data();
  for (int id : ids) {
    const Real* row = emb + static_cast<size_t>(id) * D;
    for (int j = 0; j < D; ++j) v[static_cast<size_t>(j)] += row[j];
  }
  const Real inv_n = Real(1) / Real(ids.size());
  double sq = 0;
  for (int j = 0; j < D; ++j) {
    v[static_cast<size_t>(j)] *= inv_n;
    sq += static_cast<double>(v[static_cast<size_t>(j)]) * v[static_cast<size_t>(j)];
  }
  const double norm = std::sqrt(sq);
  if (norm > 0) {
    const Real inv = static_cast<Real>(1.0 / norm);
    for (Real& x : v) x *= inv;
  }
  return v;
}

template <class Real>
double cosine_sim(const std::vector<Real>& u, const std::vector<Real>& w) {
  if (u.size() != w.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  double uu = 0, ww = 0, uw = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    uu += static_cast<double>(u[i]) * u[i];
    ww += static_cast<double>(w[i]) * w[i];
    uw += static_cast<double>(u[i]) * w[i];
  }
  if (uu == 0 || ww == 0) throw std::invalid_argument("cosine_sim: zero vector");
  return uw / (std::sqrt(uu) * std::sqrt(ww));
}

// Indices of the at-most-K highest-similarity candidates, descending, ties
// broken by lower tie_id (older entries first).
template <class Real>
std::vector<size_t> topk_by_dot(const std::vector<Real>& query,
                                const std::vector<const std::vector<Real>*>& candidates,
                                const std::vector<uint64_t>& tie_ids, int k) {
  if (k < 1) throw std::invalid_argument("topk_by_dot: k must be >= 1");
  struct Scored {
    double sim;
    uint64_t id;
    size_t idx;
  };
  std::vector<Scored> scored;
  scored.reserve(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = *candidates[i];
    double s = 0;
    for (size_t j = 0; j < c.size(); ++j) s += static_cast<double>(query[j]) * c[j];
    scored.push_back({s, tie_ids[i], i});
  }
  auto better = [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.id < b.id;
  };
  const size_t take = std::min<size_t>(static_cast<size_t>(k), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  std::vector<size_t> out;
  out.reserve(take);
  for (size_t i = 0; i < take; ++i) out.push_back(scored[i].idx);
  return out;
}

// Deterministic serialization of retrieved trajectories for the composer
// input. When over the character budget, whole steps are dropped oldest-first.
inline std::string render_context(const std::vector<Trajectory>& trajectories, int char_budget) {
  // kept[t] holds the first original-step index still included for trajectory t
  std::vector<size_t> first_kept(trajectories.size(), 0);
  auto build = [&] {
    std::string out;
    for (size_t t = 0; t < trajectories.size(); ++t) {
      const auto& steps = trajectories[t].steps;
      if (first_kept[t] >= steps.size()) continue;
      if (!out.empty()) out += ' ';
      out += "[TRAJ " + std::to_string(t + 1) + "]";
      for (size_t j = first_kept[t]; j < steps.size(); ++j)
        out += " [STEP " + std::to_string(j + 1) + " agent " + std::to_string(steps[j].agent_idx) +
               "] PROMPT: " + steps[j].prompt + " OUTPUT: " + steps[j].output;
    }
    return out;
  };
  std::string out = build();
  for (;;) {
    if (static_cast<int>(out.size()) <= char_budget) return out;
    // drop the oldest remaining step (first trajectory first)
    bool dropped = false;
    for (size_t t = 0; t < trajectories.size(); ++t) {
      if (first_kept[t] < trajectories[t].steps.size()) {
        ++first_kept[t];
        dropped = true;
        break;
      }
    }
    if (!dropped) break;
    out = build();
  }
  if (static_cast<int>(out.size()) > char_budget) out.resize(static_cast<size_t>(std::max(char_budget, 0)));
  return out;
}

struct BankOptions {
  int embed_char_budget = 512;  // character cap on trajectory embedding content
};

// Append-only store of raw trajectories with cosine top-K retrieval over
// mean-token embeddings. Single writer; readers work against a snapshot size
// taken at episode start.
template <class Real>
class ExperienceBank {
 public:
  using EmbedFn = std::function<std::vector<Real>(const std::string&)>;

  struct Entry {
    Trajectory traj;
    std::vector<Real> embedding;
    bool retrievable = false;
  };

  ExperienceBank(EmbedFn embed, BankOptions opts = {}) : embed_(std::move(embed)), opts_(opts) {}

  static ExperienceBank from_backbone(const BackboneParams<Real>& backbone, BankOptions opts = {}) {
    return ExperienceBank([&backbone](const std::string& s) { return embed_text(backbone, s); }, opts);
  }

  size_t size() const { return entries_.size(); }
  size_t initial_capacity() const { return initial_capacity_; }
  void mark_initialized() { initial_capacity_ = entries_.size(); }

  bool update_enabled() const { return update_enabled_; }
  void set_update_enabled(bool v) { update_enabled_ = v; }
  void set_min_reward(double v) { min_reward_ = v; }
  uint64_t skipped_appends() const { return skipped_; }

  const Entry& entry(size_t i) const { return entries_.at(i); }

  std::string embedding_content(const Trajectory& t) const {
    std::string s = t.query;
    for (const auto& st : t.steps) {
      s += ' ';
      s += st.output;
    }
    if (static_cast<int>(s.size()) > opts_.embed_char_budget)
      s.resize(static_cast<size_t>(opts_.embed_char_budget));
    return s;
  }

  // Returns true when the trajectory was stored. The update toggle (the
  // "without experience" ablation) and the min-reward filter both turn the
  // call into a logged no-op.
  bool append_trajectory(const Trajectory& traj) {
    validate(traj);
    if (!update_enabled_) {
      ++skipped_;
      std::fprintf(stderr, "[bank] update disabled, skipping append of trajectory for query '%s'\n",
                   traj.query.c_str());
      return false;
    }
    if (min_reward_ >= 0 && (!traj.reward.has_value() || *traj.reward < min_reward_)) {
      ++skipped_;
      return false;
    }
    Entry e;
    e.traj = traj;
    e.traj.id = next_id_++;
    e.embedding = embed_(embedding_content(traj));
    e.retrievable = l2(e.embedding) > 1e-12;
    entries_.push_back(std::move(e));
    return true;
  }

  std::vector<std::pair<Trajectory, double>> retrieve_topk_scored(const std::string& query, int k,
                                                                  int64_t limit = -1) const {
    std::vector<std::pair<Trajectory, double>> out;
    std::vector<Real> q = embed_(query);
    if (l2(q) <= 1e-12) return out;
    for (const Trajectory& t : retrieve_topk(query, k, limit)) {
      double sim = 0;
      for (const auto& e : entries_)
        if (e.traj.id == t.id) sim = cosine_sim(q, e.embedding);
      out.emplace_back(t, sim);
    }
    return out;
  }

  // Top-K most similar stored trajectories for a query, oldest first on ties.
  // limit < 0 scans the whole bank; otherwise only the first `limit` entries
  // (the snapshot view used by concurrent episodes).
  std::vector<Trajectory> retrieve_topk(const std::string& query, int k, int64_t limit = -1) const {
    if (k < 1) throw std::invalid_argument("retrieve_topk: k must be >= 1");
    const size_t n = limit < 0 ? entries_.size() : std::min<size_t>(entries_.size(), static_cast<size_t>(limit));
    std::vector<Real> q = embed_(query);
    if (l2(q) <= 1e-12) return {};
    std::vector<const std::vector<Real>*> cands;
    std::vector<uint64_t> ids;
    std::vector<size_t> positions;
    for (size_t i = 0; i < n; ++i) {
      if (!entries_[i].retrievable) continue;
      cands.push_back(&entries_[i].embedding);
      ids.push_back(entries_[i].traj.id);
      positions.push_back(i);
    }
    if (cands.empty()) return {};
    std::vector<size_t> picked = topk_by_dot(q, cands, ids, k);
    std::vector<Trajectory> out;
    out.reserve(picked.size());
    for (size_t p : picked) out.push_back(entries_[positions[p]].traj);
    return out;
  }

  void save_jsonl(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("bank: cannot open for write: " + path);
    for (const auto& e : entries_) {
      nlohmann::json steps = nlohmann::json::array();
      for (const auto& s : e.traj.steps)
        steps.push_back({{"agent_idx", s.agent_idx}, {"prompt", s.prompt}, {"output", s.output}});
      nlohmann::json j{{"id", e.traj.id},
                       {"query", e.traj.query},
                       {"steps", steps},
                       {"reward", e.traj.reward.has_value() ? nlohmann::json(*e.traj.reward) : nlohmann::json()},
                       {"task_tag", e.traj.task_tag}};
      f << j.dump() << '\n';
    }
    if (!f) throw std::runtime_error("bank: write failed: " + path);
  }

  static ExperienceBank load_jsonl(const std::string& path, EmbedFn embed, BankOptions opts = {}) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("bank: cannot open: " + path);
    ExperienceBank bank(std::move(embed), opts);
    std::string line;
    int line_no = 0;
    uint64_t max_id = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      Trajectory t;
      try {
        nlohmann::json j = nlohmann::json::parse(line);
        t.id = j.at("id").get<uint64_t>();
        t.query = j.at("query").get<std::string>();
        for (const auto& js : j.at("steps")) {
          TrajectoryStep s;
          s.agent_idx = js.at("agent_idx").get<int>();
          s.prompt = js.at("prompt").get<std::string>();
          s.output = js.at("output").get<std::string>();
          t.steps.push_back(std::move(s));
        }
        if (!j.at("reward").is_null()) t.reward = j.at("reward").get<double>();
        t.task_tag = j.at("task_tag").get<std::string>();
        bank.validate(t);
      } catch (const std::exception& e) {
        throw std::runtime_error("bank: line " + std::to_string(line_no) + ": " + e.what());
      }
      Entry e;
      e.traj = std::move(t);
      e.embedding = bank.embed_(bank.embedding_content(e.traj));
      e.retrievable = l2(e.embedding) > 1e-12;
      max_id = std::max(max_id, e.traj.id);
      bank.entries_.push_back(std::move(e));
    }
    bank.next_id_ = bank.entries_.empty() ? 0 : max_id + 1;
    bank.initial_capacity_ = bank.entries_.size();
    return bank;
  }

 private:
  static double l2(const std::vector<Real>& v) {
    double s = 0;
    for (Real x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
  }

  void validate(const Trajectory& t) const {
    if (t.steps.empty()) throw std::invalid_argument("trajectory: steps must be nonempty");
    for (const auto& s : t.steps)
      if (s.agent_idx < 0) throw std::invalid_argument("trajectory: negative agent index");
    if (t.reward.has_value() && (*t.reward < 0.0 || *t.reward > 1.0))
      throw std::invalid_argument("trajectory: reward outside [0,1]");
  }

  EmbedFn embed_;
  BankOptions opts_;
  std::vector<Entry> entries_;
  size_t initial_capacity_ = 0;
  uint64_t next_id_ = 0;
  bool update_enabled_ = true;
  double min_reward_ = -1.0;
  uint64_t skipped_ = 0;
};

}  // namespace latentmem
