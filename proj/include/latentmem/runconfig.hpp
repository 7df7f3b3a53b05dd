#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latentmem {

// Flat key = value configuration covering every tunable. Unknown keys are
// rejected with a nearest-key suggestion; missing keys keep their defaults;
// echo() reproduces the fully resolved config.
struct RunConfig {
  // run
  uint64_t seed = 42;
  std::string run_dir;         // empty: runs/<timestamp>-<tag>
  std::string run_tag = "run";
  int workers = 1;
  // backbone
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_seq_len = 512;
  // composer
  int latent_len = 8;
  int composer_blocks = 2;
  int composer_ctx_budget = 384;
  // bank / retrieval
  int topk = 1;
  int bank_embed_char_budget = 512;
  int render_char_budget = 1200;
  bool bank_update = true;
  double bank_min_reward = -1.0;  // < 0: store everything
  // tasks / system
  std::string task_families = "kv_recall";  // comma separated
  int worlds = 20;
  int per_world = 4;
  std::string topology = "chain2";
  std::string mode = "latentmem";
  bool role_ablation = false;
  int train_queries = 64;
  int eval_queries = 40;
  // lmpo
  int group_size = 8;
  double clip_eps = 0.2;
  double adv_eps = 1e-8;
  double learning_rate = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double train_temperature = 1.0;
  double eval_temperature = 0.0;
  int epochs_per_batch = 1;
  int macro_batch = 32;
  double kl_weight = 0.0;
  int total_steps = 200;
  double warmup_ratio = 0.1;
  int gen_budget = 24;
  int eval_interval = 25;
  int checkpoint_interval = 50;
  // pretraining
  int pretrain_steps = 2000;
  int pretrain_batch = 16;
  double pretrain_lr = 1e-3;
  int pretrain_worlds = 200;
  int pretrain_samples_per_world = 4;
  double pretrain_holdout_threshold = 0.0;  // 0 disables the gate
  bool pretrain_latent_aug = true;          // injection-tolerance augmentation
  double pretrain_latent_aug_prob = 0.5;
  // artifact paths (resolved against run_dir when relative)
  std::string backbone_path = "backbone.lmc";
  std::string bank_path = "bank.jsonl";
  std::string composer_path = "composer.lmc";

  struct Field {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
  };

  static const std::vector<Field>& fields();

  void set_key(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
      if (f.name == key) {
        try {
          f.set(*this, value);
        } catch (const std::exception& e) {
          throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "': " + e.what());
        }
        return;
      }
    }
    throw std::invalid_argument("config: unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  }

  static std::string nearest_key(const std::string& key) {
    auto dist = [](const std::string& a, const std::string& b) {
      std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
      for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
      for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
          const size_t del = prev[j] + 1, ins = cur[j - 1] + 1;
          const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
          cur[j] = std::min({del, ins, sub});
        }
        std::swap(prev, cur);
      }
      return prev[b.size()];
    };
    std::string best;
    size_t best_d = SIZE_MAX;
    for (const auto& f : fields()) {
      const size_t d = dist(key, f.name);
      if (d < best_d) {
        best_d = d;
        best = f.name;
      }
    }
    return best;
  }

  // "key = value" lines, '#' comments. File values override defaults; the
  // overrides list then overrides the file.
  static RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {}) {
    RunConfig cfg;
    if (!path.empty()) {
      std::ifstream f(path);
      if (!f) throw std::runtime_error("config: cannot open " + path);
      std::string line;
      int line_no = 0;
      while (std::getline(f, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string trimmed = trim(line);
        if (trimmed.empty()) continue;
        const size_t eq = trimmed.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("config: line " + std::to_string(line_no) + ": expected key = value");
        cfg.set_key(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
      }
    }
    for (const auto& ov : overrides) {
      const size_t eq = ov.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("config: override '" + ov + "' is not key=value");
      cfg.set_key(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    return cfg;
  }

  std::string echo() const {
    std::string out;
    for (const auto& f : fields()) out += f.name + " = " + f.get(*this) + "\n";
    return out;
  }

  static std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return s.substr(a, b - a);
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <class T>
RunConfig::Field make_field(const std::string& name, T RunConfig::* member) {
  RunConfig::Field f;
  f.name = name;
  if constexpr (std::is_same_v<T, int>) {
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = std::stoi(v); };
  } else if constexpr (std::is_same_v<T, uint64_t>) {
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = std::stoull(v); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.get = [member](const RunConfig& c) { return fmt_double(c.*member); };
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = std::stod(v); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.get = [member](const RunConfig& c) { return (c.*member) ? "true" : "false"; };
    f.set = [member](RunConfig& c, const std::string& v) {
      if (v == "true" || v == "1")
        c.*member = true;
      else if (v == "false" || v == "0")
        c.*member = false;
      else
        throw std::invalid_argument("expected true/false");
    };
  } else {
    f.get = [member](const RunConfig& c) { return c.*member; };
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = v; };
  }
  return f;
}

}  // namespace detail

inline const std::vector<RunConfig::Field>& RunConfig::fields() {
  static const std::vector<Field> k = {
      detail::make_field("seed", &RunConfig::seed),
      detail::make_field("run_dir", &RunConfig::run_dir),
      detail::make_field("run_tag", &RunConfig::run_tag),
      detail::make_field("workers", &RunConfig::workers),
      detail::make_field("n_layers", &RunConfig::n_layers),
      detail::make_field("n_heads", &RunConfig::n_heads),
      detail::make_field("d_model", &RunConfig::d_model),
      detail::make_field("d_ff", &RunConfig::d_ff),
      detail::make_field("max_seq_len", &RunConfig::max_seq_len),
      detail::make_field("latent_len", &RunConfig::latent_len),
      detail::make_field("composer_blocks", &RunConfig::composer_blocks),
      detail::make_field("composer_ctx_budget", &RunConfig::composer_ctx_budget),
      detail::make_field("topk", &RunConfig::topk),
      detail::make_field("bank_embed_char_budget", &RunConfig::bank_embed_char_budget),
      detail::make_field("render_char_budget", &RunConfig::render_char_budget),
      detail::make_field("bank_update", &RunConfig::bank_update),
      detail::make_field("bank_min_reward", &RunConfig::bank_min_reward),
      detail::make_field("task_families", &RunConfig::task_families),
      detail::make_field("worlds", &RunConfig::worlds),
      detail::make_field("per_world", &RunConfig::per_world),
      detail::make_field("topology", &RunConfig::topology),
      detail::make_field("mode", &RunConfig::mode),
      detail::make_field("role_ablation", &RunConfig::role_ablation),
      detail::make_field("train_queries", &RunConfig::train_queries),
      detail::make_field("eval_queries", &RunConfig::eval_queries),
      detail::make_field("group_size", &RunConfig::group_size),
      detail::make_field("clip_eps", &RunConfig::clip_eps),
      detail::make_field("adv_eps", &RunConfig::adv_eps),
      detail::make_field("learning_rate", &RunConfig::learning_rate),
      detail::make_field("adam_beta1", &RunConfig::adam_beta1),
      detail::make_field("adam_beta2", &RunConfig::adam_beta2),
      detail::make_field("adam_eps", &RunConfig::adam_eps),
      detail::make_field("weight_decay", &RunConfig::weight_decay),
      detail::make_field("grad_clip_norm", &RunConfig::grad_clip_norm),
      detail::make_field("train_temperature", &RunConfig::train_temperature),
      detail::make_field("eval_temperature", &RunConfig::eval_temperature),
      detail::make_field("epochs_per_batch", &RunConfig::epochs_per_batch),
      detail::make_field("macro_batch", &RunConfig::macro_batch),
      detail::make_field("kl_weight", &RunConfig::kl_weight),
      detail::make_field("total_steps", &RunConfig::total_steps),
      detail::make_field("warmup_ratio", &RunConfig::warmup_ratio),
      detail::make_field("gen_budget", &RunConfig::gen_budget),
      detail::make_field("eval_interval", &RunConfig::eval_interval),
      detail::make_field("checkpoint_interval", &RunConfig::checkpoint_interval),
      detail::make_field("pretrain_steps", &RunConfig::pretrain_steps),
      detail::make_field("pretrain_batch", &RunConfig::pretrain_batch),
      detail::make_field("pretrain_lr", &RunConfig::pretrain_lr),
      detail::make_field("pretrain_worlds", &RunConfig::pretrain_worlds),
      detail::make_field("pretrain_samples_per_world", &RunConfig::pretrain_samples_per_world),
      detail::make_field("pretrain_holdout_threshold", &RunConfig::pretrain_holdout_threshold),
      detail::make_field("pretrain_latent_aug", &RunConfig::pretrain_latent_aug),
      detail::make_field("pretrain_latent_aug_prob", &RunConfig::pretrain_latent_aug_prob),
      detail::make_field("backbone_path", &RunConfig::backbone_path),
      detail::make_field("bank_path", &RunConfig::bank_path),
      detail::make_field("composer_path", &RunConfig::composer_path),
  };
  return k;
}

// metrics.csv: one row per train step and per eval; flushed per row so
// interrupted runs keep their prefix. Numbers carry 9 significant digits.
class MetricsWriter {
 public:
  static constexpr const char* kHeader = "step,mean_reward,eval_reward,loss,clip_frac,grad_norm,tokens";

  explicit MetricsWriter(const std::string& path) : f_(path, std::ios::out | std::ios::trunc) {
    if (!f_) throw std::runtime_error("metrics: cannot open for write: " + path);
    f_ << kHeader << '\n';
    f_.flush();
  }

  void train_row(int step, double mean_reward, double loss, double clip_frac, double grad_norm,
                 int64_t tokens) {
    f_ << step << ',' << detail::fmt_double(mean_reward) << ",nan," << detail::fmt_double(loss) << ','
       << detail::fmt_double(clip_frac) << ',' << detail::fmt_double(grad_norm) << ',' << tokens << '\n';
    f_.flush();
    check();
  }

  void eval_row(int step, double eval_reward) {
    f_ << step << ",nan," << detail::fmt_double(eval_reward) << ",nan,nan,nan,0\n";
    f_.flush();
    check();
  }

 private:
  void check() {
    if (!f_) throw std::runtime_error("metrics: write failed");
  }
  std::ofstream f_;
};

}  // namespace latentmem
