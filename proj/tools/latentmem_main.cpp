#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "latentmem/driver.hpp"
#include "latentmem/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace latentmem;

namespace {

using Real = float;  // training builds run at 32-bit; gradcheck runs at 64-bit

struct CliArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const CliArgs& args) {
  RunConfig cfg = RunConfig::load(args.config_path);
  if (const char* env_seed = std::getenv("LATENTMEM_SEED")) cfg.set_key("seed", env_seed);
  for (const auto& ov : args.overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + ov + "'");
    cfg.set_key(RunConfig::trim(ov.substr(0, eq)), RunConfig::trim(ov.substr(eq + 1)));
  }
  return cfg;
}

std::string timestamp_tag() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&t));
  return buf;
}

// creates the run directory and echoes the resolved config into it
std::string open_run_dir(const RunConfig& cfg) {
  std::string dir = cfg.run_dir.empty() ? "runs/" + timestamp_tag() + "-" + cfg.run_tag : cfg.run_dir;
  fs::create_directories(dir);
  std::ofstream echo(dir + "/config.resolved.cfg");
  if (!echo) throw std::runtime_error("cannot write config echo into " + dir);
  echo << cfg.echo();
  return dir;
}

void require_file(const std::string& path, const char* hint) {
  if (!fs::exists(path))
    throw std::runtime_error("missing " + path + " (" + hint + ")");
}

std::vector<Mode> modes_from(const std::string& csv) {
  std::vector<Mode> out;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      const std::string name = RunConfig::trim(cur);
      if (!name.empty()) out.push_back(parse_mode(name));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (out.empty()) throw std::invalid_argument("no mode given");
  return out;
}

ExperienceBank<Real> open_bank(const RunConfig& cfg, const BackboneParams<Real>& backbone,
                               const std::string& path) {
  BankOptions bo;
  bo.embed_char_budget = cfg.bank_embed_char_budget;
  auto bank = ExperienceBank<Real>::load_jsonl(
      path, [&backbone](const std::string& s) { return embed_text(backbone, s); }, bo);
  bank.set_update_enabled(cfg.bank_update);
  bank.set_min_reward(cfg.bank_min_reward);
  return bank;
}

int cmd_pretrain(const RunConfig& cfg) {
  const std::string dir = open_run_dir(cfg);
  auto x = build_system<Real>(cfg.topology, Mode::no_memory);
  auto corpus = make_pretrain_corpus(families_from(cfg), x.agents, x.graph, cfg.pretrain_worlds,
                                     cfg.pretrain_samples_per_world, cfg.seed);
  std::printf("pretrain: %zu corpus lines, %d steps, d_model=%d layers=%d\n", corpus.size(),
              cfg.pretrain_steps, cfg.d_model, cfg.n_layers);
  auto backbone = BackboneParams<Real>::init(transformer_config_from(cfg), cfg.seed);
  PretrainOptions opts;
  opts.steps = cfg.pretrain_steps;
  opts.batch = cfg.pretrain_batch;
  opts.lr = cfg.pretrain_lr;
  opts.workers = cfg.workers;
  opts.holdout_threshold = cfg.pretrain_holdout_threshold;
  opts.latent_aug_prob = cfg.pretrain_latent_aug ? cfg.pretrain_latent_aug_prob : 0.0;
  opts.latent_aug_max_rows = cfg.latent_len;
  auto result = pretrain_backbone(backbone, corpus, opts, cfg.seed);
  const std::string path = resolve_path(dir, cfg.backbone_path);
  save_backbone(backbone, path);
  std::printf("pretrain: held-out loss %.4f, saved %s (sha256 %s)\n", result.holdout_loss, path.c_str(),
              backbone.sha256_hex().substr(0, 12).c_str());
  std::ofstream losses(dir + "/pretrain_loss.csv");
  losses << "step,loss\n";
  for (size_t i = 0; i < result.step_losses.size(); ++i) losses << i << ',' << result.step_losses[i] << '\n';
  return 0;
}

int cmd_init_bank(const RunConfig& cfg) {
  const std::string dir = open_run_dir(cfg);
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  require_file(bpath, "run pretrain first or point backbone_path at a checkpoint");
  auto backbone = load_backbone<Real>(cfg, bpath);
  BankOptions bo;
  bo.embed_char_budget = cfg.bank_embed_char_budget;
  auto bank = ExperienceBank<Real>::from_backbone(backbone, bo);
  auto x = build_system<Real>(cfg.topology, Mode::no_memory);
  bootstrap_bank(bank, families_from(cfg), cfg.worlds, cfg.per_world, cfg.seed, x.agents, x.graph);
  const std::string path = resolve_path(dir, cfg.bank_path);
  bank.save_jsonl(path);
  std::printf("init-bank: C=%zu trajectories across %d worlds -> %s\n", bank.size(), cfg.worlds,
              path.c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.mode != "latentmem") throw std::invalid_argument("train requires mode=latentmem");
  const std::string dir = open_run_dir(cfg);
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  const std::string kpath = resolve_path(dir, cfg.bank_path);
  require_file(bpath, "run pretrain first");
  require_file(kpath, "run init-bank first");
  auto backbone = load_backbone<Real>(cfg, bpath);
  auto bank = open_bank(cfg, backbone, kpath);
  auto composer = ComposerParams<Real>::init(composer_config_from(cfg), cfg.seed);
  auto out = run_training(cfg, backbone, bank, composer, dir);
  bank.save_jsonl(dir + "/bank.snapshot.jsonl");
  std::printf("train: done. metrics %s, final composer %s\n", out.metrics_path.c_str(),
              out.final_checkpoint_path.c_str());
  std::printf("train: frozen backbone sha256 %s unchanged: %s\n",
              out.theta_hash_after.substr(0, 12).c_str(),
              out.theta_hash_before == out.theta_hash_after ? "yes" : "NO");
  if (out.last_eval_reward >= 0) std::printf("train: last eval reward %.4f\n", out.last_eval_reward);
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const std::string dir = open_run_dir(cfg);
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  require_file(bpath, "run pretrain first");
  auto backbone = load_backbone<Real>(cfg, bpath);
  const std::vector<Mode> modes = modes_from(cfg.mode);
  bool needs_bank = false, needs_composer = false;
  for (Mode m : modes) {
    needs_bank = needs_bank || m != Mode::no_memory;
    needs_composer = needs_composer || m == Mode::latentmem;
  }
  BankOptions bo;
  bo.embed_char_budget = cfg.bank_embed_char_budget;
  ExperienceBank<Real> bank = ExperienceBank<Real>::from_backbone(backbone, bo);
  if (needs_bank) {
    const std::string kpath = resolve_path(dir, cfg.bank_path);
    require_file(kpath, "run init-bank first");
    bank = open_bank(cfg, backbone, kpath);
  }
  std::optional<ComposerParams<Real>> composer;
  if (needs_composer) {
    const std::string cpath = resolve_path(dir, cfg.composer_path);
    require_file(cpath, "run train first or point composer_path at a checkpoint");
    composer = load_composer<Real>(cfg, cpath);
  }
  auto rows = run_eval_report<Real>(cfg, modes, backbone, bank, composer ? &*composer : nullptr);
  std::ofstream report(dir + "/eval_report.csv");
  report << "family,mode,queries,mean_reward\n";
  std::printf("%-18s %-12s %8s %12s\n", "family", "mode", "queries", "mean_reward");
  for (const auto& r : rows) {
    std::printf("%-18s %-12s %8d %12.6f\n", r.family.c_str(), r.mode.c_str(), r.queries, r.mean_reward);
    report << r.family << ',' << r.mode << ',' << r.queries << ',' << detail::fmt_double(r.mean_reward)
           << '\n';
  }
  return 0;
}

int cmd_rollout(const RunConfig& cfg) {
  const std::string dir = open_run_dir(cfg);
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  require_file(bpath, "run pretrain first");
  auto backbone = load_backbone<Real>(cfg, bpath);
  const Mode mode = parse_mode(cfg.mode);
  BankOptions bo;
  bo.embed_char_budget = cfg.bank_embed_char_budget;
  ExperienceBank<Real> bank = ExperienceBank<Real>::from_backbone(backbone, bo);
  if (mode != Mode::no_memory) {
    const std::string kpath = resolve_path(dir, cfg.bank_path);
    require_file(kpath, "run init-bank first");
    bank = open_bank(cfg, backbone, kpath);
  }
  std::optional<ComposerParams<Real>> composer;
  if (mode == Mode::latentmem) {
    const std::string cpath = resolve_path(dir, cfg.composer_path);
    require_file(cpath, "run train first");
    composer = load_composer<Real>(cfg, cpath);
  }
  MasSystem<Real> x = make_system<Real>(cfg, mode, &backbone, &bank, composer ? &*composer : nullptr);
  auto tasks = build_task_list(cfg, "eval", 1, 3);
  EpisodeOptions<Real> opts;
  opts.topk = cfg.topk;
  opts.temperature = cfg.eval_temperature;
  opts.max_output_tokens = cfg.gen_budget;
  opts.render_char_budget = cfg.render_char_budget;
  opts.append_to_bank = false;
  auto ep = run_episode(x, tasks[0], opts, cfg.seed);
  std::printf("query: %s\ngold: %s\nmode: %s\n", tasks[0].query.c_str(), tasks[0].gold.c_str(), cfg.mode.c_str());
  for (size_t j = 0; j < ep.trajectory.steps.size(); ++j) {
    const auto& s = ep.trajectory.steps[j];
    std::printf("--- step %zu (agent %d)\nprompt: %s\noutput: %s\n", j + 1, s.agent_idx, s.prompt.c_str(),
                s.output.c_str());
  }
  std::printf("reward: %.1f\n", ep.reward);
  // trajectory dump: bank.jsonl schema plus mode
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : ep.trajectory.steps)
    steps.push_back({{"agent_idx", s.agent_idx}, {"prompt", s.prompt}, {"output", s.output}});
  nlohmann::json j{{"id", 0},
                   {"query", ep.trajectory.query},
                   {"steps", steps},
                   {"reward", ep.reward},
                   {"task_tag", ep.trajectory.task_tag},
                   {"mode", cfg.mode}};
  std::ofstream f(dir + "/rollout.json");
  f << j.dump(2) << '\n';
  return 0;
}

int cmd_bank_query(const RunConfig& cfg, const std::string& query) {
  const std::string dir = cfg.run_dir.empty() ? "." : cfg.run_dir;
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  require_file(bpath, "run pretrain first");
  auto backbone = load_backbone<Real>(cfg, bpath);
  const std::string kpath = resolve_path(dir, cfg.bank_path);
  ExperienceBank<Real> bank = fs::exists(kpath)
                                  ? open_bank(cfg, backbone, kpath)
                                  : ExperienceBank<Real>::from_backbone(backbone);
  auto scored = bank.retrieve_topk_scored(query, cfg.topk);
  if (scored.empty()) {
    std::printf("0 results\n");
    return 0;
  }
  for (size_t i = 0; i < scored.size(); ++i)
    std::printf("#%zu sim=%.6f id=%llu query=\"%s\"\n", i + 1, scored[i].second,
                static_cast<unsigned long long>(scored[i].first.id), scored[i].first.query.c_str());
  return 0;
}

int cmd_export_latents(const RunConfig& cfg) {
  const std::string dir = open_run_dir(cfg);
  const std::string bpath = resolve_path(dir, cfg.backbone_path);
  const std::string kpath = resolve_path(dir, cfg.bank_path);
  const std::string cpath = resolve_path(dir, cfg.composer_path);
  require_file(bpath, "run pretrain first");
  require_file(kpath, "run init-bank first");
  require_file(cpath, "run train first");
  auto backbone = load_backbone<Real>(cfg, bpath);
  auto bank = open_bank(cfg, backbone, kpath);
  auto composer = load_composer<Real>(cfg, cpath);
  const std::string out = dir + "/latents.csv";
  export_latents_csv(cfg, backbone, bank, composer, out);
  std::printf("export-latents: wrote %s\n", out.c_str());
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
  auto reports = run_op_gradchecks(cfg.seed);
  bool ok = true;
  double worst = 0;
  for (const auto& r : reports) {
    std::printf("%-28s max rel err %.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.max_rel_err < 1e-4 ? "ok" : "FAIL");
    ok = ok && r.max_rel_err < 1e-4;
    worst = std::max(worst, r.max_rel_err);
  }
  std::printf("gradcheck: %zu ops, worst %.3e -> %s\n", reports.size(), worst, ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latentmem: latent multi-agent memory training and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  CliArgs args;
  app.add_option("--config", args.config_path, "key = value configuration file");
  app.add_option("--set", args.overrides, "override a config key (key=value, repeatable)");

  auto* pretrain = app.add_subcommand("pretrain", "train and freeze the tiny backbone");
  auto* init_bank = app.add_subcommand("init-bank", "bootstrap the experience bank with solved demos");
  auto* train = app.add_subcommand("train", "optimize the memory composer with LMPO");
  auto* eval = app.add_subcommand("eval", "batch evaluation, one report row per family and mode");
  auto* rollout = app.add_subcommand("rollout", "run and dump one verbose episode");
  auto* bank_query = app.add_subcommand("bank-query", "top-K retrieval with similarities");
  std::string query_text;
  bank_query->add_option("--query", query_text, "query text")->required();
  auto* export_latents = app.add_subcommand("export-latents", "mean latent vectors per (agent, query)");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite (64-bit)");

  try {
    app.parse(argc, argv);
    RunConfig cfg = resolve_config(args);
    if (pretrain->parsed()) return cmd_pretrain(cfg);
    if (init_bank->parsed()) return cmd_init_bank(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (rollout->parsed()) return cmd_rollout(cfg);
    if (bank_query->parsed()) return cmd_bank_query(cfg, query_text);
    if (export_latents->parsed()) return cmd_export_latents(cfg);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg);
    std::fprintf(stderr, "error: no command\n");
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
