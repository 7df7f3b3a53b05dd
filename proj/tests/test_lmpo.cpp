#include <doctest.h>

#include <cmath>

#include "latentmem/gradcheck.hpp"
#include "latentmem/lmpo.hpp"

using namespace latentmem;

namespace {

TransformerConfig rl_cfg() {
  TransformerConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_seq_len = 256;
  return c;
}

struct RlFixture {
  BackboneParams<double> backbone = BackboneParams<double>::init(rl_cfg(), 500);
  ComposerParams<double> composer =
      ComposerParams<double>::init(ComposerConfig::for_backbone(rl_cfg(), 4, 2, 96), 501);
  ExperienceBank<double> bank = ExperienceBank<double>::from_backbone(backbone);
  MasSystem<double> x;
  LmpoConfig cfg;

  RlFixture() {
    x = build_system<double>("chain2", Mode::latentmem);
    x.backbone = &backbone;
    x.bank = &bank;
    x.composer = &composer;
    bootstrap_bank(bank, {TaskFamily::kv_recall}, 2, 4, 600, x.agents, x.graph);
    cfg.group_size = 4;
    cfg.macro_batch = 2;
    cfg.gen_budget = 5;
    cfg.render_char_budget = 300;
    cfg.total_steps = 3;
    cfg.warmup_ratio = 0.0;
    cfg.workers = 1;
  }

  TaskInstance task(int i = 0) {
    return generate_task(TaskFamily::kv_recall, world_seed_for(600, TaskFamily::kv_recall, 0), "train", i);
  }
};

}  // namespace

TEST_CASE("advantages: worked examples") {
  auto a = compute_advantages({1, 1, 1, 1}, 1e-8);
  for (double v : a) CHECK(v == doctest::Approx(0.0));

  auto b = compute_advantages({1, 0, 0, 1}, 1e-8);
  CHECK(b[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(b[1] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(b[2] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(b[3] == doctest::Approx(1.0).epsilon(1e-6));

  auto c = compute_advantages({1, 0}, 1e-8);
  CHECK(c[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(c[1] == doctest::Approx(-1.0).epsilon(1e-6));

  CHECK_THROWS_AS(compute_advantages({1.0}, 1e-8), std::invalid_argument);
}

TEST_CASE("advantage laws: zero sum, shift invariance, positive-scale equivariance") {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const int g = 2 + rng.uniform_int(7);
    std::vector<double> r;
    for (int i = 0; i < g; ++i) r.push_back(rng.uniform());
    auto a = compute_advantages(r, 1e-8);
    double s = 0;
    for (double v : a) s += v;
    CHECK(std::abs(s) < 1e-6 * g);

    std::vector<double> shifted = r;
    for (double& v : shifted) v += 0.37;
    auto a2 = compute_advantages(shifted, 1e-8);
    for (int i = 0; i < g; ++i) CHECK(a2[i] == doctest::Approx(a[i]).epsilon(1e-6));

    std::vector<double> scaled = r;
    for (double& v : scaled) v *= 3.0;
    auto a3 = compute_advantages(scaled, 1e-8);
    for (int i = 0; i < g; ++i) {
      if (std::abs(a[i]) > 1e-9) CHECK(a3[i] * a[i] > 0);  // sign preserved
    }
  }
}

TEST_CASE("clipped token loss: worked examples and inactivity inside the clip band") {
  CHECK(clipped_token_loss(1.0, 0.7, 0.2) == doctest::Approx(0.7));
  CHECK(clipped_token_loss(1.5, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(clipped_token_loss(0.5, -1.0, 0.2) == doctest::Approx(-0.8));

  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    const double eps = 0.05 + 0.3 * rng.uniform();
    const double r = 1.0 + (rng.uniform() * 2 - 1) * eps;  // inside the band
    const double adv = rng.normal();
    CHECK(clipped_token_loss(r, adv, eps) == doctest::Approx(r * adv).epsilon(1e-12));
  }
}

TEST_CASE("objective value: flat normalization and duplication invariance") {
  std::vector<double> ratios{1.0, 1.1, 0.9, 1.0, 1.3};
  std::vector<double> advs{0.5, 0.5, -1.0, -1.0, -1.0};
  const double j1 = lmpo_objective_value(ratios, advs, 0.2);

  // duplicating every token leaves the mean unchanged
  std::vector<double> r2 = ratios, a2 = advs;
  r2.insert(r2.end(), ratios.begin(), ratios.end());
  a2.insert(a2.end(), advs.begin(), advs.end());
  CHECK(lmpo_objective_value(r2, a2, 0.2) == doctest::Approx(j1).epsilon(1e-12));

  // all-zero advantages: zero objective
  std::vector<double> zeros(ratios.size(), 0.0);
  CHECK(lmpo_objective_value(ratios, zeros, 0.2) == doctest::Approx(0.0));

  CHECK_THROWS_AS(lmpo_objective_value({}, {}, 0.2), std::invalid_argument);
}

TEST_CASE("sample_group: count law, cached logprobs, member diversity") {
  RlFixture f;
  auto group = sample_group(f.task(), f.x, f.cfg, 42);
  REQUIRE(group.has_value());
  CHECK(group->episodes.size() == 4);
  CHECK(group->rewards.size() == 4);
  CHECK(group->advantages.size() == 4);
  CHECK(group->token_count > 0);

  // cached old logprobs equal an independent recomputation under phi_old
  for (size_t i = 0; i < group->episodes.size(); ++i) {
    const auto& ep = group->episodes[i];
    for (size_t s = 0; s < ep.records.size(); ++s) {
      const auto& rec = ep.records[s];
      Tensor<double> m = Tensor<double>::from_vector({rec.memory_rows, 16}, rec.memory);
      Tensor<double> lp = sequence_token_logprobs(f.backbone, rec.prompt_ids, &m, rec.output_ids);
      REQUIRE(lp.numel() == static_cast<int64_t>(group->old_logprobs[i][s].size()));
      for (int t = 0; t < lp.numel(); ++t)
        CHECK(std::abs(lp.at(t) - group->old_logprobs[i][s][static_cast<size_t>(t)]) < 1e-6);
    }
  }

  // distinct member seeds: not every trajectory identical (temperature 1)
  bool all_same = true;
  for (size_t i = 1; i < group->episodes.size(); ++i)
    if (group->episodes[i].trajectory.steps[0].output != group->episodes[0].trajectory.steps[0].output)
      all_same = false;
  CHECK(!all_same);
}

TEST_CASE("importance ratios are exactly 1 at phi == phi_old, positive and finite") {
  RlFixture f;
  auto group = sample_group(f.task(), f.x, f.cfg, 43);
  REQUIRE(group.has_value());
  auto ratios = importance_ratios(*group, f.composer, f.backbone);
  CHECK(static_cast<int64_t>(ratios.size()) == group->token_count);
  for (double r : ratios) {
    CHECK(std::abs(r - 1.0) < 1e-6);
    CHECK(r > 0);
    CHECK(std::isfinite(r));
  }

  // a perturbed composer moves the ratios away from 1 somewhere
  ComposerParams<double> moved = f.composer.snapshot();
  Rng rng(3);
  for (Tensor<double>* t : moved.trainable_parameters())
    for (double& v : *t->data) v += rng.normal() * 0.05;
  auto ratios2 = importance_ratios(*group, moved, f.backbone);
  double dev = 0;
  for (double r : ratios2) dev = std::max(dev, std::abs(r - 1.0));
  CHECK(dev > 1e-6);
}

TEST_CASE("hand-built two-token model: ratio equals the probability quotient") {
  // degenerate backbone (all block weights zero) with V=2: logprobs are
  // hand-computable; the "old" policy uses a different final-norm bias.
  TransformerConfig cfg = rl_cfg();
  cfg.vocab_size = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  auto pnew = BackboneParams<double>::init(cfg, 900);
  for (auto& b : pnew.blocks)
    for (Tensor<double>* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2})
      std::fill(t->data->begin(), t->data->end(), 0.0);
  auto pold = pnew;
  pold.lnf_b = pnew.lnf_b.clone();
  pold.lnf_b.at(0) += 0.3;

  std::vector<int> prompt{0};
  std::vector<int> out{1, 1};
  Tensor<double> lp_new =
      sequence_token_logprobs(pnew, prompt, static_cast<const Tensor<double>*>(nullptr), out);
  Tensor<double> lp_old =
      sequence_token_logprobs(pold, prompt, static_cast<const Tensor<double>*>(nullptr), out);

  auto hand_lp = [&](const BackboneParams<double>& p, int row_id, int t, int v) {
    std::vector<double> x(8);
    for (int j = 0; j < 8; ++j) x[static_cast<size_t>(j)] = p.tok_emb.at(row_id, j) + p.pos_emb.at(t, j);
    double mu = 0;
    for (double xv : x) mu += xv;
    mu /= 8;
    double var = 0;
    for (double xv : x) var += (xv - mu) * (xv - mu);
    var /= 8;
    double l0 = 0, l1 = 0;
    for (int j = 0; j < 8; ++j) {
      const double xf = (x[static_cast<size_t>(j)] - mu) / std::sqrt(var + 1e-5) * p.lnf_g.at(j) + p.lnf_b.at(j);
      l0 += xf * p.tok_emb.at(0, j);
      l1 += xf * p.tok_emb.at(1, j);
    }
    const double mx = std::max(l0, l1);
    const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    return (v == 0 ? l0 : l1) - lse;
  };
  for (int t = 0; t < 2; ++t) {
    const int row_id = t == 0 ? prompt[0] : out[static_cast<size_t>(t - 1)];
    const double hand_ratio = std::exp(hand_lp(pnew, row_id, t, out[static_cast<size_t>(t)]) -
                                       hand_lp(pold, row_id, t, out[static_cast<size_t>(t)]));
    const double got = std::exp(lp_new.at(t) - lp_old.at(t));
    CHECK(got == doctest::Approx(hand_ratio).epsilon(1e-9));
  }
}

TEST_CASE("train_step with zero advantages applies exactly the decoupled decay") {
  RlFixture f;
  auto group = sample_group(f.task(), f.x, f.cfg, 44);
  REQUIRE(group.has_value());
  std::fill(group->advantages.begin(), group->advantages.end(), 0.0);

  ComposerParams<double> before = f.composer.snapshot();
  AdamW<double> opt(f.cfg.adam_beta1, f.cfg.adam_beta2, f.cfg.adam_eps);
  LmpoConfig cfg = f.cfg;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 0.01;
  std::vector<RolloutGroup<double>> groups;
  groups.push_back(std::move(*group));
  auto metrics = train_step(groups, f.composer, f.backbone, opt, cfg, 0);
  CHECK(metrics.loss == doctest::Approx(0.0));
  CHECK(metrics.tokens == groups[0].token_count);

  auto pb = before.trainable_parameters();
  auto pa = f.composer.trainable_parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    for (int64_t j = 0; j < pa[i]->numel(); ++j) {
      const double w0 = pb[i]->at(static_cast<int>(j));
      const double w1 = pa[i]->at(static_cast<int>(j));
      const double want = pa[i]->ndim() >= 2 ? w0 - cfg.learning_rate * cfg.weight_decay * w0 : w0;
      CHECK(w1 == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("train_step leaves the backbone bit-identical and moves the composer") {
  RlFixture f;
  const std::string theta_before = f.backbone.sha256_hex();
  ComposerParams<double> before = f.composer.snapshot();

  std::vector<RolloutGroup<double>> groups;
  for (int g = 0; g < 2; ++g) {
    auto gr = sample_group(f.task(g), f.x, f.cfg, 50 + g);
    REQUIRE(gr.has_value());
    groups.push_back(std::move(*gr));
  }
  AdamW<double> opt(f.cfg.adam_beta1, f.cfg.adam_beta2, f.cfg.adam_eps);
  LmpoConfig cfg = f.cfg;
  cfg.learning_rate = 1e-3;
  train_step(groups, f.composer, f.backbone, opt, cfg, 0);

  CHECK(f.backbone.sha256_hex() == theta_before);
  CHECK(frobenius_distance(f.composer, before) > 0.0);
}

TEST_CASE("gradient isolation: backward never touches frozen backbone leaves") {
  RlFixture f;
  auto group = sample_group(f.task(), f.x, f.cfg, 60);
  REQUIRE(group.has_value());

  Tape<double> tape;
  ComposerParams<double> phi_w = f.composer.watch(tape, false);
  BackboneParams<double> theta_w = f.backbone.watch(tape, true);
  Tensor<double> surrogate =
      detail::build_group_surrogate(*group, phi_w, theta_w, f.cfg.clip_eps, nullptr, nullptr);
  Tensor<double> loss = scale(surrogate, -1.0 / static_cast<double>(group->token_count));
  GradMap<double> gm = tape.backward(loss);

  std::vector<Tensor<double>*> theta_leaves;
  theta_w.for_each([&](const std::string&, Tensor<double>& t) { theta_leaves.push_back(&t); });
  for (Tensor<double>* t : theta_leaves) CHECK(!gm.contains(t->node));

  int phi_with_grad = 0;
  for (Tensor<double>* t : phi_w.trainable_parameters())
    if (gm.contains(t->node)) ++phi_with_grad;
  CHECK(phi_with_grad > 0);
}

TEST_CASE("at phi == phi_old the surrogate gradient equals the plain policy gradient") {
  RlFixture f;
  auto group = sample_group(f.task(), f.x, f.cfg, 61);
  REQUIRE(group.has_value());
  const double inv_n = 1.0 / static_cast<double>(group->token_count);

  // surrogate gradient
  Tape<double> t1;
  ComposerParams<double> phi1 = f.composer.watch(t1, false);
  BackboneParams<double> th1 = f.backbone.watch(t1, true);
  Tensor<double> s1 = detail::build_group_surrogate(*group, phi1, th1, f.cfg.clip_eps, nullptr, nullptr);
  GradMap<double> g1 = t1.backward(scale(s1, -inv_n));

  // plain REINFORCE-with-baseline gradient: -(1/N) sum A_i * logprob
  Tape<double> t2;
  ComposerParams<double> phi2 = f.composer.watch(t2, false);
  BackboneParams<double> th2 = f.backbone.watch(t2, true);
  std::map<int, Tensor<double>> role_memory;
  for (const auto& [agent, profile] : group->profiles)
    role_memory.emplace(agent, compose(phi2, th2, profile, group->rendered_context));
  Tensor<double> total;
  bool have = false;
  for (size_t i = 0; i < group->episodes.size(); ++i) {
    for (const auto& rec : group->episodes[i].records) {
      Tensor<double> lp = sequence_token_logprobs(th2, rec.prompt_ids, &role_memory.at(rec.agent_idx),
                                                  rec.output_ids);
      Tensor<double> term = scale(lp, group->advantages[i]);
      Tensor<double> contrib = sum(term);
      total = have ? add(total, contrib) : contrib;
      have = true;
    }
  }
  GradMap<double> g2 = t2.backward(scale(total, -inv_n));

  auto l1 = phi1.trainable_parameters();
  auto l2 = phi2.trainable_parameters();
  for (size_t k = 0; k < l1.size(); ++k) {
    const bool h1 = g1.contains(l1[k]->node), h2 = g2.contains(l2[k]->node);
    CHECK(h1 == h2);
    if (!h1) continue;
    const auto& a = *g1.at(l1[k]->node).data;
    const auto& b = *g2.at(l2[k]->node).data;
    REQUIRE(a.size() == b.size());
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-9));
  }
}

TEST_CASE("lmpo loss gradient w.r.t. phi matches finite differences (miniature graph)") {
  RlFixture f;
  LmpoConfig cfg = f.cfg;
  cfg.group_size = 2;
  cfg.gen_budget = 3;
  auto group = sample_group(f.task(), f.x, cfg, 62);
  REQUIRE(group.has_value());
  // force nonzero advantages so the gradient is informative
  group->advantages = {1.0, -1.0};

  std::vector<Tensor<double>> inputs;
  f.composer.for_each([&](const std::string&, Tensor<double>& t) { inputs.push_back(t); });
  auto rebuild = [&](const std::vector<Tensor<double>>& ins) {
    ComposerParams<double> c = f.composer;
    size_t i = 0;
    c.for_each([&](const std::string&, Tensor<double>& t) { t = ins[i++]; });
    return c;
  };
  const double err = fd_max_rel_err(
      inputs,
      [&](const std::vector<Tensor<double>>& ins) {
        ComposerParams<double> c = rebuild(ins);
        Tensor<double> s = detail::build_group_surrogate(*group, c, f.backbone, cfg.clip_eps, nullptr, nullptr);
        return scale(s, -1.0 / static_cast<double>(group->token_count));
      },
      1e-5, /*max_coords_per_input=*/3);
  CHECK(err < 1e-3);
}

TEST_CASE("train_loop: zero steps is a no-op; fixed seeds reproduce bit-identical metrics") {
  RlFixture f;
  LmpoConfig cfg = f.cfg;
  cfg.total_steps = 0;
  ComposerParams<double> before = f.composer.snapshot();
  int calls = 0;
  train_loop<double>(
      f.x, f.composer, cfg, 7, [&](int, int g) { return f.task(g); },
      [&](int, const StepMetrics&) { ++calls; });
  CHECK(calls == 0);
  CHECK(frobenius_distance(f.composer, before) == 0.0);

  auto run = [&](uint64_t seed) {
    RlFixture g;
    LmpoConfig c2 = g.cfg;
    c2.total_steps = 2;
    c2.learning_rate = 1e-3;
    std::vector<StepMetrics> rows;
    train_loop<double>(
        g.x, g.composer, c2, seed, [&](int, int gi) { return g.task(gi); },
        [&](int, const StepMetrics& m) { rows.push_back(m); });
    auto entries = g.composer.to_entries();
    return std::make_pair(rows, Sha256::hex(serialize_container(entries)));
  };
  auto r1 = run(123);
  auto r2 = run(123);
  REQUIRE(r1.first.size() == r2.first.size());
  for (size_t i = 0; i < r1.first.size(); ++i) {
    CHECK(r1.first[i].loss == r2.first[i].loss);
    CHECK(r1.first[i].mean_reward == r2.first[i].mean_reward);
    CHECK(r1.first[i].grad_norm == r2.first[i].grad_norm);
    CHECK(r1.first[i].tokens == r2.first[i].tokens);
  }
  CHECK(r1.second == r2.second);
}
