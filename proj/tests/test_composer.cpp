#include <doctest.h>

#include <cmath>

#include "latentmem/composer.hpp"
#include "latentmem/gradcheck.hpp"
#include "latentmem/model.hpp"

using namespace latentmem;

namespace {

TransformerConfig small_backbone_cfg(int d = 16, int heads = 2, int dff = 32) {
  TransformerConfig c;
  c.n_layers = 1;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = dff;
  c.max_seq_len = 64;
  return c;
}

ComposerConfig small_composer_cfg(int d = 16, int heads = 2, int dff = 32, int lat = 4, int ctx = 48) {
  ComposerConfig c;
  c.enc_blocks = 2;
  c.ctx_budget = ctx;
  c.latent_len = lat;
  c.d_model = d;
  c.n_heads = heads;
  c.d_ff = dff;
  return c;
}

}  // namespace

TEST_CASE("compose yields a fixed-shape latent memory, even with no context") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 1);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 2);
  Tensor<double> m = compose(phi, backbone, "solver: draft answers", "");
  CHECK(m.shape == Shape{4, 16});
  for (double v : *m.data) CHECK(std::isfinite(v));

  // long context still gives the same fixed shape
  std::string long_ctx(500, 'x');
  Tensor<double> m2 = compose(phi, backbone, "solver: draft answers", long_ctx);
  CHECK(m2.shape == Shape{4, 16});
}

TEST_CASE("default-sized composer emits an 8 x 128 memory") {
  TransformerConfig bcfg;  // defaults: D=128
  auto backbone = BackboneParams<float>::init(bcfg, 3);
  auto phi = ComposerParams<float>::init(ComposerConfig::for_backbone(bcfg), 4);
  Tensor<float> m = compose(phi, backbone, "checker: verify and answer", "[TRAJ 1] [STEP 1 agent 0] PROMPT: p OUTPUT: o");
  CHECK(m.shape == Shape{8, 128});
}

TEST_CASE("distinct role profiles produce distinct memories") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 5);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 6);
  const std::string ctx = "[TRAJ 1] [STEP 1 agent 0] PROMPT: p OUTPUT: o";
  Tensor<double> a = compose(phi, backbone, "solver: draft answers", ctx);
  Tensor<double> b = compose(phi, backbone, "checker: verify answers", ctx);
  double dist = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a.at(static_cast<int>(i)) - b.at(static_cast<int>(i));
    dist += d * d;
  }
  CHECK(std::sqrt(dist) > 0.0);
}

TEST_CASE("compose rejects an empty role profile") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 7);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 8);
  CHECK_THROWS_AS(compose(phi, backbone, "", "ctx"), std::invalid_argument);
}

TEST_CASE("compose is deterministic") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 9);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 10);
  Tensor<double> a = compose(phi, backbone, "solver: s", "ctx text");
  Tensor<double> b = compose(phi, backbone, "solver: s", "ctx text");
  CHECK(*a.data == *b.data);
}

TEST_CASE("mean latent embedding") {
  Tensor<double> flat = Tensor<double>::zeros({3, 4});
  for (int l = 0; l < 3; ++l)
    for (int j = 0; j < 4; ++j) flat.at(l, j) = j + 1.0;
  auto m1 = mean_latent_embedding(flat);
  for (int j = 0; j < 4; ++j) CHECK(m1[static_cast<size_t>(j)] == doctest::Approx(j + 1.0));

  Rng rng(12);
  Tensor<double> r = Tensor<double>::zeros({8, 128});
  for (double& v : *r.data) v = rng.normal();
  auto mr = mean_latent_embedding(r);
  Tensor<double> neg = r.clone();
  for (double& v : *neg.data) v = -v;
  auto mn = mean_latent_embedding(neg);
  for (int j = 0; j < 128; ++j) {
    double want = 0;
    for (int l = 0; l < 8; ++l) want += r.at(l, j);
    want /= 8.0;
    CHECK(std::abs(mr[static_cast<size_t>(j)] - want) < 1e-12);
    CHECK(mn[static_cast<size_t>(j)] == doctest::Approx(-mr[static_cast<size_t>(j)]));
  }
}

TEST_CASE("snapshot isolates phi_old from later updates") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 13);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 14);
  const std::string ctx = "some context";
  auto snap = phi.snapshot();
  Tensor<double> before = compose(phi, backbone, "solver: s", ctx);
  Tensor<double> snap_before = compose(snap, backbone, "solver: s", ctx);
  CHECK(*before.data == *snap_before.data);

  // wreck phi; the snapshot must not move
  for (Tensor<double>* t : phi.trainable_parameters())
    std::fill(t->data->begin(), t->data->end(), 0.0);
  Tensor<double> snap_after = compose(snap, backbone, "solver: s", ctx);
  CHECK(*snap_before.data == *snap_after.data);
  Tensor<double> wrecked = compose(phi, backbone, "solver: s", ctx);
  CHECK(*wrecked.data != *snap_after.data);

  // two snapshots without updates in between are bitwise equal
  auto s1 = phi.snapshot();
  auto s2 = phi.snapshot();
  auto pa = s1.trainable_parameters();
  auto pb = s2.trainable_parameters();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i]->data == *pb[i]->data);
}

TEST_CASE("trainable parameters: stable order, census, no backbone tensors") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(), 15);
  auto phi = ComposerParams<double>::init(small_composer_cfg(), 16);
  auto phi2 = ComposerParams<double>::init(small_composer_cfg(), 16);
  CHECK(phi.parameter_names() == phi2.parameter_names());

  // no composer tensor aliases a backbone tensor
  std::vector<const void*> theta;
  backbone.for_each([&](const std::string&, Tensor<double>& t) { theta.push_back(t.data.get()); });
  for (Tensor<double>* t : phi.trainable_parameters())
    for (const void* p : theta) CHECK(t->data.get() != p);

  // census formula: latent + positions + encoder blocks + final ln +
  // cross-attention + its ln + projection
  const int64_t D = 16, dff = 32, ctx = 48, lat = 4, blocks = 2;
  const int64_t per_block = 4 * D * D + 2 * D * dff + dff + 9 * D;
  const int64_t want = lat * D + ctx * D + blocks * per_block + 2 * D + (4 * (D * D + D)) + 2 * D + (D * D + D);
  CHECK(phi.parameter_census() == want);
}

TEST_CASE("composer context budget truncates oldest context, keeps the role") {
  ComposerConfig cfg = small_composer_cfg(16, 2, 32, 4, 20);
  auto ids = composer_input_ids(cfg, "solver", "abcdefghijklmnopqrstuvwxyz");
  CHECK(static_cast<int>(ids.size()) == 20);
  // role prefix "ROLE: solver" (12 tokens) + SEP + last 7 context chars
  const std::string tail = Tokenizer::decode(std::vector<int>(ids.end() - 7, ids.end()));
  CHECK(tail == "tuvwxyz");
  CHECK(ids[12] == Tokenizer::sep_id);
}

TEST_CASE("compose gradients match finite differences for every phi tensor") {
  auto backbone = BackboneParams<double>::init(small_backbone_cfg(8, 2, 16), 17);
  ComposerConfig ccfg = small_composer_cfg(8, 2, 16, 2, 24);
  auto phi = ComposerParams<double>::init(ccfg, 18);

  std::vector<Tensor<double>> inputs;
  phi.for_each([&](const std::string&, Tensor<double>& t) { inputs.push_back(t); });
  Rng rng(19);
  Tensor<double> w = Tensor<double>::zeros({2, 8});
  for (double& v : *w.data) v = rng.normal();

  auto rebuild = [&](const std::vector<Tensor<double>>& ins) {
    ComposerParams<double> c = phi;
    size_t i = 0;
    c.for_each([&](const std::string&, Tensor<double>& t) { t = ins[i++]; });
    return c;
  };
  const double err = fd_max_rel_err(
      inputs,
      [&](const std::vector<Tensor<double>>& ins) {
        ComposerParams<double> c = rebuild(ins);
        Tensor<double> m = compose(c, backbone, "solver: role", "[TRAJ 1] ctx");
        return sum(mul(m, w.detached()));
      },
      1e-5, /*max_coords_per_input=*/6);
  CHECK(err < 1e-4);
}
