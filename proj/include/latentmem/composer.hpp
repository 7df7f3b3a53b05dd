#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmem/checkpoint.hpp"
#include "latentmem/common.hpp"
#include "latentmem/model.hpp"
#include "latentmem/tensor.hpp"
#include "latentmem/tokenizer.hpp"

namespace latentmem {

struct ComposerConfig {
  int enc_blocks = 2;
  int ctx_budget = 384;  // token budget for "ROLE: <profile> [SEP] <context>"
  int latent_len = 8;    // L'
  int d_model = 128;     // must equal the backbone hidden dimension
  int n_heads = 4;
  int d_ff = 512;

  void validate() const {
    if (enc_blocks <= 0 || ctx_budget <= 2 || latent_len <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0)
      throw std::invalid_argument("ComposerConfig: all dimensions must be positive (ctx_budget > 2)");
    if (d_model % n_heads != 0) throw std::invalid_argument("ComposerConfig: d_model not divisible by n_heads");
  }

  static ComposerConfig for_backbone(const TransformerConfig& b, int latent_len_ = 8, int enc_blocks_ = 2,
                                     int ctx_budget_ = 384) {
    ComposerConfig c;
    c.enc_blocks = enc_blocks_;
    c.ctx_budget = ctx_budget_;
    c.latent_len = latent_len_;
    c.d_model = b.d_model;
    c.n_heads = b.n_heads;
    c.d_ff = b.d_ff;
    return c;
  }
};

// The trainable composer: a bidirectional 2-block encoder over frozen backbone
// token embeddings plus learned positions, learned latent queries that
// cross-attend over the encoder output, and a final D x D projection.
template <class Real>
struct ComposerParams {
  ComposerConfig cfg;
  Tensor<Real> cpos;  // ctx_budget x D learned positions for the encoder input
  std::vector<BlockTensors<Real>> enc_blocks;
  Tensor<Real> enc_ln_g, enc_ln_b;
  Tensor<Real> latent_queries;  // L' x D
  Tensor<Real> xq_w, xq_b, xk_w, xk_b, xv_w, xv_b, xo_w, xo_b;
  Tensor<Real> xln_g, xln_b;
  Tensor<Real> proj_w, proj_b;  // output projection D x D

  static ComposerParams init(const ComposerConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, hash_str("composer-init")));
    auto randn = [&rng](Shape s, Real sd) {
      Tensor<Real> t = Tensor<Real>::zeros(std::move(s));
      for (Real& v : *t.data) v = static_cast<Real>(rng.normal() * sd);
      return t;
    };
    const int D = cfg.d_model;
    ComposerParams p;
    p.cfg = cfg;
    p.cpos = randn({cfg.ctx_budget, D}, Real(0.02));
    for (int i = 0; i < cfg.enc_blocks; ++i) p.enc_blocks.push_back(BlockTensors<Real>::init(D, cfg.d_ff, rng));
    p.enc_ln_g = Tensor<Real>::full({D}, Real(1));
    p.enc_ln_b = Tensor<Real>::zeros({D});
    p.latent_queries = randn({cfg.latent_len, D}, Real(0.02));
    p.xq_w = randn({D, D}, Real(0.02));
    p.xq_b = Tensor<Real>::zeros({D});
    p.xk_w = randn({D, D}, Real(0.02));
    p.xk_b = Tensor<Real>::zeros({D});
    p.xv_w = randn({D, D}, Real(0.02));
    p.xv_b = Tensor<Real>::zeros({D});
    p.xo_w = randn({D, D}, Real(0.02));
    p.xo_b = Tensor<Real>::zeros({D});
    p.xln_g = Tensor<Real>::full({D}, Real(1));
    p.xln_b = Tensor<Real>::zeros({D});
    // small output projection keeps the initial memory close to token scale,
    // barely perturbing the frozen backbone
    p.proj_w = randn({D, D}, Real(0.002));
    p.proj_b = Tensor<Real>::zeros({D});
    return p;
  }

  // Stable enumeration order: optimizer slots, checkpoints, and parameter
  // census all rely on it.
  template <class Fn>
  void for_each(Fn&& fn) {
    fn("latent_queries", latent_queries);
    fn("cpos", cpos);
    for (size_t i = 0; i < enc_blocks.size(); ++i) enc_blocks[i].for_each("enc." + std::to_string(i), fn);
    fn("enc_ln_g", enc_ln_g);
    fn("enc_ln_b", enc_ln_b);
    fn("xq_w", xq_w);
    fn("xq_b", xq_b);
    fn("xk_w", xk_w);
    fn("xk_b", xk_b);
    fn("xv_w", xv_w);
    fn("xv_b", xv_b);
    fn("xo_w", xo_w);
    fn("xo_b", xo_b);
    fn("xln_g", xln_g);
    fn("xln_b", xln_b);
    fn("proj_w", proj_w);
    fn("proj_b", proj_b);
  }

  std::vector<Tensor<Real>*> trainable_parameters() {
    std::vector<Tensor<Real>*> out;
    for_each([&](const std::string&, Tensor<Real>& t) { out.push_back(&t); });
    return out;
  }

  std::vector<std::string> parameter_names() {
    std::vector<std::string> out;
    for_each([&](const std::string& n, Tensor<Real>&) { out.push_back(n); });
    return out;
  }

  int64_t parameter_census() {
    int64_t n = 0;
    for_each([&](const std::string&, Tensor<Real>& t) { n += t.numel(); });
    return n;
  }

  // Detached deep copy; later updates to this object leave the snapshot
  // untouched.
  ComposerParams snapshot() const {
    ComposerParams out = *this;
    out.for_each([](const std::string&, Tensor<Real>& t) { t = t.clone(); });
    return out;
  }

  ComposerParams watch(Tape<Real>& tape, bool frozen = false) const {
    ComposerParams out = *this;
    out.for_each([&](const std::string&, Tensor<Real>& t) { t = tape.leaf(t, frozen); });
    return out;
  }

  std::vector<TensorEntry> to_entries() const {
    std::vector<TensorEntry> out;
    const_cast<ComposerParams*>(this)->for_each(
        [&](const std::string& name, Tensor<Real>& t) { out.push_back(to_entry(name, t)); });
    return out;
  }

  void load_entries(const std::vector<TensorEntry>& entries) {
    size_t i = 0;
    for_each([&](const std::string& name, Tensor<Real>& t) {
      if (i >= entries.size() || entries[i].name != name)
        throw std::runtime_error("composer checkpoint: expected tensor '" + name + "'");
      from_entry(entries[i], t);
      ++i;
    });
    if (i != entries.size()) throw std::runtime_error("composer checkpoint: extra tensors in file");
  }
};

template <class Real>
double frobenius_distance(ComposerParams<Real>& a, ComposerParams<Real>& b) {
  double sq = 0;
  auto pa = a.trainable_parameters();
  auto pb = b.trainable_parameters();
  if (pa.size() != pb.size()) throw std::invalid_argument("frobenius_distance: parameter census mismatch");
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->shape != pb[i]->shape) throw std::invalid_argument("frobenius_distance: shape mismatch");
    for (int64_t j = 0; j < pa[i]->numel(); ++j) {
      const double d = static_cast<double>(pa[i]->at(static_cast<int>(j))) - pb[i]->at(static_cast<int>(j));
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

// Token stream "ROLE: <profile> [SEP] <rendered context>", truncated to the
// budget by dropping the oldest context tokens first (the front of the
// rendering), never the role prefix.
inline std::vector<int> composer_input_ids(const ComposerConfig& cfg, const std::string& role_profile,
                                           const std::string& context_text) {
  if (role_profile.empty())
    throw std::invalid_argument("compose: empty role profile (role-ablation substitutes a placeholder)");
  std::vector<int> role_ids = Tokenizer::encode("ROLE: " + role_profile);
  std::vector<int> ctx_ids = Tokenizer::encode(context_text);
  const int budget = cfg.ctx_budget;
  if (static_cast<int>(role_ids.size()) + 1 > budget) role_ids.resize(static_cast<size_t>(budget - 1));
  const int keep_ctx = budget - static_cast<int>(role_ids.size()) - 1;
  if (static_cast<int>(ctx_ids.size()) > keep_ctx)
    ctx_ids.erase(ctx_ids.begin(), ctx_ids.end() - keep_ctx);
  std::vector<int> ids = std::move(role_ids);
  ids.push_back(Tokenizer::sep_id);
  ids.insert(ids.end(), ctx_ids.begin(), ctx_ids.end());
  return ids;
}

// sigma_phi: (role profile, rendered retrieved trajectories) -> L' x D latent
// memory. Pure function of (phi, inputs); differentiable w.r.t. phi when the
// composer tensors are watched on a tape.
template <class Real>
Tensor<Real> compose(const ComposerParams<Real>& phi, const BackboneParams<Real>& backbone,
                     const std::string& role_profile, const std::string& context_text) {
  if (backbone.cfg.d_model != phi.cfg.d_model)
    throw std::invalid_argument("compose: backbone hidden dim " + std::to_string(backbone.cfg.d_model) +
                                " != composer d_model " + std::to_string(phi.cfg.d_model));
  const int D = phi.cfg.d_model;
  const int dh = D / phi.cfg.n_heads;
  const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
  std::vector<int> ids = composer_input_ids(phi.cfg, role_profile, context_text);
  const int n = static_cast<int>(ids.size());

  // token embeddings come from the frozen backbone table as plain values
  Tensor<Real> emb = embedding_gather(backbone.tok_emb.detached(), ids);
  Tensor<Real> x = add(emb, slice_rows(phi.cpos, 0, n));
  for (const auto& b : phi.enc_blocks)
    x = block_forward(b, x, phi.cfg.n_heads, static_cast<const Tensor<Real>*>(nullptr));
  Tensor<Real> enc = layer_norm_lastdim(x, &phi.enc_ln_g, &phi.enc_ln_b);

  Tensor<Real> q = add_bias_row(matmul(phi.latent_queries, phi.xq_w), phi.xq_b);
  Tensor<Real> k = add_bias_row(matmul(enc, phi.xk_w), phi.xk_b);
  Tensor<Real> v = add_bias_row(matmul(enc, phi.xv_w), phi.xv_b);
  std::vector<Tensor<Real>> heads;
  heads.reserve(static_cast<size_t>(phi.cfg.n_heads));
  for (int h = 0; h < phi.cfg.n_heads; ++h) {
    Tensor<Real> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<Real> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<Real> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<Real> probs = softmax_lastdim(scale(matmul_nt(qh, kh), inv_sqrt_dh));
    heads.push_back(matmul(probs, vh));
  }
  Tensor<Real> ctx = concat_cols(heads);
  Tensor<Real> q2 = add(phi.latent_queries, add_bias_row(matmul(ctx, phi.xo_w), phi.xo_b));
  Tensor<Real> mn = layer_norm_lastdim(q2, &phi.xln_g, &phi.xln_b);
  return add_bias_row(matmul(mn, phi.proj_w), phi.proj_b);
}

// Row mean of a latent memory, the fixed-size vector exported for external
// clustering / projection of role-awareness.
template <class Real>
std::vector<Real> mean_latent_embedding(const Tensor<Real>& m) {
  if (m.ndim() != 2) throw std::invalid_argument("mean_latent_embedding: need L' x D matrix");
  const int L = m.rows(), D = m.cols();
  std::vector<Real> out(static_cast<size_t>(D), Real(0));
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < D; ++j) out[static_cast<size_t>(j)] += m.at(l, j);
  for (Real& v : out) v /= Real(L);
  return out;
}

}  // namespace latentmem
