#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmem/checkpoint.hpp"
#include "latentmem/common.hpp"
#include "latentmem/optim.hpp"
#include "latentmem/sha256.hpp"
#include "latentmem/tensor.hpp"
#include "latentmem/tokenizer.hpp"

namespace latentmem {

struct TransformerConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_seq_len = 512;
  int vocab_size = Tokenizer::vocab_size;

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || max_seq_len <= 0 || vocab_size <= 0)
      throw std::invalid_argument("TransformerConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("TransformerConfig: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
  }
};

// One pre-norm decoder block: LN -> multi-head attention -> residual,
// LN -> GELU MLP -> residual. Shared by the backbone and the composer encoder.
template <class Real>
struct BlockTensors {
  Tensor<Real> ln1_g, ln1_b;
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> ln2_g, ln2_b;
  Tensor<Real> w1, b1, w2, b2;

  static BlockTensors init(int d_model, int d_ff, Rng& rng) {
    auto randn = [&rng](Shape s, Real std_dev) {
      Tensor<Real> t = Tensor<Real>::zeros(std::move(s));
      for (Real& v : *t.data) v = static_cast<Real>(rng.normal() * std_dev);
      return t;
    };
    BlockTensors b;
    b.ln1_g = Tensor<Real>::full({d_model}, Real(1));
    b.ln1_b = Tensor<Real>::zeros({d_model});
    b.wq = randn({d_model, d_model}, Real(0.02));
    b.bq = Tensor<Real>::zeros({d_model});
    b.wk = randn({d_model, d_model}, Real(0.02));
    b.bk = Tensor<Real>::zeros({d_model});
    b.wv = randn({d_model, d_model}, Real(0.02));
    b.bv = Tensor<Real>::zeros({d_model});
    b.wo = randn({d_model, d_model}, Real(0.02));
    b.bo = Tensor<Real>::zeros({d_model});
    b.ln2_g = Tensor<Real>::full({d_model}, Real(1));
    b.ln2_b = Tensor<Real>::zeros({d_model});
    b.w1 = randn({d_model, d_ff}, Real(0.02));
    b.b1 = Tensor<Real>::zeros({d_ff});
    b.w2 = randn({d_ff, d_model}, Real(0.02));
    b.b2 = Tensor<Real>::zeros({d_model});
    return b;
  }

  template <class Fn>
  void for_each(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".ln1_g", ln1_g);
    fn(prefix + ".ln1_b", ln1_b);
    fn(prefix + ".wq", wq);
    fn(prefix + ".bq", bq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".bk", bk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".bv", bv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".bo", bo);
    fn(prefix + ".ln2_g", ln2_g);
    fn(prefix + ".ln2_b", ln2_b);
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }

  BlockTensors watch(Tape<Real>& tape, bool frozen) const {
    BlockTensors out = *this;
    out.for_each("", [&](const std::string&, Tensor<Real>& t) { t = tape.leaf(t, frozen); });
    return out;
  }
};

// attn_mask: optional additive R x R matrix (0 / -1e9) applied before softmax.
template <class Real>
Tensor<Real> block_forward(const BlockTensors<Real>& b, const Tensor<Real>& x, int n_heads,
                           const Tensor<Real>* attn_mask) {
  const int D = x.cols();
  const int dh = D / n_heads;
  const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
  Tensor<Real> a = layer_norm_lastdim(x, &b.ln1_g, &b.ln1_b);
  Tensor<Real> q = add_bias_row(matmul(a, b.wq), b.bq);
  Tensor<Real> k = add_bias_row(matmul(a, b.wk), b.bk);
  Tensor<Real> v = add_bias_row(matmul(a, b.wv), b.bv);
  std::vector<Tensor<Real>> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor<Real> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<Real> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<Real> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<Real> scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    if (attn_mask) scores = add(scores, *attn_mask);
    Tensor<Real> probs = softmax_lastdim(scores);
    heads.push_back(matmul(probs, vh));
  }
  Tensor<Real> ctx = concat_cols(heads);
  Tensor<Real> x1 = add(x, add_bias_row(matmul(ctx, b.wo), b.bo));
  Tensor<Real> mlp_in = layer_norm_lastdim(x1, &b.ln2_g, &b.ln2_b);
  Tensor<Real> hidden = gelu(add_bias_row(matmul(mlp_in, b.w1), b.b1));
  return add(x1, add_bias_row(matmul(hidden, b.w2), b.b2));
}

template <class Real>
Tensor<Real> causal_mask(int n) {
  Tensor<Real> m = Tensor<Real>::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = Real(-1e9);
  return m;
}

// Frozen-after-pretraining decoder-only backbone with tied input/output
// embedding.
template <class Real>
struct BackboneParams {
  TransformerConfig cfg;
  Tensor<Real> tok_emb;  // V x D, also the output projection
  Tensor<Real> pos_emb;  // max_seq_len x D
  std::vector<BlockTensors<Real>> blocks;
  Tensor<Real> lnf_g, lnf_b;

  static BackboneParams init(const TransformerConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, hash_str("backbone-init")));
    BackboneParams p;
    p.cfg = cfg;
    p.tok_emb = Tensor<Real>::zeros({cfg.vocab_size, cfg.d_model});
    for (Real& v : *p.tok_emb.data) v = static_cast<Real>(rng.normal() * 0.02);
    p.pos_emb = Tensor<Real>::zeros({cfg.max_seq_len, cfg.d_model});
    for (Real& v : *p.pos_emb.data) v = static_cast<Real>(rng.normal() * 0.02);
    for (int i = 0; i < cfg.n_layers; ++i) p.blocks.push_back(BlockTensors<Real>::init(cfg.d_model, cfg.d_ff, rng));
    p.lnf_g = Tensor<Real>::full({cfg.d_model}, Real(1));
    p.lnf_b = Tensor<Real>::zeros({cfg.d_model});
    return p;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].for_each("blocks." + std::to_string(i), fn);
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
  }

  std::vector<Tensor<Real>*> tensor_list() {
    std::vector<Tensor<Real>*> out;
    for_each([&](const std::string&, Tensor<Real>& t) { out.push_back(&t); });
    return out;
  }

  std::vector<TensorEntry> to_entries() const {
    std::vector<TensorEntry> out;
    const_cast<BackboneParams*>(this)->for_each(
        [&](const std::string& name, Tensor<Real>& t) { out.push_back(to_entry(name, t)); });
    return out;
  }

  void load_entries(const std::vector<TensorEntry>& entries) {
    size_t i = 0;
    for_each([&](const std::string& name, Tensor<Real>& t) {
      if (i >= entries.size() || entries[i].name != name)
        throw std::runtime_error("backbone checkpoint: expected tensor '" + name + "'");
      from_entry(entries[i], t);
      ++i;
    });
    if (i != entries.size()) throw std::runtime_error("backbone checkpoint: extra tensors in file");
  }

  std::string sha256_hex() const { return Sha256::hex(serialize_container(to_entries())); }

  // Leaves on a tape sharing this object's storage. frozen=true realizes the
  // frozen-backbone contract: backward never touches these nodes.
  BackboneParams watch(Tape<Real>& tape, bool frozen) const {
    BackboneParams out = *this;
    out.for_each([&](const std::string&, Tensor<Real>& t) { t = tape.leaf(t, frozen); });
    return out;
  }
};

// Left-truncates ids so that ids.size() <= max_seq_len - reserve, keeping the
// most recent context.
inline std::vector<int> clip_prompt_ids(const TransformerConfig& cfg, std::vector<int> ids, int reserve,
                                        const char* where) {
  const int limit = cfg.max_seq_len - reserve;
  if (limit <= 0) throw std::invalid_argument("clip_prompt_ids: reserve leaves no room for the prompt");
  if (static_cast<int>(ids.size()) > limit) {
    const int had = static_cast<int>(ids.size());
    ids.erase(ids.begin(), ids.begin() + (had - limit));
    warn_truncation(where, had, limit);
  }
  return ids;
}

// Token embedding plus positional embedding, rows aligned with prompt tokens.
template <class Real>
Tensor<Real> embed_prompt(const BackboneParams<Real>& p, const std::vector<int>& prompt_ids, int reserve = 0) {
  std::vector<int> ids = clip_prompt_ids(p.cfg, prompt_ids, reserve, "embed_prompt");
  if (ids.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
  return add(embedding_gather(p.tok_emb, ids), slice_rows(p.pos_emb, 0, static_cast<int>(ids.size())));
}

namespace detail {

// Full input rows: prompt, then latent memory rows (positions continue), then
// already-generated output tokens.
template <class Real>
Tensor<Real> build_input_rows(const BackboneParams<Real>& p, const std::vector<int>& prompt_ids,
                              const Tensor<Real>* memory, const std::vector<int>* output_ids) {
  const int L = static_cast<int>(prompt_ids.size());
  const int Lm = memory ? memory->rows() : 0;
  const int T = output_ids ? static_cast<int>(output_ids->size()) : 0;
  if (memory) {
    if (memory->ndim() != 2 || memory->cols() != p.cfg.d_model)
      throw std::invalid_argument("memory must be [L' x " + std::to_string(p.cfg.d_model) + "], got " +
                                  shape_str(memory->shape));
  }
  if (L + Lm + T > p.cfg.max_seq_len)
    throw std::invalid_argument("sequence length " + std::to_string(L + Lm + T) + " exceeds max_seq_len " +
                                std::to_string(p.cfg.max_seq_len));
  std::vector<Tensor<Real>> parts;
  parts.push_back(add(embedding_gather(p.tok_emb, prompt_ids), slice_rows(p.pos_emb, 0, L)));
  if (memory) parts.push_back(add(*memory, slice_rows(p.pos_emb, L, L + Lm)));
  if (T > 0)
    parts.push_back(add(embedding_gather(p.tok_emb, *output_ids), slice_rows(p.pos_emb, L + Lm, L + Lm + T)));
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

template <class Real>
Tensor<Real> logits_from_rows(const BackboneParams<Real>& p, const Tensor<Real>& rows) {
  Tensor<Real> mask = causal_mask<Real>(rows.rows());
  Tensor<Real> x = rows;
  for (const auto& b : p.blocks) x = block_forward(b, x, p.cfg.n_heads, &mask);
  Tensor<Real> xf = layer_norm_lastdim(x, &p.lnf_g, &p.lnf_b);
  return matmul_nt(xf, p.tok_emb);
}

}  // namespace detail

// Memory-augmented forward pass: latent rows are appended after the prompt
// rows and treated as ordinary context. Pass memory=nullptr for the plain
// no-memory path; the result is then identical to a forward pass that has no
// memory code at all.
template <class Real>
Tensor<Real> forward_with_memory(const BackboneParams<Real>& p, const std::vector<int>& prompt_ids,
                                 const Tensor<Real>* memory) {
  const int reserve = memory ? memory->rows() : 0;
  std::vector<int> ids = clip_prompt_ids(p.cfg, prompt_ids, reserve, "forward_with_memory");
  if (ids.empty()) throw std::invalid_argument("forward_with_memory: empty prompt");
  Tensor<Real> rows = detail::build_input_rows(p, ids, memory, nullptr);
  return detail::logits_from_rows(p, rows);
}

// Teacher-forced log-probabilities of each output token. Differentiable: with
// the backbone watched frozen and the memory on a tape, gradients reach the
// memory but never the backbone.
template <class Real>
Tensor<Real> sequence_token_logprobs(const BackboneParams<Real>& p, const std::vector<int>& prompt_ids,
                                     const Tensor<Real>* memory, const std::vector<int>& output_ids) {
  if (output_ids.empty()) throw std::invalid_argument("sequence_token_logprobs: empty output");
  const int Lm = memory ? memory->rows() : 0;
  const int T = static_cast<int>(output_ids.size());
  std::vector<int> ids = clip_prompt_ids(p.cfg, prompt_ids, Lm + T, "sequence_token_logprobs");
  if (ids.empty()) throw std::invalid_argument("sequence_token_logprobs: empty prompt");
  const int P = static_cast<int>(ids.size()) + Lm;
  Tensor<Real> rows = detail::build_input_rows(p, ids, memory, &output_ids);
  Tensor<Real> logits = detail::logits_from_rows(p, rows);
  Tensor<Real> pred = slice_rows(logits, P - 1, P - 1 + T);
  return pick_per_row(log_softmax_lastdim(pred), output_ids);
}

// ---------------------------------------------------------------------------
// incremental decoding (sampling path; arithmetic mirrors the taped ops
// operation-for-operation so replayed logprobs agree bit for bit)
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void layer_norm_row(const Real* x, const Real* g, const Real* b, Real* out, int D, Real eps = Real(1e-5)) {
  Real mu = 0;
  for (int j = 0; j < D; ++j) mu += x[j];
  mu /= Real(D);
  Real var = 0;
  for (int j = 0; j < D; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= Real(D);
  const Real is = Real(1) / std::sqrt(var + eps);
  for (int j = 0; j < D; ++j) out[j] = (x[j] - mu) * is * g[j] + b[j];
}

// out[j] = sum_k x[k] * W[k][j] + b[j], accumulation order matching mm_acc
template <class Real>
void row_linear(const Real* x, const Tensor<Real>& w, const Tensor<Real>& b, Real* out, int K, int N) {
  for (int j = 0; j < N; ++j) out[j] = 0;
  const Real* pw = w.data->data();
  for (int k = 0; k < K; ++k) {
    const Real xv = x[k];
    const Real* wrow = pw + static_cast<size_t>(k) * N;
    for (int j = 0; j < N; ++j) out[j] += xv * wrow[j];
  }
  const Real* pb = b.data->data();
  for (int j = 0; j < N; ++j) out[j] += pb[j];
}

}  // namespace detail

template <class Real>
class DecodeState {
 public:
  explicit DecodeState(const BackboneParams<Real>& p)
      : p_(&p),
        kcache_(static_cast<size_t>(p.cfg.n_layers)),
        vcache_(static_cast<size_t>(p.cfg.n_layers)) {}

  int rows_fed() const { return n_rows_; }

  // Feeds one already-embedded input row; returns next-token logits.
  std::vector<Real> step(const std::vector<Real>& row_in) {
    const auto& cfg = p_->cfg;
    const int D = cfg.d_model, dh = D / cfg.n_heads;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
    if (static_cast<int>(row_in.size()) != D) throw std::invalid_argument("DecodeState::step: bad row width");
    if (n_rows_ >= cfg.max_seq_len) throw std::invalid_argument("DecodeState::step: exceeded max_seq_len");
    std::vector<Real> x = row_in;
    std::vector<Real> a(D), q(D), k(D), v(D), ctx(D), tmp(D);
    std::vector<Real> hidden(static_cast<size_t>(cfg.d_ff));
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& b = p_->blocks[static_cast<size_t>(l)];
      detail::layer_norm_row(x.data(), b.ln1_g.data->data(), b.ln1_b.data->data(), a.data(), D);
      detail::row_linear(a.data(), b.wq, b.bq, q.data(), D, D);
      detail::row_linear(a.data(), b.wk, b.bk, k.data(), D, D);
      detail::row_linear(a.data(), b.wv, b.bv, v.data(), D, D);
      auto& kc = kcache_[static_cast<size_t>(l)];
      auto& vc = vcache_[static_cast<size_t>(l)];
      kc.insert(kc.end(), k.begin(), k.end());
      vc.insert(vc.end(), v.begin(), v.end());
      const int R = n_rows_ + 1;
      std::vector<Real> scores(static_cast<size_t>(R)), probs(static_cast<size_t>(R));
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int c0 = h * dh;
        for (int r = 0; r < R; ++r) {
          const Real* krow = kc.data() + static_cast<size_t>(r) * D + c0;
          Real acc = 0;
          for (int d = 0; d < dh; ++d) acc += q[static_cast<size_t>(c0 + d)] * krow[d];
          scores[static_cast<size_t>(r)] = acc * inv_sqrt_dh;
        }
        detail::softmax_row(scores.data(), probs.data(), R);
        for (int d = 0; d < dh; ++d) ctx[static_cast<size_t>(c0 + d)] = 0;
        for (int r = 0; r < R; ++r) {
          const Real pv = probs[static_cast<size_t>(r)];
          const Real* vrow = vc.data() + static_cast<size_t>(r) * D + c0;
          for (int d = 0; d < dh; ++d) ctx[static_cast<size_t>(c0 + d)] += pv * vrow[d];
        }
      }
      detail::row_linear(ctx.data(), b.wo, b.bo, tmp.data(), D, D);
      for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
      detail::layer_norm_row(x.data(), b.ln2_g.data->data(), b.ln2_b.data->data(), a.data(), D);
      detail::row_linear(a.data(), b.w1, b.b1, hidden.data(), D, cfg.d_ff);
      for (auto& hv : hidden) hv = detail::gelu_fwd(hv);
      detail::row_linear(hidden.data(), b.w2, b.b2, tmp.data(), cfg.d_ff, D);
      for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
    }
    ++n_rows_;
    detail::layer_norm_row(x.data(), p_->lnf_g.data->data(), p_->lnf_b.data->data(), a.data(), D);
    std::vector<Real> logits(static_cast<size_t>(cfg.vocab_size));
    const Real* emb = p_->tok_emb.data->data();
    for (int t = 0; t < cfg.vocab_size; ++t) {
      const Real* erow = emb + static_cast<size_t>(t) * D;
      Real acc = 0;
      for (int d = 0; d < D; ++d) acc += a[static_cast<size_t>(d)] * erow[d];
      logits[static_cast<size_t>(t)] = acc;
    }
    return logits;
  }

  std::vector<Real> embed_token(int id, int position) const {
    const int D = p_->cfg.d_model;
    std::vector<Real> row(static_cast<size_t>(D));
    const Real* e = p_->tok_emb.data->data() + static_cast<size_t>(id) * D;
    const Real* pe = p_->pos_emb.data->data() + static_cast<size_t>(position) * D;
    for (int j = 0; j < D; ++j) row[static_cast<size_t>(j)] = e[j] + pe[j];
    return row;
  }

 private:
  const BackboneParams<Real>* p_;
  std::vector<std::vector<Real>> kcache_, vcache_;
  int n_rows_ = 0;
};

// log softmax(logits)[id] with the same reduction order as the taped op
template <class Real>
Real logprob_of(const std::vector<Real>& logits, int id) {
  Real mx = logits[0];
  for (size_t j = 1; j < logits.size(); ++j) mx = std::max(mx, logits[j]);
  Real sum = 0;
  for (Real v : logits) sum += std::exp(v - mx);
  return logits[static_cast<size_t>(id)] - (mx + std::log(sum));
}

// temperature 0 -> argmax with ties to the lowest token id
template <class Real>
int categorical_sample(const std::vector<Real>& logits, double temperature, Rng& rng) {
  const int V = static_cast<int>(logits.size());
  if (temperature <= 0.0) {
    int best = 0;
    for (int j = 1; j < V; ++j)
      if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
    return best;
  }
  std::vector<double> w(static_cast<size_t>(V));
  double mx = -1e300;
  for (int j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(j)]) / temperature);
  double total = 0;
  for (int j = 0; j < V; ++j) {
    w[static_cast<size_t>(j)] = std::exp(static_cast<double>(logits[static_cast<size_t>(j)]) / temperature - mx);
    total += w[static_cast<size_t>(j)];
  }
  const double target = rng.uniform() * total;
  double acc = 0;
  for (int j = 0; j < V; ++j) {
    acc += w[static_cast<size_t>(j)];
    if (target < acc) return j;
  }
  return V - 1;
}

template <class Real>
struct SampleResult {
  std::vector<int> output_ids;         // includes the terminating EOS when emitted
  std::vector<Real> logprobs;          // log-probabilities at temperature 1
};

// Autoregressive sampling with optional latent memory rows (flattened L' x D)
// injected between prompt and generation. Stops at EOS or max_tokens, or when
// the positional table runs out.
template <class Real>
SampleResult<Real> sample_completion(const BackboneParams<Real>& p, const std::vector<int>& prompt_ids,
                                     const std::vector<Real>* memory, int memory_rows, double temperature,
                                     int max_tokens, uint64_t seed) {
  if (max_tokens < 1) throw std::invalid_argument("sample_completion: max_tokens must be >= 1");
  const int D = p.cfg.d_model;
  if (memory && static_cast<int>(memory->size()) != memory_rows * D)
    throw std::invalid_argument("sample_completion: memory must be L' x " + std::to_string(D));
  const int Lm = memory ? memory_rows : 0;
  std::vector<int> ids = clip_prompt_ids(p.cfg, prompt_ids, Lm + max_tokens, "sample_completion");
  if (ids.empty()) throw std::invalid_argument("sample_completion: empty prompt");

  Rng rng(mix_seed(seed, hash_str("sample")));
  DecodeState<Real> st(p);
  std::vector<Real> logits;
  int pos = 0;
  for (int id : ids) logits = st.step(st.embed_token(id, pos++));
  for (int r = 0; r < Lm; ++r) {
    std::vector<Real> row(static_cast<size_t>(D));
    const Real* mrow = memory->data() + static_cast<size_t>(r) * D;
    const Real* pe = p.pos_emb.data->data() + static_cast<size_t>(pos) * D;
    for (int j = 0; j < D; ++j) row[static_cast<size_t>(j)] = mrow[j] + pe[j];
    logits = st.step(row);
    ++pos;
  }

  SampleResult<Real> out;
  for (int t = 0; t < max_tokens && pos < p.cfg.max_seq_len; ++t) {
    const int tok = categorical_sample(logits, temperature, rng);
    out.output_ids.push_back(tok);
    out.logprobs.push_back(logprob_of(logits, tok));
    if (tok == Tokenizer::eos_id) break;
    if (pos >= p.cfg.max_seq_len) break;
    logits = st.step(st.embed_token(tok, pos++));
  }
  return out;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct PretrainOptions {
  int steps = 2000;
  int batch = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double warmup_ratio = 0.1;
  double holdout_threshold = 0.0;  // 0 disables the check
  int workers = 1;
  int log_every = 100;
  // Injection tolerance: with this probability a training line gets a block
  // of junk rows spliced in (positions shift, loss skipped at the block
  // edge). The frozen backbone then keeps functioning when latent memory rows
  // are appended at inference time. A boundary marker, when found in the
  // line, anchors part of the blocks right before the output -- the exact
  // geometry of latent injection.
  double latent_aug_prob = 0.0;
  int latent_aug_max_rows = 8;
  double latent_aug_boundary_frac = 0.6;
  std::string latent_aug_boundary_marker = " OUT: ";
};

struct PretrainResult {
  std::vector<double> step_losses;
  double holdout_loss = 0.0;
};

namespace detail {

template <class Real>
double line_cross_entropy(const BackboneParams<Real>& p, const std::vector<int>& input_ids,
                          const std::vector<int>& targets) {
  Tensor<Real> rows = build_input_rows(p, input_ids, static_cast<const Tensor<Real>*>(nullptr), nullptr);
  Tensor<Real> logits = logits_from_rows(p, rows);
  return static_cast<double>(cross_entropy_from_logits(logits, targets).value());
}

}  // namespace detail

// Next-token training on corpus lines ([BOS] chars -> chars [EOS]). Leaves the
// caller to freeze the result. Throws on divergence.
template <class Real>
PretrainResult pretrain_backbone(BackboneParams<Real>& params, const std::vector<std::string>& corpus,
                                 const PretrainOptions& opts, uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");
  struct Line {
    std::vector<int> input, target;
    int boundary = -1;  // input index of the last pre-output token, if known
  };
  std::vector<Line> train_lines, holdout_lines;
  {
    std::vector<Line> all;
    for (const auto& text : corpus) {
      std::vector<int> ids = Tokenizer::encode(text);
      const int limit = params.cfg.max_seq_len - 1;
      if (static_cast<int>(ids.size()) > limit) ids.resize(static_cast<size_t>(limit));
      Line ln;
      ln.input.push_back(Tokenizer::bos_id);
      ln.input.insert(ln.input.end(), ids.begin(), ids.end());
      ln.target = ids;
      ln.target.push_back(Tokenizer::eos_id);
      if (!opts.latent_aug_boundary_marker.empty()) {
        const size_t at = text.rfind(opts.latent_aug_boundary_marker);
        if (at != std::string::npos) {
          const int b = static_cast<int>(at + opts.latent_aug_boundary_marker.size());
          if (b < static_cast<int>(ln.input.size())) ln.boundary = b;  // BOS shifts chars by one
        }
      }
      all.push_back(std::move(ln));
    }
    if (all.size() >= 8) {
      for (size_t i = 0; i < all.size(); ++i)
        (i % 8 == 7 ? holdout_lines : train_lines).push_back(all[i]);
    } else {
      train_lines = all;
      holdout_lines = all;
    }
  }

  std::vector<Tensor<Real>*> theta = params.tensor_list();
  AdamW<Real> opt(opts.beta1, opts.beta2, opts.eps);
  Rng rng(mix_seed(seed, hash_str("pretrain")));
  PretrainResult result;
  result.step_losses.reserve(static_cast<size_t>(opts.steps));

  // one sampled injection block per augmented line, drawn up front so worker
  // scheduling cannot disturb the rng stream
  struct AugPlan {
    bool active = false;
    int after = 0;  // block starts after this token index
    Tensor<Real> noise;
  };
  const int D = params.cfg.d_model;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<int> picks(static_cast<size_t>(opts.batch));
    for (auto& p : picks) p = rng.uniform_int(static_cast<int>(train_lines.size()));
    std::vector<AugPlan> plans(picks.size());
    for (size_t i = 0; i < picks.size(); ++i) {
      if (opts.latent_aug_prob <= 0.0 || rng.uniform() >= opts.latent_aug_prob) continue;
      const Line& ln = train_lines[static_cast<size_t>(picks[i])];
      const int n = static_cast<int>(ln.input.size());
      const bool at_boundary = ln.boundary >= 0 && rng.uniform() < opts.latent_aug_boundary_frac;
      const int rows = at_boundary ? std::max(1, opts.latent_aug_max_rows)
                                   : 1 + rng.uniform_int(std::max(1, opts.latent_aug_max_rows));
      if (n + rows > params.cfg.max_seq_len) continue;
      AugPlan& plan = plans[i];
      plan.active = true;
      plan.after = at_boundary ? ln.boundary : rng.uniform_int(n);
      plan.noise = Tensor<Real>::zeros({rows, D});
      const int kind = rng.uniform_int(4);
      if (kind == 0) {
        for (int r = 0; r < rows; ++r) {
          const int tok = rng.uniform_int(params.cfg.vocab_size);
          for (int j = 0; j < D; ++j) plan.noise.at(r, j) = params.tok_emb.at(tok, j);
        }
      } else if (kind == 1) {
        const double sigma = std::exp(std::log(0.02) + rng.uniform() * (std::log(0.3) - std::log(0.02)));
        for (Real& v : *plan.noise.data) v = static_cast<Real>(rng.normal() * sigma);
      } else if (kind == 2) {
        // correlated block: shared direction with per-row jitter, the shape a
        // learned-query composer actually produces
        const double sigma = std::exp(std::log(0.02) + rng.uniform() * (std::log(0.3) - std::log(0.02)));
        std::vector<double> shared(static_cast<size_t>(D));
        for (double& v : shared) v = rng.normal() * sigma;
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < D; ++j)
            plan.noise.at(r, j) =
                static_cast<Real>(shared[static_cast<size_t>(j)] + rng.normal() * sigma * 0.25);
      }  // kind 3: zero rows
    }

    std::vector<double> line_losses(picks.size(), 0.0);
    std::vector<std::vector<std::vector<Real>>> line_grads(picks.size());
    parallel_for(static_cast<int64_t>(picks.size()), opts.workers, [&](int64_t i) {
      const Line& ln = train_lines[static_cast<size_t>(picks[static_cast<size_t>(i)])];
      const AugPlan& plan = plans[static_cast<size_t>(i)];
      Tape<Real> tape;
      BackboneParams<Real> watched = params.watch(tape, false);
      Tensor<Real> loss;
      if (!plan.active) {
        Tensor<Real> rows = detail::build_input_rows(watched, ln.input,
                                                     static_cast<const Tensor<Real>*>(nullptr), nullptr);
        loss = cross_entropy_from_logits(detail::logits_from_rows(watched, rows), ln.target);
      } else {
        const int n = static_cast<int>(ln.input.size());
        const int p = plan.after;
        const int J = plan.noise.rows();
        std::vector<int> prefix(ln.input.begin(), ln.input.begin() + p + 1);
        std::vector<Tensor<Real>> parts;
        parts.push_back(add(embedding_gather(watched.tok_emb, prefix),
                            slice_rows(watched.pos_emb, 0, p + 1)));
        parts.push_back(add(plan.noise, slice_rows(watched.pos_emb, p + 1, p + 1 + J)));
        if (p + 1 < n) {
          std::vector<int> suffix(ln.input.begin() + p + 1, ln.input.end());
          parts.push_back(add(embedding_gather(watched.tok_emb, suffix),
                              slice_rows(watched.pos_emb, p + 1 + J, n + J)));
        }
        Tensor<Real> logits = detail::logits_from_rows(watched, concat_rows(parts));
        // predictions skip the block edge: rows 0..p-1 keep their targets, the
        // last noise row takes over target[p], suffix rows continue as usual
        std::vector<Tensor<Real>> pred_parts;
        std::vector<int> targets;
        if (p > 0) {
          pred_parts.push_back(slice_rows(logits, 0, p));
          targets.insert(targets.end(), ln.target.begin(), ln.target.begin() + p);
        }
        pred_parts.push_back(slice_rows(logits, p + J, n + J));
        targets.insert(targets.end(), ln.target.begin() + p, ln.target.end());
        loss = cross_entropy_from_logits(
            pred_parts.size() == 1 ? pred_parts[0] : concat_rows(pred_parts), targets);
      }
      line_losses[static_cast<size_t>(i)] = static_cast<double>(loss.value());
      GradMap<Real> gm = tape.backward(loss);
      auto& grads = line_grads[static_cast<size_t>(i)];
      std::vector<Tensor<Real>*> leaves;
      watched.for_each([&](const std::string&, Tensor<Real>& t) { leaves.push_back(&t); });
      for (Tensor<Real>* leaf : leaves) {
        if (gm.contains(leaf->node))
          grads.push_back(*gm.at(leaf->node).data);
        else
          grads.push_back(std::vector<Real>(leaf->data->size(), Real(0)));
      }
    });

    double step_loss = 0;
    for (double l : line_losses) step_loss += l;
    step_loss /= static_cast<double>(picks.size());
    if (!std::isfinite(step_loss))
      throw std::runtime_error("pretrain_backbone: diverged (non-finite loss) at step " + std::to_string(step));

    std::vector<std::vector<Real>> total(theta.size());
    for (size_t k = 0; k < theta.size(); ++k) total[k].assign(theta[k]->data->size(), Real(0));
    const Real inv_b = Real(1) / Real(picks.size());
    for (size_t i = 0; i < picks.size(); ++i)
      for (size_t k = 0; k < theta.size(); ++k)
        for (size_t j = 0; j < total[k].size(); ++j) total[k][j] += line_grads[i][k][j] * inv_b;

    clip_grad_norm(total, opts.grad_clip);
    opt.step(theta, total, warmup_lr(opts.lr, step, opts.steps, opts.warmup_ratio), opts.weight_decay);
    result.step_losses.push_back(step_loss);
  }

  double hl = 0;
  for (const Line& ln : holdout_lines) hl += detail::line_cross_entropy(params, ln.input, ln.target);
  result.holdout_loss = hl / static_cast<double>(holdout_lines.size());
  if (opts.holdout_threshold > 0 && result.holdout_loss > opts.holdout_threshold)
    throw std::runtime_error("pretrain_backbone: held-out loss " + std::to_string(result.holdout_loss) +
                             " above threshold " + std::to_string(opts.holdout_threshold));
  return result;
}

}  // namespace latentmem
