// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/transformer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "peftlab/errors.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

namespace debug {
namespace {
std::atomic<bool> g_sign_flip{false};
}
void set_backward_sign_flip(bool on) noexcept { g_sign_flip.store(on); }
bool backward_sign_flip() noexcept { return g_sign_flip.load(); }
}  // namespace debug

bool Block::any_trainable() const noexcept {
  if (norms_trainable) return true;
  return std::any_of(proj.begin(), proj.end(), [](const LinearSlot& s) { return s.trainable(); });
}

std::string slot_name(int block, Target t) { return fmt::format("blk{}.{}", block, target_name(t)); }

TransformerModel TransformerModel::random(const ModelConfig& cfg, std::uint64_t seed, real_t init_std) {
  cfg.validate();
  TransformerModel m;
  m.config = cfg;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto vocab = static_cast<std::size_t>(cfg.vocab);
  Rng rng(derive_seed(seed, 0xE4BED));
  m.embed = gaussian_matrix(rng, d, vocab, init_std);
  m.head = gaussian_matrix(rng, vocab, d, init_std);
  m.final_norm = Matrix(d, 1, real_t{1});
  m.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    Block& b = m.blocks[static_cast<std::size_t>(i)];
    b.norm1 = Matrix(d, 1, real_t{1});
    b.norm2 = Matrix(d, 1, real_t{1});
    for (Target t : kAllTargets) {
      Rng prng(derive_seed(seed, 1 + static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(t)));
      const MatrixShape shape = target_shape(cfg, t);
      LinearSlot& s = b.slot(t);
      s.weight = gaussian_matrix(prng, static_cast<std::size_t>(shape.d_out),
                                 static_cast<std::size_t>(shape.d_in), init_std);
      const std::string base = fmt::format("blk{}/{}", i, target_name(t));
      s.tags = ProjectionTags{base + "/fwd", base + "/bwd_w", base + "/bwd_x"};
    }
  }
  return m;
}

std::optional<int> TransformerModel::lowest_trainable_block() const noexcept {
  if (embed_trainable) return 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].any_trainable()) return static_cast<int>(i);
  }
  return std::nullopt;
}

bool TransformerModel::any_trainable() const noexcept {
  return embed_trainable || head_trainable || final_norm_trainable ||
         lowest_trainable_block().has_value();
}

void TransformerModel::freeze_all() noexcept {
  embed_trainable = head_trainable = final_norm_trainable = false;
  for (Block& b : blocks) {
    b.norms_trainable = false;
    for (LinearSlot& s : b.proj) s.mode = Trainability::Frozen;
  }
}

void TransformerModel::clear_adapters() noexcept {
  freeze_all();
  for (Block& b : blocks) {
    for (LinearSlot& s : b.proj) {
      s.lora.reset();
      s.columns.reset();
    }
  }
}

namespace {

struct RmsOut {
  Matrix y;
  Matrix inv;
};

RmsOut rmsnorm_forward(const Matrix& x, const Matrix& gain, double eps, std::string_view tag) {
  const std::size_t d = x.rows();
  const std::size_t n = x.cols();
  RmsOut out{Matrix(d, n), Matrix(1, n)};
  std::vector<real_t> ss(n, 0);
  for (std::size_t r = 0; r < d; ++r) {
    const real_t* xr = x.row(r);
    for (std::size_t c = 0; c < n; ++c) ss[c] += xr[c] * xr[c];
  }
  for (std::size_t c = 0; c < n; ++c) {
    out.inv(0, c) = static_cast<real_t>(1) / std::sqrt(ss[c] / static_cast<real_t>(d) + static_cast<real_t>(eps));
  }
  const real_t* inv = out.inv.row(0);
  for (std::size_t r = 0; r < d; ++r) {
    const real_t gr = gain(r, 0);
    const real_t* xr = x.row(r);
    real_t* yr = out.y.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = gr * xr[c] * inv[c];
  }
  record_op(tag, OpKind::Elementwise, 4 * x.size());
  return out;
}

// dx_r = inv * g_r * dy_r - inv^3 * x_r / d * sum_k g_k dy_k x_k
Matrix rmsnorm_backward(const Matrix& x, const Matrix& gain, const Matrix& inv, const Matrix& dy,
                        Matrix* dgain, std::string_view tag) {
  const std::size_t d = x.rows();
  const std::size_t n = x.cols();
  std::vector<real_t> dot(n, 0);
  for (std::size_t r = 0; r < d; ++r) {
    const real_t gr = gain(r, 0);
    const real_t* xr = x.row(r);
    const real_t* dyr = dy.row(r);
    for (std::size_t c = 0; c < n; ++c) dot[c] += gr * dyr[c] * xr[c];
  }
  const real_t* iv = inv.row(0);
  Matrix dx(d, n);
  const real_t inv_d = static_cast<real_t>(1) / static_cast<real_t>(d);
  for (std::size_t r = 0; r < d; ++r) {
    const real_t gr = gain(r, 0);
    const real_t* xr = x.row(r);
    const real_t* dyr = dy.row(r);
    real_t* dxr = dx.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      dxr[c] = iv[c] * gr * dyr[c] - iv[c] * iv[c] * iv[c] * xr[c] * inv_d * dot[c];
    }
  }
  if (dgain != nullptr) {
    *dgain = Matrix(d, 1);
    for (std::size_t r = 0; r < d; ++r) {
      const real_t* xr = x.row(r);
      const real_t* dyr = dy.row(r);
      real_t acc = 0;
      for (std::size_t c = 0; c < n; ++c) acc += dyr[c] * xr[c] * iv[c];
      (*dgain)(r, 0) = acc;
    }
  }
  record_op(tag, OpKind::Elementwise, 8 * x.size());
  return dx;
}

struct RopeTable {
  std::size_t half = 0;
  std::vector<real_t> cos;  // [t][j]
  std::vector<real_t> sin;
};

RopeTable make_rope(int seq, int head_dim, double base) {
  RopeTable tab;
  tab.half = static_cast<std::size_t>(head_dim / 2);
  tab.cos.resize(static_cast<std::size_t>(seq) * tab.half);
  tab.sin.resize(tab.cos.size());
  for (int t = 0; t < seq; ++t) {
    for (std::size_t j = 0; j < tab.half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / head_dim);
      const double ang = t * freq;
      tab.cos[static_cast<std::size_t>(t) * tab.half + j] = static_cast<real_t>(std::cos(ang));
      tab.sin[static_cast<std::size_t>(t) * tab.half + j] = static_cast<real_t>(std::sin(ang));
    }
  }
  return tab;
}

// Rotates pairs (2j, 2j+1) of every head by angle t * freq_j; inverse=true
// applies the transposed rotation (used by backward).
void apply_rope(Matrix& m, int seq, int n_heads, int head_dim, const RopeTable& tab, bool inverse,
                std::string_view tag) {
  const std::size_t cols = m.cols();
  for (int h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < tab.half; ++j) {
      real_t* r0 = m.row(static_cast<std::size_t>(h * head_dim) + 2 * j);
      real_t* r1 = m.row(static_cast<std::size_t>(h * head_dim) + 2 * j + 1);
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t t = c % static_cast<std::size_t>(seq);
        const real_t co = tab.cos[t * tab.half + j];
        const real_t si = inverse ? -tab.sin[t * tab.half + j] : tab.sin[t * tab.half + j];
        const real_t a = r0[c];
        const real_t b = r1[c];
        r0[c] = a * co - b * si;
        r1[c] = a * si + b * co;
      }
    }
  }
  record_op(tag, OpKind::Elementwise, 6 * m.size());
}

struct AttnDims {
  int batch;
  int seq;
  int heads;
  int head_dim;
};

void gather_head(const Matrix& m, const AttnDims& dm, int n, int h, std::vector<real_t>& out) {
  const auto T = static_cast<std::size_t>(dm.seq);
  const auto dh = static_cast<std::size_t>(dm.head_dim);
  out.assign(T * dh, 0);
  for (std::size_t e = 0; e < dh; ++e) {
    const real_t* row = m.row(static_cast<std::size_t>(h) * dh + e) + static_cast<std::size_t>(n) * T;
    for (std::size_t t = 0; t < T; ++t) out[t * dh + e] = row[t];
  }
}

void scatter_head(Matrix& m, const AttnDims& dm, int n, int h, const std::vector<real_t>& in) {
  const auto T = static_cast<std::size_t>(dm.seq);
  const auto dh = static_cast<std::size_t>(dm.head_dim);
  for (std::size_t e = 0; e < dh; ++e) {
    real_t* row = m.row(static_cast<std::size_t>(h) * dh + e) + static_cast<std::size_t>(n) * T;
    for (std::size_t t = 0; t < T; ++t) row[t] = in[t * dh + e];
  }
}

std::uint64_t causal_pairs(int seq) {
  return static_cast<std::uint64_t>(seq) * static_cast<std::uint64_t>(seq + 1) / 2;
}

Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, const AttnDims& dm,
                         std::vector<real_t>* probs_out, std::string_view tag) {
  const auto T = static_cast<std::size_t>(dm.seq);
  const auto dh = static_cast<std::size_t>(dm.head_dim);
  const real_t scale = static_cast<real_t>(1) / std::sqrt(static_cast<real_t>(dm.head_dim));
  Matrix att(q.rows(), q.cols());
  if (probs_out) probs_out->assign(static_cast<std::size_t>(dm.batch * dm.heads) * T * T, 0);
  std::vector<real_t> qh, kh, vh, oh(T * dh), p(T * T);
  for (int n = 0; n < dm.batch; ++n) {
    for (int h = 0; h < dm.heads; ++h) {
      gather_head(q, dm, n, h, qh);
      gather_head(k, dm, n, h, kh);
      gather_head(v, dm, n, h, vh);
      std::fill(p.begin(), p.end(), real_t{0});
      for (std::size_t t = 0; t < T; ++t) {
        real_t mx = -std::numeric_limits<real_t>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          real_t acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += qh[t * dh + e] * kh[s * dh + e];
          p[t * T + s] = acc * scale;
          mx = std::max(mx, p[t * T + s]);
        }
        real_t z = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          p[t * T + s] = std::exp(p[t * T + s] - mx);
          z += p[t * T + s];
        }
        for (std::size_t s = 0; s <= t; ++s) p[t * T + s] /= z;
      }
      std::fill(oh.begin(), oh.end(), real_t{0});
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t s = 0; s <= t; ++s) {
          const real_t w = p[t * T + s];
          for (std::size_t e = 0; e < dh; ++e) oh[t * dh + e] += w * vh[s * dh + e];
        }
      }
      scatter_head(att, dm, n, h, oh);
      if (probs_out) {
        std::copy(p.begin(), p.end(),
                  probs_out->begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(n * dm.heads + h)) * T * T));
      }
      record_op(tag, OpKind::Matmul, 2 * dh * causal_pairs(dm.seq));
      record_op(tag, OpKind::Elementwise, 3 * causal_pairs(dm.seq));
      record_op(tag, OpKind::Matmul, 2 * dh * causal_pairs(dm.seq));
    }
  }
  return att;
}

struct AttnGrads {
  Matrix dq, dk, dv;
};

AttnGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                             const std::vector<real_t>& probs, const Matrix& datt, const AttnDims& dm,
                             std::string_view tag) {
  const auto T = static_cast<std::size_t>(dm.seq);
  const auto dh = static_cast<std::size_t>(dm.head_dim);
  const real_t scale = static_cast<real_t>(1) / std::sqrt(static_cast<real_t>(dm.head_dim));
  AttnGrads g{Matrix(q.rows(), q.cols()), Matrix(k.rows(), k.cols()), Matrix(v.rows(), v.cols())};
  std::vector<real_t> qh, kh, vh, doh, dqh(T * dh), dkh(T * dh), dvh(T * dh), dp(T * T);
  const std::uint64_t pairs = causal_pairs(dm.seq);
  for (int n = 0; n < dm.batch; ++n) {
    for (int h = 0; h < dm.heads; ++h) {
      gather_head(q, dm, n, h, qh);
      gather_head(k, dm, n, h, kh);
      gather_head(v, dm, n, h, vh);
      gather_head(datt, dm, n, h, doh);
      const real_t* p = probs.data() + static_cast<std::size_t>(n * dm.heads + h) * T * T;
      std::fill(dvh.begin(), dvh.end(), real_t{0});
      std::fill(dqh.begin(), dqh.end(), real_t{0});
      std::fill(dkh.begin(), dkh.end(), real_t{0});
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t s = 0; s <= t; ++s) {
          real_t acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += doh[t * dh + e] * vh[s * dh + e];
          dp[t * T + s] = acc;
          const real_t w = p[t * T + s];
          for (std::size_t e = 0; e < dh; ++e) dvh[s * dh + e] += w * doh[t * dh + e];
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        real_t row_dot = 0;
        for (std::size_t s = 0; s <= t; ++s) row_dot += p[t * T + s] * dp[t * T + s];
        for (std::size_t s = 0; s <= t; ++s) {
          const real_t ds = p[t * T + s] * (dp[t * T + s] - row_dot) * scale;
          for (std::size_t e = 0; e < dh; ++e) {
            dqh[t * dh + e] += ds * kh[s * dh + e];
            dkh[s * dh + e] += ds * qh[t * dh + e];
          }
        }
      }
      scatter_head(g.dq, dm, n, h, dqh);
      scatter_head(g.dk, dm, n, h, dkh);
      scatter_head(g.dv, dm, n, h, dvh);
      for (int i = 0; i < 4; ++i) record_op(tag, OpKind::Matmul, 2 * dh * pairs);
      record_op(tag, OpKind::Elementwise, 4 * pairs);
    }
  }
  return g;
}

// silu(g) * u
Matrix swiglu(const Matrix& g, const Matrix& u, std::string_view tag) {
  Matrix s(g.rows(), g.cols());
  auto gv = g.values();
  auto uv = u.values();
  auto sv = s.values();
  for (std::size_t i = 0; i < sv.size(); ++i) {
    const real_t sig = static_cast<real_t>(1) / (1 + std::exp(-gv[i]));
    sv[i] = gv[i] * sig * uv[i];
  }
  record_op(tag, OpKind::Elementwise, 5 * s.size());
  return s;
}

void swiglu_backward(const Matrix& g, const Matrix& u, const Matrix& ds, Matrix& dg, Matrix& du,
                     std::string_view tag) {
  dg = Matrix(g.rows(), g.cols());
  du = Matrix(u.rows(), u.cols());
  auto gv = g.values();
  auto uv = u.values();
  auto dsv = ds.values();
  auto dgv = dg.values();
  auto duv = du.values();
  for (std::size_t i = 0; i < gv.size(); ++i) {
    const real_t sig = static_cast<real_t>(1) / (1 + std::exp(-gv[i]));
    const real_t silu = gv[i] * sig;
    duv[i] = dsv[i] * silu;
    dgv[i] = dsv[i] * uv[i] * sig * (1 + gv[i] * (1 - sig));
  }
  record_op(tag, OpKind::Elementwise, 8 * g.size());
}

bool adapter_training(const LinearSlot& s, const ForwardOptions& opts) {
  return opts.training && s.mode == Trainability::Adapter;
}

Matrix slot_forward(const LinearSlot& s, const Matrix& x, LoraCache* cache, const ForwardOptions& opts,
                    int block, Target t) {
  if (s.lora) {
    LoraForwardOptions lo;
    lo.training = adapter_training(s, opts);
    lo.dropout_seed = derive_seed(opts.dropout_seed, static_cast<std::uint64_t>(block),
                                  static_cast<std::uint64_t>(t));
    return lora_forward(s.weight, *s.lora, x, cache, lo, s.tags.fwd);
  }
  return dense_forward(s.weight, x, s.tags.fwd);
}

void maybe_flip(Matrix& m) {
  if (debug::backward_sign_flip()) {
    for (real_t& v : m.values()) v = -v;
  }
}

// Weight-side gradients go into `grads`; returns the input gradient when
// want_input (otherwise an empty matrix).
Matrix slot_backward(const LinearSlot& s, const std::string& name, const Matrix& x,
                     const LoraCache& cache, const Matrix& dy, bool want_input, GradientSet& grads) {
  switch (s.mode) {
    case Trainability::Dense: {
      if (s.lora) throw ContractViolation(name + ": dense tuning with an attached adapter");
      DenseGrads g = dense_backward(s.weight, x, dy, want_input, true, s.tags);
      maybe_flip(g.grad_w);
      grads.emplace(name, std::move(g.grad_w));
      return std::move(g.grad_x);
    }
    case Trainability::Columns: {
      if (s.lora || !s.columns) throw ContractViolation(name + ": column tuning needs a mask and no adapter");
      Matrix gc = paca_grad(s.weight, *s.columns, x, dy, s.tags.bwd_w);
      maybe_flip(gc);
      grads.emplace(name + ".cols", std::move(gc));
      if (!want_input) return {};
      return matmul_tn(s.weight, dy, s.tags.bwd_x);
    }
    case Trainability::Adapter: {
      if (!s.lora) throw ContractViolation(name + ": adapter tuning without an adapter");
      LoraGrads g = lora_backward(s.weight, *s.lora, x, cache, dy, want_input, s.tags);
      maybe_flip(g.grad_a);
      maybe_flip(g.grad_b);
      grads.emplace(name + ".lora_A", std::move(g.grad_a));
      grads.emplace(name + ".lora_B", std::move(g.grad_b));
      return std::move(g.grad_x);
    }
    case Trainability::Frozen:
      break;
  }
  if (!want_input) return {};
  if (s.lora) {
    // Frozen adapter: propagate through W + (alpha/r) B A.
    return lora_backward(s.weight, *s.lora, x, cache, dy, true, s.tags).grad_x;
  }
  return matmul_tn(s.weight, dy, s.tags.bwd_x);
}

}  // namespace

ForwardResult forward(const TransformerModel& model, const TokenBatch& tokens,
                      const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (tokens.batch < 1 || tokens.seq < 1 ||
      tokens.ids.size() != static_cast<std::size_t>(tokens.batch) * static_cast<std::size_t>(tokens.seq)) {
    throw ContractViolation(fmt::format("token batch {}x{} with {} ids is malformed", tokens.batch,
                                        tokens.seq, tokens.ids.size()));
  }
  if (tokens.seq > cfg.seq_len) {
    throw ContractViolation(
        fmt::format("sequence length {} exceeds model seq_len {}", tokens.seq, cfg.seq_len));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= cfg.vocab) {
      throw ContractViolation(fmt::format("token id {} out of range for vocab {}", id, cfg.vocab));
    }
  }
  const int L = cfg.layers;
  const int first_cached =
      std::clamp(opts.cache_from.value_or(model.lowest_trainable_block().value_or(L)), 0, L);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t cols = tokens.ids.size();
  const AttnDims dm{tokens.batch, tokens.seq, cfg.n_heads, cfg.head_dim()};
  const RopeTable rope = make_rope(tokens.seq, cfg.head_dim(), cfg.rope_base);

  ForwardResult out;
  ActivationCache& cache = out.cache;
  cache.first_cached = first_cached;
  cache.batch = tokens.batch;
  cache.seq = tokens.seq;
  cache.tokens = tokens.ids;
  cache.blocks.resize(static_cast<std::size_t>(L - first_cached));

  Matrix x(d, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    const auto id = static_cast<std::size_t>(tokens.ids[c]);
    for (std::size_t r = 0; r < d; ++r) x(r, c) = model.embed(r, id);
  }
  record_op("embed/fwd", OpKind::Elementwise, x.size());

  for (int i = 0; i < L; ++i) {
    const Block& blk = model.blocks[static_cast<std::size_t>(i)];
    const bool keep = i >= first_cached;
    BlockCache scratch;
    BlockCache& bc = keep ? cache.blocks[static_cast<std::size_t>(i - first_cached)] : scratch;
    const std::string pfx = fmt::format("blk{}/", i);
    auto lora_cache = [&](Target t) -> LoraCache* {
      return keep ? &bc.lora[static_cast<std::size_t>(t)] : nullptr;
    };

    RmsOut n1 = rmsnorm_forward(x, blk.norm1, cfg.norm_eps, pfx + "norm1/fwd");
    Matrix q = slot_forward(blk.slot(Target::Q), n1.y, lora_cache(Target::Q), opts, i, Target::Q);
    Matrix k = slot_forward(blk.slot(Target::K), n1.y, lora_cache(Target::K), opts, i, Target::K);
    Matrix v = slot_forward(blk.slot(Target::V), n1.y, lora_cache(Target::V), opts, i, Target::V);
    apply_rope(q, tokens.seq, cfg.n_heads, cfg.head_dim(), rope, false, pfx + "rope/fwd");
    apply_rope(k, tokens.seq, cfg.n_heads, cfg.head_dim(), rope, false, pfx + "rope/fwd");
    Matrix att = attention_forward(q, k, v, dm, keep ? &bc.probs : nullptr, pfx + "attn/fwd");
    Matrix h = slot_forward(blk.slot(Target::O), att, lora_cache(Target::O), opts, i, Target::O);
    add_inplace(h, x, pfx + "residual/fwd");
    RmsOut n2 = rmsnorm_forward(h, blk.norm2, cfg.norm_eps, pfx + "norm2/fwd");
    Matrix u = slot_forward(blk.slot(Target::Up), n2.y, lora_cache(Target::Up), opts, i, Target::Up);
    Matrix g = slot_forward(blk.slot(Target::Gate), n2.y, lora_cache(Target::Gate), opts, i, Target::Gate);
    Matrix s = swiglu(g, u, pfx + "swiglu/fwd");
    Matrix y = slot_forward(blk.slot(Target::Down), s, lora_cache(Target::Down), opts, i, Target::Down);
    add_inplace(y, h, pfx + "residual/fwd");

    if (keep) {
      bc.x = std::move(x);
      bc.inv_rms1 = std::move(n1.inv);
      bc.a1 = std::move(n1.y);
      bc.q = std::move(q);
      bc.k = std::move(k);
      bc.v = std::move(v);
      bc.att = std::move(att);
      bc.h = std::move(h);
      bc.inv_rms2 = std::move(n2.inv);
      bc.a2 = std::move(n2.y);
      bc.u = std::move(u);
      bc.g = std::move(g);
      bc.s = std::move(s);
    }
    x = std::move(y);
  }

  RmsOut fin = rmsnorm_forward(x, model.final_norm, cfg.norm_eps, "final_norm/fwd");
  out.logits.batch = tokens.batch;
  out.logits.seq = tokens.seq;
  out.logits.vocab = cfg.vocab;
  out.logits.values = matmul(model.head, fin.y, "head/fwd");
  cache.final_in = std::move(x);
  cache.final_inv_rms = std::move(fin.inv);
  cache.final_out = std::move(fin.y);
  return out;
}

GradientSet backward(const TransformerModel& model, const ActivationCache& cache,
                     const Matrix& grad_logits) {
  const ModelConfig& cfg = model.config;
  const int L = cfg.layers;
  const std::size_t cols = static_cast<std::size_t>(cache.batch) * static_cast<std::size_t>(cache.seq);
  if (grad_logits.rows() != static_cast<std::size_t>(cfg.vocab) || grad_logits.cols() != cols) {
    throw ContractViolation(fmt::format("grad_logits {} does not match logits {}x{}",
                                        grad_logits.shape_string(), cfg.vocab, cols));
  }
  GradientSet grads;

  // need_dx_in[i]: something at or below the input of block i is trainable.
  std::vector<bool> need_dx_in(static_cast<std::size_t>(L) + 1, false);
  bool below = model.embed_trainable;
  for (int i = 0; i <= L; ++i) {
    need_dx_in[static_cast<std::size_t>(i)] = below;
    if (i < L && model.blocks[static_cast<std::size_t>(i)].any_trainable()) below = true;
  }
  const bool need_x_final = need_dx_in[static_cast<std::size_t>(L)];
  if (need_x_final) {
    const int lowest = model.lowest_trainable_block().value_or(L);
    if (!cache.has_block(lowest) && lowest < L) {
      throw ContractViolation(
          fmt::format("backward needs block {} but the cache starts at block {}", lowest, cache.first_cached));
    }
  }

  if (model.head_trainable) {
    Matrix gh = matmul_nt(grad_logits, cache.final_out, "head/bwd_w");
    grads.emplace("head", std::move(gh));
  }
  if (!need_x_final && !model.final_norm_trainable) return grads;

  Matrix df = matmul_tn(model.head, grad_logits, "head/bwd_x");
  Matrix dgain;
  Matrix dx = rmsnorm_backward(cache.final_in, model.final_norm, cache.final_inv_rms, df,
                               model.final_norm_trainable ? &dgain : nullptr, "final_norm/bwd_x");
  if (model.final_norm_trainable) grads.emplace("final_norm", std::move(dgain));

  const AttnDims dm{cache.batch, cache.seq, cfg.n_heads, cfg.head_dim()};
  const RopeTable rope = make_rope(cache.seq, cfg.head_dim(), cfg.rope_base);

  for (int i = L - 1; i >= 0; --i) {
    if (!need_dx_in[static_cast<std::size_t>(i) + 1]) break;
    if (!cache.has_block(i)) {
      throw ContractViolation(
          fmt::format("backward needs block {} but the cache starts at block {}", i, cache.first_cached));
    }
    const Block& blk = model.blocks[static_cast<std::size_t>(i)];
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(i - cache.first_cached)];
    const std::string pfx = fmt::format("blk{}/", i);
    auto trainable = [&](Target t) { return blk.slot(t).trainable(); };
    auto lc = [&](Target t) -> const LoraCache& { return bc.lora[static_cast<std::size_t>(t)]; };
    auto name = [&](Target t) { return slot_name(i, t); };

    const bool need_dx = need_dx_in[static_cast<std::size_t>(i)];
    const bool need_da1 = need_dx || blk.norms_trainable;
    const bool need_datt = need_da1 || trainable(Target::Q) || trainable(Target::K) || trainable(Target::V);
    const bool need_dh = need_datt || trainable(Target::O);
    const bool need_da2 = need_dh || blk.norms_trainable;
    const bool need_ds = need_da2 || trainable(Target::Up) || trainable(Target::Gate);

    const Matrix& dy = dx;  // gradient at block output

    // MLP branch
    Matrix ds;
    if (need_ds || trainable(Target::Down)) {
      ds = slot_backward(blk.slot(Target::Down), name(Target::Down), bc.s, lc(Target::Down), dy, need_ds, grads);
    }
    Matrix dh;
    if (need_ds) {
      Matrix dg, du;
      swiglu_backward(bc.g, bc.u, ds, dg, du, pfx + "swiglu/bwd_x");
      Matrix da2_u, da2_g;
      if (need_da2 || trainable(Target::Up)) {
        da2_u = slot_backward(blk.slot(Target::Up), name(Target::Up), bc.a2, lc(Target::Up), du, need_da2, grads);
      }
      if (need_da2 || trainable(Target::Gate)) {
        da2_g = slot_backward(blk.slot(Target::Gate), name(Target::Gate), bc.a2, lc(Target::Gate), dg, need_da2, grads);
      }
      if (need_da2) {
        add_inplace(da2_u, da2_g, pfx + "norm2/bwd_x");
        Matrix dn2;
        Matrix dh_mlp = rmsnorm_backward(bc.h, blk.norm2, bc.inv_rms2, da2_u,
                                         blk.norms_trainable ? &dn2 : nullptr, pfx + "norm2/bwd_x");
        if (blk.norms_trainable) grads.emplace(fmt::format("blk{}.norm2", i), std::move(dn2));
        if (need_dh) {
          add_inplace(dh_mlp, dy, pfx + "residual/bwd_x");
          dh = std::move(dh_mlp);
        }
      }
    }
    if (!need_dh) continue;  // nothing trainable at or below the attention half

    // attention branch
    Matrix datt = slot_backward(blk.slot(Target::O), name(Target::O), bc.att, lc(Target::O), dh, need_datt, grads);
    if (!need_datt) continue;
    AttnGrads ag = attention_backward(bc.q, bc.k, bc.v, bc.probs, datt, dm, pfx + "attn/bwd_x");
    apply_rope(ag.dq, cache.seq, cfg.n_heads, cfg.head_dim(), rope, true, pfx + "rope/bwd_x");
    apply_rope(ag.dk, cache.seq, cfg.n_heads, cfg.head_dim(), rope, true, pfx + "rope/bwd_x");
    Matrix da1;
    const std::array<std::pair<Target, const Matrix*>, 3> qkv = {
        std::pair{Target::Q, &ag.dq}, std::pair{Target::K, &ag.dk}, std::pair{Target::V, &ag.dv}};
    for (const auto& [t, g] : qkv) {
      if (!need_da1 && !trainable(t)) continue;
      Matrix part = slot_backward(blk.slot(t), name(t), bc.a1, lc(t), *g, need_da1, grads);
      if (!need_da1) continue;
      if (da1.empty()) {
        da1 = std::move(part);
      } else {
        add_inplace(da1, part, pfx + "norm1/bwd_x");
      }
    }
    if (!need_da1) continue;
    Matrix dn1;
    Matrix dx_attn = rmsnorm_backward(bc.x, blk.norm1, bc.inv_rms1, da1,
                                      blk.norms_trainable ? &dn1 : nullptr, pfx + "norm1/bwd_x");
    if (blk.norms_trainable) grads.emplace(fmt::format("blk{}.norm1", i), std::move(dn1));
    if (!need_dx) continue;
    add_inplace(dx_attn, dh, pfx + "residual/bwd_x");
    dx = std::move(dx_attn);
  }

  if (model.embed_trainable) {
    Matrix de(model.embed.rows(), model.embed.cols());
    for (std::size_t c = 0; c < cols; ++c) {
      const auto id = static_cast<std::size_t>(cache.tokens[c]);
      for (std::size_t r = 0; r < de.rows(); ++r) de(r, id) += dx(r, c);
    }
    record_op("embed/bwd_w", OpKind::Elementwise, dx.size());
    grads.emplace("embed", std::move(de));
  }
  return grads;
}

std::vector<ParameterRef> trainable_parameters(TransformerModel& model) {
  std::vector<ParameterRef> out;
  if (model.embed_trainable) out.push_back({"embed", &model.embed, nullptr});
  if (model.final_norm_trainable) out.push_back({"final_norm", &model.final_norm, nullptr});
  if (model.head_trainable) out.push_back({"head", &model.head, nullptr});
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    Block& b = model.blocks[i];
    const int bi = static_cast<int>(i);
    if (b.norms_trainable) {
      out.push_back({fmt::format("blk{}.norm1", bi), &b.norm1, nullptr});
      out.push_back({fmt::format("blk{}.norm2", bi), &b.norm2, nullptr});
    }
    for (Target t : kAllTargets) {
      LinearSlot& s = b.slot(t);
      const std::string n = slot_name(bi, t);
      switch (s.mode) {
        case Trainability::Dense: out.push_back({n, &s.weight, nullptr}); break;
        case Trainability::Columns: out.push_back({n + ".cols", &s.weight, &*s.columns}); break;
        case Trainability::Adapter:
          out.push_back({n + ".lora_A", &s.lora->a, nullptr});
          out.push_back({n + ".lora_B", &s.lora->b, nullptr});
          break;
        case Trainability::Frozen: break;
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const ParameterRef& a, const ParameterRef& b) { return a.name < b.name; });
  return out;
}

std::uint64_t trainable_element_count(const TransformerModel& model) {
  std::uint64_t n = 0;
  if (model.embed_trainable) n += model.embed.size();
  if (model.final_norm_trainable) n += model.final_norm.size();
  if (model.head_trainable) n += model.head.size();
  for (const Block& b : model.blocks) {
    if (b.norms_trainable) n += b.norm1.size() + b.norm2.size();
    for (const LinearSlot& s : b.proj) {
      switch (s.mode) {
        case Trainability::Dense: n += s.weight.size(); break;
        case Trainability::Columns: n += s.weight.rows() * s.columns->size(); break;
        case Trainability::Adapter: n += s.lora->a.size() + s.lora->b.size(); break;
        case Trainability::Frozen: break;
      }
    }
  }
  return n;
}

bool is_projection_tag(std::string_view tag) noexcept {
  if (!tag.starts_with("blk")) return false;
  std::size_t pos = 3;
  const std::size_t digits_begin = pos;
  while (pos < tag.size() && tag[pos] >= '0' && tag[pos] <= '9') ++pos;
  if (pos == digits_begin || pos >= tag.size() || tag[pos] != '/') return false;
  const std::size_t slash = tag.find('/', pos + 1);
  if (slash == std::string_view::npos) return false;
  if (!parse_target(tag.substr(pos + 1, slash - pos - 1))) return false;
  const std::string_view phase = tag.substr(slash + 1);
  return phase == "fwd" || phase == "bwd_w" || phase == "bwd_x";
}

ProjectionCounts projection_counts(const OpCounter& counter) {
  ProjectionCounts pc;
  for (const auto& [tag, tally] : counter.by_tag()) {
    if (!is_projection_tag(tag)) continue;
    if (tag.ends_with("/fwd")) {
      pc.fwd += tally.matmul;
    } else {
      pc.bwd += tally.matmul;
    }
  }
  return pc;
}

}  // namespace peftlab
