#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "debs/autodiff.hpp"
#include "debs/tensor.hpp"

namespace debs {

struct encoder_config {
  std::size_t input_len = 1000;
  std::size_t patch_size = 20;
  std::size_t depth = 6;
  std::size_t heads = 4;
  std::size_t model_dim = 128;
  std::size_t mlp_hidden = 512;

  std::size_t tokens() const { return input_len / patch_size; }
  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (input_len == 0 || patch_size == 0 || depth == 0 || heads == 0 || model_dim == 0 ||
        mlp_hidden == 0)
      throw config_error("encoder config: all dimensions must be positive");
    if (input_len % patch_size != 0)
      throw config_error("encoder config: input_len must be divisible by patch_size");
    if (model_dim % heads != 0)
      throw config_error("encoder config: model_dim must be divisible by heads");
  }
};

// Non-overlapping patch rows: row k holds samples [k*patch, (k+1)*patch).
// For contiguous row-major data this is a pure reshape.
template <class T>
tensor<T> patchify(const tensor<T>& signal, std::size_t patch_size) {
  if (signal.ndim() != 1 || patch_size == 0 || signal.numel() % patch_size != 0)
    throw contract_error("patchify: signal length not divisible by patch size");
  return tensor<T>({signal.numel() / patch_size, patch_size}, signal.data);
}

// Fixed sinusoidal positions, [tokens, dim]. Not trainable.
template <class T>
tensor<T> sinusoidal_positions(std::size_t tokens, std::size_t dim) {
  tensor<T> p({tokens, dim});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t j = 0; j < dim; ++j) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                                 static_cast<double>(dim));
      const double angle = static_cast<double>(t) * rate;
      p[t * dim + j] = static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  return p;
}

template <class T>
struct block_params {
  tensor<T> ln1_g, ln1_b;
  tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  tensor<T> ln2_g, ln2_b;
  tensor<T> w_in, b_in, w_out, b_out;

  template <class Fn>
  void for_each(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/ln1_g", ln1_g);
    fn(prefix + "/ln1_b", ln1_b);
    fn(prefix + "/wq", wq);
    fn(prefix + "/bq", bq);
    fn(prefix + "/wk", wk);
    fn(prefix + "/bk", bk);
    fn(prefix + "/wv", wv);
    fn(prefix + "/bv", bv);
    fn(prefix + "/wo", wo);
    fn(prefix + "/bo", bo);
    fn(prefix + "/ln2_g", ln2_g);
    fn(prefix + "/ln2_b", ln2_b);
    fn(prefix + "/w_in", w_in);
    fn(prefix + "/b_in", b_in);
    fn(prefix + "/w_out", w_out);
    fn(prefix + "/b_out", b_out);
  }
};

// Pre-norm transformer over patch tokens: embed -> +positions ->
// depth x (LN, attention, residual; LN, GELU MLP, residual) -> LN -> mean pool.
template <class T>
struct vit_params {
  encoder_config cfg;
  tensor<T> patch_w, patch_b;
  std::vector<block_params<T>> blocks;
  tensor<T> lnf_g, lnf_b;
  tensor<T> positions;  // constant, derived from cfg

  template <class Fn>
  void for_each(Fn&& fn) {
    fn("enc/patch_w", patch_w);
    fn("enc/patch_b", patch_b);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each("enc/blk" + std::to_string(i), fn);
    fn("enc/lnf_g", lnf_g);
    fn("enc/lnf_b", lnf_b);
  }

  static vit_params init(const encoder_config& cfg, rng& r) {
    cfg.validate();
    const std::size_t d = cfg.model_dim;
    const T sigma = static_cast<T>(0.02);
    vit_params p;
    p.cfg = cfg;
    p.patch_w = random_truncated_normal<T>({cfg.patch_size, d}, r, sigma);
    p.patch_b = tensor<T>({d});
    p.blocks.resize(cfg.depth);
    for (auto& b : p.blocks) {
      b.ln1_g = tensor<T>::ones({d});
      b.ln1_b = tensor<T>({d});
      b.wq = random_truncated_normal<T>({d, d}, r, sigma);
      b.bq = tensor<T>({d});
      b.wk = random_truncated_normal<T>({d, d}, r, sigma);
      b.bk = tensor<T>({d});
      b.wv = random_truncated_normal<T>({d, d}, r, sigma);
      b.bv = tensor<T>({d});
      b.wo = random_truncated_normal<T>({d, d}, r, sigma);
      b.bo = tensor<T>({d});
      b.ln2_g = tensor<T>::ones({d});
      b.ln2_b = tensor<T>({d});
      b.w_in = random_truncated_normal<T>({d, cfg.mlp_hidden}, r, sigma);
      b.b_in = tensor<T>({cfg.mlp_hidden});
      b.w_out = random_truncated_normal<T>({cfg.mlp_hidden, d}, r, sigma);
      b.b_out = tensor<T>({d});
    }
    p.lnf_g = tensor<T>::ones({d});
    p.lnf_b = tensor<T>({d});
    p.positions = sinusoidal_positions<T>(cfg.tokens(), d);
    return p;
  }
};

// Exact count of trainable scalars for a config.
inline std::size_t encoder_param_count(const encoder_config& cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim, h = cfg.mlp_hidden;
  const std::size_t embed = cfg.patch_size * d + d;
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t mlp = d * h + h + h * d + d;
  return embed + cfg.depth * (ln + attn + ln + mlp) + ln;
}

template <class T>
struct vit_block_leaves {
  using id = typename tape<T>::id;
  id ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_in, b_in, w_out, b_out;
};

template <class T>
struct vit_leaves {
  using id = typename tape<T>::id;
  id patch_w, patch_b;
  std::vector<vit_block_leaves<T>> blocks;
  id lnf_g, lnf_b;
  id positions;
};

template <class T>
vit_leaves<T> register_encoder(tape<T>& tp, const vit_params<T>& p, bool trainable) {
  vit_leaves<T> l;
  l.patch_w = tp.leaf(p.patch_w, trainable);
  l.patch_b = tp.leaf(p.patch_b, trainable);
  l.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& lb = l.blocks[i];
    lb.ln1_g = tp.leaf(b.ln1_g, trainable);
    lb.ln1_b = tp.leaf(b.ln1_b, trainable);
    lb.wq = tp.leaf(b.wq, trainable);
    lb.bq = tp.leaf(b.bq, trainable);
    lb.wk = tp.leaf(b.wk, trainable);
    lb.bk = tp.leaf(b.bk, trainable);
    lb.wv = tp.leaf(b.wv, trainable);
    lb.bv = tp.leaf(b.bv, trainable);
    lb.wo = tp.leaf(b.wo, trainable);
    lb.bo = tp.leaf(b.bo, trainable);
    lb.ln2_g = tp.leaf(b.ln2_g, trainable);
    lb.ln2_b = tp.leaf(b.ln2_b, trainable);
    lb.w_in = tp.leaf(b.w_in, trainable);
    lb.b_in = tp.leaf(b.b_in, trainable);
    lb.w_out = tp.leaf(b.w_out, trainable);
    lb.b_out = tp.leaf(b.b_out, trainable);
  }
  l.lnf_g = tp.leaf(p.lnf_g, trainable);
  l.lnf_b = tp.leaf(p.lnf_b, trainable);
  l.positions = tp.constant(p.positions);
  return l;
}

// Leaf ids in the same order as vit_params::for_each visits tensors.
template <class T>
std::vector<typename tape<T>::id> encoder_leaf_ids(const vit_leaves<T>& l) {
  std::vector<typename tape<T>::id> ids{l.patch_w, l.patch_b};
  for (const auto& b : l.blocks)
    for (auto id : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                    b.ln2_b, b.w_in, b.b_in, b.w_out, b.b_out})
      ids.push_back(id);
  ids.push_back(l.lnf_g);
  ids.push_back(l.lnf_b);
  return ids;
}

// Encode a batch of raw signals [B, input_len] to representations [B, model_dim].
template <class T>
typename tape<T>::id encode_batch(tape<T>& tp, const vit_leaves<T>& l, const encoder_config& cfg,
                                  typename tape<T>::id signals) {
  using id = typename tape<T>::id;
  const tensor<T>& vx = tp.value(signals);
  require(vx.ndim() == 2 && vx.shape[1] == cfg.input_len,
          "encode: signal batch must be [batch, input_len]");
  const std::size_t bsz = vx.shape[0];
  const std::size_t tok = cfg.tokens(), d = cfg.model_dim;
  const T ln_eps = static_cast<T>(1e-5);
  const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));

  id x = tp.reshape(signals, {bsz, tok, cfg.patch_size});
  x = tp.linear(x, l.patch_w, l.patch_b);        // [B, tok, d]
  x = tp.add_broadcast(x, l.positions);
  for (const auto& blk : l.blocks) {
    id h = tp.layer_norm_last(x, blk.ln1_g, blk.ln1_b, ln_eps);
    id q = tp.split_heads(tp.linear(h, blk.wq, blk.bq), cfg.heads);
    id k = tp.split_heads(tp.linear(h, blk.wk, blk.bk), cfg.heads);
    id v = tp.split_heads(tp.linear(h, blk.wv, blk.bv), cfg.heads);
    id scores = tp.bmm(tp.affine(q, att_scale, T{0}), tp.transpose_last2(k));
    id ctx = tp.bmm(tp.softmax_last(scores), v);
    id att = tp.linear(tp.merge_heads(ctx, cfg.heads), blk.wo, blk.bo);
    x = tp.add(x, att);
    id h2 = tp.layer_norm_last(x, blk.ln2_g, blk.ln2_b, ln_eps);
    id m = tp.linear(tp.gelu(tp.linear(h2, blk.w_in, blk.b_in)), blk.w_out, blk.b_out);
    x = tp.add(x, m);
  }
  x = tp.layer_norm_last(x, l.lnf_g, l.lnf_b, ln_eps);
  return tp.mean_axis1(x);  // [B, d]
}

// Eval-mode convenience: deterministic pure function of (params, signals).
template <class T>
tensor<T> encode_eval(const vit_params<T>& p, const tensor<T>& signals) {
  tape<T> tp;
  auto leaves = register_encoder(tp, p, /*trainable=*/false);
  auto out = encode_batch(tp, leaves, p.cfg, tp.constant(signals));
  tensor<T> rep = tp.value(out);
  if (!rep.all_finite()) throw numeric_error("encode: non-finite values in representation");
  return rep;
}

// Single-signal representation.
template <class T>
tensor<T> encode_one(const vit_params<T>& p, const tensor<T>& signal) {
  require(signal.ndim() == 1, "encode_one: expected a 1-d signal");
  tensor<T> batch({1, signal.numel()}, signal.data);
  tensor<T> rep = encode_eval(p, batch);
  return tensor<T>({p.cfg.model_dim}, std::move(rep.data));
}

}  // namespace debs
