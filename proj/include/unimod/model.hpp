#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unimod/errors.hpp"
#include "unimod/random.hpp"
#include "unimod/tensor.hpp"

namespace unimod::model {

enum class Modality { TEXT, IMAGE, SPECIAL };
enum class TaskType { T2I, MMU };
enum class MaskMode { CAUSAL, CAUSAL_WITH_FULL_IMAGE_BLOCK };
enum class Activation { GELU, IDENTITY };
enum class Objective { NTP, MTP, AR };

inline const char* task_name(TaskType t) {
  return t == TaskType::T2I ? "t2i" : "mmu";
}

struct ModelConfig {
  int n_layers = 8;
  Index d_model = 128;
  int n_heads = 4;
  Index d_ffn = 512;
  Index text_vocab = 64;
  Index image_vocab = 64;
  Index max_seq = 96;
  Activation activation = Activation::GELU;
  double ln_eps = 1e-5;

  Index d_head() const { return d_model / n_heads; }
  Index vocab() const { return text_vocab + image_vocab; }
  // Extra embedding row used as the masked-image input token.
  Index mask_token_id() const { return vocab(); }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 ||
        text_vocab < 1 || image_vocab < 1 || max_seq < 1)
      throw ContractError("ModelConfig: all extents must be >= 1");
    if (d_model % n_heads != 0)
      throw ContractError("ModelConfig: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " +
                          std::to_string(n_heads));
  }
};

// One batch of same-layout sequences for a single task. Token ids are global:
// text ids in [0, text_vocab), image ids offset by text_vocab, plus the mask
// token for masked image positions. `modality` describes the shared layout.
struct TaskBatch {
  TaskType task = TaskType::MMU;
  MaskMode mask_mode = MaskMode::CAUSAL;
  Objective objective = Objective::NTP;
  std::vector<std::vector<int>> tokens;              // [batch][seq]
  std::vector<Modality> modality;                    // [seq]
  std::vector<std::vector<std::uint8_t>> loss_mask;  // [batch][seq]
  std::vector<std::vector<int>> mtp_targets;         // [batch][seq], global ids
  Index image_block_start = -1;
  Index image_block_len = 0;

  std::size_t batch_size() const { return tokens.size(); }
  Index seq_len() const { return static_cast<Index>(modality.size()); }
};

inline MaskMat build_attn_mask(const TaskBatch& batch) {
  const Index n = batch.seq_len();
  MaskMat mask(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) mask(i, j) = j <= i;
  if (batch.mask_mode == MaskMode::CAUSAL_WITH_FULL_IMAGE_BLOCK) {
    const Index s = batch.image_block_start;
    const Index e = s + batch.image_block_len;
    if (s < 0 || e > n)
      throw ContractError("attn mask: image block [" + std::to_string(s) +
                          ", " + std::to_string(e) + ") outside sequence");
    for (Index i = s; i < e; ++i)
      for (Index j = s; j < e; ++j) mask(i, j) = true;
  }
  return mask;
}

template <class S>
struct AttentionParams {
  Tensor<S> wq, wk, wv, wo;  // each [d_model x d_model]
};

template <class S>
struct FfnParams {
  Tensor<S> w1;  // [d_model x d_ffn]
  Tensor<S> w2;  // [d_ffn x d_model]
};

template <class S>
struct LayerParams {
  AttentionParams<S> attn;
  FfnParams<S> ffn;
};

template <class S>
struct ModelParams {
  ModelConfig config;
  Tensor<S> tok_embed;  // [(vocab+1) x d], last row embeds the mask token
  Tensor<S> pos_embed;  // [max_seq x d]
  std::vector<LayerParams<S>> layers;
  Tensor<S> w_out;  // [d x vocab]

  static ModelParams init(const ModelConfig& cfg, RandomStream& rs) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.tok_embed = Tensor<S>::randn({cfg.vocab() + 1, cfg.d_model}, rs, 0.02);
    p.pos_embed = Tensor<S>::randn({cfg.max_seq, cfg.d_model}, rs, 0.02);
    const double wscale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double fscale = 1.0 / std::sqrt(static_cast<double>(cfg.d_ffn));
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
      l.attn.wq = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rs, wscale);
      l.attn.wk = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rs, wscale);
      l.attn.wv = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rs, wscale);
      l.attn.wo = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rs, wscale);
      l.ffn.w1 = Tensor<S>::randn({cfg.d_model, cfg.d_ffn}, rs, wscale);
      l.ffn.w2 = Tensor<S>::randn({cfg.d_ffn, cfg.d_model}, rs, fscale);
    }
    p.w_out = Tensor<S>::randn({cfg.d_model, cfg.vocab()}, rs, wscale);
    for (auto& [name, t] : p.named_params()) {
      (void)name;
      t->set_requires_grad();
    }
    return p;
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.emplace_back("tok_embed", &tok_embed);
    out.emplace_back("pos_embed", &pos_embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layer" + std::to_string(i) + ".";
      out.emplace_back(pre + "attn.wq", &layers[i].attn.wq);
      out.emplace_back(pre + "attn.wk", &layers[i].attn.wk);
      out.emplace_back(pre + "attn.wv", &layers[i].attn.wv);
      out.emplace_back(pre + "attn.wo", &layers[i].attn.wo);
      out.emplace_back(pre + "ffn.w1", &layers[i].ffn.w1);
      out.emplace_back(pre + "ffn.w2", &layers[i].ffn.w2);
    }
    out.emplace_back("w_out", &w_out);
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : named_params()) {
      (void)name;
      t->zero_grad();
    }
  }
};

// Per-head post-softmax attention probabilities of one layer (value-only,
// retained for profiling).
template <class S>
struct AttnProbs {
  std::vector<MatX<S>> per_head;  // each [seq x seq]
};

inline void validate_token(const ModelConfig& cfg, int id, Modality m) {
  const bool ok = [&] {
    switch (m) {
      case Modality::TEXT:
        return id >= 0 && id < cfg.text_vocab;
      case Modality::IMAGE:
        return (id >= cfg.text_vocab && id < cfg.vocab()) ||
               id == cfg.mask_token_id();
      case Modality::SPECIAL:
        return id >= 0 && id <= cfg.mask_token_id();
    }
    return false;
  }();
  if (!ok)
    throw VocabularyError("token id " + std::to_string(id) +
                          " invalid for its modality");
}

// Token + positional embedding for one sequence of a batch: [seq x d].
template <class S>
Tensor<S> embed_sequence(ModelParams<S>& params, const TaskBatch& batch,
                         std::size_t b) {
  const ModelConfig& cfg = params.config;
  const auto& toks = batch.tokens.at(b);
  const Index n = batch.seq_len();
  if (static_cast<Index>(toks.size()) != n)
    throw ShapeError("embed: token row length " + std::to_string(toks.size()) +
                     " vs modality layout " + std::to_string(n));
  if (n > cfg.max_seq)
    throw ShapeError("embed: sequence length " + std::to_string(n) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  std::vector<Index> tok_ids(static_cast<std::size_t>(n));
  std::vector<Index> pos_ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int id = toks[static_cast<std::size_t>(i)];
    validate_token(cfg, id, batch.modality[static_cast<std::size_t>(i)]);
    tok_ids[static_cast<std::size_t>(i)] = id;
    pos_ids[static_cast<std::size_t>(i)] = i;
  }
  return add(gather_rows(params.tok_embed, tok_ids),
             gather_rows(params.pos_embed, pos_ids));
}

template <class S>
Tensor<S> activation_forward(const Tensor<S>& x, Activation act) {
  return act == Activation::GELU ? gelu(x) : x;
}

// Pre-norm residual attention: out = hidden + OutProj(MHA(LN(hidden))).
template <class S>
Tensor<S> attention_forward(const Tensor<S>& hidden, const MaskMat& mask,
                            const AttentionParams<S>& p, int n_heads,
                            double ln_eps, AttnProbs<S>* keep_probs = nullptr) {
  const Index n = hidden.rows();
  const Index d = hidden.cols();
  if (d != p.wq.rows() || p.wq.cols() != d)
    throw ShapeError("attention: hidden width " + std::to_string(d) +
                     " vs weights " + shape_str(p.wq.shape()));
  if (mask.rows() != n || mask.cols() != n)
    throw ShapeError("attention: mask " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " vs seq " +
                     std::to_string(n));
  const Index dh = d / n_heads;
  Tensor<S> x = layer_norm(hidden, static_cast<S>(ln_eps));
  Tensor<S> q = matmul(x, p.wq);
  Tensor<S> k = matmul(x, p.wk);
  Tensor<S> v = matmul(x, p.wv);
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (keep_probs) keep_probs->per_head.clear();
  std::vector<Tensor<S>> ctx;
  ctx.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor<S> qh = slice_cols(q, h * dh, dh);
    Tensor<S> kh = slice_cols(k, h * dh, dh);
    Tensor<S> vh = slice_cols(v, h * dh, dh);
    Tensor<S> scores = mul_const(matmul(qh, kh, false, true), scale);
    Tensor<S> probs = row_softmax(scores, &mask);
    if (keep_probs) keep_probs->per_head.push_back(probs.mat());
    ctx.push_back(matmul(probs, vh));
  }
  return add(hidden, matmul(concat_cols(ctx), p.wo));
}

// Pre-norm residual FFN: out = hidden + W2 act(W1 LN(hidden)).
template <class S>
Tensor<S> ffn_forward(const Tensor<S>& hidden, const FfnParams<S>& p,
                      Activation act, double ln_eps) {
  Tensor<S> x = layer_norm(hidden, static_cast<S>(ln_eps));
  return add(hidden, matmul(activation_forward(matmul(x, p.w1), act), p.w2));
}

// Full dense block: attention then FFN.
template <class S>
Tensor<S> dense_layer_forward(const Tensor<S>& hidden, const MaskMat& mask,
                              const LayerParams<S>& layer,
                              const ModelConfig& cfg,
                              AttnProbs<S>* keep_probs = nullptr) {
  Tensor<S> a = attention_forward(hidden, mask, layer.attn, cfg.n_heads,
                                  cfg.ln_eps, keep_probs);
  return ffn_forward(a, layer.ffn, cfg.activation, cfg.ln_eps);
}

// Vocabulary logits from final hidden states: LN then linear head.
template <class S>
Tensor<S> head_logits(ModelParams<S>& params, const Tensor<S>& hidden) {
  return matmul(layer_norm(hidden, static_cast<S>(params.config.ln_eps)),
                params.w_out);
}

// Dense forward for one sequence: [seq x vocab] logits. Optional taps receive
// each layer's raw input hidden state (pre layer-norm) and attention probs.
template <class S>
Tensor<S> forward_logits(
    ModelParams<S>& params, const TaskBatch& batch, std::size_t b,
    std::vector<Tensor<S>>* layer_inputs = nullptr,
    std::vector<AttnProbs<S>>* attn_probs = nullptr) {
  const MaskMat mask = build_attn_mask(batch);
  Tensor<S> h = embed_sequence(params, batch, b);
  if (attn_probs)
    attn_probs->assign(static_cast<std::size_t>(params.config.n_layers), {});
  for (int l = 0; l < params.config.n_layers; ++l) {
    if (layer_inputs) layer_inputs->push_back(h.detach());
    AttnProbs<S>* tap =
        attn_probs ? &(*attn_probs)[static_cast<std::size_t>(l)] : nullptr;
    h = dense_layer_forward(h, mask, params.layers[static_cast<std::size_t>(l)],
                            params.config, tap);
  }
  return head_logits(params, h);
}

namespace detail {

// Shifted next-token objective shared by the text-only and any-modality
// variants: supervised position p is predicted from logits row p-1.
template <class S>
Tensor<S> shifted_nll(const Tensor<S>& logits, const TaskBatch& batch,
                      std::size_t b, bool text_only) {
  const Index n = batch.seq_len();
  if (logits.rows() != n)
    throw ShapeError("loss: logits rows " + std::to_string(logits.rows()) +
                     " vs sequence " + std::to_string(n));
  std::vector<Index> targets(static_cast<std::size_t>(n), 0);
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(n), 0);
  const auto& lm = batch.loss_mask.at(b);
  for (Index p = 0; p < n; ++p) {
    if (!lm[static_cast<std::size_t>(p)]) continue;
    if (p == 0)
      throw ContractError(
          "loss: position 0 has no preceding prediction context");
    if (text_only &&
        batch.modality[static_cast<std::size_t>(p)] != Modality::TEXT)
      throw ContractError("text loss: supervised position " +
                          std::to_string(p) + " is not a text token");
    targets[static_cast<std::size_t>(p - 1)] =
        batch.tokens.at(b)[static_cast<std::size_t>(p)];
    rows[static_cast<std::size_t>(p - 1)] = 1;
  }
  return masked_nll(logits, targets, rows);
}

}  // namespace detail

// Mean NLL of supervised text tokens, predicted left to right.
template <class S>
Tensor<S> ntp_loss(const Tensor<S>& logits, const TaskBatch& batch,
                   std::size_t b) {
  return detail::shifted_nll(logits, batch, b, /*text_only=*/true);
}

// Mean NLL over the combined sequence, any modality.
template <class S>
Tensor<S> ar_loss(const Tensor<S>& logits, const TaskBatch& batch,
                  std::size_t b) {
  return detail::shifted_nll(logits, batch, b, /*text_only=*/false);
}

// Mean NLL of original image tokens at masked positions, scored in place
// (no shift) over the image slice of the head.
template <class S>
Tensor<S> mtp_loss(const Tensor<S>& logits, const TaskBatch& batch,
                   std::size_t b, const ModelConfig& cfg) {
  const Index n = batch.seq_len();
  if (logits.rows() != n)
    throw ShapeError("mtp loss: logits rows " + std::to_string(logits.rows()) +
                     " vs sequence " + std::to_string(n));
  if (logits.cols() != cfg.vocab())
    throw ShapeError("mtp loss: logits width " + std::to_string(logits.cols()) +
                     " vs vocab " + std::to_string(cfg.vocab()));
  std::vector<Index> targets(static_cast<std::size_t>(n), 0);
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(n), 0);
  const auto& lm = batch.loss_mask.at(b);
  for (Index p = 0; p < n; ++p) {
    if (!lm[static_cast<std::size_t>(p)]) continue;
    if (batch.modality[static_cast<std::size_t>(p)] != Modality::IMAGE)
      throw ContractError("mtp loss: supervised position " +
                          std::to_string(p) + " is not an image token");
    if (batch.tokens.at(b)[static_cast<std::size_t>(p)] != cfg.mask_token_id())
      throw ContractError("mtp loss: supervised position " +
                          std::to_string(p) + " is not masked in the input");
    const int target = batch.mtp_targets.at(b).at(static_cast<std::size_t>(p));
    if (target < cfg.text_vocab || target >= cfg.vocab())
      throw VocabularyError("mtp loss: target " + std::to_string(target) +
                            " outside the image id range");
    targets[static_cast<std::size_t>(p)] = target - cfg.text_vocab;
    rows[static_cast<std::size_t>(p)] = 1;
  }
  return masked_nll(slice_cols(logits, cfg.text_vocab, cfg.image_vocab),
                    targets, rows);
}

// Dispatch on the batch's training objective.
template <class S>
Tensor<S> task_loss(const Tensor<S>& logits, const TaskBatch& batch,
                    std::size_t b, const ModelConfig& cfg) {
  switch (batch.objective) {
    case Objective::NTP:
      return ntp_loss(logits, batch, b);
    case Objective::AR:
      return ar_loss(logits, batch, b);
    case Objective::MTP:
      return mtp_loss(logits, batch, b, cfg);
  }
  throw ContractError("task_loss: unknown objective");
}

// True when every supervised position's argmax prediction is the target.
template <class S>
bool sequence_exact_match(const Tensor<S>& logits, const TaskBatch& batch,
                          std::size_t b, const ModelConfig& cfg) {
  const Index n = batch.seq_len();
  const auto& lm = batch.loss_mask.at(b);
  const auto lmat = logits.mat();
  for (Index p = 0; p < n; ++p) {
    if (!lm[static_cast<std::size_t>(p)]) continue;
    if (batch.objective == Objective::MTP) {
      Index best = 0;
      lmat.row(p).segment(cfg.text_vocab, cfg.image_vocab).maxCoeff(&best);
      if (best + cfg.text_vocab !=
          batch.mtp_targets.at(b)[static_cast<std::size_t>(p)])
        return false;
    } else {
      if (p == 0)
        throw ContractError(
            "exact match: position 0 has no preceding prediction context");
      Index best = 0;
      lmat.row(p - 1).maxCoeff(&best);
      if (best != batch.tokens.at(b)[static_cast<std::size_t>(p)]) return false;
    }
  }
  return true;
}

}  // namespace unimod::model
