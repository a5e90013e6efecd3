#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "unimod/errors.hpp"
#include "unimod/linalg.hpp"
#include "unimod/model.hpp"
#include "unimod/tensor.hpp"

namespace unimod::profiler {

struct ARankProfile {
  model::TaskType task = model::TaskType::MMU;
  double rel_tol = 1e-6;
  Index seq_len = 0;
  int n_samples = 0;
  std::vector<double> tau;  // per layer, mean over heads and samples
};

// Mean numerical rank of the per-head query-key Gram matrices
// A_h = (X Wq_h)(X Wk_h)^T, taken on each layer's raw input X from a dense
// forward pass (pre layer-norm, pre softmax, unmasked).
template <class S>
ARankProfile compute_arank(model::ModelParams<S>& params,
                           const std::vector<model::TaskBatch>& samples,
                           model::TaskType task, double rel_tol = 1e-6) {
  if (samples.empty())
    throw ContractError("compute_arank: no samples provided");
  const model::ModelConfig& cfg = params.config;
  ARankProfile profile;
  profile.task = task;
  profile.rel_tol = rel_tol;
  profile.tau.assign(static_cast<std::size_t>(cfg.n_layers), 0.0);

  const Index dh = cfg.d_head();
  NoGradGuard ng;
  for (const auto& batch : samples) {
    if (batch.task != task)
      throw ContractError("compute_arank: sample task does not match");
    if (profile.seq_len == 0) profile.seq_len = batch.seq_len();
    if (batch.seq_len() != profile.seq_len)
      throw ContractError("compute_arank: samples must share one seq length");
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      std::vector<Tensor<S>> layer_inputs;
      model::forward_logits(params, batch, b, &layer_inputs);
      for (int l = 0; l < cfg.n_layers; ++l) {
        const auto x = layer_inputs[static_cast<std::size_t>(l)].mat();
        const auto& attn = params.layers[static_cast<std::size_t>(l)].attn;
        double head_sum = 0.0;
        for (int h = 0; h < cfg.n_heads; ++h) {
          MatX<S> qh = x * attn.wq.mat().middleCols(h * dh, dh);
          MatX<S> kh = x * attn.wk.mat().middleCols(h * dh, dh);
          MatX<S> a_h = qh * kh.transpose();
          head_sum += numerical_rank<S>(a_h, rel_tol);
        }
        profile.tau[static_cast<std::size_t>(l)] +=
            head_sum / static_cast<double>(cfg.n_heads);
      }
      ++profile.n_samples;
    }
  }
  for (double& t : profile.tau) t /= static_cast<double>(profile.n_samples);
  return profile;
}

inline void write_arank_csv(const ARankProfile& p, std::ostream& os) {
  os << "layer,task,tau,n,seq_len,rel_tol\n";
  for (std::size_t l = 0; l < p.tau.size(); ++l)
    os << l << "," << model::task_name(p.task) << "," << p.tau[l] << ","
       << p.n_samples << "," << p.seq_len << "," << p.rel_tol << "\n";
}

struct AttnWeightProfile {
  model::TaskType task = model::TaskType::MMU;
  int n_samples = 0;
  // index 0 = TEXT, 1 = IMAGE
  std::vector<std::array<double, 2>> mean_received;  // per layer
  std::array<Index, 2> modality_counts{0, 0};
};

// Post-softmax attention mass received per token, averaged over queries,
// heads, and samples, then aggregated by the receiving token's modality.
template <class S>
AttnWeightProfile attention_weight_stats(
    model::ModelParams<S>& params, const std::vector<model::TaskBatch>& samples,
    model::TaskType task) {
  if (samples.empty())
    throw ContractError("attention_weight_stats: no samples provided");
  const model::ModelConfig& cfg = params.config;
  AttnWeightProfile profile;
  profile.task = task;

  const Index n = samples.front().seq_len();
  std::vector<std::vector<double>> received(
      static_cast<std::size_t>(cfg.n_layers),
      std::vector<double>(static_cast<std::size_t>(n), 0.0));
  NoGradGuard ng;
  for (const auto& batch : samples) {
    if (batch.task != task)
      throw ContractError("attention_weight_stats: sample task mismatch");
    if (batch.seq_len() != n)
      throw ContractError(
          "attention_weight_stats: samples must share one seq length");
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      std::vector<model::AttnProbs<S>> probs;
      model::forward_logits<S>(params, batch, b, nullptr, &probs);
      for (int l = 0; l < cfg.n_layers; ++l)
        for (const auto& ph : probs[static_cast<std::size_t>(l)].per_head)
          for (Index j = 0; j < n; ++j)
            received[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] +=
                static_cast<double>(ph.col(j).sum());
      ++profile.n_samples;
    }
  }
  const auto& modality = samples.front().modality;
  for (Index j = 0; j < n; ++j) {
    if (modality[static_cast<std::size_t>(j)] == model::Modality::TEXT)
      ++profile.modality_counts[0];
    else if (modality[static_cast<std::size_t>(j)] == model::Modality::IMAGE)
      ++profile.modality_counts[1];
  }
  const double norm = static_cast<double>(profile.n_samples) * cfg.n_heads *
                      static_cast<double>(n);
  profile.mean_received.assign(static_cast<std::size_t>(cfg.n_layers),
                               {0.0, 0.0});
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::array<double, 2> sum{0.0, 0.0};
    for (Index j = 0; j < n; ++j) {
      const auto m = modality[static_cast<std::size_t>(j)];
      if (m == model::Modality::SPECIAL) continue;
      const int mi = m == model::Modality::TEXT ? 0 : 1;
      sum[static_cast<std::size_t>(mi)] +=
          received[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] /
          norm;
    }
    for (int mi = 0; mi < 2; ++mi) {
      const Index cnt = profile.modality_counts[static_cast<std::size_t>(mi)];
      profile.mean_received[static_cast<std::size_t>(l)]
                           [static_cast<std::size_t>(mi)] =
          cnt > 0 ? sum[static_cast<std::size_t>(mi)] /
                        static_cast<double>(cnt)
                  : 0.0;
    }
  }
  return profile;
}

inline void write_attn_csv(const AttnWeightProfile& p, std::ostream& os) {
  os << "layer,task,modality,mean_received\n";
  for (std::size_t l = 0; l < p.mean_received.size(); ++l) {
    os << l << "," << model::task_name(p.task) << ",text,"
       << p.mean_received[l][0] << "\n";
    os << l << "," << model::task_name(p.task) << ",image,"
       << p.mean_received[l][1] << "\n";
  }
}

struct EvalMetrics {
  double loss = 0.0;
  double exact_match = 0.0;
  int n_sequences = 0;
};

// Held-out loss and sequence exact-match with a chosen set of layers
// replaced by the identity map.
template <class S>
EvalMetrics eval_with_skips(model::ModelParams<S>& params,
                            const std::vector<model::TaskBatch>& batches,
                            const std::set<int>& skip_layers) {
  for (int l : skip_layers)
    if (l < 0 || l >= params.config.n_layers)
      throw ContractError("eval_with_skips: layer " + std::to_string(l) +
                          " out of range");
  EvalMetrics m;
  NoGradGuard ng;
  double loss_sum = 0.0;
  int match = 0;
  for (const auto& batch : batches) {
    const MaskMat mask = model::build_attn_mask(batch);
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      Tensor<S> h = model::embed_sequence(params, batch, b);
      for (int l = 0; l < params.config.n_layers; ++l) {
        if (skip_layers.count(l)) continue;
        h = model::dense_layer_forward(
            h, mask, params.layers[static_cast<std::size_t>(l)], params.config);
      }
      Tensor<S> logits = model::head_logits(params, h);
      loss_sum += static_cast<double>(
          model::task_loss(logits, batch, b, params.config).item());
      match += model::sequence_exact_match(logits, batch, b, params.config);
      ++m.n_sequences;
    }
  }
  if (m.n_sequences == 0)
    throw ContractError("eval_with_skips: no sequences to evaluate");
  m.loss = loss_sum / m.n_sequences;
  m.exact_match = static_cast<double>(match) / m.n_sequences;
  return m;
}

struct SkipProbeEntry {
  int layer = -1;
  EvalMetrics baseline;
  EvalMetrics skipped;
};

template <class S>
SkipProbeEntry skip_layer_probe(model::ModelParams<S>& params,
                                const std::vector<model::TaskBatch>& batches,
                                int layer_index) {
  SkipProbeEntry e;
  e.layer = layer_index;
  e.baseline = eval_with_skips(params, batches, {});
  e.skipped = eval_with_skips(params, batches, {layer_index});
  return e;
}

}  // namespace unimod::profiler
