#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "unimod/errors.hpp"
#include "unimod/model.hpp"
#include "unimod/planner.hpp"
#include "unimod/random.hpp"
#include "unimod/tensor.hpp"

namespace unimod::routing {

// Token budget for capacity c over L tokens: ceil(c*L), guarded against
// floating-point overshoot (0.8*1155 evaluates just above 924) and floored
// at one token so short sequences never drop a whole layer.
inline Index capacity_count(double capacity, Index l) {
  if (l <= 0) return 0;
  const double raw = std::ceil(capacity * static_cast<double>(l) - 1e-9);
  return std::max<Index>(1, static_cast<Index>(raw));
}

template <class S>
struct RouterParams {
  Tensor<S> w;  // [d_model x 1]
  Tensor<S> b;  // [1]

  static RouterParams init(Index d_model, RandomStream& rs) {
    RouterParams p;
    p.w = Tensor<S>::randn({d_model, 1}, rs,
                           1.0 / std::sqrt(static_cast<double>(d_model)));
    p.b = Tensor<S>::zeros({1});
    p.w.set_requires_grad();
    p.b.set_requires_grad();
    return p;
  }

  // sigmoid(x w + b) per row: [n x 1], each entry in (0,1).
  Tensor<S> scores(const Tensor<S>& hidden) const {
    return sigmoid(add_rowvec(matmul(hidden, w), b));
  }
};

enum class SelectionMode { TOPK, THRESHOLD };

struct RouterDecision {
  std::vector<Index> task_positions;  // scored positions, ascending
  std::vector<double> scores;         // aligned with task_positions
  std::vector<Index> selected;        // subset of task_positions, ascending
  double capacity_used = 0.0;         // |selected| / seq_len
  SelectionMode mode = SelectionMode::TOPK;
};

// Exact-budget selection: the ceil(capacity * L_t) highest-scoring task
// positions, ties to the lower index.
template <class S>
RouterDecision route_topk(const Tensor<S>& hidden,
                          const std::vector<Index>& task_positions,
                          double capacity, const RouterParams<S>& router) {
  if (!(capacity > 0.0 && capacity <= 1.0))
    throw ContractError("route_topk: capacity " + std::to_string(capacity) +
                        " outside (0,1]");
  if (task_positions.empty())
    throw ContractError("route_topk: no task positions");
  RouterDecision d;
  d.mode = SelectionMode::TOPK;
  d.task_positions = task_positions;
  {
    NoGradGuard ng;
    Tensor<S> s = router.scores(gather_rows(hidden, task_positions));
    d.scores.resize(task_positions.size());
    for (std::size_t i = 0; i < task_positions.size(); ++i)
      d.scores[i] = static_cast<double>(s.raw()[static_cast<Index>(i)]);
  }
  const Index lt = static_cast<Index>(task_positions.size());
  const Index k = capacity_count(capacity, lt);
  std::vector<std::size_t> order(task_positions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return d.scores[a] > d.scores[b];
  });
  d.selected.reserve(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i)
    d.selected.push_back(task_positions[order[static_cast<std::size_t>(i)]]);
  std::sort(d.selected.begin(), d.selected.end());
  d.capacity_used =
      static_cast<double>(d.selected.size()) / static_cast<double>(hidden.rows());
  return d;
}

// Inference-style selection: every task position whose score clears delta.
template <class S>
RouterDecision route_threshold(const Tensor<S>& hidden,
                               const std::vector<Index>& task_positions,
                               double delta, const RouterParams<S>& router) {
  if (task_positions.empty())
    throw ContractError("route_threshold: no task positions");
  RouterDecision d;
  d.mode = SelectionMode::THRESHOLD;
  d.task_positions = task_positions;
  {
    NoGradGuard ng;
    Tensor<S> s = router.scores(gather_rows(hidden, task_positions));
    d.scores.resize(task_positions.size());
    for (std::size_t i = 0; i < task_positions.size(); ++i)
      d.scores[i] = static_cast<double>(s.raw()[static_cast<Index>(i)]);
  }
  for (std::size_t i = 0; i < task_positions.size(); ++i)
    if (d.scores[i] >= delta) d.selected.push_back(task_positions[i]);
  d.capacity_used =
      static_cast<double>(d.selected.size()) / static_cast<double>(hidden.rows());
  return d;
}

struct ThresholdCalibration {
  struct Entry {
    int layer = -1;
    model::TaskType task = model::TaskType::MMU;
    double delta = 0.0;
    double quantile = 0.0;
    std::int64_t n_scores = 0;
  };
  std::vector<Entry> entries;

  double delta_for(int layer, model::TaskType task) const {
    for (const auto& e : entries)
      if (e.layer == layer && e.task == task) return e.delta;
    throw ContractError("calibration: no threshold for layer " +
                        std::to_string(layer) + " task " +
                        model::task_name(task));
  }
};

// q-quantile with linear interpolation between order statistics.
inline double score_quantile(std::vector<double> vals, double q) {
  if (vals.empty()) throw ContractError("score_quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0))
    throw ContractError("score_quantile: q outside [0,1]");
  std::sort(vals.begin(), vals.end());
  const double pos = q * static_cast<double>(vals.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= vals.size()) return vals.back();
  const double frac = pos - static_cast<double>(lo);
  return vals[lo] * (1.0 - frac) + vals[lo + 1] * frac;
}

enum class RouterArrangement { PER_TASK, SHARED };

template <class S>
struct RouterSet {
  // Slots per layer: [0] T2I, [1] MMU, [2] shared. All allocated up front so
  // checkpoints and stream positions do not depend on the plan.
  std::vector<std::array<RouterParams<S>, 3>> layers;

  static RouterSet init(const model::ModelConfig& cfg, RandomStream& rs) {
    RouterSet set;
    set.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& layer : set.layers)
      for (auto& slot : layer)
        slot = RouterParams<S>::init(cfg.d_model, rs);
    return set;
  }

  RouterParams<S>& router_for(int layer, model::TaskType task,
                              RouterArrangement arrangement) {
    auto& slots = layers.at(static_cast<std::size_t>(layer));
    if (arrangement == RouterArrangement::SHARED) return slots[2];
    return slots[task == model::TaskType::T2I ? 0 : 1];
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    static const char* kSlot[3] = {"t2i", "mmu", "shared"};
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (int s = 0; s < 3; ++s) {
        const std::string pre =
            "router" + std::to_string(l) + "." + kSlot[s] + ".";
        out.emplace_back(pre + "w", &layers[l][static_cast<std::size_t>(s)].w);
        out.emplace_back(pre + "b", &layers[l][static_cast<std::size_t>(s)].b);
      }
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : named_params()) {
      (void)name;
      t->zero_grad();
    }
  }
};

struct RouteOptions {
  SelectionMode selection = SelectionMode::TOPK;
  RouterArrangement arrangement = RouterArrangement::PER_TASK;
  // Test mode: residual deltas of selected tokens are applied unscaled
  // (router weight treated as exactly 1).
  bool bypass_router = false;
  const ThresholdCalibration* calibration = nullptr;
};

namespace detail {

inline MaskMat sub_mask(const MaskMat& mask, const std::vector<Index>& ids) {
  const Index k = static_cast<Index>(ids.size());
  MaskMat out(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j)
      out(i, j) = mask(ids[static_cast<std::size_t>(i)],
                       ids[static_cast<std::size_t>(j)]);
  return out;
}

}  // namespace detail

// One layer under a plan entry. Selected tokens receive x + D(x) * R(x)
// where D is the layer body evaluated over the retained subsequence only
// (skipped tokens are invisible as queries and keys); unselected tokens pass
// through untouched.
template <class S>
Tensor<S> routed_layer_forward(const Tensor<S>& hidden, const MaskMat& mask,
                               const model::LayerParams<S>& layer,
                               const model::ModelConfig& cfg,
                               const planner::PlanEntry& entry,
                               const RouterParams<S>* router,
                               const RouteOptions& opts,
                               double threshold_delta =
                                   -std::numeric_limits<double>::infinity(),
                               RouterDecision* decision_out = nullptr) {
  switch (entry.mode) {
    case planner::RouteMode::SKIP:
      return hidden;
    case planner::RouteMode::DENSE:
      return model::dense_layer_forward(hidden, mask, layer, cfg);
    case planner::RouteMode::ROUTED:
      break;
  }
  if (!router)
    throw ContractError("routed_layer_forward: routed entry without a router");
  std::vector<Index> all(static_cast<std::size_t>(hidden.rows()));
  std::iota(all.begin(), all.end(), 0);
  RouterDecision decision =
      opts.selection == SelectionMode::TOPK
          ? route_topk(hidden, all, entry.capacity, *router)
          : route_threshold(hidden, all, threshold_delta, *router);
  if (decision_out) *decision_out = decision;
  if (decision.selected.empty()) return hidden;

  Tensor<S> sel = gather_rows(hidden, decision.selected);
  const MaskMat smask = detail::sub_mask(mask, decision.selected);
  Tensor<S> body = model::dense_layer_forward(sel, smask, layer, cfg);
  Tensor<S> delta = sub(body, sel);
  Tensor<S> new_rows;
  if (opts.bypass_router) {
    new_rows = add(sel, delta);
  } else {
    Tensor<S> r = router->scores(gather_rows(hidden, decision.selected));
    new_rows = add(sel, scale_rows(delta, r));
  }
  return scatter_rows_into(hidden, decision.selected, new_rows);
}

template <class S>
struct LayerTrace {
  bool routed = false;
  RouterDecision decision;
};

template <class S>
struct ForwardTrace {
  std::vector<LayerTrace<S>> layers;
};

// Full forward under a plan for one sequence of a single-task batch.
template <class S>
Tensor<S> routed_forward_logits(model::ModelParams<S>& params,
                                const model::TaskBatch& batch, std::size_t b,
                                const planner::PruningPlan& plan,
                                RouterSet<S>& routers, const RouteOptions& opts,
                                ForwardTrace<S>* trace = nullptr) {
  const model::ModelConfig& cfg = params.config;
  if (plan.n_layers != cfg.n_layers)
    throw ContractError("routed forward: plan covers " +
                        std::to_string(plan.n_layers) + " layers, model has " +
                        std::to_string(cfg.n_layers));
  const MaskMat mask = model::build_attn_mask(batch);
  Tensor<S> h = model::embed_sequence(params, batch, b);
  if (trace)
    trace->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const planner::PlanEntry& entry = plan.entry(l, batch.task);
    RouterParams<S>* router =
        entry.mode == planner::RouteMode::ROUTED
            ? &routers.router_for(l, batch.task, opts.arrangement)
            : nullptr;
    double delta = -std::numeric_limits<double>::infinity();
    if (entry.mode == planner::RouteMode::ROUTED &&
        opts.selection == SelectionMode::THRESHOLD) {
      if (!opts.calibration)
        throw ContractError("routed forward: THRESHOLD needs a calibration");
      delta = opts.calibration->delta_for(l, batch.task);
    }
    RouterDecision* slot = nullptr;
    if (trace && entry.mode == planner::RouteMode::ROUTED) {
      trace->layers[static_cast<std::size_t>(l)].routed = true;
      slot = &trace->layers[static_cast<std::size_t>(l)].decision;
    }
    h = routed_layer_forward(h, mask, params.layers[static_cast<std::size_t>(l)],
                             cfg, entry, router, opts, delta, slot);
  }
  return model::head_logits(params, h);
}

// Per-(layer, task) score quantiles from TOPK-routed calibration passes, so
// threshold selection reproduces the trained keep rates.
template <class S>
ThresholdCalibration calibrate_threshold(
    model::ModelParams<S>& params, RouterSet<S>& routers,
    const planner::PruningPlan& plan,
    const std::vector<model::TaskBatch>& calibration_batches,
    RouterArrangement arrangement = RouterArrangement::PER_TASK) {
  if (calibration_batches.empty())
    throw ContractError("calibrate_threshold: no calibration batches");
  RouteOptions opts;
  opts.selection = SelectionMode::TOPK;
  opts.arrangement = arrangement;
  // scores[layer][task]
  std::vector<std::array<std::vector<double>, 2>> scores(
      static_cast<std::size_t>(plan.n_layers));
  NoGradGuard ng;
  for (const auto& batch : calibration_batches) {
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      ForwardTrace<S> trace;
      routed_forward_logits(params, batch, b, plan, routers, opts, &trace);
      const int ti = batch.task == model::TaskType::T2I ? 0 : 1;
      for (int l = 0; l < plan.n_layers; ++l) {
        const auto& lt = trace.layers[static_cast<std::size_t>(l)];
        if (!lt.routed) continue;
        auto& dst = scores[static_cast<std::size_t>(l)][static_cast<std::size_t>(ti)];
        dst.insert(dst.end(), lt.decision.scores.begin(),
                   lt.decision.scores.end());
      }
    }
  }
  ThresholdCalibration calib;
  for (int l = 0; l < plan.n_layers; ++l) {
    for (model::TaskType task : {model::TaskType::T2I, model::TaskType::MMU}) {
      const planner::PlanEntry& entry = plan.entry(l, task);
      if (entry.mode != planner::RouteMode::ROUTED) continue;
      const int ti = task == model::TaskType::T2I ? 0 : 1;
      const auto& s =
          scores[static_cast<std::size_t>(l)][static_cast<std::size_t>(ti)];
      ThresholdCalibration::Entry e;
      e.layer = l;
      e.task = task;
      e.quantile = 1.0 - entry.capacity;
      e.n_scores = static_cast<std::int64_t>(s.size());
      if (entry.capacity >= 1.0) {
        e.delta = -std::numeric_limits<double>::infinity();
      } else {
        if (s.empty())
          throw ContractError(
              "calibrate_threshold: no scores observed for a routed layer "
              "(layer " +
              std::to_string(l) + ", task " + model::task_name(task) + ")");
        e.delta = score_quantile(s, e.quantile);
      }
      calib.entries.push_back(e);
    }
  }
  return calib;
}

// ---------------------------------------------------------------------------
// Straight-Through Gumbel-Softmax competitive router (two-way keep/drop).

template <class S>
struct GumbelOut {
  Tensor<S> y_keep;  // [n x 1] soft keep probability, differentiable
  Tensor<S> y_drop;  // [n x 1] = 1 - y_keep
  std::vector<std::uint8_t> keep;  // hard one-hot decision per token
};

// Soft decision y = softmax((log pi + g)/temperature) over {keep, drop} with
// pi = (s, 1-s), s the router score; hard decision is the argmax.
template <class S>
GumbelOut<S> gumbel_router_forward(const Tensor<S>& hidden,
                                   const RouterParams<S>& router,
                                   double temperature, const Tensor<S>& g_keep,
                                   const Tensor<S>& g_drop) {
  if (!(temperature > 0.0))
    throw ContractError("gumbel router: temperature must be positive");
  const Index n = hidden.rows();
  if (g_keep.size() != n || g_drop.size() != n)
    throw ShapeError("gumbel router: noise length " +
                     std::to_string(g_keep.size()) + "/" +
                     std::to_string(g_drop.size()) + " vs " +
                     std::to_string(n) + " tokens");
  Tensor<S> s = router.scores(hidden);
  const S inv_t = static_cast<S>(1.0 / temperature);
  Tensor<S> u_keep = mul_const(add(log_t(s), g_keep), inv_t);
  Tensor<S> u_drop = mul_const(add(log_t(one_minus(s)), g_drop), inv_t);
  GumbelOut<S> out;
  out.y_keep = sigmoid(sub(u_keep, u_drop));
  out.y_drop = one_minus(out.y_keep);
  out.keep.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    out.keep[static_cast<std::size_t>(i)] =
        u_keep.raw()[i] > u_drop.raw()[i] ? 1 : 0;
  return out;
}

// Stream overload; per token, the keep noise is drawn before the drop noise.
template <class S>
GumbelOut<S> gumbel_router_forward(const Tensor<S>& hidden,
                                   const RouterParams<S>& router,
                                   double temperature, RandomStream& stream) {
  const Index n = hidden.rows();
  Tensor<S> g_keep = Tensor<S>::zeros({n, 1});
  Tensor<S> g_drop = Tensor<S>::zeros({n, 1});
  for (Index i = 0; i < n; ++i) {
    g_keep.raw()[i] = static_cast<S>(stream.gumbel());
    g_drop.raw()[i] = static_cast<S>(stream.gumbel());
  }
  return gumbel_router_forward(hidden, router, temperature, g_keep, g_drop);
}

template <class S>
struct GumbelLayerResult {
  Tensor<S> hidden;
  Tensor<S> keep_rate;  // scalar: differentiable mean of y_keep
  std::vector<Index> kept;
};

// Competitive routed layer: hard-kept tokens get x + D(x) scaled by the
// straight-through factor (1 + y - stopgrad(y)); dropped tokens skip.
template <class S>
GumbelLayerResult<S> gumbel_layer_forward(
    const Tensor<S>& hidden, const MaskMat& mask,
    const model::LayerParams<S>& layer, const model::ModelConfig& cfg,
    const RouterParams<S>& router, double temperature, RandomStream& stream) {
  GumbelOut<S> g = gumbel_router_forward(hidden, router, temperature, stream);
  GumbelLayerResult<S> out;
  out.keep_rate = mean(g.y_keep);
  for (Index i = 0; i < hidden.rows(); ++i)
    if (g.keep[static_cast<std::size_t>(i)]) out.kept.push_back(i);
  if (out.kept.empty()) {
    out.hidden = hidden;
    return out;
  }
  Tensor<S> sel = gather_rows(hidden, out.kept);
  const MaskMat smask = detail::sub_mask(mask, out.kept);
  Tensor<S> body = model::dense_layer_forward(sel, smask, layer, cfg);
  Tensor<S> delta = sub(body, sel);
  Tensor<S> y_sel = gather_rows(g.y_keep, out.kept);
  Tensor<S> st = add_const(sub(y_sel, stop_gradient(y_sel)), S(1));
  out.hidden =
      scatter_rows_into(hidden, out.kept, add(sel, scale_rows(delta, st)));
  return out;
}

// L_aux = P * sum_i (r_i - P)^2 over per-layer keep rates.
template <class S>
Tensor<S> aux_capacity_loss(const Tensor<S>& keep_rates, S target) {
  Tensor<S> diff = add_const(keep_rates, -target);
  return mul_const(sum(mul(diff, diff)), target);
}

inline void write_router_scores_csv(
    const std::vector<std::pair<int, RouterDecision>>& per_layer,
    model::TaskType task, std::ostream& os) {
  os << "layer,task,token_index,score,selected\n";
  for (const auto& [layer, d] : per_layer) {
    for (std::size_t i = 0; i < d.task_positions.size(); ++i) {
      const bool sel = std::binary_search(d.selected.begin(), d.selected.end(),
                                          d.task_positions[i]);
      os << layer << "," << model::task_name(task) << ","
         << d.task_positions[i] << "," << d.scores[i] << "," << (sel ? 1 : 0)
         << "\n";
    }
  }
}

}  // namespace unimod::routing
