#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "support.hpp"
#include "unimod/routing.hpp"

using namespace unimod;
using namespace testutil;
using namespace unimod::model;
using namespace unimod::routing;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// d_model = 1 identity router: score(h) = sigmoid(h).
RouterParams<double> unit_router() {
  RouterParams<double> r;
  r.w = Tensor<double>::filled({1, 1}, 1.0);
  r.b = Tensor<double>::zeros({1});
  return r;
}

Tensor<double> score_column(const std::vector<double>& scores) {
  Tensor<double> h = Tensor<double>::zeros(
      {static_cast<Index>(scores.size()), 1});
  for (std::size_t i = 0; i < scores.size(); ++i)
    h.raw()[static_cast<Index>(i)] = logit(scores[i]);
  return h;
}

std::vector<Index> iota_positions(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

TaskBatch routed_batch(const ModelConfig& cfg, TaskType task, Index m, Index n,
                       RandomStream& rs) {
  TaskBatch b = mmu_batch(cfg, m, n, rs);
  b.task = task;
  b.objective = Objective::AR;
  b.loss_mask[0][0] = 0;
  return b;
}

}  // namespace

TEST_CASE("token budgets follow the guarded ceiling") {
  CHECK(capacity_count(1.0, 4) == 4);
  CHECK(capacity_count(0.5, 4) == 2);
  CHECK(capacity_count(0.25, 4) == 1);
  CHECK(capacity_count(0.2, 3) == 1);
  CHECK(capacity_count(0.5, 5) == 3);
  CHECK(capacity_count(0.01, 10) == 1);  // floored at one token
  CHECK(capacity_count(0.8, 1155) == 924);  // 0.8*1155 rounds up in binary
  CHECK(capacity_count(0.2, 4096) == 820);
  CHECK(capacity_count(0.3, 0) == 0);
}

TEST_CASE("topk keeps the highest-scoring tokens with index tie-breaks") {
  RouterParams<double> r = unit_router();
  Tensor<double> h = score_column({0.9, 0.1, 0.5, 0.7});

  RouterDecision d = route_topk(h, iota_positions(4), 0.5, r);
  CHECK(d.selected == std::vector<Index>{0, 3});
  CHECK(d.mode == SelectionMode::TOPK);
  CHECK(d.capacity_used == doctest::Approx(0.5));
  REQUIRE(d.scores.size() == 4);
  CHECK(d.scores[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(d.scores[1] == doctest::Approx(0.1).epsilon(1e-12));

  RouterDecision all = route_topk(h, iota_positions(4), 1.0, r);
  CHECK(all.selected == std::vector<Index>{0, 1, 2, 3});

  // equal scores: lower indices win
  Tensor<double> flat = Tensor<double>::zeros({4, 1});
  RouterDecision tie = route_topk(flat, iota_positions(4), 0.5, r);
  CHECK(tie.selected == std::vector<Index>{0, 1});
}

TEST_CASE("topk validates capacity and positions") {
  RouterParams<double> r = unit_router();
  Tensor<double> h = score_column({0.5, 0.5});
  CHECK_THROWS_AS(route_topk(h, iota_positions(2), 0.0, r), ContractError);
  CHECK_THROWS_AS(route_topk(h, iota_positions(2), 1.2, r), ContractError);
  CHECK_THROWS_AS(route_topk(h, {}, 0.5, r), ContractError);
}

TEST_CASE("topk agrees with a full-sort oracle across 1000 trials") {
  RouterParams<double> r = unit_router();
  RandomStream rs(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + static_cast<Index>(rs.uniform_int(12));
    Tensor<double> h = Tensor<double>::zeros({n, 1});
    for (Index i = 0; i < n; ++i) h.raw()[i] = rs.uniform(-4.0, 4.0);
    const double capacity = rs.uniform(0.05, 1.0);

    RouterDecision d = route_topk(h, iota_positions(n), capacity, r);

    // independent selection: stable pair sort on (score desc, index asc)
    std::vector<std::pair<double, Index>> pairs;
    for (Index i = 0; i < n; ++i)
      pairs.emplace_back(1.0 / (1.0 + std::exp(-h.raw()[i])), i);
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<Index> expect;
    for (Index i = 0; i < capacity_count(capacity, n); ++i)
      expect.push_back(pairs[static_cast<std::size_t>(i)].second);
    std::sort(expect.begin(), expect.end());
    CHECK(d.selected == expect);
    CHECK(static_cast<Index>(d.selected.size()) ==
          capacity_count(capacity, n));
  }
}

TEST_CASE("routing can target a subset of positions") {
  RouterParams<double> r = unit_router();
  Tensor<double> h = score_column({0.9, 0.8, 0.7, 0.6, 0.5, 0.4});
  RouterDecision d = route_topk(h, {1, 3, 5}, 1.0, r);
  CHECK(d.selected == std::vector<Index>{1, 3, 5});
  CHECK(d.capacity_used == doctest::Approx(0.5));  // 3 of 6 sequence tokens

  RouterDecision top = route_topk(h, {1, 3, 5}, 0.4, r);
  // budget = ceil(0.4 * 3) = 2 highest among positions {1,3,5}
  CHECK(top.selected == std::vector<Index>{1, 3});
}

TEST_CASE("threshold selection keeps every score at or above delta") {
  RouterParams<double> r = unit_router();
  Tensor<double> h = score_column({0.9, 0.1, 0.5, 0.7});

  RouterDecision d = route_threshold(h, iota_positions(4), 0.6, r);
  CHECK(d.selected == std::vector<Index>{0, 3});
  CHECK(d.mode == SelectionMode::THRESHOLD);

  RouterDecision none = route_threshold(h, iota_positions(4), 0.95, r);
  CHECK(none.selected.empty());
  CHECK(none.capacity_used == 0.0);

  const double ninf = -std::numeric_limits<double>::infinity();
  RouterDecision all = route_threshold(h, iota_positions(4), ninf, r);
  CHECK(all.selected.size() == 4);
  CHECK_THROWS_AS(route_threshold(h, {}, 0.5, r), ContractError);
}

TEST_CASE("unselected tokens pass through a routed layer bitwise") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(201);
  auto params = ModelParams<double>::init(cfg, rs);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  RandomStream data(202);
  TaskBatch b = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  const MaskMat mask = build_attn_mask(b);
  Tensor<double> h = embed_sequence(params, b, 0).detach();

  planner::PlanEntry entry{planner::RouteMode::ROUTED, 0.5};
  RouterDecision decision;
  Tensor<double> out = routed_layer_forward(h, mask, params.layers[0], cfg,
                                            entry, &router, RouteOptions{},
                                            -1.0, &decision);

  CHECK(static_cast<Index>(decision.selected.size()) == capacity_count(0.5, 8));
  std::vector<bool> is_sel(8, false);
  for (Index i : decision.selected) is_sel[static_cast<std::size_t>(i)] = true;
  int untouched = 0;
  for (Index i = 0; i < 8; ++i) {
    if (is_sel[static_cast<std::size_t>(i)]) continue;
    for (Index c = 0; c < cfg.d_model; ++c) CHECK(out(i, c) == h(i, c));
    ++untouched;
  }
  CHECK(untouched == 4);
  // selected tokens moved
  for (Index i : decision.selected) {
    double diff = 0;
    for (Index c = 0; c < cfg.d_model; ++c)
      diff = std::max(diff, std::abs(out(i, c) - h(i, c)));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("capacity one with the router bypassed reproduces the dense layer") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(211);
  auto params = ModelParams<double>::init(cfg, rs);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  RandomStream data(212);
  TaskBatch b = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  const MaskMat mask = build_attn_mask(b);
  Tensor<double> h = embed_sequence(params, b, 0).detach();

  planner::PlanEntry entry{planner::RouteMode::ROUTED, 1.0};
  RouteOptions opts;
  opts.bypass_router = true;
  Tensor<double> routed = routed_layer_forward(h, mask, params.layers[0], cfg,
                                               entry, &router, opts);
  Tensor<double> dense = dense_layer_forward(h, mask, params.layers[0], cfg);
  double worst = 0;
  for (Index i = 0; i < h.size(); ++i)
    worst = std::max(worst, std::abs(routed.raw()[i] - dense.raw()[i]));
  CHECK(worst < 1e-10);

  // without the bypass the sigmoid scaling shows up
  Tensor<double> scaled = routed_layer_forward(h, mask, params.layers[0], cfg,
                                               entry, &router, RouteOptions{});
  double delta = 0;
  for (Index i = 0; i < h.size(); ++i)
    delta = std::max(delta, std::abs(scaled.raw()[i] - dense.raw()[i]));
  CHECK(delta > 1e-6);
}

TEST_CASE("skip and dense plan entries behave as identity and full layer") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(221);
  auto params = ModelParams<double>::init(cfg, rs);
  RandomStream data(222);
  TaskBatch b = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  const MaskMat mask = build_attn_mask(b);
  Tensor<double> h = embed_sequence(params, b, 0).detach();

  Tensor<double> skip = routed_layer_forward(
      h, mask, params.layers[0], cfg,
      planner::PlanEntry{planner::RouteMode::SKIP, 1.0},
      static_cast<const RouterParams<double>*>(nullptr),
      RouteOptions{});
  for (Index i = 0; i < h.size(); ++i) CHECK(skip.raw()[i] == h.raw()[i]);

  Tensor<double> dense = routed_layer_forward(
      h, mask, params.layers[0], cfg,
      planner::PlanEntry{planner::RouteMode::DENSE, 1.0},
      static_cast<const RouterParams<double>*>(nullptr),
      RouteOptions{});
  Tensor<double> ref = dense_layer_forward(h, mask, params.layers[0], cfg);
  for (Index i = 0; i < h.size(); ++i) CHECK(dense.raw()[i] == ref.raw()[i]);

  CHECK_THROWS_AS(
      routed_layer_forward(h, mask, params.layers[0], cfg,
                           planner::PlanEntry{planner::RouteMode::ROUTED, 0.5},
                           static_cast<const RouterParams<double>*>(nullptr),
                           RouteOptions{}),
      ContractError);
}

TEST_CASE("full routed forward routes only planned layers and tasks") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(231);
  auto params = ModelParams<double>::init(cfg, rs);
  RandomStream rrs(232);
  auto routers = RouterSet<double>::init(cfg, rrs);
  RandomStream data(233);

  planner::PruningPlan plan = planner::PruningPlan::dense(cfg.n_layers);
  plan.entry(1, TaskType::MMU) = {planner::RouteMode::ROUTED, 0.5};

  TaskBatch mmu = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  ForwardTrace<double> trace;
  Tensor<double> logits = routed_forward_logits(params, mmu, 0, plan, routers,
                                                RouteOptions{}, &trace);
  CHECK(logits.rows() == 8);
  CHECK_FALSE(trace.layers[0].routed);
  REQUIRE(trace.layers[1].routed);
  CHECK(trace.layers[1].decision.selected.size() == 4);

  // the same plan leaves a T2I batch fully dense
  TaskBatch t2i = routed_batch(cfg, TaskType::T2I, 4, 4, data);
  ForwardTrace<double> t2i_trace;
  routed_forward_logits(params, t2i, 0, plan, routers, RouteOptions{},
                        &t2i_trace);
  CHECK_FALSE(t2i_trace.layers[0].routed);
  CHECK_FALSE(t2i_trace.layers[1].routed);

  planner::PruningPlan wrong = planner::PruningPlan::dense(cfg.n_layers + 1);
  CHECK_THROWS_AS(
      routed_forward_logits(params, mmu, 0, wrong, routers, RouteOptions{}),
      ContractError);

  RouteOptions thr;
  thr.selection = SelectionMode::THRESHOLD;
  CHECK_THROWS_AS(routed_forward_logits(params, mmu, 0, plan, routers, thr),
                  ContractError);
}

TEST_CASE("gradients reach only the router slot the batch used") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(241);
  auto params = ModelParams<double>::init(cfg, rs);
  RandomStream rrs(242);
  auto routers = RouterSet<double>::init(cfg, rrs);
  RandomStream data(243);

  planner::PruningPlan plan = planner::PruningPlan::dense(cfg.n_layers);
  plan.entry(1, TaskType::MMU) = {planner::RouteMode::ROUTED, 0.5};
  plan.entry(1, TaskType::T2I) = {planner::RouteMode::ROUTED, 0.5};

  TaskBatch mmu = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  Tensor<double> logits =
      routed_forward_logits(params, mmu, 0, plan, routers, RouteOptions{});
  Tensor<double> loss = mean(logits);
  backward(loss);

  Tensor<double>& mmu_w = routers.layers[1][1].w;
  Tensor<double>& t2i_w = routers.layers[1][0].w;
  Tensor<double>& shared_w = routers.layers[1][2].w;
  REQUIRE(mmu_w.has_grad());
  CHECK(mmu_w.grad_raw().norm() > 0.0);
  CHECK((!t2i_w.has_grad() || t2i_w.grad_raw().norm() == 0.0));
  CHECK((!shared_w.has_grad() || shared_w.grad_raw().norm() == 0.0));

  // shared arrangement moves the gradient to the shared slot
  routers.zero_grads();
  RouteOptions shared;
  shared.arrangement = RouterArrangement::SHARED;
  Tensor<double> loss2 =
      mean(routed_forward_logits(params, mmu, 0, plan, routers, shared));
  backward(loss2);
  REQUIRE(shared_w.has_grad());
  CHECK(shared_w.grad_raw().norm() > 0.0);
  CHECK(mmu_w.grad_raw().norm() == 0.0);
}

TEST_CASE("routed layer gradients pass finite differences away from ties") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(251);
  auto params = ModelParams<double>::init(cfg, rs);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  RandomStream data(252);
  TaskBatch b = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  const MaskMat mask = build_attn_mask(b);
  Tensor<double> h = embed_sequence(params, b, 0).detach();
  planner::PlanEntry entry{planner::RouteMode::ROUTED, 0.5};

  // confirm the seed puts the decision boundary well away from the budget cut
  RouterDecision d = route_topk(h, iota_positions(8), 0.5, router);
  std::vector<double> sorted = d.scores;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  REQUIRE(sorted[3] - sorted[4] > 1e-3);

  auto through_router = [&](const Tensor<double>& w_) {
    RouterParams<double> r2;
    r2.w = w_;
    r2.b = router.b;
    return sum(routed_layer_forward(h, mask, params.layers[0], cfg, entry, &r2,
                                    RouteOptions{}));
  };
  CHECK(finite_diff_check<double>(through_router, router.w, 1e-5) < 1e-6);

  auto through_body = [&](const Tensor<double>& wq_) {
    LayerParams<double> lp = params.layers[0];
    lp.attn.wq = wq_;
    return sum(routed_layer_forward(h, mask, lp, cfg, entry, &router,
                                    RouteOptions{}));
  };
  CHECK(finite_diff_check<double>(through_body, params.layers[0].attn.wq,
                                  1e-5) < 1e-6);

  auto through_hidden = [&](const Tensor<double>& h_) {
    return sum(routed_layer_forward(h_, mask, params.layers[0], cfg, entry,
                                    &router, RouteOptions{}));
  };
  CHECK(finite_diff_check<double>(through_hidden, h, 1e-5) < 1e-6);
}

TEST_CASE("score quantiles interpolate order statistics") {
  CHECK(score_quantile({3.0, 1.0, 2.0, 4.0}, 0.5) == doctest::Approx(2.5));
  CHECK(score_quantile({3.0, 1.0, 2.0}, 0.5) == doctest::Approx(2.0));
  CHECK(score_quantile({5.0}, 0.25) == doctest::Approx(5.0));
  CHECK(score_quantile({1.0, 2.0}, 0.0) == doctest::Approx(1.0));
  CHECK(score_quantile({1.0, 2.0}, 1.0) == doctest::Approx(2.0));
  CHECK(score_quantile({1.0, 2.0}, 0.75) == doctest::Approx(1.75));
  CHECK_THROWS_AS(score_quantile({}, 0.5), ContractError);
  CHECK_THROWS_AS(score_quantile({1.0}, 1.5), ContractError);
}

TEST_CASE("calibration records one threshold per routed layer and task") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(261);
  auto params = ModelParams<double>::init(cfg, rs);
  RandomStream rrs(262);
  auto routers = RouterSet<double>::init(cfg, rrs);
  RandomStream data(263);

  planner::PruningPlan plan = planner::PruningPlan::dense(cfg.n_layers);
  plan.entry(0, TaskType::MMU) = {planner::RouteMode::ROUTED, 1.0};
  plan.entry(1, TaskType::MMU) = {planner::RouteMode::ROUTED, 0.5};

  std::vector<TaskBatch> cal;
  for (int i = 0; i < 4; ++i)
    cal.push_back(routed_batch(cfg, TaskType::MMU, 4, 4, data));
  ThresholdCalibration calib = calibrate_threshold(params, routers, plan, cal);

  REQUIRE(calib.entries.size() == 2);
  CHECK(calib.delta_for(0, TaskType::MMU) ==
        -std::numeric_limits<double>::infinity());
  const double median = calib.delta_for(1, TaskType::MMU);
  CHECK(std::isfinite(median));
  CHECK(median > 0.0);
  CHECK(median < 1.0);
  CHECK_THROWS_AS(calib.delta_for(1, TaskType::T2I), ContractError);
  CHECK_THROWS_AS(calibrate_threshold(params, routers, plan, {}),
                  ContractError);
}

TEST_CASE("threshold selection reproduces the trained keep rate") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(271);
  auto params = ModelParams<double>::init(cfg, rs);
  RandomStream rrs(272);
  auto routers = RouterSet<double>::init(cfg, rrs);
  RandomStream data(273);

  planner::PruningPlan plan = planner::PruningPlan::dense(cfg.n_layers);
  plan.entry(1, TaskType::MMU) = {planner::RouteMode::ROUTED, 0.5};

  std::vector<TaskBatch> cal;
  for (int i = 0; i < 30; ++i)
    cal.push_back(routed_batch(cfg, TaskType::MMU, 6, 6, data));
  ThresholdCalibration calib = calibrate_threshold(params, routers, plan, cal);

  RouteOptions thr;
  thr.selection = SelectionMode::THRESHOLD;
  thr.calibration = &calib;
  Index kept = 0, total = 0;
  for (int i = 0; i < 25; ++i) {
    TaskBatch held = routed_batch(cfg, TaskType::MMU, 6, 6, data);
    ForwardTrace<double> trace;
    NoGradGuard ng;
    routed_forward_logits(params, held, 0, plan, routers, thr, &trace);
    kept += static_cast<Index>(trace.layers[1].decision.selected.size());
    total += held.seq_len();
  }
  const double rate = static_cast<double>(kept) / static_cast<double>(total);
  CHECK(rate > 0.45);
  CHECK(rate < 0.55);
}

TEST_CASE("gumbel decisions are normalized one-hot and reproducible") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(281);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  Tensor<double> h = Tensor<double>::randn({6, cfg.d_model}, rs, 1.0);

  RandomStream noise(282);
  GumbelOut<double> g = gumbel_router_forward(h, router, 1.0, noise);
  for (Index i = 0; i < 6; ++i) {
    CHECK(g.y_keep.raw()[i] + g.y_drop.raw()[i] ==
          doctest::Approx(1.0).epsilon(1e-15));
    CHECK(g.y_keep.raw()[i] > 0.0);
    CHECK(g.y_keep.raw()[i] < 1.0);
    // the hard branch is the soft majority, independent of temperature
    CHECK(g.keep[static_cast<std::size_t>(i)] ==
          (g.y_keep.raw()[i] > 0.5 ? 1 : 0));
  }

  RandomStream replay(282);
  GumbelOut<double> g2 = gumbel_router_forward(h, router, 1.0, replay);
  CHECK(g2.keep == g.keep);
  for (Index i = 0; i < 6; ++i) CHECK(g2.y_keep.raw()[i] == g.y_keep.raw()[i]);

  RandomStream other(283);
  GumbelOut<double> g3 = gumbel_router_forward(h, router, 1.0, other);
  bool any_diff = false;
  for (Index i = 0; i < 6; ++i)
    any_diff = any_diff || g3.y_keep.raw()[i] != g.y_keep.raw()[i];
  CHECK(any_diff);
}

TEST_CASE("gumbel hard branch matches the noisy argmax at low temperature") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(291);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  Tensor<double> h = Tensor<double>::randn({8, cfg.d_model}, rs, 1.0);
  RandomStream noise(292);
  Tensor<double> gk = Tensor<double>::zeros({8, 1});
  Tensor<double> gd = Tensor<double>::zeros({8, 1});
  for (Index i = 0; i < 8; ++i) {
    gk.raw()[i] = noise.gumbel();
    gd.raw()[i] = noise.gumbel();
  }

  GumbelOut<double> g = gumbel_router_forward(h, router, 0.01, gk, gd);
  NoGradGuard ng;
  Tensor<double> s = router.scores(h);
  for (Index i = 0; i < 8; ++i) {
    const double keep_logit = std::log(s.raw()[i]) + gk.raw()[i];
    const double drop_logit = std::log(1.0 - s.raw()[i]) + gd.raw()[i];
    CHECK(g.keep[static_cast<std::size_t>(i)] ==
          (keep_logit > drop_logit ? 1 : 0));
    // at temperature 0.01 the soft value saturates toward the hard one
    const double y = g.y_keep.raw()[i];
    CHECK(std::abs(y - g.keep[static_cast<std::size_t>(i)]) < 1e-2);
  }

  CHECK_THROWS_AS(gumbel_router_forward(h, router, 0.0, gk, gd),
                  ContractError);
  Tensor<double> short_noise = Tensor<double>::zeros({3, 1});
  CHECK_THROWS_AS(gumbel_router_forward(h, router, 1.0, short_noise, gd),
                  ShapeError);
}

TEST_CASE("gumbel soft weights pass a frozen-noise finite-difference check") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(301);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  Tensor<double> h = Tensor<double>::randn({5, cfg.d_model}, rs, 1.0);
  RandomStream noise(302);
  Tensor<double> gk = Tensor<double>::zeros({5, 1});
  Tensor<double> gd = Tensor<double>::zeros({5, 1});
  for (Index i = 0; i < 5; ++i) {
    gk.raw()[i] = noise.gumbel();
    gd.raw()[i] = noise.gumbel();
  }

  auto through_w = [&](const Tensor<double>& w_) {
    RouterParams<double> r2;
    r2.w = w_;
    r2.b = router.b;
    GumbelOut<double> g = gumbel_router_forward(h, r2, 0.7, gk, gd);
    return sum(g.y_keep);
  };
  CHECK(finite_diff_check<double>(through_w, router.w, 1e-5) < 1e-6);

  auto through_h = [&](const Tensor<double>& h_) {
    GumbelOut<double> g = gumbel_router_forward(h_, router, 0.7, gk, gd);
    return sum(mul(g.y_keep, g.y_keep));  // nonlinear readout
  };
  CHECK(finite_diff_check<double>(through_h, h, 1e-5) < 1e-6);
}

TEST_CASE("gumbel layer applies the body to kept tokens only") {
  ModelConfig cfg = tiny_config();
  RandomStream rs(311);
  auto params = ModelParams<double>::init(cfg, rs);
  RouterParams<double> router = RouterParams<double>::init(cfg.d_model, rs);
  RandomStream data(312);
  TaskBatch b = routed_batch(cfg, TaskType::MMU, 4, 4, data);
  const MaskMat mask = build_attn_mask(b);
  Tensor<double> h = embed_sequence(params, b, 0).detach();

  RandomStream noise(313);
  GumbelLayerResult<double> res = gumbel_layer_forward(
      h, mask, params.layers[0], cfg, router, 1.0, noise);

  // keep_rate is the soft mean, bounded in (0,1)
  CHECK(res.keep_rate.item() > 0.0);
  CHECK(res.keep_rate.item() < 1.0);

  std::vector<bool> kept(8, false);
  for (Index i : res.kept) kept[static_cast<std::size_t>(i)] = true;
  for (Index i = 0; i < 8; ++i) {
    if (kept[static_cast<std::size_t>(i)]) continue;
    for (Index c = 0; c < cfg.d_model; ++c)
      CHECK(res.hidden(i, c) == h(i, c));  // dropped rows bitwise unchanged
  }

  if (!res.kept.empty()) {
    // straight-through scale is exactly one in the forward pass: kept rows
    // must equal a dense pass over the kept subsequence
    Tensor<double> sel = gather_rows(h, res.kept);
    MaskMat sub(static_cast<Index>(res.kept.size()),
                static_cast<Index>(res.kept.size()));
    for (Index i = 0; i < sub.rows(); ++i)
      for (Index j = 0; j < sub.cols(); ++j)
        sub(i, j) = mask(res.kept[static_cast<std::size_t>(i)],
                         res.kept[static_cast<std::size_t>(j)]);
    NoGradGuard ng;
    Tensor<double> body = dense_layer_forward(sel, sub, params.layers[0], cfg);
    for (std::size_t r = 0; r < res.kept.size(); ++r)
      for (Index c = 0; c < cfg.d_model; ++c)
        CHECK(res.hidden(res.kept[r], c) ==
              doctest::Approx(body(static_cast<Index>(r), c)).epsilon(1e-12));
  }
}

TEST_CASE("capacity regularizer scores deviation from the target rate") {
  Tensor<double> on_target = Tensor<double>::from({2, 1}, {0.5, 0.5});
  CHECK(aux_capacity_loss(on_target, 0.5).item() == doctest::Approx(0.0));

  Tensor<double> off = Tensor<double>::from({2, 1}, {1.0, 0.0});
  CHECK(aux_capacity_loss(off, 0.5).item() == doctest::Approx(0.25));

  // gradient is zero exactly on target, nonzero off target
  Tensor<double> r = Tensor<double>::from({2, 1}, {1.0, 0.0});
  r.set_requires_grad();
  { Tensor<double> l = aux_capacity_loss(r, 0.5); backward(l); }
  CHECK(r.grad_raw()[0] == doctest::Approx(0.5));
  CHECK(r.grad_raw()[1] == doctest::Approx(-0.5));

  Tensor<double> r2 = Tensor<double>::from({2, 1}, {0.5, 0.5});
  r2.set_requires_grad();
  { Tensor<double> l2 = aux_capacity_loss(r2, 0.5); backward(l2); }
  CHECK(r2.grad_raw().norm() == doctest::Approx(0.0));
}

TEST_CASE("router score dumps list every scored token") {
  RouterDecision d;
  d.task_positions = {0, 1, 2};
  d.scores = {0.25, 0.5, 0.75};
  d.selected = {2};
  std::ostringstream os;
  write_router_scores_csv({{3, d}}, TaskType::T2I, os);
  CHECK(os.str() ==
        "layer,task,token_index,score,selected\n"
        "3,t2i,0,0.25,0\n"
        "3,t2i,1,0.5,0\n"
        "3,t2i,2,0.75,1\n");
}
