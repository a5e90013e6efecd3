#pragma once

#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimod/errors.hpp"
#include "unimod/model.hpp"
#include "unimod/planner.hpp"
#include "unimod/routing.hpp"

namespace unimod::accounting {

inline constexpr const char* kConventionNote =
    "multiply-add = 2 FLOPs; embeddings, norms, softmax excluded; attention "
    "quadratic term counts retained tokens only";

// Forward cost of one layer over m retained tokens:
//   8 m d^2   (QKV + output projections)
// + 4 m^2 d   (score and value contractions)
// + 4 m d_ffn d (two FFN matmuls)
inline double layer_flops(const model::ModelConfig& cfg, Index m) {
  if (m < 0 || m > cfg.max_seq)
    throw ContractError("layer_flops: retained count " + std::to_string(m) +
                        " outside [0, " + std::to_string(cfg.max_seq) + "]");
  const double md = static_cast<double>(m);
  const double d = static_cast<double>(cfg.d_model);
  const double ffn = static_cast<double>(cfg.d_ffn);
  return 8.0 * md * d * d + 4.0 * md * md * d + 4.0 * md * d * ffn;
}

// Paper-convention training cost: forward FLOPs x batch x 3.
inline double training_compute(double forward_flops_per_sample,
                               Index batch_size) {
  if (!(forward_flops_per_sample > 0.0) || batch_size <= 0)
    throw ContractError("training_compute: inputs must be positive");
  return forward_flops_per_sample * static_cast<double>(batch_size) * 3.0;
}

struct TaskFlopReport {
  model::TaskType task = model::TaskType::T2I;
  Index seq_len = 0;
  std::vector<double> per_layer;        // under the plan
  std::vector<double> per_layer_dense;  // all-dense reference
  double total = 0.0;
  double dense_total = 0.0;
  double ratio = 1.0;
  double training_per_iter = 0.0;
};

struct FlopReport {
  TaskFlopReport t2i;
  TaskFlopReport mmu;
  double combined_ratio = 1.0;
  Index batch_size = 1;
  std::string note = kConventionNote;
};

namespace detail {

inline Index retained_count(const planner::PlanEntry& entry, Index seq_len) {
  switch (entry.mode) {
    case planner::RouteMode::DENSE:
      return seq_len;
    case planner::RouteMode::SKIP:
      return 0;
    case planner::RouteMode::ROUTED:
      return routing::capacity_count(entry.capacity, seq_len);
  }
  throw ContractError("retained_count: unknown route mode");
}

inline TaskFlopReport task_report(const model::ModelConfig& cfg,
                                  const planner::PruningPlan& plan,
                                  model::TaskType task, Index seq_len,
                                  Index batch_size) {
  if (seq_len <= 0)
    throw ContractError("model_flops: sequence length must be positive");
  TaskFlopReport r;
  r.task = task;
  r.seq_len = seq_len;
  for (int l = 0; l < plan.n_layers; ++l) {
    const planner::PlanEntry& entry = plan.entry(l, task);
    r.per_layer.push_back(layer_flops(cfg, retained_count(entry, seq_len)));
    r.per_layer_dense.push_back(layer_flops(cfg, seq_len));
    r.total += r.per_layer.back();
    r.dense_total += r.per_layer_dense.back();
  }
  r.ratio = r.dense_total > 0.0 ? r.total / r.dense_total : 1.0;
  r.training_per_iter = r.total > 0.0 ? training_compute(r.total, batch_size) : 0.0;
  return r;
}

}  // namespace detail

inline FlopReport model_flops(const model::ModelConfig& cfg,
                              const planner::PruningPlan& plan, Index t2i_seq,
                              Index mmu_seq, Index batch_size = 1) {
  if (plan.n_layers != cfg.n_layers)
    throw ContractError("model_flops: plan covers " +
                        std::to_string(plan.n_layers) + " layers, model has " +
                        std::to_string(cfg.n_layers));
  FlopReport rep;
  rep.batch_size = batch_size;
  rep.t2i = detail::task_report(cfg, plan, model::TaskType::T2I, t2i_seq,
                                batch_size);
  rep.mmu = detail::task_report(cfg, plan, model::TaskType::MMU, mmu_seq,
                                batch_size);
  const double dense = rep.t2i.dense_total + rep.mmu.dense_total;
  rep.combined_ratio =
      dense > 0.0 ? (rep.t2i.total + rep.mmu.total) / dense : 1.0;
  return rep;
}

inline nlohmann::json task_report_json(const TaskFlopReport& r) {
  return nlohmann::json{{"task", model::task_name(r.task)},
                        {"seq_len", r.seq_len},
                        {"per_layer", r.per_layer},
                        {"per_layer_dense", r.per_layer_dense},
                        {"total", r.total},
                        {"dense_total", r.dense_total},
                        {"ratio", r.ratio},
                        {"training_per_iter", r.training_per_iter}};
}

inline nlohmann::json report_json(const FlopReport& rep) {
  return nlohmann::json{{"t2i", task_report_json(rep.t2i)},
                        {"mmu", task_report_json(rep.mmu)},
                        {"combined_ratio", rep.combined_ratio},
                        {"batch_size", rep.batch_size},
                        {"note", rep.note}};
}

inline void print_report_table(const FlopReport& rep, std::ostream& os) {
  const auto& a = rep.t2i;
  const auto& b = rep.mmu;
  os << std::left << std::setw(7) << "layer" << std::right << std::setw(15)
     << "t2i dense" << std::setw(15) << "t2i planned" << std::setw(15)
     << "mmu dense" << std::setw(15) << "mmu planned" << "\n";
  for (std::size_t l = 0; l < a.per_layer.size(); ++l) {
    os << std::left << std::setw(7) << l << std::right << std::scientific
       << std::setprecision(4) << std::setw(15) << a.per_layer_dense[l]
       << std::setw(15) << a.per_layer[l] << std::setw(15)
       << b.per_layer_dense[l] << std::setw(15) << b.per_layer[l] << "\n";
  }
  os << std::left << std::setw(7) << "total" << std::right << std::setw(15)
     << a.dense_total << std::setw(15) << a.total << std::setw(15)
     << b.dense_total << std::setw(15) << b.total << "\n";
  os << std::defaultfloat << std::setprecision(6);
  os << "t2i ratio      " << a.ratio << "\n";
  os << "mmu ratio      " << b.ratio << "\n";
  os << "combined ratio " << rep.combined_ratio << "\n";
  os << "training/iter (batch " << rep.batch_size << "): t2i "
     << std::scientific << std::setprecision(4) << a.training_per_iter
     << ", mmu " << b.training_per_iter << std::defaultfloat << "\n";
  os << "note: " << rep.note << "\n";
}

}  // namespace unimod::accounting
