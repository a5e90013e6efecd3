#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimod/errors.hpp"
#include "unimod/model.hpp"
#include "unimod/profiler.hpp"

namespace unimod::planner {

enum class RouteMode { DENSE, ROUTED, SKIP };
enum class SelectionRule { LOWEST_ARANK, HIGHEST_ARANK };

constexpr double kMinCapacity = 0.1;

inline const char* route_mode_name(RouteMode m) {
  switch (m) {
    case RouteMode::DENSE:
      return "dense";
    case RouteMode::ROUTED:
      return "routed";
    case RouteMode::SKIP:
      return "skip";
  }
  return "?";
}

inline RouteMode route_mode_from(const std::string& s) {
  if (s == "dense") return RouteMode::DENSE;
  if (s == "routed") return RouteMode::ROUTED;
  if (s == "skip") return RouteMode::SKIP;
  throw ContractError("unknown route mode '" + s + "'");
}

struct PlanEntry {
  RouteMode mode = RouteMode::DENSE;
  double capacity = 1.0;
};

// Per-layer, per-task routing directives. A layer routed for exactly one
// task is a task-specific block; routed for both, a shared block.
struct PruningPlan {
  int n_layers = 0;
  std::vector<std::array<PlanEntry, 2>> entries;  // [layer][T2I=0, MMU=1]
  std::string provenance = "manual";

  static PruningPlan dense(int n_layers) {
    PruningPlan p;
    p.n_layers = n_layers;
    p.entries.assign(static_cast<std::size_t>(n_layers), {});
    return p;
  }

  PlanEntry& entry(int layer, model::TaskType t) {
    check_layer(layer);
    return entries[static_cast<std::size_t>(layer)]
                  [t == model::TaskType::T2I ? 0 : 1];
  }
  const PlanEntry& entry(int layer, model::TaskType t) const {
    check_layer(layer);
    return entries[static_cast<std::size_t>(layer)]
                  [t == model::TaskType::T2I ? 0 : 1];
  }

  bool is_shared(int layer) const {
    return entry(layer, model::TaskType::T2I).mode == RouteMode::ROUTED &&
           entry(layer, model::TaskType::MMU).mode == RouteMode::ROUTED;
  }

  void validate() const {
    if (static_cast<int>(entries.size()) != n_layers)
      throw ContractError("plan: entry count " +
                          std::to_string(entries.size()) + " vs n_layers " +
                          std::to_string(n_layers));
    for (const auto& layer : entries)
      for (const auto& e : layer)
        if (e.mode == RouteMode::ROUTED &&
            !(e.capacity > 0.0 && e.capacity <= 1.0))
          throw ContractError("plan: routed capacity " +
                              std::to_string(e.capacity) + " outside (0,1]");
  }

  nlohmann::json to_json() const {
    nlohmann::json out;
    out["n_layers"] = n_layers;
    out["provenance"] = provenance;
    out["entries"] = nlohmann::json::array();
    for (int l = 0; l < n_layers; ++l) {
      for (model::TaskType t : {model::TaskType::T2I, model::TaskType::MMU}) {
        const PlanEntry& e = entry(l, t);
        out["entries"].push_back({{"layer", l},
                                  {"task", model::task_name(t)},
                                  {"mode", route_mode_name(e.mode)},
                                  {"capacity", e.capacity}});
      }
    }
    return out;
  }

  static PruningPlan from_json(const nlohmann::json& j) {
    PruningPlan p = dense(j.at("n_layers").get<int>());
    p.provenance = j.value("provenance", "manual");
    for (const auto& e : j.at("entries")) {
      const std::string task = e.at("task").get<std::string>();
      if (task != "t2i" && task != "mmu")
        throw ContractError("plan: unknown task '" + task + "'");
      PlanEntry& slot = p.entry(
          e.at("layer").get<int>(),
          task == "t2i" ? model::TaskType::T2I : model::TaskType::MMU);
      slot.mode = route_mode_from(e.at("mode").get<std::string>());
      slot.capacity = e.value("capacity", 1.0);
    }
    p.validate();
    return p;
  }

 private:
  void check_layer(int layer) const {
    if (layer < 0 || layer >= n_layers)
      throw ContractError("plan: layer " + std::to_string(layer) +
                          " outside [0, " + std::to_string(n_layers) + ")");
  }
};

// Layer Switch Module: pick k layers per task by profiled redundancy and
// derive each routed capacity as clamp(tau / seq_len, 0.1, 1).
inline PruningPlan build_plan(const profiler::ARankProfile& t2i,
                              const profiler::ARankProfile& mmu, int k_layers,
                              SelectionRule rule = SelectionRule::LOWEST_ARANK) {
  if (t2i.tau.size() != mmu.tau.size())
    throw ContractError("build_plan: profiles cover different layer counts");
  const int n_layers = static_cast<int>(t2i.tau.size());
  if (k_layers < 0 || k_layers > n_layers)
    throw ContractError("build_plan: k_layers " + std::to_string(k_layers) +
                        " outside [0, " + std::to_string(n_layers) + "]");
  PruningPlan plan = PruningPlan::dense(n_layers);
  plan.provenance = "arank-derived";
  for (const auto* profile : {&t2i, &mmu}) {
    const model::TaskType task = profile->task;
    std::vector<int> order(static_cast<std::size_t>(n_layers));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double ta = profile->tau[static_cast<std::size_t>(a)];
      const double tb = profile->tau[static_cast<std::size_t>(b)];
      if (ta != tb)
        return rule == SelectionRule::LOWEST_ARANK ? ta < tb : ta > tb;
      return a > b;  // ties prefer later layers
    });
    for (int i = 0; i < k_layers; ++i) {
      PlanEntry& e = plan.entry(order[static_cast<std::size_t>(i)], task);
      e.mode = RouteMode::ROUTED;
      const double raw =
          profile->tau[static_cast<std::size_t>(
              order[static_cast<std::size_t>(i)])] /
          static_cast<double>(profile->seq_len);
      e.capacity = std::clamp(raw, kMinCapacity, 1.0);
    }
  }
  return plan;
}

struct CapacitySchedule {
  double c_start = 1.0;
  double c_end = 1.0;
  std::int64_t total_steps = 1;
};

// Returns a warning for schedules that grow capacity; they run anyway.
inline std::optional<std::string> check_schedule(const CapacitySchedule& s) {
  if (!(s.c_start > 0.0 && s.c_start <= 1.0 && s.c_end > 0.0 &&
        s.c_end <= 1.0))
    throw ContractError("schedule: capacities must lie in (0,1]");
  if (s.total_steps < 1)
    throw ContractError("schedule: total_steps must be >= 1");
  if (s.c_start < s.c_end)
    return "schedule grows capacity (c_start < c_end); expected a pruning "
           "schedule";
  return std::nullopt;
}

inline double capacity_at(const CapacitySchedule& s, std::int64_t step) {
  if (step < 0) throw ContractError("capacity_at: negative step");
  if (step >= s.total_steps) return s.c_end;
  const double f =
      static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.c_start + (s.c_end - s.c_start) * f;
}

// Published shape + plan presets used by the compute-ratio anchors.
struct Preset {
  std::string name;
  model::ModelConfig config;
  PruningPlan plan;
  Index t2i_seq = 0;
  Index mmu_seq = 0;
};

// 24-layer 2048-wide model; the last 12 layers route both tasks, T2I at a
// fixed 0.8 capacity, MMU at the end point (0.2) of a 1 -> 0.2 schedule.
inline Preset showo_preset() {
  Preset p;
  p.name = "showo";
  p.config.n_layers = 24;
  p.config.d_model = 2048;
  p.config.n_heads = 16;
  p.config.d_ffn = 8192;
  p.config.text_vocab = 50000;
  p.config.image_vocab = 8192;
  p.config.max_seq = 1155;
  p.t2i_seq = 1024 + 131;
  p.mmu_seq = 1024 + 131;
  p.plan = PruningPlan::dense(p.config.n_layers);
  p.plan.provenance = "manual";
  for (int l = 12; l < 24; ++l) {
    p.plan.entry(l, model::TaskType::T2I) = {RouteMode::ROUTED, 0.8};
    p.plan.entry(l, model::TaskType::MMU) = {RouteMode::ROUTED, 0.2};
  }
  return p;
}

// 32-layer 4096-wide model; the last 16 layers route both tasks at 0.2
// capacity (80% of tokens pruned).
inline Preset emu3_preset() {
  Preset p;
  p.name = "emu3";
  p.config.n_layers = 32;
  p.config.d_model = 4096;
  p.config.n_heads = 32;
  p.config.d_ffn = 14336;
  p.config.text_vocab = 151643;
  p.config.image_vocab = 32768;
  p.config.max_seq = 4352;
  p.t2i_seq = 4096 + 256;
  p.mmu_seq = 4096 + 256;
  p.plan = PruningPlan::dense(p.config.n_layers);
  p.plan.provenance = "manual";
  for (int l = 16; l < 32; ++l) {
    p.plan.entry(l, model::TaskType::T2I) = {RouteMode::ROUTED, 0.2};
    p.plan.entry(l, model::TaskType::MMU) = {RouteMode::ROUTED, 0.2};
  }
  return p;
}

}  // namespace unimod::planner
