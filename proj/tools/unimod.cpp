// Command-line front end: training runs, profiling passes, plan construction,
// FLOP reports, and the baseline comparison suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unimod/accounting.hpp"
#include "unimod/harness.hpp"
#include "unimod/planner.hpp"
#include "unimod/profiler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unimod;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "experiment config (JSON)");
  cmd->add_option("--seed", a.seed, "override the config seed");
  cmd->add_option("--precision", a.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", a.out_dir, "output directory");
}

harness::ExperimentConfig load_config(const CommonArgs& a) {
  harness::ExperimentConfig ec;
  if (!a.config_path.empty()) {
    std::ifstream f(a.config_path);
    if (!f) throw Error("cannot open config " + a.config_path);
    ec = harness::experiment_from_json(json::parse(f));
  }
  if (a.seed) ec.seed = *a.seed;
  ec.validate();
  return ec;
}

// Writes `text` to out_dir/name when an output directory is given, otherwise
// to stdout.
void emit(const CommonArgs& a, const std::string& name,
          const std::string& text) {
  if (a.out_dir.empty()) {
    std::cout << text;
    return;
  }
  fs::create_directories(a.out_dir);
  const fs::path p = fs::path(a.out_dir) / name;
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot open " + p.string());
  f << text;
  std::cout << json{{"written", p.string()}}.dump() << "\n";
}

// Held-out profiling samples, one sequence per batch, from the eval stream.
template <class S>
struct ProfiledModel {
  model::ModelParams<S> params;
  std::vector<model::TaskBatch> t2i, mmu;
};

template <class S>
ProfiledModel<S> profiling_setup(const harness::ExperimentConfig& ec,
                                 int n_samples,
                                 const std::string& checkpoint_dir) {
  RandomStream root(ec.seed);
  RandomStream init = root.child(harness::kInitTag);
  RandomStream eval = root.child(harness::kEvalTag);
  ProfiledModel<S> pm{model::ModelParams<S>::init(ec.model, init), {}, {}};
  if (!checkpoint_dir.empty()) {
    auto routers = routing::RouterSet<S>::init(ec.model, init);
    harness::load_checkpoint<S>(checkpoint_dir, ec, pm.params, routers);
  }
  const harness::Cipher cipher = harness::Cipher::make(ec.model, ec.data);
  harness::DataSettings ds = ec.data;
  ds.batch_size = 1;
  for (int i = 0; i < n_samples; ++i) {
    pm.t2i.push_back(harness::gen_synthetic_batch(model::TaskType::T2I,
                                                  ec.model, ds, cipher, eval));
    pm.mmu.push_back(harness::gen_synthetic_batch(model::TaskType::MMU,
                                                  ec.model, ds, cipher, eval));
  }
  return pm;
}

template <class S>
int cmd_train(const CommonArgs& a, const std::string& resume) {
  harness::ExperimentConfig ec = load_config(a);
  harness::TrainOptions opts;
  if (!a.out_dir.empty()) opts.out_dir = a.out_dir;
  if (!resume.empty()) opts.resume_from = resume;
  harness::TrainResult<S> res = harness::train<S>(ec, opts);
  json summary{{"method", harness::method_name(ec.method)},
               {"steps", res.final_step},
               {"cumulative_flops", res.cumulative_flops}};
  if (!res.metrics.empty()) {
    const auto& last = res.metrics.back();
    summary["final_train_loss"] = last.train_loss;
    if (last.eval_loss_t2i) {
      summary["eval"] = {
          {"t2i", {{"loss", *last.eval_loss_t2i}, {"exact_match", *last.eval_em_t2i}}},
          {"mmu", {{"loss", *last.eval_loss_mmu}, {"exact_match", *last.eval_em_mmu}}}};
    }
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

template <class S>
int cmd_profile_arank(const CommonArgs& a, int n_samples, double rel_tol,
                      const std::string& checkpoint) {
  harness::ExperimentConfig ec = load_config(a);
  ProfiledModel<S> pm = profiling_setup<S>(ec, n_samples, checkpoint);
  std::ostringstream out;
  profiler::write_arank_csv(
      profiler::compute_arank(pm.params, pm.t2i, model::TaskType::T2I, rel_tol),
      out);
  std::ostringstream header_stripped;
  profiler::write_arank_csv(
      profiler::compute_arank(pm.params, pm.mmu, model::TaskType::MMU, rel_tol),
      header_stripped);
  std::string second = header_stripped.str();
  out << second.substr(second.find('\n') + 1);  // one header for both tasks
  emit(a, "arank.csv", out.str());
  return 0;
}

template <class S>
int cmd_profile_attn(const CommonArgs& a, int n_samples,
                     const std::string& checkpoint) {
  harness::ExperimentConfig ec = load_config(a);
  ProfiledModel<S> pm = profiling_setup<S>(ec, n_samples, checkpoint);
  std::ostringstream out;
  profiler::write_attn_csv(
      profiler::attention_weight_stats(pm.params, pm.t2i, model::TaskType::T2I),
      out);
  std::ostringstream second_buf;
  profiler::write_attn_csv(
      profiler::attention_weight_stats(pm.params, pm.mmu, model::TaskType::MMU),
      second_buf);
  std::string second = second_buf.str();
  out << second.substr(second.find('\n') + 1);
  emit(a, "attn.csv", out.str());
  return 0;
}

template <class S>
int cmd_probe_skip(const CommonArgs& a, int n_samples,
                   const std::string& checkpoint) {
  harness::ExperimentConfig ec = load_config(a);
  ProfiledModel<S> pm = profiling_setup<S>(ec, n_samples, checkpoint);
  json rows = json::array();
  for (auto [task, batches] :
       {std::pair{model::TaskType::T2I, &pm.t2i},
        std::pair{model::TaskType::MMU, &pm.mmu}}) {
    for (int l = 0; l < ec.model.n_layers; ++l) {
      profiler::SkipProbeEntry e =
          profiler::skip_layer_probe(pm.params, *batches, l);
      rows.push_back({{"layer", l},
                      {"task", model::task_name(task)},
                      {"baseline_loss", e.baseline.loss},
                      {"baseline_exact_match", e.baseline.exact_match},
                      {"skipped_loss", e.skipped.loss},
                      {"skipped_exact_match", e.skipped.exact_match},
                      {"loss_delta", e.skipped.loss - e.baseline.loss}});
    }
  }
  emit(a, "skip_probe.json", rows.dump(2) + "\n");
  return 0;
}

template <class S>
int cmd_plan(const CommonArgs& a, int n_samples, int k_layers,
             const std::string& rule_name, double rel_tol,
             const std::string& checkpoint) {
  harness::ExperimentConfig ec = load_config(a);
  ProfiledModel<S> pm = profiling_setup<S>(ec, n_samples, checkpoint);
  const planner::SelectionRule rule = rule_name == "highest"
                                          ? planner::SelectionRule::HIGHEST_ARANK
                                          : planner::SelectionRule::LOWEST_ARANK;
  const int k = k_layers >= 0 ? k_layers : ec.model.n_layers / 2;
  planner::PruningPlan plan = planner::build_plan(
      profiler::compute_arank(pm.params, pm.t2i, model::TaskType::T2I, rel_tol),
      profiler::compute_arank(pm.params, pm.mmu, model::TaskType::MMU, rel_tol),
      k, rule);
  emit(a, "plan.json", plan.to_json().dump(2) + "\n");
  return 0;
}

int cmd_flops(const CommonArgs& a, const std::string& preset_name,
              const std::string& plan_path, int batch_size) {
  model::ModelConfig cfg;
  planner::PruningPlan plan;
  Index t2i_seq = 0, mmu_seq = 0;
  if (!preset_name.empty()) {
    planner::Preset p = preset_name == "showo" ? planner::showo_preset()
                        : preset_name == "emu3"
                            ? planner::emu3_preset()
                            : throw ContractError("unknown preset '" +
                                                  preset_name + "'");
    cfg = p.config;
    plan = p.plan;
    t2i_seq = p.t2i_seq;
    mmu_seq = p.mmu_seq;
  } else {
    harness::ExperimentConfig ec = load_config(a);
    cfg = ec.model;
    plan = harness::plan_for(ec);
    t2i_seq = ec.data.n_text + ec.data.n_image;
    mmu_seq = t2i_seq;
  }
  if (!plan_path.empty()) {
    std::ifstream f(plan_path);
    if (!f) throw Error("cannot open plan " + plan_path);
    plan = planner::PruningPlan::from_json(json::parse(f));
  }
  accounting::FlopReport rep =
      accounting::model_flops(cfg, plan, t2i_seq, mmu_seq, batch_size);
  accounting::print_report_table(rep, std::cout);
  emit(a, "flops.json", accounting::report_json(rep).dump(2) + "\n");
  return 0;
}

template <class S>
int cmd_suite(const CommonArgs& a, const std::vector<std::string>& methods) {
  harness::ExperimentConfig ec = load_config(a);
  std::vector<harness::Method> ms;
  if (methods.empty()) {
    ms = {harness::Method::DENSE, harness::Method::LAYERSKIP,
          harness::Method::EARLYEXIT, harness::Method::BASIC_MOD,
          harness::Method::INTERLEAVED_ROUTERS, harness::Method::SINGLE_ROUTER,
          harness::Method::UNIMOD, harness::Method::GUMBEL_COMPETITIVE};
  } else {
    for (const auto& m : methods) ms.push_back(harness::method_from(m));
  }
  harness::SuiteResult res = harness::run_baseline_suite<S>(ec, ms);
  res.print_table(std::cout);
  emit(a, "suite.json", res.to_json().dump(2) + "\n");
  return 0;
}

template <class F32, class F64>
int dispatch(const std::string& precision, F32&& f32, F64&& f64) {
  return precision == "f32" ? f32() : f64();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"task-aware mixture-of-depths laboratory"};
  app.require_subcommand(1);

  CommonArgs train_a, arank_a, attn_a, probe_a, plan_a, flops_a, suite_a;
  std::string resume, arank_ckpt, attn_ckpt, probe_ckpt, plan_ckpt;
  int arank_n = 4, attn_n = 4, probe_n = 8, plan_n = 4;
  double arank_tol = 1e-6, plan_tol = 1e-6;
  int plan_k = -1;
  std::string plan_rule = "lowest";
  std::string preset, plan_path;
  int flops_batch = 1;
  std::vector<std::string> suite_methods;

  auto* train_cmd = app.add_subcommand("train", "run one training experiment");
  add_common(train_cmd, train_a);
  train_cmd->add_option("--resume", resume, "checkpoint directory to resume");

  auto* arank_cmd =
      app.add_subcommand("profile-arank", "attention-rank profile per layer");
  add_common(arank_cmd, arank_a);
  arank_cmd->add_option("--samples", arank_n, "sequences per task");
  arank_cmd->add_option("--rel-tol", arank_tol, "rank tolerance");
  arank_cmd->add_option("--checkpoint", arank_ckpt, "profile a trained model");

  auto* attn_cmd = app.add_subcommand(
      "profile-attn", "attention mass received per modality");
  add_common(attn_cmd, attn_a);
  attn_cmd->add_option("--samples", attn_n, "sequences per task");
  attn_cmd->add_option("--checkpoint", attn_ckpt, "profile a trained model");

  auto* probe_cmd = app.add_subcommand(
      "probe-skip", "held-out impact of skipping each layer");
  add_common(probe_cmd, probe_a);
  probe_cmd->add_option("--samples", probe_n, "sequences per task");
  probe_cmd->add_option("--checkpoint", probe_ckpt, "probe a trained model");

  auto* plan_cmd =
      app.add_subcommand("plan", "derive a pruning plan from rank profiles");
  add_common(plan_cmd, plan_a);
  plan_cmd->add_option("--samples", plan_n, "sequences per task");
  plan_cmd->add_option("--k", plan_k, "routed layers per task (default n/2)");
  plan_cmd->add_option("--rule", plan_rule, "lowest or highest")
      ->check(CLI::IsMember({"lowest", "highest"}));
  plan_cmd->add_option("--rel-tol", plan_tol, "rank tolerance");
  plan_cmd->add_option("--checkpoint", plan_ckpt, "plan from a trained model");

  auto* flops_cmd =
      app.add_subcommand("flops", "analytical compute report for a plan");
  add_common(flops_cmd, flops_a);
  flops_cmd->add_option("--preset", preset, "showo or emu3");
  flops_cmd->add_option("--plan", plan_path, "plan JSON overriding the config");
  flops_cmd->add_option("--batch", flops_batch, "batch size per task");

  auto* suite_cmd =
      app.add_subcommand("suite", "train and compare the baseline methods");
  add_common(suite_cmd, suite_a);
  suite_cmd->add_option("--methods", suite_methods,
                        "subset of methods (default: all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd)
      return dispatch(train_a.precision,
                      [&] { return cmd_train<float>(train_a, resume); },
                      [&] { return cmd_train<double>(train_a, resume); });
    if (*arank_cmd)
      return dispatch(
          arank_a.precision,
          [&] { return cmd_profile_arank<float>(arank_a, arank_n, arank_tol,
                                                arank_ckpt); },
          [&] { return cmd_profile_arank<double>(arank_a, arank_n, arank_tol,
                                                 arank_ckpt); });
    if (*attn_cmd)
      return dispatch(
          attn_a.precision,
          [&] { return cmd_profile_attn<float>(attn_a, attn_n, attn_ckpt); },
          [&] { return cmd_profile_attn<double>(attn_a, attn_n, attn_ckpt); });
    if (*probe_cmd)
      return dispatch(
          probe_a.precision,
          [&] { return cmd_probe_skip<float>(probe_a, probe_n, probe_ckpt); },
          [&] { return cmd_probe_skip<double>(probe_a, probe_n, probe_ckpt); });
    if (*plan_cmd)
      return dispatch(
          plan_a.precision,
          [&] { return cmd_plan<float>(plan_a, plan_n, plan_k, plan_rule,
                                       plan_tol, plan_ckpt); },
          [&] { return cmd_plan<double>(plan_a, plan_n, plan_k, plan_rule,
                                        plan_tol, plan_ckpt); });
    if (*flops_cmd) return cmd_flops(flops_a, preset, plan_path, flops_batch);
    if (*suite_cmd)
      return dispatch(suite_a.precision,
                      [&] { return cmd_suite<float>(suite_a, suite_methods); },
                      [&] { return cmd_suite<double>(suite_a, suite_methods); });
  } catch (const std::exception& e) {
    const char* kind = dynamic_cast<const ContractError*>(&e)   ? "contract"
                       : dynamic_cast<const ShapeError*>(&e)    ? "shape"
                       : dynamic_cast<const VocabularyError*>(&e) ? "vocabulary"
                       : dynamic_cast<const Error*>(&e)         ? "runtime"
                                                                : "internal";
    std::cerr << json{{"error", {{"type", kind}, {"message", e.what()}}}}.dump()
              << "\n";
    return 1;
  }
  return 0;
}
