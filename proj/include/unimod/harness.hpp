#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "unimod/accounting.hpp"
#include "unimod/errors.hpp"
#include "unimod/io.hpp"
#include "unimod/model.hpp"
#include "unimod/planner.hpp"
#include "unimod/random.hpp"
#include "unimod/routing.hpp"
#include "unimod/tensor.hpp"

namespace unimod::harness {

// Child-stream tags; fixed so checkpoints can name stream positions.
inline constexpr std::uint64_t kInitTag = 1;
inline constexpr std::uint64_t kDataTag = 2;
inline constexpr std::uint64_t kGumbelTag = 3;
inline constexpr std::uint64_t kEvalTag = 4;

// ---------------------------------------------------------------------------
// Synthetic two-task data: text is uniform noise; image tokens are a fixed
// position-dependent permutation cipher of the text (image[j] depends only on
// text[j mod n_text]), so both directions of the task are learnable.

struct DataSettings {
  Index n_text = 8;
  Index n_image = 16;
  int batch_size = 10;
  bool emu3_style = false;  // false: T2I uses MTP, MMU uses NTP; true: AR both
  double mask_lo = 0.3;
  double mask_hi = 1.0;
  std::uint64_t cipher_seed = 1234;  // fixes the task rule, not the samples

  void validate(const model::ModelConfig& cfg) const {
    if (n_text < 1 || n_image < 1)
      throw ContractError("data: need at least one token of each modality");
    if (n_text + n_image > cfg.max_seq)
      throw ContractError("data: sequence length " +
                          std::to_string(n_text + n_image) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
    if (batch_size < 1) throw ContractError("data: batch_size must be >= 1");
    if (!(mask_lo > 0.0 && mask_lo <= mask_hi && mask_hi <= 1.0))
      throw ContractError("data: mask ratio range must satisfy 0 < lo <= hi <= 1");
  }
};

struct Cipher {
  // perm[j][s]: image-codebook index carried at image position j for text
  // symbol s. Injective per position so the text is recoverable.
  std::vector<std::vector<int>> perm;
  std::vector<std::vector<int>> inverse;  // [j][code] -> symbol or -1

  static Cipher make(const model::ModelConfig& cfg, const DataSettings& ds) {
    if (cfg.image_vocab < cfg.text_vocab)
      throw ContractError("cipher: image vocab must not be smaller than text "
                          "vocab (injectivity)");
    Cipher c;
    RandomStream root(ds.cipher_seed);
    c.perm.resize(static_cast<std::size_t>(ds.n_image));
    c.inverse.resize(static_cast<std::size_t>(ds.n_image));
    for (Index j = 0; j < ds.n_image; ++j) {
      RandomStream rj = root.child(static_cast<std::uint64_t>(j));
      std::vector<int> codes(static_cast<std::size_t>(cfg.image_vocab));
      std::iota(codes.begin(), codes.end(), 0);
      for (std::size_t i = codes.size(); i > 1; --i)
        std::swap(codes[i - 1], codes[rj.uniform_int(i)]);
      auto& p = c.perm[static_cast<std::size_t>(j)];
      p.assign(codes.begin(), codes.begin() + cfg.text_vocab);
      auto& inv = c.inverse[static_cast<std::size_t>(j)];
      inv.assign(static_cast<std::size_t>(cfg.image_vocab), -1);
      for (int s = 0; s < static_cast<int>(cfg.text_vocab); ++s)
        inv[static_cast<std::size_t>(p[static_cast<std::size_t>(s)])] = s;
    }
    return c;
  }

  // image position is block-local (0 .. n_image-1)
  int encode(Index image_pos, int text_sym) const {
    return perm[static_cast<std::size_t>(image_pos)]
               [static_cast<std::size_t>(text_sym)];
  }
  int decode(Index image_pos, int code) const {
    return inverse[static_cast<std::size_t>(image_pos)]
                  [static_cast<std::size_t>(code)];
  }
};

inline model::TaskBatch gen_synthetic_batch(model::TaskType task,
                                            const model::ModelConfig& cfg,
                                            const DataSettings& ds,
                                            const Cipher& cipher,
                                            RandomStream& stream) {
  ds.validate(cfg);
  using namespace model;
  const Index n = ds.n_text, m = ds.n_image;
  TaskBatch b;
  b.task = task;

  if (task == TaskType::T2I) {
    b.modality.assign(static_cast<std::size_t>(n), Modality::TEXT);
    b.modality.insert(b.modality.end(), static_cast<std::size_t>(m),
                      Modality::IMAGE);
    if (ds.emu3_style) {
      b.mask_mode = MaskMode::CAUSAL;
      b.objective = Objective::AR;
    } else {
      b.mask_mode = MaskMode::CAUSAL_WITH_FULL_IMAGE_BLOCK;
      b.objective = Objective::MTP;
      b.image_block_start = n;
      b.image_block_len = m;
    }
  } else {
    b.modality.assign(static_cast<std::size_t>(m), Modality::IMAGE);
    b.modality.insert(b.modality.end(), static_cast<std::size_t>(n),
                      Modality::TEXT);
    b.mask_mode = MaskMode::CAUSAL;
    b.objective = ds.emu3_style ? Objective::AR : Objective::NTP;
  }

  for (int s = 0; s < ds.batch_size; ++s) {
    std::vector<int> text(static_cast<std::size_t>(n));
    for (int& t : text)
      t = static_cast<int>(stream.uniform_int(
          static_cast<std::uint64_t>(cfg.text_vocab)));
    auto image_id = [&](Index jb) {
      return static_cast<int>(cfg.text_vocab) +
             cipher.encode(jb, text[static_cast<std::size_t>(jb % n)]);
    };

    std::vector<int> toks, targets(static_cast<std::size_t>(n + m), 0);
    std::vector<std::uint8_t> lm(static_cast<std::size_t>(n + m), 0);
    if (task == TaskType::T2I) {
      for (int t : text) toks.push_back(t);
      if (ds.emu3_style) {
        for (Index j = 0; j < m; ++j) {
          toks.push_back(image_id(j));
          lm[static_cast<std::size_t>(n + j)] = 1;
        }
      } else {
        const double rho = stream.uniform(ds.mask_lo, ds.mask_hi);
        std::vector<bool> masked(static_cast<std::size_t>(m), false);
        bool any = false;
        for (Index j = 0; j < m; ++j) {
          masked[static_cast<std::size_t>(j)] = stream.uniform() < rho;
          any = any || masked[static_cast<std::size_t>(j)];
        }
        if (!any)
          masked[stream.uniform_int(static_cast<std::uint64_t>(m))] = true;
        for (Index j = 0; j < m; ++j) {
          if (masked[static_cast<std::size_t>(j)]) {
            toks.push_back(static_cast<int>(cfg.mask_token_id()));
            targets[static_cast<std::size_t>(n + j)] = image_id(j);
            lm[static_cast<std::size_t>(n + j)] = 1;
          } else {
            toks.push_back(image_id(j));
          }
        }
      }
    } else {
      for (Index j = 0; j < m; ++j) toks.push_back(image_id(j));
      for (Index i = 0; i < n; ++i) {
        toks.push_back(text[static_cast<std::size_t>(i)]);
        lm[static_cast<std::size_t>(m + i)] = 1;
      }
    }
    b.tokens.push_back(std::move(toks));
    b.loss_mask.push_back(std::move(lm));
    b.mtp_targets.push_back(std::move(targets));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Experiment configuration.

enum class Method {
  DENSE,
  LAYERSKIP,
  EARLYEXIT,
  BASIC_MOD,
  INTERLEAVED_ROUTERS,
  SINGLE_ROUTER,
  UNIMOD,
  GUMBEL_COMPETITIVE,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::DENSE: return "dense";
    case Method::LAYERSKIP: return "layerskip";
    case Method::EARLYEXIT: return "earlyexit";
    case Method::BASIC_MOD: return "basic_mod";
    case Method::INTERLEAVED_ROUTERS: return "interleaved_routers";
    case Method::SINGLE_ROUTER: return "single_router";
    case Method::UNIMOD: return "unimod";
    case Method::GUMBEL_COMPETITIVE: return "gumbel_competitive";
  }
  return "?";
}

inline Method method_from(const std::string& s) {
  for (Method m : {Method::DENSE, Method::LAYERSKIP, Method::EARLYEXIT,
                   Method::BASIC_MOD, Method::INTERLEAVED_ROUTERS,
                   Method::SINGLE_ROUTER, Method::UNIMOD,
                   Method::GUMBEL_COMPETITIVE})
    if (s == method_name(m)) return m;
  throw ContractError("unknown method '" + s + "'");
}

struct ScheduleSettings {
  bool enabled = false;
  model::TaskType task = model::TaskType::MMU;
  planner::CapacitySchedule schedule;
};

struct ExperimentConfig {
  model::ModelConfig model;
  Method method = Method::DENSE;
  double capacity = 0.5;      // routed capacity for the MoD methods
  double capacity_t2i = -1;   // per-task overrides; -1 falls back to capacity
  double capacity_mmu = -1;
  int exit_layer = -1;        // EARLYEXIT; -1 means n_layers / 2
  std::optional<planner::PruningPlan> plan;  // explicit plan override
  ScheduleSettings schedule;
  double lr = 0.05;
  std::int64_t steps = 2000;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 100;
  int eval_sequences = 32;  // held-out sequences per task
  double gumbel_target = 0.5;
  double gumbel_temperature = 1.0;
  double aux_weight = 1.0;
  DataSettings data;

  int effective_exit_layer() const {
    return exit_layer >= 0 ? exit_layer : model.n_layers / 2;
  }
  double effective_capacity(model::TaskType t) const {
    const double c = t == model::TaskType::T2I ? capacity_t2i : capacity_mmu;
    return c >= 0.0 ? c : capacity;
  }

  void validate() const {
    model.validate();
    data.validate(model);
    for (model::TaskType t : {model::TaskType::T2I, model::TaskType::MMU}) {
      const double c = effective_capacity(t);
      if (!(c > 0.0 && c <= 1.0))
        throw ContractError("experiment: capacity outside (0,1]");
    }
    if (steps < 0) throw ContractError("experiment: negative step count");
    if (lr <= 0.0) throw ContractError("experiment: step size must be positive");
    if (eval_every < 1) throw ContractError("experiment: eval_every must be >= 1");
    if (eval_sequences < 1)
      throw ContractError("experiment: eval_sequences must be >= 1");
    if (method == Method::EARLYEXIT &&
        (effective_exit_layer() < 1 || effective_exit_layer() > model.n_layers))
      throw ContractError("experiment: exit layer outside [1, n_layers]");
    if (!(gumbel_target > 0.0 && gumbel_target < 1.0))
      throw ContractError("experiment: gumbel target outside (0,1)");
    if (gumbel_temperature <= 0.0)
      throw ContractError("experiment: gumbel temperature must be positive");
    if (schedule.enabled) check_schedule(schedule.schedule);
    if (plan) {
      if (plan->n_layers != model.n_layers)
        throw ContractError("experiment: plan layer count mismatch");
      plan->validate();
    }
  }
};

inline nlohmann::json model_config_json(const model::ModelConfig& c) {
  return nlohmann::json{
      {"n_layers", c.n_layers},   {"d_model", c.d_model},
      {"n_heads", c.n_heads},     {"d_ffn", c.d_ffn},
      {"text_vocab", c.text_vocab}, {"image_vocab", c.image_vocab},
      {"max_seq", c.max_seq},
      {"activation", c.activation == model::Activation::GELU ? "gelu" : "identity"},
      {"ln_eps", c.ln_eps}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.text_vocab = j.value("text_vocab", c.text_vocab);
  c.image_vocab = j.value("image_vocab", c.image_vocab);
  c.max_seq = j.value("max_seq", c.max_seq);
  const std::string act = j.value("activation", "gelu");
  if (act == "gelu")
    c.activation = model::Activation::GELU;
  else if (act == "identity")
    c.activation = model::Activation::IDENTITY;
  else
    throw ContractError("unknown activation '" + act + "'");
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  return c;
}

inline nlohmann::json experiment_json(const ExperimentConfig& ec) {
  nlohmann::json j;
  j["model"] = model_config_json(ec.model);
  j["method"] = method_name(ec.method);
  j["capacity"] = ec.capacity;
  j["capacity_t2i"] = ec.capacity_t2i;
  j["capacity_mmu"] = ec.capacity_mmu;
  j["exit_layer"] = ec.exit_layer;
  if (ec.plan) j["plan"] = ec.plan->to_json();
  if (ec.schedule.enabled)
    j["schedule"] = {{"task", model::task_name(ec.schedule.task)},
                     {"c_start", ec.schedule.schedule.c_start},
                     {"c_end", ec.schedule.schedule.c_end},
                     {"total_steps", ec.schedule.schedule.total_steps}};
  j["lr"] = ec.lr;
  j["steps"] = ec.steps;
  j["seed"] = ec.seed;
  j["eval_every"] = ec.eval_every;
  j["eval_sequences"] = ec.eval_sequences;
  j["gumbel"] = {{"target", ec.gumbel_target},
                 {"temperature", ec.gumbel_temperature},
                 {"aux_weight", ec.aux_weight}};
  j["data"] = {{"n_text", ec.data.n_text},
               {"n_image", ec.data.n_image},
               {"batch_size", ec.data.batch_size},
               {"emu3_style", ec.data.emu3_style},
               {"mask_lo", ec.data.mask_lo},
               {"mask_hi", ec.data.mask_hi},
               {"cipher_seed", ec.data.cipher_seed}};
  return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig ec;
  if (j.contains("model")) ec.model = model_config_from_json(j.at("model"));
  ec.method = method_from(j.value("method", "dense"));
  ec.capacity = j.value("capacity", ec.capacity);
  ec.capacity_t2i = j.value("capacity_t2i", ec.capacity_t2i);
  ec.capacity_mmu = j.value("capacity_mmu", ec.capacity_mmu);
  ec.exit_layer = j.value("exit_layer", ec.exit_layer);
  if (j.contains("plan"))
    ec.plan = planner::PruningPlan::from_json(j.at("plan"));
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    ec.schedule.enabled = true;
    const std::string task = s.value("task", "mmu");
    if (task != "t2i" && task != "mmu")
      throw ContractError("schedule: unknown task '" + task + "'");
    ec.schedule.task =
        task == "t2i" ? model::TaskType::T2I : model::TaskType::MMU;
    ec.schedule.schedule.c_start = s.value("c_start", 1.0);
    ec.schedule.schedule.c_end = s.value("c_end", 0.2);
    ec.schedule.schedule.total_steps = s.value("total_steps", std::int64_t{1});
  }
  ec.lr = j.value("lr", ec.lr);
  ec.steps = j.value("steps", ec.steps);
  ec.seed = j.value("seed", ec.seed);
  ec.eval_every = j.value("eval_every", ec.eval_every);
  ec.eval_sequences = j.value("eval_sequences", ec.eval_sequences);
  if (j.contains("gumbel")) {
    const auto& g = j.at("gumbel");
    ec.gumbel_target = g.value("target", ec.gumbel_target);
    ec.gumbel_temperature = g.value("temperature", ec.gumbel_temperature);
    ec.aux_weight = g.value("aux_weight", ec.aux_weight);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    ec.data.n_text = d.value("n_text", ec.data.n_text);
    ec.data.n_image = d.value("n_image", ec.data.n_image);
    ec.data.batch_size = d.value("batch_size", ec.data.batch_size);
    ec.data.emu3_style = d.value("emu3_style", ec.data.emu3_style);
    ec.data.mask_lo = d.value("mask_lo", ec.data.mask_lo);
    ec.data.mask_hi = d.value("mask_hi", ec.data.mask_hi);
    ec.data.cipher_seed = d.value("cipher_seed", ec.data.cipher_seed);
  }
  ec.validate();
  return ec;
}

// Method-derived plan. All MoD variants route n_layers/2 layers at the same
// capacity, so they share one aggregate pruning rate; they differ in where
// the routed layers sit and in router sharing.
inline planner::PruningPlan plan_for(const ExperimentConfig& ec) {
  using planner::PruningPlan;
  using planner::RouteMode;
  if (ec.plan) return *ec.plan;
  const int n = ec.model.n_layers;
  PruningPlan plan = PruningPlan::dense(n);
  auto skip_both = [&](int l) {
    plan.entry(l, model::TaskType::T2I) = {RouteMode::SKIP, 1.0};
    plan.entry(l, model::TaskType::MMU) = {RouteMode::SKIP, 1.0};
  };
  auto route_both = [&](int l) {
    for (model::TaskType t : {model::TaskType::T2I, model::TaskType::MMU})
      plan.entry(l, t) = {RouteMode::ROUTED, ec.effective_capacity(t)};
  };
  switch (ec.method) {
    case Method::DENSE:
    case Method::GUMBEL_COMPETITIVE:
      break;
    case Method::LAYERSKIP:
      for (int l = 1; l < n; l += 2) skip_both(l);
      break;
    case Method::EARLYEXIT:
      for (int l = ec.effective_exit_layer(); l < n; ++l) skip_both(l);
      break;
    case Method::BASIC_MOD:
    case Method::INTERLEAVED_ROUTERS:
      for (int l = 1; l < n; l += 2) route_both(l);
      break;
    case Method::SINGLE_ROUTER:
    case Method::UNIMOD:
      for (int l = n - n / 2; l < n; ++l) route_both(l);
      break;
  }
  plan.provenance = method_name(ec.method);
  return plan;
}

inline routing::RouterArrangement arrangement_for(Method m) {
  return (m == Method::BASIC_MOD || m == Method::SINGLE_ROUTER)
             ? routing::RouterArrangement::SHARED
             : routing::RouterArrangement::PER_TASK;
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRecord {
  std::int64_t step = 0;
  model::TaskType task = model::TaskType::T2I;
  double train_loss = 0.0;
  std::optional<double> aux_loss;
  std::vector<double> keep_rate;  // realized, per layer, for this batch's task
  double cumulative_flops = 0.0;
  std::optional<double> eval_loss_t2i, eval_em_t2i;
  std::optional<double> eval_loss_mmu, eval_em_mmu;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step},
                     {"task", model::task_name(task)},
                     {"train_loss", train_loss},
                     {"keep_rate", keep_rate},
                     {"cumulative_flops", cumulative_flops}};
    if (aux_loss) j["aux_loss"] = *aux_loss;
    if (eval_loss_t2i) {
      j["eval"] = {{"t2i",
                    {{"loss", *eval_loss_t2i}, {"exact_match", *eval_em_t2i}}},
                   {"mmu",
                    {{"loss", *eval_loss_mmu}, {"exact_match", *eval_em_mmu}}}};
    }
    return j;
  }
};

inline constexpr const char* kMetricsSchema = "unimod.metrics.v1";
inline constexpr const char* kCheckpointSchema = "unimod.checkpoint.v1";

// ---------------------------------------------------------------------------
// Checkpoints: tensor dump + a json sidecar carrying step, stream positions,
// and the full experiment config.

template <class S>
std::vector<NamedTensorRef> checkpoint_refs(model::ModelParams<S>& params,
                                            routing::RouterSet<S>& routers) {
  std::vector<NamedTensorRef> refs;
  for (auto& [name, t] : params.named_params())
    refs.push_back(named_ref(name, *t));
  for (auto& [name, t] : routers.named_params())
    refs.push_back(named_ref(name, *t));
  return refs;
}

template <class S>
void save_checkpoint(const std::filesystem::path& dir,
                     const ExperimentConfig& ec,
                     model::ModelParams<S>& params,
                     routing::RouterSet<S>& routers, std::int64_t step,
                     double cumulative_flops, std::uint64_t data_counter,
                     std::uint64_t gumbel_counter) {
  write_tensor_dump(dir, checkpoint_refs(params, routers));
  nlohmann::json j;
  j["schema"] = kCheckpointSchema;
  j["dtype"] = dtype_name<S>();
  j["step"] = step;
  j["cumulative_flops"] = cumulative_flops;
  j["streams"] = {{"data", data_counter}, {"gumbel", gumbel_counter}};
  j["config"] = experiment_json(ec);
  std::ofstream f(dir / "checkpoint.json", std::ios::trunc);
  if (!f) throw Error("cannot open " + (dir / "checkpoint.json").string());
  f << j.dump(2) << "\n";
}

struct ResumeState {
  std::int64_t step = 0;
  double cumulative_flops = 0.0;
  std::uint64_t data_counter = 0;
  std::uint64_t gumbel_counter = 0;
};

template <class S>
ResumeState load_checkpoint(const std::filesystem::path& dir,
                            const ExperimentConfig& ec,
                            model::ModelParams<S>& params,
                            routing::RouterSet<S>& routers) {
  std::ifstream f(dir / "checkpoint.json");
  if (!f) throw Error("cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json j = nlohmann::json::parse(f);
  if (j.value("schema", "") != kCheckpointSchema)
    throw Error("unrecognized checkpoint schema in " + dir.string());
  if (j.value("dtype", "") != dtype_name<S>())
    throw Error("checkpoint precision mismatch");
  // `steps` is a stop budget, not part of the experiment identity; a resumed
  // run may extend it.
  nlohmann::json want = experiment_json(ec);
  nlohmann::json got = j.at("config");
  want.erase("steps");
  got.erase("steps");
  if (got != want)
    throw ContractError(
        "checkpoint was produced by a different experiment config");
  auto dumped = read_tensor_dump<S>(dir);
  auto assign = [&](const std::string& name, Tensor<S>* dst) {
    for (auto& [n, t] : dumped)
      if (n == name) {
        if (t.shape() != dst->shape())
          throw Error("checkpoint shape mismatch for " + name);
        dst->raw() = t.raw();
        return;
      }
    throw Error("checkpoint missing tensor " + name);
  };
  for (auto& [name, t] : params.named_params()) assign(name, t);
  for (auto& [name, t] : routers.named_params()) assign(name, t);
  ResumeState rs;
  rs.step = j.at("step").get<std::int64_t>();
  rs.cumulative_flops = j.at("cumulative_flops").get<double>();
  rs.data_counter = j.at("streams").at("data").get<std::uint64_t>();
  rs.gumbel_counter = j.at("streams").at("gumbel").get<std::uint64_t>();
  return rs;
}

// ---------------------------------------------------------------------------
// Training.

template <class S>
struct TrainResult {
  model::ModelParams<S> params;
  routing::RouterSet<S> routers;
  std::vector<MetricsRecord> metrics;
  std::int64_t final_step = 0;
  double cumulative_flops = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;      // when set: metrics.jsonl + checkpoint/
  std::filesystem::path resume_from;  // when set: continue from a checkpoint
};

namespace detail {

inline planner::PruningPlan effective_plan(const planner::PruningPlan& base,
                                           const ScheduleSettings& sched,
                                           std::int64_t step) {
  if (!sched.enabled) return base;
  planner::PruningPlan plan = base;
  const double c = planner::capacity_at(sched.schedule, step);
  for (int l = 0; l < plan.n_layers; ++l) {
    planner::PlanEntry& e = plan.entry(l, sched.task);
    if (e.mode == planner::RouteMode::ROUTED) e.capacity = c;
  }
  return plan;
}

// Forward one sequence under the experiment's method. Fills per-layer
// retained-token counts (dense layers count every token).
template <class S>
Tensor<S> method_forward(const ExperimentConfig& ec,
                         model::ModelParams<S>& params,
                         routing::RouterSet<S>& routers,
                         const planner::PruningPlan& plan,
                         const model::TaskBatch& batch, std::size_t b,
                         std::vector<Index>& retained,
                         std::vector<Tensor<S>>* soft_rates,
                         RandomStream* gumbel_stream) {
  const model::ModelConfig& cfg = params.config;
  const Index L = batch.seq_len();
  retained.assign(static_cast<std::size_t>(cfg.n_layers), L);

  if (ec.method == Method::GUMBEL_COMPETITIVE) {
    const MaskMat mask = model::build_attn_mask(batch);
    Tensor<S> h = model::embed_sequence(params, batch, b);
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& router = routers.router_for(l, batch.task,
                                        routing::RouterArrangement::PER_TASK);
      routing::GumbelLayerResult<S> res;
      if (gumbel_stream) {
        res = routing::gumbel_layer_forward(h, mask,
                                            params.layers[static_cast<std::size_t>(l)],
                                            cfg, router, ec.gumbel_temperature,
                                            *gumbel_stream);
      } else {
        // deterministic eval policy: zero noise, keep iff score > 0.5
        Tensor<S> zk = Tensor<S>::zeros({L, 1});
        Tensor<S> zd = Tensor<S>::zeros({L, 1});
        routing::GumbelOut<S> g = routing::gumbel_router_forward(
            h, router, ec.gumbel_temperature, zk, zd);
        res.keep_rate = mean(g.y_keep);
        for (Index i = 0; i < L; ++i)
          if (g.keep[static_cast<std::size_t>(i)]) res.kept.push_back(i);
        if (res.kept.empty()) {
          res.hidden = h;
        } else {
          Tensor<S> sel = gather_rows(h, res.kept);
          Tensor<S> body = model::dense_layer_forward(
              sel, routing::detail::sub_mask(mask, res.kept),
              params.layers[static_cast<std::size_t>(l)], cfg);
          res.hidden = scatter_rows_into(h, res.kept, body);
        }
      }
      h = res.hidden;
      retained[static_cast<std::size_t>(l)] =
          static_cast<Index>(res.kept.size());
      if (soft_rates) soft_rates->push_back(res.keep_rate);
    }
    return model::head_logits(params, h);
  }

  routing::RouteOptions opts;
  opts.arrangement = arrangement_for(ec.method);
  routing::ForwardTrace<S> trace;
  Tensor<S> logits =
      routing::routed_forward_logits(params, batch, b, plan, routers, opts,
                                     &trace);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const planner::PlanEntry& e = plan.entry(l, batch.task);
    if (e.mode == planner::RouteMode::SKIP)
      retained[static_cast<std::size_t>(l)] = 0;
    else if (e.mode == planner::RouteMode::ROUTED)
      retained[static_cast<std::size_t>(l)] = static_cast<Index>(
          trace.layers[static_cast<std::size_t>(l)].decision.selected.size());
  }
  return logits;
}

template <class S>
void sgd_step(model::ModelParams<S>& params, routing::RouterSet<S>& routers,
              double lr) {
  auto update = [&](Tensor<S>* t) {
    if (t->has_grad()) t->raw() -= static_cast<S>(lr) * t->grad_raw();
    t->zero_grad();
  };
  for (auto& [name, t] : params.named_params()) update(t);
  for (auto& [name, t] : routers.named_params()) update(t);
}

}  // namespace detail

struct TaskEval {
  double loss = 0.0;
  double exact_match = 0.0;
};

template <class S>
TaskEval evaluate(const ExperimentConfig& ec, model::ModelParams<S>& params,
                  routing::RouterSet<S>& routers,
                  const planner::PruningPlan& plan,
                  const std::vector<model::TaskBatch>& eval_batches) {
  NoGradGuard ng;
  TaskEval ev;
  int n = 0, match = 0;
  double loss = 0.0;
  for (const auto& batch : eval_batches) {
    for (std::size_t b = 0; b < batch.batch_size(); ++b) {
      std::vector<Index> retained;
      Tensor<S> logits = detail::method_forward<S>(ec, params, routers, plan,
                                                   batch, b, retained, nullptr,
                                                   nullptr);
      loss += static_cast<double>(
          model::task_loss(logits, batch, b, params.config).item());
      match += model::sequence_exact_match(logits, batch, b, params.config);
      ++n;
    }
  }
  ev.loss = loss / n;
  ev.exact_match = static_cast<double>(match) / n;
  return ev;
}

template <class S>
TrainResult<S> train(const ExperimentConfig& ec,
                     const TrainOptions& opts = {}) {
  ec.validate();
  RandomStream root(ec.seed);
  RandomStream init_stream = root.child(kInitTag);
  RandomStream data_stream = root.child(kDataTag);
  RandomStream gumbel_stream = root.child(kGumbelTag);
  RandomStream eval_stream = root.child(kEvalTag);

  TrainResult<S> result;
  result.params = model::ModelParams<S>::init(ec.model, init_stream);
  result.routers = routing::RouterSet<S>::init(ec.model, init_stream);
  const Cipher cipher = Cipher::make(ec.model, ec.data);
  const planner::PruningPlan base_plan = plan_for(ec);

  std::int64_t start_step = 0;
  if (!opts.resume_from.empty()) {
    ResumeState rs = load_checkpoint<S>(opts.resume_from, ec, result.params,
                                        result.routers);
    start_step = rs.step;
    result.cumulative_flops = rs.cumulative_flops;
    data_stream.set_counter(rs.data_counter);
    gumbel_stream.set_counter(rs.gumbel_counter);
  }

  // Fixed held-out data, one sequence per batch entry.
  DataSettings eval_ds = ec.data;
  eval_ds.batch_size = 1;
  std::vector<model::TaskBatch> eval_t2i, eval_mmu;
  for (int i = 0; i < ec.eval_sequences; ++i) {
    eval_t2i.push_back(gen_synthetic_batch(model::TaskType::T2I, ec.model,
                                           eval_ds, cipher, eval_stream));
    eval_mmu.push_back(gen_synthetic_batch(model::TaskType::MMU, ec.model,
                                           eval_ds, cipher, eval_stream));
  }

  std::ofstream metrics_file;
  std::ostream* os = nullptr;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics_file.open(opts.out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_file)
      throw Error("cannot open " + (opts.out_dir / "metrics.jsonl").string());
    os = &metrics_file;
    nlohmann::json header{{"schema", kMetricsSchema},
                          {"method", method_name(ec.method)},
                          {"seed", ec.seed},
                          {"dtype", dtype_name<S>()},
                          {"steps", ec.steps}};
    *os << header.dump() << "\n";
  }

  const double target = ec.gumbel_target;
  for (std::int64_t t = start_step; t < ec.steps; ++t) {
    const model::TaskType task =
        t % 2 == 0 ? model::TaskType::T2I : model::TaskType::MMU;
    const model::TaskBatch batch =
        gen_synthetic_batch(task, ec.model, ec.data, cipher, data_stream);
    const planner::PruningPlan plan =
        detail::effective_plan(base_plan, ec.schedule, t);

    const std::size_t bs = batch.batch_size();
    Tensor<S> loss_sum;
    std::vector<Tensor<S>> soft_rate_sum;  // per layer, gumbel only
    std::vector<double> rate_sum(static_cast<std::size_t>(ec.model.n_layers),
                                 0.0);
    double step_flops = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
      std::vector<Index> retained;
      std::vector<Tensor<S>> soft;
      Tensor<S> logits = detail::method_forward(
          ec, result.params, result.routers, plan, batch, b, retained,
          ec.method == Method::GUMBEL_COMPETITIVE ? &soft : nullptr,
          ec.method == Method::GUMBEL_COMPETITIVE ? &gumbel_stream : nullptr);
      Tensor<S> loss = model::task_loss(logits, batch, b, ec.model);
      loss_sum = b == 0 ? loss : add(loss_sum, loss);
      for (std::size_t l = 0; l < retained.size(); ++l) {
        rate_sum[l] += static_cast<double>(retained[l]) /
                       static_cast<double>(batch.seq_len());
        step_flops += accounting::layer_flops(ec.model, retained[l]);
      }
      if (ec.method == Method::GUMBEL_COMPETITIVE) {
        if (b == 0)
          soft_rate_sum = soft;
        else
          for (std::size_t l = 0; l < soft.size(); ++l)
            soft_rate_sum[l] = add(soft_rate_sum[l], soft[l]);
      }
    }
    Tensor<S> loss =
        mul_const(loss_sum, static_cast<S>(1.0 / static_cast<double>(bs)));
    MetricsRecord rec;
    rec.step = t;
    rec.task = task;
    rec.train_loss = static_cast<double>(loss.item());

    if (ec.method == Method::GUMBEL_COMPETITIVE) {
      Tensor<S> rates = mul_const(concat_rows(soft_rate_sum),
                                  static_cast<S>(1.0 / static_cast<double>(bs)));
      Tensor<S> aux = routing::aux_capacity_loss(rates, static_cast<S>(target));
      rec.aux_loss = static_cast<double>(aux.item());
      loss = add(loss, mul_const(aux, static_cast<S>(ec.aux_weight)));
    }

    const double total_val = static_cast<double>(loss.item());
    if (!std::isfinite(total_val)) {
      if (os) {
        nlohmann::json diag{{"event", "divergence"},
                            {"step", t},
                            {"loss", rec.train_loss}};
        *os << diag.dump() << "\n";
        os->flush();
      }
      throw Error("training diverged at step " + std::to_string(t));
    }

    backward(loss);
    detail::sgd_step(result.params, result.routers, ec.lr);

    result.cumulative_flops +=
        step_flops * 3.0;  // forward x batch already summed; x3 for training
    rec.cumulative_flops = result.cumulative_flops;
    rec.keep_rate.assign(rate_sum.begin(), rate_sum.end());
    for (double& r : rec.keep_rate) r /= static_cast<double>(bs);

    if ((t + 1) % ec.eval_every == 0 || t + 1 == ec.steps) {
      TaskEval et = evaluate(ec, result.params, result.routers, plan, eval_t2i);
      TaskEval em = evaluate(ec, result.params, result.routers, plan, eval_mmu);
      rec.eval_loss_t2i = et.loss;
      rec.eval_em_t2i = et.exact_match;
      rec.eval_loss_mmu = em.loss;
      rec.eval_em_mmu = em.exact_match;
    }
    result.metrics.push_back(rec);
    if (os) *os << rec.to_json().dump() << "\n";
    result.final_step = t + 1;
  }

  if (!opts.out_dir.empty()) {
    save_checkpoint(opts.out_dir / "checkpoint", ec, result.params,
                    result.routers, ec.steps, result.cumulative_flops,
                    data_stream.counter(), gumbel_stream.counter());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Baseline suite: one row per method, shared shapes, seed, and step budget.

struct SuiteRow {
  Method method = Method::DENSE;
  double eval_loss_t2i = 0.0, eval_em_t2i = 0.0;
  double eval_loss_mmu = 0.0, eval_em_mmu = 0.0;
  double total_flops = 0.0;
  double measured_ratio = 1.0;          // vs the DENSE row, measured
  std::optional<double> model_ratio;    // analytical, from the plan
};

struct SuiteResult {
  std::vector<SuiteRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json j{{"method", method_name(r.method)},
                       {"eval_loss_t2i", r.eval_loss_t2i},
                       {"eval_em_t2i", r.eval_em_t2i},
                       {"eval_loss_mmu", r.eval_loss_mmu},
                       {"eval_em_mmu", r.eval_em_mmu},
                       {"total_flops", r.total_flops},
                       {"measured_ratio", r.measured_ratio}};
      if (r.model_ratio) j["model_ratio"] = *r.model_ratio;
      out.push_back(j);
    }
    return out;
  }

  void print_table(std::ostream& osr) const {
    osr << "method              t2i_loss  mmu_loss  t2i_em  mmu_em  "
           "flops_ratio  model_ratio\n";
    char buf[200];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf,
                    "%-19s %8.4f  %8.4f  %6.3f  %6.3f  %11.4f  %11s\n",
                    method_name(r.method), r.eval_loss_t2i, r.eval_loss_mmu,
                    r.eval_em_t2i, r.eval_em_mmu, r.measured_ratio,
                    r.model_ratio
                        ? std::to_string(*r.model_ratio).substr(0, 6).c_str()
                        : "-");
      osr << buf;
    }
  }
};

template <class S>
SuiteResult run_baseline_suite(const ExperimentConfig& base,
                               const std::vector<Method>& methods) {
  SuiteResult out;
  double dense_flops = 0.0;
  // DENSE always runs first to anchor the ratio
  std::vector<Method> order{Method::DENSE};
  for (Method m : methods)
    if (m != Method::DENSE) order.push_back(m);

  for (Method m : order) {
    ExperimentConfig ec = base;
    ec.method = m;
    TrainResult<S> res = train<S>(ec);
    const MetricsRecord& last = res.metrics.back();
    SuiteRow row;
    row.method = m;
    row.eval_loss_t2i = last.eval_loss_t2i.value();
    row.eval_em_t2i = last.eval_em_t2i.value();
    row.eval_loss_mmu = last.eval_loss_mmu.value();
    row.eval_em_mmu = last.eval_em_mmu.value();
    row.total_flops = res.cumulative_flops;
    if (m == Method::DENSE) dense_flops = row.total_flops;
    row.measured_ratio = row.total_flops / dense_flops;
    if (m != Method::GUMBEL_COMPETITIVE) {
      const planner::PruningPlan final_plan = detail::effective_plan(
          plan_for(ec), ec.schedule, ec.steps > 0 ? ec.steps - 1 : 0);
      const Index seq = ec.data.n_text + ec.data.n_image;
      accounting::FlopReport rep =
          accounting::model_flops(ec.model, final_plan, seq, seq);
      row.model_ratio = rep.combined_ratio;
    }
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace unimod::harness
