#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "latmem/config.hpp"
#include "latmem/decode.hpp"
#include "latmem/memory.hpp"
#include "latmem/model.hpp"
#include "latmem/tasks.hpp"

namespace latmem {

// non-finite loss during training; the CLI maps this to its own exit code
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// mean and population standard deviation; needs at least two rollouts
std::pair<double, double> group_stats(const std::vector<double>& scores);
double advantage(double s, double mean, double spread, double eps);

// S(t) - S(t_base); the counterfactual must come from the same task
double delta_score(const Trajectory& t, const Trajectory& t_base);
// max(0, S_rev - S); zero when the trajectory never invoked memory
double penalty_type(const Trajectory& t, double score_rev);
// max(0, group_mean - S); zero when the trajectory never invoked memory
double penalty_neg(const Trajectory& t, double group_mean);

// One task's group of rollouts, reduced to the scalars the loss needs.
struct GroupBatch {
  std::vector<double> delta;    // per-trajectory reward basis
  std::vector<double> p_type;   // zeros in stage I
  std::vector<double> p_neg;
};

// rewards (stage II subtracts the penalties first) and normalized advantages
std::vector<double> group_advantages(const GroupBatch& batch,
                                     const StageConfig& stage);

struct GrpoLossOut {
  Tensor loss;               // negated clipped-surrogate objective + beta*KL
  double kl_per_token = 0;   // k3 estimate against the reference densities
  std::vector<double> advantages;
};

// new_ld: per trajectory, per stochastic unit (invocation density in stage I,
// sampled-token log-prob in stage II) on the autodiff graph; old_ld/ref_ld
// are the matching rollout-time and reference-policy values.
GrpoLossOut grpo_loss(const GroupBatch& batch, const StageConfig& stage,
                      const std::vector<std::vector<Tensor>>& new_ld,
                      const std::vector<std::vector<double>>& old_ld,
                      const std::vector<std::vector<double>>& ref_ld);

struct StepMetrics {
  int stage = 0;
  int step = 0;
  double mean_score = 0;
  double mean_delta = 0;
  double inv_rate_short = 0;
  double inv_rate_long = 0;
  double p_type_mean = 0;
  double p_neg_mean = 0;
  double kl = 0;
  double loss = 0;
};
std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

struct TrainReport {
  std::vector<StepMetrics> steps;
  int optimizer_steps = 0;
  int kl_early_stops = 0;
};

// Full training stage. Stage I updates the builder/former parameters with the
// generation policy frozen; stage II updates the memory-token embedding rows
// and decoder adapters with the formers frozen. Writes one metrics row per
// optimizer step into `metrics` when non-null.
TrainReport run_stage(const StageConfig& stage, ToyVlm& vlm,
                      MemorySystem& memsys, uint64_t seed,
                      std::vector<StepMetrics>* metrics = nullptr,
                      int stop_after_steps = -1);

struct EvalReport {
  double mean_score = 0;
  double mean_base_score = 0;
  double mean_delta = 0;
  double inv_rate_short = 0;   // fraction of tasks with >= 1 short invocation
  double inv_rate_long = 0;
  int invoking_tasks = 0;
  int harmful_invocations = 0;  // invoking tasks with S < S_base
  std::vector<Trajectory> trajectories;
};

// greedy, seed-matched evaluation of `policy` against memory-free decoding
EvalReport evaluate(const ToyVlm& vlm, const MemorySystem& memsys,
                    TaskFamily family, int n_tasks, DecodePolicy policy,
                    uint64_t seed, bool keep_trajectories = false);

// named ablation mode -> decoding policy ("vanilla", "random-25".."random-100",
// "short-only", "long-only", "full")
DecodePolicy ablation_policy(const std::string& mode,
                             const StageConfig& stage);

}  // namespace latmem
