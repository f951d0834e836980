#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latmem/memory.hpp"
#include "latmem/model.hpp"

namespace latmem {

// One generated element: either a discrete token or one latent vector of a
// spliced memory span.
struct StreamElement {
  enum class Kind { Token, Latent };
  Kind kind = Kind::Token;
  int token = -1;               // valid for Kind::Token
  bool sampled = false;         // false for forced / engine-emitted tokens
  double log_prob = 0.0;        // log-prob at sampling time (sampled only)
  std::vector<double> latent;   // valid for Kind::Latent
};

// Everything needed to re-score one memory invocation under new
// builder/former parameters without replaying the rollout.
struct InvocationRecord {
  MemoryKind kind = MemoryKind::Short;
  int element_index = -1;   // index of the invocation token in the stream
  int step_index = -1;      // how many discrete tokens preceded it
  bool forced = false;
  bool skipped = false;     // kind disabled: token emitted, no span formed
  double sigma = 0.0;
  double log_density = 0.0;             // stochastic head, at rollout time
  std::vector<double> sampled_values;   // N_kind x d, flattened
  Tensor H;   // builder input at invocation time (values only, no graph)
  Tensor X;   // former input (patch tokens / segment hidden states)
};

struct Trajectory {
  std::string task_id;
  uint64_t seed = 0;
  std::vector<int> prompt;               // instruction token ids
  std::vector<StreamElement> elements;   // generated stream
  std::vector<InvocationRecord> invocations;
  double score = 0.0;
  long forward_positions = 0;   // total context rows processed (latency proxy)

  // discrete token ids in order; ids >= exclude_ge are dropped when
  // exclude_ge >= 0 (pass the base vocabulary size to strip memory tokens)
  std::vector<int> generated_tokens(int exclude_ge = -1) const;
  double total_log_prob() const;  // sum over sampled discrete tokens
  int invocation_count(MemoryKind k) const;
};

struct DecodePolicy {
  double temperature = 1.0;   // <= 0 means greedy
  int top_k = 0;              // 0 keeps the full distribution
  int max_new_tokens = 8;
  bool constrained = true;
  enum class Eligibility { DelimiterOnly, Anywhere };
  Eligibility eligibility = Eligibility::DelimiterOnly;
  bool allow_memory = true;   // false: invocation ids hard-masked (vanilla)
  bool allow_short = true;    // disabled kind: predicted tokens are skipped
  bool allow_long = true;
  double force_invoke_prob = 0.0;  // per eligible step, exploration aid
  bool sample_invocations = true;  // false: invocations only via forcing
  double sigma_m = 0.0;
  int max_invocations = 8;
  AdapterRole role = AdapterRole::Policy;
  // replay: force these (step index, kind) invocations and sample no others
  std::vector<std::pair<int, MemoryKind>> forced_invocations;
  bool replay = false;
};

// Decoding-time state for the logit constraints, exposed so the masking rule
// is testable in isolation.
struct ConstraintState {
  bool span_open = false;       // between an invocation and its end token
  bool invocation_ok = false;   // eligible position with budget remaining
};

// In-place additive masking over a 1 x |V|+4 logit row.
void constrain_logits(std::vector<double>& logits, const Vocabulary& vocab,
                      const ConstraintState& st);

bool is_invocation_token(const Vocabulary& vocab, int id);
std::optional<MemoryKind> invocation_kind(const Vocabulary& vocab, int id);

Trajectory generate(const ToyVlm& vlm, const MemorySystem* memsys,
                    const Image& image, const std::vector<int>& instruction,
                    const DecodePolicy& policy, uint64_t seed);

// Counterfactual replay of `base` with every realized invocation's kind
// swapped; same decoding seed, no extra invocations.
DecodePolicy swapped_kind_policy(const DecodePolicy& policy,
                                 const Trajectory& base);

// Teacher-forced re-scoring: rebuilds the full context on the autodiff graph
// and returns one scalar log-prob tensor per *sampled* discrete token, under
// the same temperature and constraints used at rollout time. With unchanged
// parameters these match the recorded log-probs.
std::vector<Tensor> rescore_log_probs(const ToyVlm& vlm, const Image& image,
                                      const std::vector<int>& instruction,
                                      const Trajectory& traj,
                                      const DecodePolicy& policy,
                                      AdapterRole role,
                                      Rng* dropout_rng = nullptr);

struct LatencyReport {
  double vanilla_seconds_per_task = 0.0;
  double memory_seconds_per_task = 0.0;
  double vanilla_positions_per_task = 0.0;
  double memory_positions_per_task = 0.0;
  double overhead_fraction = 0.0;  // (memory - vanilla) / vanilla, positions
  int tasks = 0;
};

LatencyReport measure_latency(const ToyVlm& vlm, const MemorySystem& memsys,
                              const std::vector<Image>& images,
                              const std::vector<std::vector<int>>& prompts,
                              const DecodePolicy& policy, uint64_t seed);

// one JSON object per trajectory, append-friendly
std::string trajectory_to_json(const Trajectory& traj);

}  // namespace latmem
