#pragma once

#include <string>
#include <vector>

#include "latmem/model.hpp"

namespace latmem {

enum class MemoryKind { Short, Long };
MemoryKind memory_kind_from_string(const std::string& s);
const char* to_string(MemoryKind k);
MemoryKind other_kind(MemoryKind k);

struct LatentMemorySpan {
  MemoryKind kind;
  Tensor values;  // N_kind x d
};

// Attention mask for the query builder: hidden-state rows are blocked from
// attending to query columns; query rows attend everywhere.
Tensor build_query_mask(int h_len, int K);

// Query builder B and the two memory formers F_s / F_l. The formers run
// through the host model's encoder/decoder stacks with their own adapter
// pairs enabled; the builder is a small standalone masked encoder shared by
// both memory kinds.
class MemorySystem {
 public:
  MemorySystem(ToyVlm& vlm, uint64_t seed);

  // B([H, Q_init])[-K:]; H is (y+z) x d
  Tensor build_query(const Tensor& H) const;
  // builder stack over x whose first h_len rows are hidden states and the
  // rest query positions; exposes per-layer/per-head attention weights
  Tensor encode_with_mask(const Tensor& x, int h_len,
                          std::vector<std::vector<Tensor>>* probs_out) const;

  // F_kind([X, Q, M_init])[-N_kind:]; the short path is routed through the
  // vision-to-language projector
  LatentMemorySpan form_memory(MemoryKind kind, const Tensor& X,
                               const Tensor& Q,
                               Rng* dropout_rng = nullptr) const;

  struct SampledSpan {
    std::vector<double> values;
    double log_density = 0.0;
  };
  // isotropic Gaussian stochastic head over span elements
  static SampledSpan sample_memory(const Tensor& span, double sigma_m,
                                   Rng& rng);

  int query_len() const { return K_; }
  int span_len(MemoryKind kind) const {
    return kind == MemoryKind::Short ? vlm_.config().N_s : vlm_.config().N_l;
  }
  const Tensor& q_init() const { return q_init_; }
  const Tensor& m_init(MemoryKind kind) const {
    return kind == MemoryKind::Short ? m_init_short_ : m_init_long_;
  }

  // builder + initializers + former adapters, under the "memory." prefix so
  // they can be checkpointed independently of the base weights
  void collect_params(ParamList& out) const;

 private:
  ToyVlm& vlm_;
  int K_;
  std::vector<TransformerLayer> builder_;
  Tensor pos_emb_;      // (max_seq_len + K) x d; keeps H order-sensitive
  Tensor q_init_;       // K x d
  Tensor m_init_short_; // N_s x d
  Tensor m_init_long_;  // N_l x d
};

}  // namespace latmem
