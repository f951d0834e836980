#pragma once

#include <cstdint>

#include "latmem/model.hpp"

namespace latmem {

class MemorySystem;

// Supervised warm-start of the base model (see PretrainConfig in
// config.hpp), run once before the first training stage. Teacher-forced
// cross-entropy on synthetic tasks teaches the decoder the answer format
// and, crucially, how to copy an answer out of an in-context latent span.
// The image shown alongside each example is deliberately mismatched, so the
// raw visual rows carry no answer signal and the only reliable source is
// the span -- this is what later makes formed memory worth invoking.
struct PretrainReport {
  double first_loss = 0.0;
  double last_loss = 0.0;
  int steps = 0;
};

PretrainReport pretrain_base(ToyVlm& vlm, const PretrainConfig& cfg,
                             uint64_t seed);

// Supervised alignment of the memory path (builder, formers, their
// adapters; nothing else), run after pretrain_base and before stage 1.
// Each example forms a real memory span for a retrieval task and minimizes
// the cross-entropy of the answer read out right after the span's end
// token. This gives the policy-gradient stage a working operating point:
// exploration noise on a span that already encodes the answer produces a
// dense, informative reward signal, whereas noise on a random span almost
// never does (the exact-match reward carries at most one bit per rollout).
PretrainReport align_memory(ToyVlm& vlm, MemorySystem& memsys,
                            const AlignConfig& cfg, uint64_t seed);

}  // namespace latmem
