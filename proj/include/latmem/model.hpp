#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latmem/config.hpp"
#include "latmem/optim.hpp"
#include "latmem/tensor.hpp"

namespace latmem {

// Base vocabulary layout. Task words live in the base id range; the four
// memory-operation ids sit at |V|..|V|+3.
struct Vocabulary {
  int base_size = 128;
  int bos = 0;
  int eos = 1;
  int period = 2;
  int newline = 3;

  int mem_invoke_short() const { return base_size; }
  int mem_end_short() const { return base_size + 1; }
  int mem_invoke_long() const { return base_size + 2; }
  int mem_end_long() const { return base_size + 3; }
  int extended_size() const { return base_size + 4; }

  bool is_memory_token(int id) const { return id >= base_size; }
  bool is_delimiter(int id) const { return id == period || id == newline; }
};

// New-token rows of the extended embedding matrix: rows 0..|V| copied, the
// four memory rows seeded from the delimiter embedding plus Gaussian noise
// of scale sigma_scale * (delimiter-row RMS).
Tensor extend_vocabulary(const Tensor& base_embedding, int delimiter_id,
                         uint64_t seed, double sigma_scale = 0.01);

struct Image {
  int size = 16;
  int channels = 3;
  std::vector<double> data;  // row-major HWC in [0, 1]

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * size + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * size + x) * channels + c];
  }
};

struct Linear {
  Tensor W;  // in x out
  Tensor b;  // 1 x out, undefined when bias-free

  Tensor forward(const Tensor& x) const {
    auto y = matmul(x, W);
    return b.defined() ? add_rowvec(y, b) : y;
  }
};

Linear make_linear(int in, int out, Rng& rng, bool bias = true);

// Low-rank additive delta on a linear map: (alpha/r) * drop(x) A B.
// B is zero-initialized, so a fresh adapter is an exact no-op.
struct LowRankAdapter {
  Tensor A;  // in x r
  Tensor B;  // r x out
  int rank = 16;
  double alpha = 32.0;
  double dropout_rate = 0.1;

  Tensor delta(const Tensor& x, Rng* dropout_rng) const;
};

LowRankAdapter make_adapter(int in, int out, int rank, double alpha,
                            double dropout_rate, Rng& rng);

// Which adapter pair (attention q/v projections) is live for a forward pass.
enum class AdapterRole { None, FormerShort, FormerLong, Policy };

struct AdapterPair {
  LowRankAdapter q, v;
};

enum class LayerStyle {
  PreNorm,   // x + SA(LN(x)); x + FF(LN(x))
  PostMix,   // FF(LN(x + SA(LN(x)))) + x
};

struct TransformerLayer {
  Linear wq, wk, wv, wo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Linear ff1, ff2;
  int heads = 4;
  LayerStyle style = LayerStyle::PreNorm;
  std::map<AdapterRole, AdapterPair> adapters;

  // mask: additive attention mask shared across heads (n x n)
  // probs_out: per-head post-softmax attention weights, when requested
  Tensor forward(const Tensor& x, const Tensor& mask, AdapterRole role,
                 Rng* dropout_rng, std::vector<Tensor>* probs_out) const;
};

TransformerLayer make_layer(int d, int heads, LayerStyle style, Rng& rng);

Tensor causal_mask(int n);

// Tiny vision encoder: patch embedding + learned positions + encoder stack.
struct VisionEncoder {
  Linear patch_embed;
  Tensor pos_emb;  // patch_count x d
  std::vector<TransformerLayer> layers;
  Tensor ln_g, ln_b;

  // patch tokens (embedded input sequence) for an image
  Tensor embed_patches(const Image& img, const ModelConfig& cfg) const;
  // full encode: patch tokens through the stack
  Tensor encode(const Image& img, const ModelConfig& cfg) const;
  // stack over arbitrary d-width input (used by the short-term former)
  Tensor run_stack(const Tensor& x, AdapterRole role, Rng* dropout_rng) const;
};

// Causal language decoder over the extended vocabulary. The base embedding
// rows are a frozen tensor; the four memory-token rows are separate
// parameters so they can form their own learning-rate groups.
struct Decoder {
  Tensor base_emb;                 // |V| x d
  std::array<Tensor, 4> mem_emb;   // 1 x d rows for ids |V|..|V|+3
  Tensor pos_emb;                  // max_seq_len x d
  std::vector<TransformerLayer> layers;
  Tensor ln_g, ln_b;

  // embedding matrix (|V|+4) x d assembled on the graph
  Tensor embedding() const;
  // hidden states for a context of embeddings (n x d), causal mask
  Tensor hidden_states(const Tensor& context, AdapterRole role,
                       Rng* dropout_rng) const;
  // logits over |V|+4 for every position (tied output head)
  Tensor logits_from_hidden(const Tensor& hidden) const;
  Tensor run_stack(const Tensor& x, AdapterRole role, Rng* dropout_rng) const;
};

class ToyVlm {
 public:
  ToyVlm(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  // visual hidden states {v_1..v_y}, width d
  Tensor encode_image(const Image& img) const;
  // embedded (pre-encoder) patch token sequence
  Tensor patch_tokens(const Image& img) const;
  // vision-to-language projector; also applied to short-term memory spans
  Tensor project_visual(const Tensor& tokens) const;

  // one decoding step: logits over |V|+4 and hidden state h at the last
  // position of the context
  struct StepOut {
    Tensor logits;  // 1 x (|V|+4)
    Tensor hidden;  // 1 x d
  };
  StepOut decode_step(const Tensor& context, AdapterRole role = AdapterRole::None,
                      Rng* dropout_rng = nullptr) const;
  // full-sequence logits (teacher-forced re-scoring)
  Tensor sequence_logits(const Tensor& context, AdapterRole role,
                         Rng* dropout_rng = nullptr) const;

  Tensor token_embedding(int id) const;

  VisionEncoder& encoder() { return encoder_; }
  const VisionEncoder& encoder() const { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const Decoder& decoder() const { return decoder_; }
  const Linear& projector() const { return projector_; }

  // Parameter registries. Base parameters are the frozen policy trunk;
  // policy parameters (theta) are the memory-token rows plus the decoder
  // attention adapters trained in stage II.
  void collect_base_params(ParamList& out) const;
  void collect_policy_params(ParamList& out) const;

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  VisionEncoder encoder_;
  Decoder decoder_;
  Linear projector_;
};

void collect_layer_params(const TransformerLayer& layer,
                          const std::string& prefix, ParamList& out);
void collect_adapter_params(const TransformerLayer& layer, AdapterRole role,
                            const std::string& prefix, ParamList& out);

}  // namespace latmem
