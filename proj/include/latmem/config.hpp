#pragma once

#include <string>

namespace latmem {

// Architecture of the toy vision-language model and memory system.
struct ModelConfig {
  int d = 32;             // hidden width
  int decoder_layers = 2;
  int encoder_layers = 2;
  int heads = 4;
  int vocab_size = 128;   // base |V|; extended size is |V|+4
  int image_size = 16;    // square images
  int channels = 3;
  int patch_grid = 4;     // patches per side
  int max_seq_len = 96;
  int K = 8;              // memory query length
  int N_s = 8;            // short-term span length
  int N_l = 16;           // long-term span length
  int builder_layers = 2;
  bool projector_bias = true;
  int lora_rank = 16;
  double lora_alpha = 32.0;
  double lora_dropout = 0.1;
  double end_token_lr_mult = 0.1;

  int patch_count() const { return patch_grid * patch_grid; }
  int patch_dim() const {
    const int p = image_size / patch_grid;
    return p * p * channels;
  }
  int extended_vocab() const { return vocab_size + 4; }
  void validate() const;
};

// One GRPO training stage.
struct StageConfig {
  int stage = 1;  // 1 or 2
  double learning_rate = 5e-5;
  double warmup_ratio = 0.2;
  int epochs = 2;
  int batch_size = 8;
  int group_size = 16;
  double clip_ratio = 0.2;
  double kl_penalty_coefficient = 0.015;
  double target_kl_per_token = 0.03;
  double penalty_intensity = 0.0;  // stage II only
  int num_iteration = 1;
  std::string curriculum = "auto";  // delimiter_only|between_delimiters|auto
  int tasks_per_epoch = 500;
  double sigma_m = 0.05;       // stage I stochastic-head scale
  double sigma_anneal = 0.5;   // per-epoch multiplier on sigma_m
  double advantage_eps = 1e-6;
  double weight_decay = 0.0;
  int max_new_tokens = 8;
  double temperature = 1.0;
  double invoke_prob = 0.5;    // stage I forced-invocation probability
  std::string task_family = "retrieve";
  void validate() const;
};

// Supervised warm-start of the base decoder, run before stage 1.
struct PretrainConfig {
  int steps = 400;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double warmup_ratio = 0.1;
  // hint rows mimic formed memory spans: unit-Gaussian background (the
  // formers end in a layer norm, so their rows look like this) plus a scaled
  // answer-embedding component the decoder learns to read out
  double background_std = 1.0;
  double hint_gain_max = 2.0;  // per-example answer-component scale cap
  double no_hint_prob = 0.3;  // fraction of examples without a span
};

// Supervised alignment of the memory path, run between the warm-start and
// stage 1 (see align_memory in pretrain.hpp).
struct AlignConfig {
  int steps = 800;
  int batch_size = 8;
  double learning_rate = 3e-3;
  double warmup_ratio = 0.1;
};

struct RunConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  AlignConfig align;
  StageConfig stage1;
  StageConfig stage2;
  int eval_tasks = 200;
  std::string eval_family = "retrieve";
};

// Structured text (JSON) config; missing keys keep their defaults.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);
std::string dump_run_config(const RunConfig& cfg);

}  // namespace latmem
