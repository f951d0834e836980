#include "latmem/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace latmem {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d <= 0 || d % heads != 0)
    throw std::runtime_error("config: d must be positive and divisible by "
                             "the head count");
  if (K < 1 || N_s < 1 || N_l < 1)
    throw std::runtime_error("config: K, N_s, N_l must be >= 1");
  if (image_size % patch_grid != 0)
    throw std::runtime_error("config: image_size must be divisible by "
                             "patch_grid");
  if (vocab_size <= 4)
    throw std::runtime_error("config: vocab_size too small");
}

void StageConfig::validate() const {
  if (stage != 1 && stage != 2)
    throw std::runtime_error("config: stage must be 1 or 2");
  if (stage == 1 && penalty_intensity != 0.0)
    throw std::runtime_error("config: penalty_intensity is a stage II knob");
  if (group_size < 2)
    throw std::runtime_error("config: group_size must be >= 2");
  if (curriculum != "auto" && curriculum != "delimiter_only" &&
      curriculum != "between_delimiters")
    throw std::runtime_error("config: unknown curriculum '" + curriculum +
                             "'");
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_model(const json& j, ModelConfig& m) {
  read(j, "d", m.d);
  read(j, "decoder_layers", m.decoder_layers);
  read(j, "encoder_layers", m.encoder_layers);
  read(j, "heads", m.heads);
  read(j, "vocab_size", m.vocab_size);
  read(j, "image_size", m.image_size);
  read(j, "channels", m.channels);
  read(j, "patch_grid", m.patch_grid);
  read(j, "max_seq_len", m.max_seq_len);
  read(j, "K", m.K);
  read(j, "N_s", m.N_s);
  read(j, "N_l", m.N_l);
  read(j, "builder_layers", m.builder_layers);
  read(j, "projector_bias", m.projector_bias);
  read(j, "rank", m.lora_rank);
  read(j, "alpha", m.lora_alpha);
  read(j, "drop_out_rate", m.lora_dropout);
  read(j, "end_token_lr_mult", m.end_token_lr_mult);
}

void read_stage(const json& j, StageConfig& s) {
  read(j, "learning_rate", s.learning_rate);
  read(j, "warmup_ratio", s.warmup_ratio);
  read(j, "epoch", s.epochs);
  read(j, "batch_size", s.batch_size);
  read(j, "group_size", s.group_size);
  read(j, "clip_ratio", s.clip_ratio);
  read(j, "kl_penalty_coefficient", s.kl_penalty_coefficient);
  read(j, "target_kl_per_token", s.target_kl_per_token);
  read(j, "penalty_intensity", s.penalty_intensity);
  read(j, "num_iteration", s.num_iteration);
  read(j, "curriculum", s.curriculum);
  read(j, "tasks_per_epoch", s.tasks_per_epoch);
  read(j, "sigma_m", s.sigma_m);
  read(j, "sigma_anneal", s.sigma_anneal);
  read(j, "advantage_eps", s.advantage_eps);
  read(j, "weight_decay", s.weight_decay);
  read(j, "max_new_tokens", s.max_new_tokens);
  read(j, "temperature", s.temperature);
  read(j, "invoke_prob", s.invoke_prob);
  read(j, "task_family", s.task_family);
}

void read_pretrain(const json& j, PretrainConfig& p) {
  read(j, "steps", p.steps);
  read(j, "batch_size", p.batch_size);
  read(j, "learning_rate", p.learning_rate);
  read(j, "warmup_ratio", p.warmup_ratio);
  read(j, "background_std", p.background_std);
  read(j, "hint_gain_max", p.hint_gain_max);
  read(j, "no_hint_prob", p.no_hint_prob);
}

void read_align(const json& j, AlignConfig& a) {
  read(j, "steps", a.steps);
  read(j, "batch_size", a.batch_size);
  read(j, "learning_rate", a.learning_rate);
  read(j, "warmup_ratio", a.warmup_ratio);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config: invalid JSON: ") +
                             e.what());
  }
  RunConfig cfg;
  cfg.stage2.stage = 2;
  cfg.stage2.learning_rate = 1e-5;
  cfg.stage2.warmup_ratio = 0.1;
  cfg.stage2.kl_penalty_coefficient = 0.030;
  cfg.stage2.target_kl_per_token = 0.05;
  cfg.stage2.penalty_intensity = 0.3;
  if (j.contains("model")) read_model(j.at("model"), cfg.model);
  if (j.contains("pretrain")) read_pretrain(j.at("pretrain"), cfg.pretrain);
  if (j.contains("align")) read_align(j.at("align"), cfg.align);
  if (j.contains("stage1")) read_stage(j.at("stage1"), cfg.stage1);
  if (j.contains("stage2")) read_stage(j.at("stage2"), cfg.stage2);
  read(j, "eval_tasks", cfg.eval_tasks);
  read(j, "eval_family", cfg.eval_family);
  cfg.model.validate();
  cfg.stage1.validate();
  cfg.stage2.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& cfg) {
  json j;
  j["model"] = {{"d", cfg.model.d},
                {"decoder_layers", cfg.model.decoder_layers},
                {"encoder_layers", cfg.model.encoder_layers},
                {"heads", cfg.model.heads},
                {"vocab_size", cfg.model.vocab_size},
                {"image_size", cfg.model.image_size},
                {"channels", cfg.model.channels},
                {"patch_grid", cfg.model.patch_grid},
                {"max_seq_len", cfg.model.max_seq_len},
                {"K", cfg.model.K},
                {"N_s", cfg.model.N_s},
                {"N_l", cfg.model.N_l},
                {"builder_layers", cfg.model.builder_layers},
                {"projector_bias", cfg.model.projector_bias},
                {"rank", cfg.model.lora_rank},
                {"alpha", cfg.model.lora_alpha},
                {"drop_out_rate", cfg.model.lora_dropout},
                {"end_token_lr_mult", cfg.model.end_token_lr_mult}};
  j["pretrain"] = {{"steps", cfg.pretrain.steps},
                   {"batch_size", cfg.pretrain.batch_size},
                   {"learning_rate", cfg.pretrain.learning_rate},
                   {"warmup_ratio", cfg.pretrain.warmup_ratio},
                   {"background_std", cfg.pretrain.background_std},
                   {"hint_gain_max", cfg.pretrain.hint_gain_max},
                   {"no_hint_prob", cfg.pretrain.no_hint_prob}};
  j["align"] = {{"steps", cfg.align.steps},
                {"batch_size", cfg.align.batch_size},
                {"learning_rate", cfg.align.learning_rate},
                {"warmup_ratio", cfg.align.warmup_ratio}};
  auto stage_json = [](const StageConfig& s) {
    return json{{"learning_rate", s.learning_rate},
                {"warmup_ratio", s.warmup_ratio},
                {"epoch", s.epochs},
                {"batch_size", s.batch_size},
                {"group_size", s.group_size},
                {"clip_ratio", s.clip_ratio},
                {"kl_penalty_coefficient", s.kl_penalty_coefficient},
                {"target_kl_per_token", s.target_kl_per_token},
                {"penalty_intensity", s.penalty_intensity},
                {"num_iteration", s.num_iteration},
                {"curriculum", s.curriculum},
                {"tasks_per_epoch", s.tasks_per_epoch},
                {"sigma_m", s.sigma_m},
                {"sigma_anneal", s.sigma_anneal},
                {"advantage_eps", s.advantage_eps},
                {"weight_decay", s.weight_decay},
                {"max_new_tokens", s.max_new_tokens},
                {"temperature", s.temperature},
                {"invoke_prob", s.invoke_prob},
                {"task_family", s.task_family}};
  };
  j["stage1"] = stage_json(cfg.stage1);
  j["stage2"] = stage_json(cfg.stage2);
  j["eval_tasks"] = cfg.eval_tasks;
  j["eval_family"] = cfg.eval_family;
  return j.dump(2);
}

}  // namespace latmem
