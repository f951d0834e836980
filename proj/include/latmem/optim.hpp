#pragma once

#include <string>
#include <vector>

#include "latmem/tensor.hpp"

namespace latmem {

// Named trainable parameter with a per-group learning-rate multiplier.
struct ParamRef {
  std::string name;
  Tensor tensor;
  double lr_mult = 1.0;
};

using ParamList = std::vector<ParamRef>;

// warmup-then-cosine factor in [0, 1]; position is the fraction of the run
double lr_schedule_factor(double position, double warmup_ratio);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.0;
};

// Decoupled weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig cfg);

  // One update; every registered parameter must carry a gradient.
  void step(double schedule_position);
  void zero_grad();

  long step_count() const { return step_count_; }
  const ParamList& params() const { return params_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamList params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long step_count_ = 0;
};

}  // namespace latmem
