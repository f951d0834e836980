#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "latmem/checkpoint.hpp"
#include "latmem/optim.hpp"

using namespace latmem;

TEST_CASE("schedule: warmup start gives factor 0") {
  CHECK(lr_schedule_factor(0.0, 0.2) == 0.0);
}

TEST_CASE("schedule: warmup end gives factor 1") {
  CHECK(lr_schedule_factor(0.2, 0.2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("schedule: cosine tail decays to 0") {
  CHECK(lr_schedule_factor(1.0, 0.2) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(lr_schedule_factor(0.6, 0.2) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("AdamW: 3 steps match independent scalar re-implementation") {
  auto w = Tensor::from({1}, {1.0}, true);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  cfg.warmup_ratio = 0.0;
  AdamW opt({{"w", w, 1.0}}, cfg);

  // independent scalar AdamW with constant grad 0.5, schedule position 0.5
  double ref = 1.0, m = 0.0, v = 0.0;
  const double g = 0.5;
  const double factor = 0.5 * (1.0 + std::cos(3.14159265358979323846 * 0.5));
  for (int t = 1; t <= 3; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    ref -= cfg.lr * factor * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * ref);

    w.grad()[0] = g;
    opt.step(0.5);
    opt.zero_grad();
  }
  CHECK(std::fabs(w.data()[0] - ref) < 1e-12);
}

TEST_CASE("AdamW: missing grad on a registered parameter is an error") {
  auto w = Tensor::from({1}, {1.0}, true);
  AdamW opt({{"w", w, 1.0}}, {});
  CHECK_THROWS(opt.step(0.5));
}

TEST_CASE("AdamW: per-group lr multiplier scales the update") {
  auto a = Tensor::from({1}, {1.0}, true);
  auto b = Tensor::from({1}, {1.0}, true);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW opt({{"a", a, 1.0}, {"b", b, 0.1}}, cfg);
  a.grad()[0] = 1.0;
  b.grad()[0] = 1.0;
  opt.step(0.5);
  const double da = 1.0 - a.data()[0];
  const double db = 1.0 - b.data()[0];
  CHECK(db == doctest::Approx(0.1 * da).epsilon(1e-9));
}

TEST_CASE("determinism: identical seeds give bit-identical trajectories") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto w = Tensor::randn({4, 4}, rng, 0.3, true);
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    AdamW opt({{"w", w, 1.0}}, cfg);
    for (int step = 0; step < 5; ++step) {
      auto x = Tensor::randn({2, 4}, rng, 1.0);
      auto loss = sum(mul(matmul(x, w), matmul(x, w)));
      opt.zero_grad();
      loss.backward();
      opt.step(step / 5.0);
    }
    return w.data();
  };
  auto w1 = run(2024);
  auto w2 = run(2024);
  CHECK(w1 == w2);
}
