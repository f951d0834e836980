#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "latmem/memory.hpp"

using namespace latmem;

namespace {

struct Fixture {
  ModelConfig cfg;
  ToyVlm vlm;
  MemorySystem memsys;
  Fixture() : vlm(cfg, 42), memsys(vlm, 43) {}
};

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("mask: no hidden states gives an all-zero K x K mask") {
  auto m = build_query_mask(0, 3);
  CHECK(m.rows() == 3);
  for (double v : m.data()) CHECK(v == 0.0);
}

TEST_CASE("mask: exactly h_len*K blocked entries, all in H-rows/Q-columns") {
  auto m = build_query_mask(3, 2);
  int blocked = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      if (m(i, j) == -kInf) {
        ++blocked;
        CHECK(i < 3);
        CHECK(j >= 3);
      } else {
        CHECK(m(i, j) == 0.0);
      }
  CHECK(blocked == 6);
}

TEST_CASE("mask: transposing moves every blocked entry to Q-rows/H-columns") {
  auto m = build_query_mask(4, 3);
  auto t = transpose(m);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      if (t(i, j) == -kInf) {
        CHECK(i >= 4);
        CHECK(j < 4);
      }
}

TEST_CASE("build_query: output is K x d") {
  Fixture f;
  NoGrad ng;
  Rng rng(5);
  auto H = Tensor::randn({10, f.cfg.d}, rng, 0.5);
  auto q = f.memsys.build_query(H);
  CHECK(q.rows() == f.cfg.K);
  CHECK(q.cols() == f.cfg.d);
}

TEST_CASE("build_query: width mismatch and empty input are errors") {
  Fixture f;
  NoGrad ng;
  CHECK_THROWS(f.memsys.build_query(Tensor::zeros({3, f.cfg.d + 2})));
  CHECK_THROWS(f.memsys.build_query(Tensor::zeros({0, f.cfg.d})));
}

TEST_CASE("builder: H-row outputs are identical with or without Q columns") {
  Fixture f;
  NoGrad ng;
  Rng rng(6);
  auto H = Tensor::randn({7, f.cfg.d}, rng, 0.5);
  auto with_q = f.memsys.encode_with_mask(
      concat_rows({H, f.memsys.q_init()}), H.rows(), nullptr);
  auto without_q = f.memsys.encode_with_mask(H, H.rows(), nullptr);
  for (int i = 0; i < H.rows(); ++i)
    for (int j = 0; j < f.cfg.d; ++j)
      CHECK(with_q(i, j) == doctest::Approx(without_q(i, j)).epsilon(1e-9));
}

TEST_CASE("builder: post-softmax H-to-Q attention is exactly zero") {
  Fixture f;
  NoGrad ng;
  Rng rng(7);
  const int h_len = 9;
  auto H = Tensor::randn({h_len, f.cfg.d}, rng, 0.5);
  std::vector<std::vector<Tensor>> probs;
  f.memsys.encode_with_mask(concat_rows({H, f.memsys.q_init()}), h_len,
                            &probs);
  CHECK(!probs.empty());
  for (const auto& layer : probs) {
    CHECK(!layer.empty());
    for (const auto& head : layer)
      for (int i = 0; i < h_len; ++i)
        for (int j = h_len; j < head.cols(); ++j)
          CHECK(head(i, j) == 0.0);
  }
}

TEST_CASE("build_query: permuting H changes the queries") {
  Fixture f;
  NoGrad ng;
  Rng rng(8);
  auto H = Tensor::randn({6, f.cfg.d}, rng, 0.5);
  auto q1 = f.memsys.build_query(H);

  std::vector<double> perm = H.data();
  for (int j = 0; j < f.cfg.d; ++j)
    std::swap(perm[j], perm[static_cast<size_t>(3) * f.cfg.d + j]);
  auto q2 = f.memsys.build_query(Tensor::from({6, f.cfg.d}, perm));
  double diff = 0.0;
  for (size_t i = 0; i < q1.numel(); ++i)
    diff += std::fabs(q1.data()[i] - q2.data()[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("form_memory: span shapes are N_kind x d") {
  Fixture f;
  NoGrad ng;
  Rng rng(9);
  auto X = Tensor::randn({5, f.cfg.d}, rng, 0.5);
  auto Q = f.memsys.build_query(X);
  auto s = f.memsys.form_memory(MemoryKind::Short, X, Q);
  CHECK(s.values.rows() == f.cfg.N_s);
  CHECK(s.values.cols() == f.cfg.d);
  auto l = f.memsys.form_memory(MemoryKind::Long, X, Q);
  CHECK(l.values.rows() == f.cfg.N_l);
  CHECK(l.values.cols() == f.cfg.d);
  CHECK_THROWS(
      f.memsys.form_memory(MemoryKind::Short, Tensor::zeros({2, 5}), Q));
}

TEST_CASE("form_memory: fresh adapters reproduce the frozen base stacks") {
  Fixture f;
  NoGrad ng;
  Rng rng(10);
  auto X = Tensor::randn({4, f.cfg.d}, rng, 0.5);
  auto Q = f.memsys.build_query(X);

  auto shrt = f.memsys.form_memory(MemoryKind::Short, X, Q);
  auto base_in = concat_rows({X, Q, f.memsys.m_init(MemoryKind::Short)});
  auto base =
      f.vlm.encoder().run_stack(base_in, AdapterRole::None, nullptr);
  auto expect = f.vlm.project_visual(
      narrow(base, 0, base.rows() - f.cfg.N_s, f.cfg.N_s));
  for (size_t i = 0; i < expect.numel(); ++i)
    CHECK(shrt.values.data()[i] ==
          doctest::Approx(expect.data()[i]).epsilon(1e-12));

  auto lng = f.memsys.form_memory(MemoryKind::Long, X, Q);
  auto lin = concat_rows({X, Q, f.memsys.m_init(MemoryKind::Long)});
  auto lbase = f.vlm.decoder().run_stack(lin, AdapterRole::None, nullptr);
  auto lexpect = narrow(lbase, 0, lbase.rows() - f.cfg.N_l, f.cfg.N_l);
  for (size_t i = 0; i < lexpect.numel(); ++i)
    CHECK(lng.values.data()[i] ==
          doctest::Approx(lexpect.data()[i]).epsilon(1e-12));
}

TEST_CASE("sample_memory: zero sigma is the deterministic limit") {
  NoGrad ng;
  Rng noise(11), rng(12);
  auto span = Tensor::randn({2, 3}, noise, 1.0);
  auto out = MemorySystem::sample_memory(span, 0.0, rng);
  CHECK(out.values == span.data());
  CHECK(out.log_density == 0.0);
}

TEST_CASE("sample_memory: log-density matches the closed-form pdf") {
  NoGrad ng;
  Rng noise(13), rng(14);
  auto span = Tensor::randn({3, 4}, noise, 1.0);
  const double sigma = 0.3;
  auto out = MemorySystem::sample_memory(span, sigma, rng);

  double expect = 0.0;
  for (size_t i = 0; i < span.numel(); ++i) {
    const double d = out.values[i] - span.data()[i];
    expect += -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma) -
              0.5 * d * d / (sigma * sigma);
  }
  CHECK(out.log_density == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("sample_memory: negative sigma is an error") {
  NoGrad ng;
  Rng rng(15);
  auto span = Tensor::zeros({1, 1});
  CHECK_THROWS(MemorySystem::sample_memory(span, -0.1, rng));
}

TEST_CASE("memory kind helpers") {
  CHECK(memory_kind_from_string("short") == MemoryKind::Short);
  CHECK(memory_kind_from_string("long") == MemoryKind::Long);
  CHECK_THROWS(memory_kind_from_string("medium"));
  CHECK(other_kind(MemoryKind::Short) == MemoryKind::Long);
  CHECK(std::string(to_string(MemoryKind::Long)) == "long");
}

TEST_CASE("collect_params: everything lives under the memory prefix") {
  Fixture f;
  ParamList params;
  f.memsys.collect_params(params);
  CHECK(!params.empty());
  for (const auto& p : params)
    CHECK(p.name.rfind("memory.", 0) == 0);
}
