#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "latmem/checkpoint.hpp"

using namespace latmem;

namespace {
std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("checkpoint: bit-exact round-trip") {
  Rng rng(9);
  auto a = Tensor::randn({3, 5}, rng, 1.0, true);
  auto b = Tensor::randn({7}, rng, 0.01, true);
  ParamList params{{"layer.weight", a, 1.0}, {"adapter.short.A", b, 1.0}};
  const auto path = tmp_path("latmem_ckpt_test.bin");
  save_checkpoint(path, params);

  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].name == "layer.weight");
  CHECK(loaded[0].shape == std::vector<int>{3, 5});
  CHECK(loaded[0].data == a.data());
  CHECK(loaded[1].data == b.data());

  // writing the loaded values back produces identical bytes
  ParamList reload{{"layer.weight", Tensor::zeros({3, 5}), 1.0},
                   {"adapter.short.A", Tensor::zeros({7}), 1.0}};
  assign_params(reload, loaded);
  CHECK(serialize_params(reload) == serialize_params(params));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: prefix-filtered assignment") {
  auto a = Tensor::from({2}, {1.0, 2.0});
  auto b = Tensor::from({2}, {3.0, 4.0});
  std::vector<NamedTensor> loaded{{"base.w", {2}, {9.0, 9.0}},
                                  {"adapter.w", {2}, {8.0, 8.0}}};
  ParamList params{{"base.w", a, 1.0}, {"adapter.w", b, 1.0}};
  assign_params(params, loaded, "adapter.");
  CHECK(a.data() == std::vector<double>{1.0, 2.0});
  CHECK(b.data() == std::vector<double>{8.0, 8.0});
}

TEST_CASE("checkpoint: shape mismatch is an error") {
  auto a = Tensor::zeros({2});
  std::vector<NamedTensor> loaded{{"w", {3}, {1, 2, 3}}};
  ParamList params{{"w", a, 1.0}};
  CHECK_THROWS(assign_params(params, loaded));
}

TEST_CASE("params_hash: sensitive to any value change") {
  auto a = Tensor::from({2}, {1.0, 2.0});
  ParamList params{{"w", a, 1.0}};
  const auto h1 = params_hash(params);
  a.data()[1] = std::nextafter(a.data()[1], 3.0);
  CHECK(params_hash(params) != h1);
}
