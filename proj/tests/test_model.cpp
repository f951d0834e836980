#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "latmem/model.hpp"

using namespace latmem;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;  // defaults: d=32, 2+2 layers, 4 heads, 16x16 image
  return cfg;
}

Image random_image(const ModelConfig& cfg, uint64_t seed) {
  Image img;
  img.size = cfg.image_size;
  img.channels = cfg.channels;
  img.data.resize(static_cast<size_t>(img.size) * img.size * img.channels);
  Rng rng(seed);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("vocabulary: memory ids are disjoint and extend the base range") {
  Vocabulary v;
  v.base_size = 128;
  CHECK(v.extended_size() == 132);
  CHECK(v.mem_invoke_short() == 128);
  CHECK(v.mem_end_short() == 129);
  CHECK(v.mem_invoke_long() == 130);
  CHECK(v.mem_end_long() == 131);
  CHECK(v.is_memory_token(128));
  CHECK(!v.is_memory_token(127));
  CHECK(v.is_delimiter(v.period));
  CHECK(v.is_delimiter(v.newline));
  CHECK(!v.is_delimiter(v.eos));
}

TEST_CASE("extend_vocabulary: output shape is (|V|+4) x d") {
  Rng rng(7);
  auto base = Tensor::randn({100, 32}, rng, 0.5);
  auto ext = extend_vocabulary(base, 2, 11);
  CHECK(ext.rows() == 104);
  CHECK(ext.cols() == 32);
  // base rows copied verbatim
  for (int j = 0; j < 32; ++j) CHECK(ext(41, j) == base(41, j));
}

TEST_CASE("extend_vocabulary: zero perturbation copies the delimiter row") {
  Rng rng(9);
  auto base = Tensor::randn({20, 8}, rng, 0.5);
  auto ext = extend_vocabulary(base, 3, 5, 0.0);
  for (int r = 20; r < 24; ++r)
    for (int j = 0; j < 8; ++j) CHECK(ext(r, j) == base(3, j));
}

TEST_CASE("extend_vocabulary: perturbation RMS lands near the target sigma") {
  Rng rng(13);
  auto base = Tensor::randn({64, 48}, rng, 1.0);
  const int delim = 2;
  double rms = 0.0;
  for (int j = 0; j < 48; ++j) rms += base(delim, j) * base(delim, j);
  rms = std::sqrt(rms / 48);
  const double sigma = 0.01 * rms;

  auto ext = extend_vocabulary(base, delim, 1234);
  // independent deviation statistic over all four new rows
  double dev = 0.0;
  int n = 0;
  for (int r = 64; r < 68; ++r)
    for (int j = 0; j < 48; ++j) {
      const double d = ext(r, j) - base(delim, j);
      dev += d * d;
      ++n;
    }
  dev = std::sqrt(dev / n);
  CHECK(dev > 0.5 * sigma);
  CHECK(dev < 1.5 * sigma);
}

TEST_CASE("extend_vocabulary: out-of-range delimiter id is an error") {
  Rng rng(1);
  auto base = Tensor::randn({10, 4}, rng, 0.5);
  CHECK_THROWS(extend_vocabulary(base, 10, 3));
  CHECK_THROWS(extend_vocabulary(base, -1, 3));
}

TEST_CASE("encode_image: row count equals patch count, deterministic") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  auto img = random_image(cfg, 5);
  NoGrad ng;
  auto h1 = vlm.encode_image(img);
  auto h2 = vlm.encode_image(img);
  CHECK(h1.rows() == cfg.patch_count());
  CHECK(h1.cols() == cfg.d);
  CHECK(h1.data() == h2.data());
}

TEST_CASE("encode_image: grid mismatch is an error") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  Image bad;
  bad.size = 8;
  bad.channels = cfg.channels;
  bad.data.assign(static_cast<size_t>(8) * 8 * cfg.channels, 0.0);
  NoGrad ng;
  CHECK_THROWS(vlm.encode_image(bad));
}

TEST_CASE("encode_image: swapping two patches moves their output rows") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  auto img = random_image(cfg, 6);
  NoGrad ng;
  auto before = vlm.encode_image(img);

  // swap patch (0,0) with patch (0,1): a 4x4 pixel block
  Image swapped = img;
  const int p = cfg.image_size / cfg.patch_grid;
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x)
      for (int c = 0; c < cfg.channels; ++c)
        std::swap(swapped.at(y, x, c), swapped.at(y, x + p, c));
  auto after = vlm.encode_image(swapped);

  auto row_diff = [&](const Tensor& a, const Tensor& b, int r) {
    double d = 0.0;
    for (int j = 0; j < a.cols(); ++j) d += std::fabs(a(r, j) - b(r, j));
    return d;
  };
  CHECK(row_diff(before, after, 0) > 1e-9);
  CHECK(row_diff(before, after, 1) > 1e-9);
}

TEST_CASE("decode_step: logits cover the extended vocabulary") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  auto ctx = vlm.token_embedding(vlm.vocab().bos);
  auto out = vlm.decode_step(ctx);
  CHECK(out.logits.rows() == 1);
  CHECK(out.logits.cols() == cfg.extended_vocab());
  CHECK(out.hidden.rows() == 1);
  CHECK(out.hidden.cols() == cfg.d);
}

TEST_CASE("decode_step: appending a token never changes earlier logits") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  std::vector<Tensor> rows;
  for (int id : {0, 5, 9, 2}) rows.push_back(vlm.token_embedding(id));
  auto prefix = concat_rows(rows);
  rows.push_back(vlm.token_embedding(7));
  auto extended = concat_rows(rows);

  auto lp = vlm.sequence_logits(prefix, AdapterRole::None);
  auto le = vlm.sequence_logits(extended, AdapterRole::None);
  for (int i = 0; i < prefix.rows(); ++i)
    for (int j = 0; j < lp.cols(); ++j)
      CHECK(lp(i, j) == doctest::Approx(le(i, j)).epsilon(1e-12));
}

TEST_CASE("decode_step: over-long context is an error") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  std::vector<Tensor> rows(cfg.max_seq_len + 1, vlm.token_embedding(0));
  CHECK_THROWS(vlm.decode_step(concat_rows(rows)));
}

TEST_CASE("decode_step: a latent row influences later logits") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  Rng rng(77);
  auto latent = Tensor::randn({1, cfg.d}, rng, 1.0);
  auto zero = Tensor::zeros({1, cfg.d});
  auto bos = vlm.token_embedding(0);

  auto with_latent = vlm.decode_step(concat_rows({bos, latent}));
  auto with_zero = vlm.decode_step(concat_rows({bos, zero}));
  double diff = 0.0;
  for (int j = 0; j < with_latent.logits.cols(); ++j)
    diff += std::fabs(with_latent.logits(0, j) - with_zero.logits(0, j));
  CHECK(diff > 1e-9);
}

TEST_CASE("project_visual: identity weights pass input through") {
  auto cfg = small_cfg();
  cfg.projector_bias = false;
  ToyVlm vlm(cfg, 42);
  ParamList params;
  vlm.collect_base_params(params);
  for (auto& p : params)
    if (p.name == "projector.W") {
      auto id = Tensor::identity(cfg.d);
      p.tensor.data() = id.data();
    }
  NoGrad ng;
  Rng rng(3);
  auto x = Tensor::randn({5, cfg.d}, rng, 1.0);
  auto y = vlm.project_visual(x);
  for (size_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("project_visual: matches a brute-force matmul oracle") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  Rng rng(4);
  auto x = Tensor::randn({3, cfg.d}, rng, 1.0);
  auto y = vlm.project_visual(x);

  const auto& W = vlm.projector().W;
  const auto& b = vlm.projector().b;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < cfg.d; ++j) {
      double acc = b.defined() ? b(0, j) : 0.0;
      for (int k = 0; k < cfg.d; ++k) acc += x(i, k) * W(k, j);
      CHECK(y(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("project_visual: width mismatch is an error") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  auto x = Tensor::zeros({2, cfg.d + 1});
  CHECK_THROWS(vlm.project_visual(x));
}

TEST_CASE("fresh adapters are exact no-ops on the decoder") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  NoGrad ng;
  std::vector<Tensor> rows;
  for (int id : {0, 4, 8, 2}) rows.push_back(vlm.token_embedding(id));
  auto ctx = concat_rows(rows);
  auto plain = vlm.sequence_logits(ctx, AdapterRole::None);
  auto policy = vlm.sequence_logits(ctx, AdapterRole::Policy);
  auto former = vlm.sequence_logits(ctx, AdapterRole::FormerLong);
  CHECK(plain.data() == policy.data());
  CHECK(plain.data() == former.data());
}

TEST_CASE("tied head: memory-row embedding shift moves the matching logit") {
  auto cfg = small_cfg();
  ToyVlm vlm(cfg, 42);
  const int invoke_short = vlm.vocab().mem_invoke_short();
  NoGrad ng;
  auto ctx = vlm.token_embedding(0);
  auto before = vlm.decode_step(ctx).logits;

  ParamList params;
  vlm.collect_policy_params(params);
  for (auto& p : params)
    // a uniform shift would be invisible through the zero-mean layer norm
    // output, so perturb a single embedding component
    if (p.name == "policy.mem_emb.invoke_short") p.tensor.data()[0] += 0.25;
  auto after = vlm.decode_step(ctx).logits;
  CHECK(std::fabs(after(0, invoke_short) - before(0, invoke_short)) > 1e-9);
}
