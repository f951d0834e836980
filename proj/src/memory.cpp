#include "latmem/memory.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace latmem {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

MemoryKind memory_kind_from_string(const std::string& s) {
  if (s == "short") return MemoryKind::Short;
  if (s == "long") return MemoryKind::Long;
  throw std::runtime_error("unknown memory kind '" + s + "'");
}

const char* to_string(MemoryKind k) {
  return k == MemoryKind::Short ? "short" : "long";
}

MemoryKind other_kind(MemoryKind k) {
  return k == MemoryKind::Short ? MemoryKind::Long : MemoryKind::Short;
}

Tensor build_query_mask(int h_len, int K) {
  if (h_len < 0 || K < 0)
    throw std::runtime_error("build_query_mask: negative size");
  const int n = h_len + K;
  auto m = Tensor::zeros({n, n});
  // H rows may not look at Q columns; the reverse direction stays open
  for (int i = 0; i < h_len; ++i)
    for (int j = h_len; j < n; ++j)
      m.data()[static_cast<size_t>(i) * n + j] = -kInf;
  return m;
}

MemorySystem::MemorySystem(ToyVlm& vlm, uint64_t seed) : vlm_(vlm) {
  const auto& cfg = vlm.config();
  K_ = cfg.K;
  Rng rng(Rng::derive(seed, 0xb11d3));
  for (int i = 0; i < cfg.builder_layers; ++i)
    builder_.push_back(
        make_layer(cfg.d, cfg.heads, LayerStyle::PostMix, rng));
  pos_emb_ =
      Tensor::randn({cfg.max_seq_len + cfg.K, cfg.d}, rng, 0.1, true);
  q_init_ = Tensor::randn({cfg.K, cfg.d}, rng, 0.1, true);
  m_init_short_ = Tensor::randn({cfg.N_s, cfg.d}, rng, 0.1, true);
  m_init_long_ = Tensor::randn({cfg.N_l, cfg.d}, rng, 0.1, true);
}

Tensor MemorySystem::encode_with_mask(
    const Tensor& x, int h_len,
    std::vector<std::vector<Tensor>>* probs_out) const {
  const int K = x.rows() - h_len;
  if (x.rows() > pos_emb_.rows())
    throw std::runtime_error("encode_with_mask: input longer than " +
                             std::to_string(pos_emb_.rows()) + " positions");
  auto mask = build_query_mask(h_len, K);
  Tensor h = add(x, narrow(pos_emb_, 0, 0, x.rows()));
  for (const auto& layer : builder_) {
    std::vector<Tensor> layer_probs;
    h = layer.forward(h, mask, AdapterRole::None, nullptr,
                      probs_out ? &layer_probs : nullptr);
    if (probs_out) probs_out->push_back(std::move(layer_probs));
  }
  return h;
}

Tensor MemorySystem::build_query(const Tensor& H) const {
  if (H.rows() == 0) throw std::runtime_error("build_query: empty H");
  if (H.cols() != vlm_.config().d)
    throw std::runtime_error("build_query: H width " +
                             std::to_string(H.cols()) + " != d " +
                             std::to_string(vlm_.config().d));
  auto encoded = encode_with_mask(concat_rows({H, q_init_}), H.rows(),
                                  nullptr);
  return narrow(encoded, 0, H.rows(), K_);
}

LatentMemorySpan MemorySystem::form_memory(MemoryKind kind, const Tensor& X,
                                           const Tensor& Q,
                                           Rng* dropout_rng) const {
  const auto& cfg = vlm_.config();
  if (X.cols() != cfg.d)
    throw std::runtime_error("form_memory: X width " +
                             std::to_string(X.cols()) + " != d " +
                             std::to_string(cfg.d));
  if (kind == MemoryKind::Short) {
    auto input = concat_rows({X, Q, m_init_short_});
    auto encoded = vlm_.encoder().run_stack(input, AdapterRole::FormerShort,
                                            dropout_rng);
    auto span = narrow(encoded, 0, encoded.rows() - cfg.N_s, cfg.N_s);
    return {kind, vlm_.project_visual(span)};
  }
  auto input = concat_rows({X, Q, m_init_long_});
  auto encoded =
      vlm_.decoder().run_stack(input, AdapterRole::FormerLong, dropout_rng);
  return {kind, narrow(encoded, 0, encoded.rows() - cfg.N_l, cfg.N_l)};
}

MemorySystem::SampledSpan MemorySystem::sample_memory(const Tensor& span,
                                                      double sigma_m,
                                                      Rng& rng) {
  if (sigma_m < 0.0)
    throw std::runtime_error("sample_memory: sigma_m must be >= 0");
  SampledSpan out;
  out.values = span.data();
  if (sigma_m == 0.0) return out;  // deterministic limit, density 0
  const double log_norm =
      -0.5 * std::log(2.0 * std::numbers::pi * sigma_m * sigma_m);
  for (auto& v : out.values) {
    const double noise = sigma_m * rng.normal();
    v += noise;
    out.log_density +=
        log_norm - 0.5 * (noise * noise) / (sigma_m * sigma_m);
  }
  return out;
}

void MemorySystem::collect_params(ParamList& out) const {
  for (size_t i = 0; i < builder_.size(); ++i)
    collect_layer_params(builder_[i],
                         "memory.builder.layer" + std::to_string(i), out);
  out.push_back({"memory.pos_emb", pos_emb_, 1.0});
  out.push_back({"memory.q_init", q_init_, 1.0});
  out.push_back({"memory.m_init_short", m_init_short_, 1.0});
  out.push_back({"memory.m_init_long", m_init_long_, 1.0});
  const auto& enc = vlm_.encoder().layers;
  for (size_t i = 0; i < enc.size(); ++i)
    collect_adapter_params(enc[i], AdapterRole::FormerShort,
                           "memory.former_short.layer" + std::to_string(i),
                           out);
  const auto& dec = vlm_.decoder().layers;
  for (size_t i = 0; i < dec.size(); ++i)
    collect_adapter_params(dec[i], AdapterRole::FormerLong,
                           "memory.former_long.layer" + std::to_string(i),
                           out);
}

}  // namespace latmem
