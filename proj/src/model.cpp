#include "latmem/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace latmem {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

Tensor extend_vocabulary(const Tensor& base_embedding, int delimiter_id,
                         uint64_t seed, double sigma_scale) {
  const int v = base_embedding.rows();
  const int d = base_embedding.cols();
  if (delimiter_id < 0 || delimiter_id >= v)
    throw std::runtime_error("extend_vocabulary: delimiter id " +
                             std::to_string(delimiter_id) +
                             " out of base vocabulary range " +
                             std::to_string(v));
  double rms = 0.0;
  for (int j = 0; j < d; ++j) {
    const double x = base_embedding(delimiter_id, j);
    rms += x * x;
  }
  rms = std::sqrt(rms / d);
  const double sigma = sigma_scale * rms;

  Rng rng(Rng::derive(seed, 0x76f0ca));
  auto out = Tensor::zeros({v + 4, d});
  std::copy(base_embedding.data().begin(), base_embedding.data().end(),
            out.data().begin());
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < d; ++j)
      out.data()[static_cast<size_t>(v + r) * d + j] =
          base_embedding(delimiter_id, j) + sigma * rng.normal();
  return out;
}

Linear make_linear(int in, int out, Rng& rng, bool bias) {
  Linear l;
  l.W = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(in), true);
  if (bias) l.b = Tensor::zeros({1, out}, true);
  return l;
}

Tensor LowRankAdapter::delta(const Tensor& x, Rng* dropout_rng) const {
  const Tensor xin =
      dropout_rng ? dropout(x, dropout_rate, *dropout_rng) : x;
  return scale(matmul(matmul(xin, A), B), alpha / rank);
}

LowRankAdapter make_adapter(int in, int out, int rank, double alpha,
                            double dropout_rate, Rng& rng) {
  LowRankAdapter a;
  a.A = Tensor::randn({in, rank}, rng, 1.0 / std::sqrt(in), true);
  a.B = Tensor::zeros({rank, out}, true);
  a.rank = rank;
  a.alpha = alpha;
  a.dropout_rate = dropout_rate;
  return a;
}

TransformerLayer make_layer(int d, int heads, LayerStyle style, Rng& rng) {
  TransformerLayer l;
  l.wq = make_linear(d, d, rng, false);
  l.wk = make_linear(d, d, rng, false);
  l.wv = make_linear(d, d, rng, false);
  l.wo = make_linear(d, d, rng, false);
  l.ln1_g = Tensor::full({1, d}, 1.0);
  l.ln1_g.set_requires_grad(true);
  l.ln1_b = Tensor::zeros({1, d}, true);
  l.ln2_g = Tensor::full({1, d}, 1.0);
  l.ln2_g.set_requires_grad(true);
  l.ln2_b = Tensor::zeros({1, d}, true);
  l.ff1 = make_linear(d, 4 * d, rng, true);
  l.ff2 = make_linear(4 * d, d, rng, true);
  l.heads = heads;
  l.style = style;
  return l;
}

Tensor causal_mask(int n) {
  auto m = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      m.data()[static_cast<size_t>(i) * n + j] = -kInf;
  return m;
}

Tensor TransformerLayer::forward(const Tensor& x, const Tensor& mask,
                                 AdapterRole role, Rng* dropout_rng,
                                 std::vector<Tensor>* probs_out) const {
  const int d = x.cols();
  const int dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const AdapterPair* pair = nullptr;
  if (role != AdapterRole::None) {
    auto it = adapters.find(role);
    if (it != adapters.end()) pair = &it->second;
  }

  auto self_attention = [&](const Tensor& ln_x) {
    Tensor q = wq.forward(ln_x);
    Tensor k = wk.forward(ln_x);
    Tensor v = wv.forward(ln_x);
    if (pair) {
      q = add(q, pair->q.delta(ln_x, dropout_rng));
      v = add(v, pair->v.delta(ln_x, dropout_rng));
    }
    std::vector<Tensor> heads_out;
    heads_out.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      auto qh = narrow(q, 1, h * dh, dh);
      auto kh = narrow(k, 1, h * dh, dh);
      auto vh = narrow(v, 1, h * dh, dh);
      auto probs =
          softmax_masked(scale(matmul_nt(qh, kh), att_scale), mask);
      if (probs_out) probs_out->push_back(probs);
      heads_out.push_back(matmul(probs, vh));
    }
    return wo.forward(concat_cols(heads_out));
  };
  auto feed_forward = [&](const Tensor& h) {
    return ff2.forward(gelu(ff1.forward(h)));
  };

  if (style == LayerStyle::PreNorm) {
    auto x1 = add(x, self_attention(layer_norm(x, ln1_g, ln1_b)));
    return add(x1, feed_forward(layer_norm(x1, ln2_g, ln2_b)));
  }
  // PostMix: FF(LN(x + SA(LN(x)))) + x
  auto t = add(x, self_attention(layer_norm(x, ln1_g, ln1_b)));
  return add(feed_forward(layer_norm(t, ln2_g, ln2_b)), x);
}

// ------------------------------------------------------------- VisionEncoder

Tensor VisionEncoder::embed_patches(const Image& img,
                                    const ModelConfig& cfg) const {
  if (img.size != cfg.image_size || img.channels != cfg.channels)
    throw std::runtime_error(
        "encode_image: image grid mismatch, got " + std::to_string(img.size) +
        "x" + std::to_string(img.size) + "x" + std::to_string(img.channels) +
        ", configured " + std::to_string(cfg.image_size) + "x" +
        std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels));
  const int g = cfg.patch_grid;
  const int p = cfg.image_size / g;
  const int pd = cfg.patch_dim();
  auto patches = Tensor::zeros({g * g, pd});
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      double* row = &patches.data()[static_cast<size_t>(py * g + px) * pd];
      int k = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < cfg.channels; ++c)
            row[k++] = img.at(py * p + y, px * p + x, c);
    }
  return add(patch_embed.forward(patches), pos_emb);
}

Tensor VisionEncoder::run_stack(const Tensor& x, AdapterRole role,
                                Rng* dropout_rng) const {
  auto mask = Tensor::zeros({x.rows(), x.rows()});
  Tensor h = x;
  for (const auto& layer : layers)
    h = layer.forward(h, mask, role, dropout_rng, nullptr);
  return layer_norm(h, ln_g, ln_b);
}

Tensor VisionEncoder::encode(const Image& img, const ModelConfig& cfg) const {
  return run_stack(embed_patches(img, cfg), AdapterRole::None, nullptr);
}

// ------------------------------------------------------------------- Decoder

Tensor Decoder::embedding() const {
  return concat_rows(
      {base_emb, mem_emb[0], mem_emb[1], mem_emb[2], mem_emb[3]});
}

Tensor Decoder::hidden_states(const Tensor& context, AdapterRole role,
                              Rng* dropout_rng) const {
  const int n = context.rows();
  if (n == 0) throw std::runtime_error("decode: empty context");
  if (n > pos_emb.rows())
    throw std::runtime_error("decode: context length " + std::to_string(n) +
                             " exceeds max sequence length " +
                             std::to_string(pos_emb.rows()));
  auto x = add(context, narrow(pos_emb, 0, 0, n));
  auto mask = causal_mask(n);
  for (const auto& layer : layers)
    x = layer.forward(x, mask, role, dropout_rng, nullptr);
  return layer_norm(x, ln_g, ln_b);
}

Tensor Decoder::logits_from_hidden(const Tensor& hidden) const {
  return matmul_nt(hidden, embedding());
}

Tensor Decoder::run_stack(const Tensor& x, AdapterRole role,
                          Rng* dropout_rng) const {
  auto mask = causal_mask(x.rows());
  Tensor h = x;
  for (const auto& layer : layers)
    h = layer.forward(h, mask, role, dropout_rng, nullptr);
  return layer_norm(h, ln_g, ln_b);
}

// -------------------------------------------------------------------- ToyVlm

ToyVlm::ToyVlm(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  vocab_.base_size = cfg.vocab_size;
  const int d = cfg.d;

  Rng enc_rng(Rng::derive(seed, 1));
  encoder_.patch_embed = make_linear(cfg.patch_dim(), d, enc_rng, true);
  encoder_.pos_emb =
      Tensor::randn({cfg.patch_count(), d}, enc_rng, 0.02, true);
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    auto layer = make_layer(d, cfg.heads, LayerStyle::PreNorm, enc_rng);
    layer.adapters[AdapterRole::FormerShort] = AdapterPair{
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     enc_rng),
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     enc_rng)};
    encoder_.layers.push_back(std::move(layer));
  }
  encoder_.ln_g = Tensor::full({1, d}, 1.0);
  encoder_.ln_g.set_requires_grad(true);
  encoder_.ln_b = Tensor::zeros({1, d}, true);

  Rng dec_rng(Rng::derive(seed, 2));
  decoder_.base_emb =
      Tensor::randn({cfg.vocab_size, d}, dec_rng, 1.0 / std::sqrt(d), true);
  auto extended =
      extend_vocabulary(decoder_.base_emb, vocab_.period, seed, 0.01);
  for (int r = 0; r < 4; ++r) {
    auto row = Tensor::zeros({1, d}, true);
    for (int j = 0; j < d; ++j)
      row.data()[j] = extended(cfg.vocab_size + r, j);
    decoder_.mem_emb[r] = row;
  }
  decoder_.pos_emb = Tensor::randn({cfg.max_seq_len, d}, dec_rng, 0.02, true);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    auto layer = make_layer(d, cfg.heads, LayerStyle::PreNorm, dec_rng);
    layer.adapters[AdapterRole::FormerLong] = AdapterPair{
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     dec_rng),
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     dec_rng)};
    layer.adapters[AdapterRole::Policy] = AdapterPair{
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     dec_rng),
        make_adapter(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                     dec_rng)};
    decoder_.layers.push_back(std::move(layer));
  }
  decoder_.ln_g = Tensor::full({1, d}, 1.0);
  decoder_.ln_g.set_requires_grad(true);
  decoder_.ln_b = Tensor::zeros({1, d}, true);

  Rng proj_rng(Rng::derive(seed, 3));
  projector_ = make_linear(d, d, proj_rng, cfg.projector_bias);
}

Tensor ToyVlm::encode_image(const Image& img) const {
  return encoder_.encode(img, cfg_);
}

Tensor ToyVlm::patch_tokens(const Image& img) const {
  return encoder_.embed_patches(img, cfg_);
}

Tensor ToyVlm::project_visual(const Tensor& tokens) const {
  if (tokens.cols() != projector_.W.rows())
    throw std::runtime_error("project_visual: width " +
                             std::to_string(tokens.cols()) +
                             " does not match projector input " +
                             std::to_string(projector_.W.rows()));
  return projector_.forward(tokens);
}

ToyVlm::StepOut ToyVlm::decode_step(const Tensor& context, AdapterRole role,
                                    Rng* dropout_rng) const {
  auto hidden = decoder_.hidden_states(context, role, dropout_rng);
  auto last = narrow(hidden, 0, hidden.rows() - 1, 1);
  return {matmul_nt(last, decoder_.embedding()), last};
}

Tensor ToyVlm::sequence_logits(const Tensor& context, AdapterRole role,
                               Rng* dropout_rng) const {
  return decoder_.logits_from_hidden(
      decoder_.hidden_states(context, role, dropout_rng));
}

Tensor ToyVlm::token_embedding(int id) const {
  if (id < 0 || id >= vocab_.extended_size())
    throw std::runtime_error("token_embedding: id out of range");
  if (id < vocab_.base_size)
    return narrow(decoder_.base_emb, 0, id, 1);
  return decoder_.mem_emb[id - vocab_.base_size];
}

void collect_layer_params(const TransformerLayer& layer,
                          const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".wq.W", layer.wq.W, 1.0});
  out.push_back({prefix + ".wk.W", layer.wk.W, 1.0});
  out.push_back({prefix + ".wv.W", layer.wv.W, 1.0});
  out.push_back({prefix + ".wo.W", layer.wo.W, 1.0});
  out.push_back({prefix + ".ln1.g", layer.ln1_g, 1.0});
  out.push_back({prefix + ".ln1.b", layer.ln1_b, 1.0});
  out.push_back({prefix + ".ln2.g", layer.ln2_g, 1.0});
  out.push_back({prefix + ".ln2.b", layer.ln2_b, 1.0});
  out.push_back({prefix + ".ff1.W", layer.ff1.W, 1.0});
  out.push_back({prefix + ".ff1.b", layer.ff1.b, 1.0});
  out.push_back({prefix + ".ff2.W", layer.ff2.W, 1.0});
  out.push_back({prefix + ".ff2.b", layer.ff2.b, 1.0});
}

void collect_adapter_params(const TransformerLayer& layer, AdapterRole role,
                            const std::string& prefix, ParamList& out) {
  auto it = layer.adapters.find(role);
  if (it == layer.adapters.end()) return;
  out.push_back({prefix + ".q.A", it->second.q.A, 1.0});
  out.push_back({prefix + ".q.B", it->second.q.B, 1.0});
  out.push_back({prefix + ".v.A", it->second.v.A, 1.0});
  out.push_back({prefix + ".v.B", it->second.v.B, 1.0});
}

void ToyVlm::collect_base_params(ParamList& out) const {
  out.push_back({"encoder.patch_embed.W", encoder_.patch_embed.W, 1.0});
  out.push_back({"encoder.patch_embed.b", encoder_.patch_embed.b, 1.0});
  out.push_back({"encoder.pos_emb", encoder_.pos_emb, 1.0});
  for (size_t i = 0; i < encoder_.layers.size(); ++i)
    collect_layer_params(encoder_.layers[i],
                         "encoder.layer" + std::to_string(i), out);
  out.push_back({"encoder.ln.g", encoder_.ln_g, 1.0});
  out.push_back({"encoder.ln.b", encoder_.ln_b, 1.0});

  out.push_back({"decoder.base_emb", decoder_.base_emb, 1.0});
  out.push_back({"decoder.pos_emb", decoder_.pos_emb, 1.0});
  for (size_t i = 0; i < decoder_.layers.size(); ++i)
    collect_layer_params(decoder_.layers[i],
                         "decoder.layer" + std::to_string(i), out);
  out.push_back({"decoder.ln.g", decoder_.ln_g, 1.0});
  out.push_back({"decoder.ln.b", decoder_.ln_b, 1.0});

  out.push_back({"projector.W", projector_.W, 1.0});
  if (projector_.b.defined())
    out.push_back({"projector.b", projector_.b, 1.0});
}

void ToyVlm::collect_policy_params(ParamList& out) const {
  // invocation rows at full rate, end rows as structural markers
  out.push_back({"policy.mem_emb.invoke_short", decoder_.mem_emb[0], 1.0});
  out.push_back(
      {"policy.mem_emb.end_short", decoder_.mem_emb[1], cfg_.end_token_lr_mult});
  out.push_back({"policy.mem_emb.invoke_long", decoder_.mem_emb[2], 1.0});
  out.push_back(
      {"policy.mem_emb.end_long", decoder_.mem_emb[3], cfg_.end_token_lr_mult});
  for (size_t i = 0; i < decoder_.layers.size(); ++i)
    collect_adapter_params(decoder_.layers[i], AdapterRole::Policy,
                           "policy.adapter.layer" + std::to_string(i), out);
}

}  // namespace latmem
