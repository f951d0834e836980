#include "latmem/pretrain.hpp"

#include <stdexcept>
#include <string>
#include <vector>

#include "latmem/memory.hpp"
#include "latmem/tasks.hpp"

namespace latmem {

namespace {

struct Example {
  Tensor context;                             // n x d, hint rows constant
  std::vector<std::pair<int, int>> targets;   // (position, next token id)
};

// [mismatched visual rows][instruction][optional hint span][answer][EOS]
Example build_example(const ToyVlm& vlm, const PretrainConfig& cfg,
                      Rng& rng) {
  const auto& mcfg = vlm.config();
  const auto& vocab = vlm.vocab();
  const TaskFamily fams[] = {TaskFamily::Count, TaskFamily::Retrieve,
                             TaskFamily::RuleLookup, TaskFamily::Mixed};
  auto task = sample_task(fams[rng.below(4)], rng.next_u64(), mcfg);
  auto decoy = sample_task(fams[rng.below(4)], rng.next_u64(), mcfg);

  Tensor emb = vlm.decoder().embedding();
  auto emb_of = [&](const std::vector<int>& ids) {
    return embedding_rows(emb, ids);
  };

  std::vector<Tensor> rows;
  // the image never matches the question, so attending to it cannot help
  rows.push_back(vlm.project_visual(vlm.encode_image(decoy.image)));
  rows.push_back(emb_of(task.instruction));
  int pos = rows[0].rows() + static_cast<int>(task.instruction.size()) - 1;

  Example ex;
  const bool with_hint = !rng.bernoulli(cfg.no_hint_prob);
  if (with_hint) {
    const bool short_kind = rng.bernoulli(0.5);
    const int n = short_kind ? mcfg.N_s : mcfg.N_l;
    const int inv =
        short_kind ? vocab.mem_invoke_short() : vocab.mem_invoke_long();
    const int end = short_kind ? vocab.mem_end_short() : vocab.mem_end_long();

    ex.targets.emplace_back(pos, inv);
    rows.push_back(emb_of({inv}));
    ++pos;

    // hint rows: former-like background plus a variably scaled
    // answer-embedding component, cycled over the span. The graded scale
    // (down to zero) teaches a *linear-ish* readout of the answer direction
    // rather than a snap-to-nearest rule, which later gives policy-gradient
    // exploration a dense reward landscape around untrained former outputs
    Tensor hint = Tensor::zeros({n, mcfg.d});
    const auto& table = vlm.decoder().base_emb.data();
    const double gain = cfg.hint_gain_max * rng.uniform();
    for (int i = 0; i < n; ++i) {
      const int tok = task.answer[i % task.answer.size()];
      for (int j = 0; j < mcfg.d; ++j)
        hint.data()[static_cast<size_t>(i) * mcfg.d + j] =
            cfg.background_std * rng.normal() +
            gain * table[static_cast<size_t>(tok) * mcfg.d + j];
    }
    rows.push_back(hint);
    pos += n;

    ex.targets.emplace_back(pos - 1, end);
    rows.push_back(emb_of({end}));
    ++pos;
  }

  for (int tok : task.answer) {
    // answers are supervised only when a span was shown: the decoder must
    // stay memory-dependent instead of learning the answer marginal
    if (with_hint) ex.targets.emplace_back(pos, tok);
    rows.push_back(emb_of({tok}));
    ++pos;
  }
  ex.targets.emplace_back(pos, vocab.eos);
  rows.push_back(emb_of({vocab.eos}));

  ex.context = concat_rows(rows);
  return ex;
}

}  // namespace

PretrainReport pretrain_base(ToyVlm& vlm, const PretrainConfig& cfg,
                             uint64_t seed) {
  if (cfg.steps <= 0 || cfg.batch_size <= 0)
    throw std::runtime_error("pretrain: steps and batch_size must be > 0");

  // decoder only: the encoder and projector stay at their seeded values so
  // the memory formers keep an untouched trunk to adapt later
  ParamList base, params;
  vlm.collect_base_params(base);
  for (auto& p : base)
    if (p.name.rfind("decoder.", 0) == 0) params.push_back(p);

  AdamWConfig oc;
  oc.lr = cfg.learning_rate;
  oc.warmup_ratio = cfg.warmup_ratio;
  oc.weight_decay = 0.0;
  AdamW opt(params, oc);

  Rng rng(Rng::derive(seed, 0x9137));
  PretrainReport rep;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor acc = Tensor::scalar(0.0);
    long count = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto ex = build_example(vlm, cfg, rng);
      Tensor lsm = log_softmax_rows(
          vlm.sequence_logits(ex.context, AdapterRole::None));
      for (const auto& [pos, tok] : ex.targets) {
        acc = sub(acc, sum(narrow(narrow(lsm, 0, pos, 1), 1, tok, 1)));
        ++count;
      }
    }
    Tensor loss = scale(acc, 1.0 / static_cast<double>(count));
    const double lv = loss.item();
    if (step == 0) rep.first_loss = lv;
    rep.last_loss = lv;
    opt.zero_grad();
    loss.backward();
    opt.step(static_cast<double>(step) / cfg.steps);
    ++rep.steps;
  }
  return rep;
}

PretrainReport align_memory(ToyVlm& vlm, MemorySystem& memsys,
                            const AlignConfig& cfg, uint64_t seed) {
  if (cfg.steps <= 0 || cfg.batch_size <= 0)
    throw std::runtime_error("align: steps and batch_size must be > 0");
  const auto& mcfg = vlm.config();
  const auto& vocab = vlm.vocab();

  ParamList params;
  memsys.collect_params(params);
  AdamWConfig oc;
  oc.lr = cfg.learning_rate;
  oc.warmup_ratio = cfg.warmup_ratio;
  oc.weight_decay = 0.0;
  AdamW opt(params, oc);

  Rng rng(Rng::derive(seed, 77));
  PretrainReport rep;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor acc = Tensor::scalar(0.0);
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto task = sample_task(TaskFamily::Retrieve, rng.next_u64(), mcfg);
      const bool short_kind = rng.bernoulli(0.5);
      Tensor visual = vlm.encode_image(task.image);
      std::vector<Tensor> rows{vlm.project_visual(visual)};
      for (int id : task.instruction) rows.push_back(vlm.token_embedding(id));
      // the span is formed exactly the way decoding forms it: the query
      // sees the visual rows plus the hidden state of the first decode step
      auto step_out = vlm.decode_step(concat_rows(rows), AdapterRole::Policy);
      Tensor H = concat_rows({visual, step_out.hidden});
      Tensor Q = memsys.build_query(H);
      Tensor X = short_kind ? vlm.patch_tokens(task.image) : step_out.hidden;
      auto span = memsys.form_memory(
          short_kind ? MemoryKind::Short : MemoryKind::Long, X, Q);
      rows.push_back(vlm.token_embedding(
          short_kind ? vocab.mem_invoke_short() : vocab.mem_invoke_long()));
      rows.push_back(span.values);
      rows.push_back(vlm.token_embedding(
          short_kind ? vocab.mem_end_short() : vocab.mem_end_long()));
      Tensor full = concat_rows(rows);
      Tensor lsm =
          log_softmax_rows(vlm.sequence_logits(full, AdapterRole::Policy));
      acc = sub(acc, sum(narrow(narrow(lsm, 0, full.rows() - 1, 1), 1,
                                task.answer[0], 1)));
    }
    Tensor loss = scale(acc, 1.0 / cfg.batch_size);
    const double lv = loss.item();
    if (step == 0) rep.first_loss = lv;
    rep.last_loss = lv;
    opt.zero_grad();
    loss.backward();
    for (auto& p : params) p.tensor.grad();  // unused params keep zero grads
    opt.step(static_cast<double>(step) / cfg.steps);
    ++rep.steps;
  }
  return rep;
}

}  // namespace latmem
