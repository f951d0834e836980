#include "latmem/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "latmem/rng.hpp"

namespace latmem {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

// log-softmax over a raw double row; masked entries stay at -inf
std::vector<double> log_softmax_row(const std::vector<double>& v) {
  double mx = -kInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == -kInf) throw std::runtime_error("decode: fully masked logits");
  double z = 0.0;
  for (double x : v)
    if (x != -kInf) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(v.size(), -kInf);
  for (size_t i = 0; i < v.size(); ++i)
    if (v[i] != -kInf) out[i] = v[i] - lz;
  return out;
}

// additive top-k mask computed from logit values (keeps ties arbitrarily by
// threshold; k <= 0 keeps everything)
void apply_top_k(std::vector<double>& logits, int k) {
  if (k <= 0 || k >= static_cast<int>(logits.size())) return;
  std::vector<double> sorted(logits);
  std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end(),
                   std::greater<double>());
  const double thresh = sorted[k - 1];
  int kept = 0;
  for (auto& x : logits) {
    if (x >= thresh && kept < k)
      ++kept;
    else
      x = -kInf;
  }
}

int sample_from(const std::vector<double>& log_probs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int last_valid = -1;
  for (size_t i = 0; i < log_probs.size(); ++i) {
    if (log_probs[i] == -kInf) continue;
    last_valid = static_cast<int>(i);
    acc += std::exp(log_probs[i]);
    if (u < acc) return last_valid;
  }
  return last_valid;  // rounding tail
}

struct StreamTracker {
  const Vocabulary& vocab;
  const DecodePolicy& policy;
  const ModelConfig& cfg;
  int context_rows;
  int last_discrete;       // last discrete token in the full sequence
  int formed_invocations = 0;
  int discrete_steps = 0;  // sampled/forced discrete tokens so far

  bool span_room() const {
    int need = 2;  // invocation + end tokens
    int n_max = 0;
    if (policy.allow_short) n_max = std::max(n_max, cfg.N_s);
    if (policy.allow_long) n_max = std::max(n_max, cfg.N_l);
    return context_rows + need + n_max + 1 <= cfg.max_seq_len;
  }
  bool eligible() const {
    if (policy.eligibility == DecodePolicy::Eligibility::Anywhere) return true;
    return vocab.is_delimiter(last_discrete);
  }
  bool invocation_ok(bool has_memsys) const {
    return has_memsys && policy.allow_memory && !policy.replay &&
           formed_invocations < policy.max_invocations && eligible() &&
           span_room();
  }
};

}  // namespace

bool is_invocation_token(const Vocabulary& vocab, int id) {
  return id == vocab.mem_invoke_short() || id == vocab.mem_invoke_long();
}

std::optional<MemoryKind> invocation_kind(const Vocabulary& vocab, int id) {
  if (id == vocab.mem_invoke_short()) return MemoryKind::Short;
  if (id == vocab.mem_invoke_long()) return MemoryKind::Long;
  return std::nullopt;
}

void constrain_logits(std::vector<double>& logits, const Vocabulary& vocab,
                      const ConstraintState& st) {
  if (static_cast<int>(logits.size()) != vocab.extended_size())
    throw std::runtime_error("constrain_logits: width mismatch");
  if (st.span_open) {
    // spans are emitted by the engine; nothing discrete may be sampled here
    for (int i = 0; i < vocab.extended_size(); ++i)
      if (i != vocab.mem_end_short() && i != vocab.mem_end_long())
        logits[i] = -kInf;
    return;
  }
  logits[vocab.mem_end_short()] = -kInf;
  logits[vocab.mem_end_long()] = -kInf;
  if (!st.invocation_ok) {
    logits[vocab.mem_invoke_short()] = -kInf;
    logits[vocab.mem_invoke_long()] = -kInf;
  }
}

std::vector<int> Trajectory::generated_tokens(int exclude_ge) const {
  std::vector<int> out;
  for (const auto& e : elements) {
    if (e.kind != StreamElement::Kind::Token) continue;
    if (exclude_ge >= 0 && e.token >= exclude_ge) continue;
    out.push_back(e.token);
  }
  return out;
}

double Trajectory::total_log_prob() const {
  double s = 0.0;
  for (const auto& e : elements)
    if (e.kind == StreamElement::Kind::Token && e.sampled) s += e.log_prob;
  return s;
}

int Trajectory::invocation_count(MemoryKind k) const {
  int n = 0;
  for (const auto& r : invocations)
    if (r.kind == k && !r.skipped) ++n;
  return n;
}

Trajectory generate(const ToyVlm& vlm, const MemorySystem* memsys,
                    const Image& image, const std::vector<int>& instruction,
                    const DecodePolicy& policy, uint64_t seed) {
  NoGrad ng;
  const auto& cfg = vlm.config();
  const auto& vocab = vlm.vocab();
  Rng rng(Rng::derive(seed, 0xdec0de));

  Trajectory traj;
  traj.seed = seed;
  traj.prompt = instruction;

  const Tensor visual = vlm.encode_image(image);
  const Tensor vis_ctx = vlm.project_visual(visual);
  const Tensor patch = vlm.patch_tokens(image);

  std::vector<Tensor> rows;
  rows.push_back(vis_ctx);
  for (int id : instruction) rows.push_back(vlm.token_embedding(id));
  int context_len = vis_ctx.rows() + static_cast<int>(instruction.size());
  if (context_len + 1 > cfg.max_seq_len)
    throw std::runtime_error("generate: instruction does not fit context");

  std::vector<Tensor> segment;  // decoder states since stream start / last span
  StreamTracker st{vocab, policy, cfg, context_len,
                   instruction.empty() ? -1 : instruction.back()};

  const double temp = policy.temperature;
  auto forced_kind_at = [&](int step) -> std::optional<MemoryKind> {
    for (const auto& [s, k] : policy.forced_invocations)
      if (s == step) return k;
    return std::nullopt;
  };

  while (st.discrete_steps < policy.max_new_tokens &&
         st.context_rows + 1 <= cfg.max_seq_len) {
    Tensor context = concat_rows(rows);
    auto step = vlm.decode_step(context, policy.role);
    traj.forward_positions += st.context_rows;
    segment.push_back(step.hidden);

    const bool inv_ok = st.invocation_ok(memsys != nullptr);
    int token;
    bool sampled;
    double lp = 0.0;
    bool forced = false;

    std::optional<MemoryKind> replay_kind;
    if (policy.replay) replay_kind = forced_kind_at(st.discrete_steps);

    if (replay_kind) {
      token = *replay_kind == MemoryKind::Short ? vocab.mem_invoke_short()
                                                : vocab.mem_invoke_long();
      sampled = false;
      forced = true;
    } else if (inv_ok && policy.force_invoke_prob > 0.0 &&
               rng.bernoulli(policy.force_invoke_prob)) {
      MemoryKind k;
      if (policy.allow_short && policy.allow_long)
        k = rng.bernoulli(0.5) ? MemoryKind::Short : MemoryKind::Long;
      else
        k = policy.allow_short ? MemoryKind::Short : MemoryKind::Long;
      token = k == MemoryKind::Short ? vocab.mem_invoke_short()
                                     : vocab.mem_invoke_long();
      sampled = false;
      forced = true;
    } else {
      std::vector<double> logits = step.logits.data();
      if (policy.constrained)
        constrain_logits(logits, vocab,
                         {false, inv_ok && policy.sample_invocations});
      apply_top_k(logits, policy.top_k);
      if (temp <= 0.0) {
        token = static_cast<int>(std::max_element(logits.begin(),
                                                  logits.end()) -
                                 logits.begin());
        sampled = false;
      } else {
        for (auto& x : logits)
          if (x != -kInf) x /= temp;
        auto lsm = log_softmax_row(logits);
        token = sample_from(lsm, rng);
        lp = lsm[token];
        sampled = true;
      }
    }

    StreamElement el;
    el.kind = StreamElement::Kind::Token;
    el.token = token;
    el.sampled = sampled;
    el.log_prob = lp;
    traj.elements.push_back(el);
    rows.push_back(vlm.token_embedding(token));
    ++st.context_rows;
    ++st.discrete_steps;
    st.last_discrete = token;

    if (token == vocab.eos) break;

    auto kind = invocation_kind(vocab, token);
    if (!kind) continue;

    InvocationRecord rec;
    rec.kind = *kind;
    rec.element_index = static_cast<int>(traj.elements.size()) - 1;
    rec.step_index = st.discrete_steps - 1;
    rec.forced = forced;

    const bool kind_allowed =
        (*kind == MemoryKind::Short ? policy.allow_short : policy.allow_long) ||
        forced;
    const int n_kind = memsys ? memsys->span_len(*kind) : 0;
    if (!memsys || !kind_allowed ||
        st.formed_invocations >= policy.max_invocations ||
        st.context_rows + n_kind + 2 > cfg.max_seq_len) {
      rec.skipped = true;  // token stands, no span; decoding continues
      traj.invocations.push_back(std::move(rec));
      continue;
    }

    Tensor seg = concat_rows(segment);
    Tensor H = concat_rows({visual, seg});
    Tensor Q = memsys->build_query(H);
    Tensor X = *kind == MemoryKind::Short ? patch : seg;
    auto span = memsys->form_memory(*kind, X, Q);
    auto drawn = MemorySystem::sample_memory(span.values, policy.sigma_m, rng);

    rec.sigma = policy.sigma_m;
    rec.log_density = drawn.log_density;
    rec.sampled_values = drawn.values;
    rec.H = Tensor::from({H.rows(), H.cols()}, H.data());
    rec.X = Tensor::from({X.rows(), X.cols()}, X.data());

    const int d = cfg.d;
    for (int i = 0; i < n_kind; ++i) {
      StreamElement lat;
      lat.kind = StreamElement::Kind::Latent;
      lat.latent.assign(drawn.values.begin() + static_cast<long>(i) * d,
                        drawn.values.begin() + static_cast<long>(i + 1) * d);
      traj.elements.push_back(lat);
      rows.push_back(Tensor::from({1, d}, lat.latent));
    }
    st.context_rows += n_kind;

    const int end_id = *kind == MemoryKind::Short ? vocab.mem_end_short()
                                                  : vocab.mem_end_long();
    StreamElement end;
    end.kind = StreamElement::Kind::Token;
    end.token = end_id;
    end.sampled = false;
    traj.elements.push_back(end);
    rows.push_back(vlm.token_embedding(end_id));
    ++st.context_rows;
    ++st.discrete_steps;  // structural tokens count toward the budget
    st.last_discrete = end_id;

    ++st.formed_invocations;
    traj.invocations.push_back(std::move(rec));
    segment.clear();
  }
  return traj;
}

DecodePolicy swapped_kind_policy(const DecodePolicy& policy,
                                 const Trajectory& base) {
  DecodePolicy rev = policy;
  rev.replay = true;
  rev.force_invoke_prob = 0.0;
  rev.allow_short = rev.allow_long = true;
  rev.forced_invocations.clear();
  for (const auto& r : base.invocations)
    if (!r.skipped)
      rev.forced_invocations.emplace_back(r.step_index, other_kind(r.kind));
  return rev;
}

std::vector<Tensor> rescore_log_probs(const ToyVlm& vlm, const Image& image,
                                      const std::vector<int>& instruction,
                                      const Trajectory& traj,
                                      const DecodePolicy& policy,
                                      AdapterRole role, Rng* dropout_rng) {
  const auto& cfg = vlm.config();
  const auto& vocab = vlm.vocab();
  const int V = vocab.extended_size();
  if (policy.temperature <= 0.0)
    throw std::runtime_error("rescore_log_probs: greedy rollouts carry no "
                             "log-probs");

  Tensor vis_ctx;
  {
    NoGrad ng;  // the visual trunk holds no trainable policy parameters
    vis_ctx = vlm.project_visual(vlm.encode_image(image));
    vis_ctx = Tensor::from({vis_ctx.rows(), vis_ctx.cols()}, vis_ctx.data());
  }

  std::vector<Tensor> rows;
  rows.push_back(vis_ctx);
  for (int id : instruction) rows.push_back(vlm.token_embedding(id));
  for (const auto& e : traj.elements) {
    if (e.kind == StreamElement::Kind::Token)
      rows.push_back(vlm.token_embedding(e.token));
    else
      rows.push_back(Tensor::from({1, cfg.d}, e.latent));
  }
  Tensor context = concat_rows(rows);
  Tensor logits = vlm.sequence_logits(context, role, dropout_rng);

  // replay the constraint decisions the sampler made
  StreamTracker st{vocab, policy, cfg,
                   vis_ctx.rows() + static_cast<int>(instruction.size()),
                   instruction.empty() ? -1 : instruction.back()};
  const double inv_temp = 1.0 / policy.temperature;

  std::vector<Tensor> out;
  int pos = st.context_rows;  // row index of the current element
  for (size_t ei = 0; ei < traj.elements.size(); ++ei) {
    const auto& e = traj.elements[ei];
    if (e.kind == StreamElement::Kind::Latent) {
      ++pos;
      ++st.context_rows;
      continue;
    }
    if (e.sampled) {
      Tensor row = narrow(logits, 0, pos - 1, 1);
      std::vector<double> masked = row.data();
      if (policy.constrained)
        constrain_logits(
            masked, vocab,
            {false, st.invocation_ok(true) && policy.sample_invocations});
      apply_top_k(masked, policy.top_k);
      // additive constant mask reproducing the sampler's view
      std::vector<double> mask(V, 0.0);
      for (int i = 0; i < V; ++i)
        if (masked[i] == -kInf) mask[i] = -kInf;
      row = add(scale(row, inv_temp), Tensor::from({1, V}, mask));
      Tensor lsm = log_softmax_rows(row);
      out.push_back(narrow(lsm, 1, e.token, 1));
    }
    ++pos;
    ++st.context_rows;
    ++st.discrete_steps;
    st.last_discrete = e.token;
    if (invocation_kind(vocab, e.token)) {
      // find the matching record to know whether a span was formed
      for (const auto& r : traj.invocations)
        if (r.element_index == static_cast<int>(ei) && !r.skipped)
          ++st.formed_invocations;
    }
  }
  return out;
}

LatencyReport measure_latency(const ToyVlm& vlm, const MemorySystem& memsys,
                              const std::vector<Image>& images,
                              const std::vector<std::vector<int>>& prompts,
                              const DecodePolicy& policy, uint64_t seed) {
  if (images.size() != prompts.size() || images.empty())
    throw std::runtime_error("measure_latency: empty or mismatched suite");
  DecodePolicy vanilla = policy;
  vanilla.allow_memory = false;
  vanilla.force_invoke_prob = 0.0;

  LatencyReport rep;
  rep.tasks = static_cast<int>(images.size());
  using clock = std::chrono::steady_clock;
  long van_pos = 0, mem_pos = 0;

  auto t0 = clock::now();
  for (size_t i = 0; i < images.size(); ++i)
    van_pos +=
        generate(vlm, nullptr, images[i], prompts[i], vanilla, seed + i)
            .forward_positions;
  auto t1 = clock::now();
  for (size_t i = 0; i < images.size(); ++i)
    mem_pos +=
        generate(vlm, &memsys, images[i], prompts[i], policy, seed + i)
            .forward_positions;
  auto t2 = clock::now();

  const double n = static_cast<double>(rep.tasks);
  rep.vanilla_seconds_per_task =
      std::chrono::duration<double>(t1 - t0).count() / n;
  rep.memory_seconds_per_task =
      std::chrono::duration<double>(t2 - t1).count() / n;
  rep.vanilla_positions_per_task = static_cast<double>(van_pos) / n;
  rep.memory_positions_per_task = static_cast<double>(mem_pos) / n;
  rep.overhead_fraction =
      van_pos > 0
          ? static_cast<double>(mem_pos - van_pos) / static_cast<double>(van_pos)
          : 0.0;
  return rep;
}

std::string trajectory_to_json(const Trajectory& traj) {
  nlohmann::json j;
  j["task_id"] = traj.task_id;
  j["seed"] = traj.seed;
  j["score"] = traj.score;
  j["prompt"] = traj.prompt;
  nlohmann::json elems = nlohmann::json::array();
  for (const auto& e : traj.elements) {
    if (e.kind == StreamElement::Kind::Token)
      elems.push_back({{"t", e.token},
                       {"sampled", e.sampled},
                       {"lp", e.log_prob}});
    else
      elems.push_back({{"latent", static_cast<int>(e.latent.size())}});
  }
  j["elements"] = std::move(elems);
  nlohmann::json invs = nlohmann::json::array();
  for (const auto& r : traj.invocations)
    invs.push_back({{"kind", to_string(r.kind)},
                    {"pos", r.element_index},
                    {"step", r.step_index},
                    {"forced", r.forced},
                    {"skipped", r.skipped},
                    {"span", static_cast<int>(r.sampled_values.empty()
                                                  ? 0
                                                  : r.sampled_values.size())}});
  j["invocations"] = std::move(invs);
  return j.dump();
}

}  // namespace latmem
