#include "latmem/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "latmem/rng.hpp"

namespace latmem {

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot_values(const ParamList& params) {
  Snapshot s;
  s.reserve(params.size());
  for (const auto& p : params) s.push_back(p.tensor.data());
  return s;
}

void restore_values(ParamList& params, const Snapshot& s) {
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = s[i];
}

// temporarily runs the model under the reference parameter values
struct ScopedSwap {
  ParamList& params;
  Snapshot saved;
  ScopedSwap(ParamList& p, const Snapshot& ref)
      : params(p), saved(snapshot_values(p)) {
    restore_values(params, ref);
  }
  ~ScopedSwap() { restore_values(params, saved); }
};

bool has_formed_invocation(const Trajectory& t) {
  for (const auto& r : t.invocations)
    if (!r.skipped) return true;
  return false;
}

DecodePolicy::Eligibility eligibility_for(const StageConfig& stage,
                                          int epoch) {
  if (stage.curriculum == "delimiter_only")
    return DecodePolicy::Eligibility::DelimiterOnly;
  if (stage.curriculum == "between_delimiters")
    return DecodePolicy::Eligibility::Anywhere;
  // auto: stage I widens eligibility after the first epoch; stage II keeps
  // invocations at delimiters where the answer structure expects them
  if (stage.stage == 1 && epoch > 0)
    return DecodePolicy::Eligibility::Anywhere;
  return DecodePolicy::Eligibility::DelimiterOnly;
}

// re-score every formed invocation's sampled span under the current
// builder/former parameters (differentiable when the graph is recording)
std::vector<Tensor> invocation_densities(const MemorySystem& memsys,
                                         const Trajectory& t) {
  std::vector<Tensor> out;
  for (const auto& rec : t.invocations) {
    if (rec.skipped) continue;
    Tensor q = memsys.build_query(rec.H);
    auto span = memsys.form_memory(rec.kind, rec.X, q);
    out.push_back(
        gaussian_log_density(span.values, rec.sampled_values, rec.sigma));
  }
  return out;
}

}  // namespace

std::pair<double, double> group_stats(const std::vector<double>& scores) {
  if (scores.size() < 2)
    throw std::runtime_error("group_stats: need at least 2 scores, got " +
                             std::to_string(scores.size()));
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(scores.size());
  return {mean, std::sqrt(var)};
}

double advantage(double s, double mean, double spread, double eps) {
  if (eps <= 0.0) throw std::runtime_error("advantage: eps must be > 0");
  return (s - mean) / (spread + eps);
}

double delta_score(const Trajectory& t, const Trajectory& t_base) {
  if (t.task_id != t_base.task_id)
    throw std::runtime_error("delta_score: task mismatch '" + t.task_id +
                             "' vs '" + t_base.task_id + "'");
  return t.score - t_base.score;
}

double penalty_type(const Trajectory& t, double score_rev) {
  if (!has_formed_invocation(t)) return 0.0;
  return std::max(0.0, score_rev - t.score);
}

double penalty_neg(const Trajectory& t, double group_mean) {
  if (!has_formed_invocation(t)) return 0.0;
  return std::max(0.0, group_mean - t.score);
}

std::vector<double> group_advantages(const GroupBatch& batch,
                                     const StageConfig& stage) {
  const size_t g = batch.delta.size();
  std::vector<double> rewards(g);
  for (size_t i = 0; i < g; ++i) {
    rewards[i] = batch.delta[i];
    if (stage.stage == 2)
      rewards[i] -=
          stage.penalty_intensity * (batch.p_type[i] + batch.p_neg[i]);
  }
  auto [mean, spread] = group_stats(rewards);
  std::vector<double> adv(g);
  for (size_t i = 0; i < g; ++i)
    adv[i] = advantage(rewards[i], mean, spread, stage.advantage_eps);
  return adv;
}

GrpoLossOut grpo_loss(const GroupBatch& batch, const StageConfig& stage,
                      const std::vector<std::vector<Tensor>>& new_ld,
                      const std::vector<std::vector<double>>& old_ld,
                      const std::vector<std::vector<double>>& ref_ld) {
  const size_t g = batch.delta.size();
  if (new_ld.size() != g || old_ld.size() != g)
    throw std::runtime_error("grpo_loss: density group size mismatch");
  if (ref_ld.size() != g)
    throw std::runtime_error("grpo_loss: missing reference densities");

  GrpoLossOut out;
  out.advantages = group_advantages(batch, stage);

  Tensor surrogate = Tensor::scalar(0.0);
  Tensor kl_sum = Tensor::scalar(0.0);
  long kl_units = 0;
  for (size_t i = 0; i < g; ++i) {
    if (new_ld[i].size() != old_ld[i].size() ||
        new_ld[i].size() != ref_ld[i].size())
      throw std::runtime_error("grpo_loss: per-trajectory density counts "
                               "disagree");
    Tensor log_rho = Tensor::scalar(0.0);
    for (size_t u = 0; u < new_ld[i].size(); ++u) {
      // densities arrive as 1x1 or length-1 tensors; sum() flattens both
      Tensor nu = sum(new_ld[i][u]);
      log_rho = add(log_rho, add_scalar(nu, -old_ld[i][u]));
      // k3 estimator: exp(r) - r - 1 with r = ref - new; nonnegative
      Tensor r = scale(add_scalar(nu, -ref_ld[i][u]), -1.0);
      kl_sum = add(kl_sum, add_scalar(sub(exp_of(r), r), -1.0));
      ++kl_units;
    }
    Tensor rho = exp_of(log_rho);
    Tensor unclipped = scale(rho, out.advantages[i]);
    Tensor clipped = scale(
        clamp(rho, 1.0 - stage.clip_ratio, 1.0 + stage.clip_ratio),
        out.advantages[i]);
    surrogate = add(surrogate, minimum(unclipped, clipped));
  }
  Tensor kl_mean =
      kl_units > 0 ? scale(kl_sum, 1.0 / static_cast<double>(kl_units))
                   : kl_sum;
  out.kl_per_token = kl_mean.item();
  out.loss = add(scale(surrogate, -1.0 / static_cast<double>(g)),
                 scale(kl_mean, stage.kl_penalty_coefficient));
  return out;
}

std::string metrics_csv_header() {
  return "stage,step,mean_score,mean_delta,inv_rate_short,inv_rate_long,"
         "p_type,p_neg,kl,loss";
}

std::string metrics_csv_row(const StepMetrics& m) {
  std::ostringstream os;
  os.precision(12);
  os << m.stage << ',' << m.step << ',' << m.mean_score << ',' << m.mean_delta
     << ',' << m.inv_rate_short << ',' << m.inv_rate_long << ','
     << m.p_type_mean << ',' << m.p_neg_mean << ',' << m.kl << ',' << m.loss;
  return os.str();
}

TrainReport run_stage(const StageConfig& stage, ToyVlm& vlm,
                      MemorySystem& memsys, uint64_t seed,
                      std::vector<StepMetrics>* metrics,
                      int stop_after_steps) {
  stage.validate();
  const bool stage1 = stage.stage == 1;
  const auto& cfg = vlm.config();
  const Vocabulary& vocab = vlm.vocab();
  const TaskFamily family = task_family_from_string(stage.task_family);
  const RuleBook rules = RuleBook::v1();

  ParamList params;
  if (stage1)
    memsys.collect_params(params);
  else
    vlm.collect_policy_params(params);

  AdamWConfig ocfg;
  ocfg.lr = stage.learning_rate;
  ocfg.weight_decay = stage.weight_decay;
  AdamW opt(params, ocfg);
  const Snapshot ref = snapshot_values(params);

  const int steps_per_epoch =
      std::max(1, stage.tasks_per_epoch / stage.batch_size);
  const double total_steps =
      static_cast<double>(steps_per_epoch) * stage.epochs;

  TrainReport rep;
  uint64_t task_counter = 0, rollout_counter = 0;

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    const double sigma =
        stage1 ? stage.sigma_m * std::pow(stage.sigma_anneal, epoch)
               : stage.sigma_m;
    DecodePolicy pol;
    pol.temperature = stage.temperature;
    pol.max_new_tokens = stage.max_new_tokens;
    pol.sigma_m = sigma;
    pol.role = AdapterRole::Policy;
    pol.eligibility = eligibility_for(stage, epoch);
    pol.force_invoke_prob = stage1 ? stage.invoke_prob : 0.0;
    DecodePolicy base_pol = pol;
    base_pol.allow_memory = false;
    base_pol.force_invoke_prob = 0.0;

    for (int s = 0; s < steps_per_epoch; ++s) {
      if (stop_after_steps >= 0 && rep.optimizer_steps >= stop_after_steps)
        return rep;

      Tensor loss_acc = Tensor::scalar(0.0);
      StepMetrics m;
      m.stage = stage.stage;
      m.step = rep.optimizer_steps;
      double kl_acc = 0.0;
      int traj_count = 0, inv_short = 0, inv_long = 0;

      for (int b = 0; b < stage.batch_size; ++b) {
        TaskInstance task = sample_task(
            family, Rng::derive(seed, 1000003 + task_counter++), cfg, rules);

        std::vector<Trajectory> group(stage.group_size);
        GroupBatch batch;
        std::vector<std::vector<Tensor>> new_ld;
        std::vector<std::vector<double>> old_ld, ref_ld;

        for (int gi = 0; gi < stage.group_size; ++gi) {
          const uint64_t rseed = Rng::derive(seed, 0xabcd + rollout_counter++);
          auto& t = group[gi];
          t = generate(vlm, &memsys, task.image, task.instruction, pol, rseed);
          t.task_id = task.task_id;
          t.score =
              score_tokens(t.generated_tokens(vocab.base_size), task);
          auto t_base = generate(vlm, nullptr, task.image, task.instruction,
                                 base_pol, rseed);
          t_base.task_id = task.task_id;
          t_base.score =
              score_tokens(t_base.generated_tokens(vocab.base_size), task);
          batch.delta.push_back(delta_score(t, t_base));
          if (has_formed_invocation(t)) {
            if (t.invocation_count(MemoryKind::Short) > 0) ++inv_short;
            if (t.invocation_count(MemoryKind::Long) > 0) ++inv_long;
          }
          m.mean_score += t.score;
          m.mean_delta += batch.delta.back();
          ++traj_count;
        }

        // stage II penalties need the raw-score group mean
        double score_mean = 0.0;
        for (const auto& t : group) score_mean += t.score;
        score_mean /= static_cast<double>(group.size());
        for (auto& t : group) {
          double p_t = 0.0, p_n = 0.0;
          if (!stage1 && has_formed_invocation(t)) {
            auto rev = generate(vlm, &memsys, task.image, task.instruction,
                                swapped_kind_policy(pol, t), t.seed);
            rev.task_id = task.task_id;
            rev.score =
                score_tokens(rev.generated_tokens(vocab.base_size), task);
            p_t = penalty_type(t, rev.score);
            p_n = penalty_neg(t, score_mean);
          }
          batch.p_type.push_back(p_t);
          batch.p_neg.push_back(p_n);
          m.p_type_mean += p_t;
          m.p_neg_mean += p_n;
        }

        for (const auto& t : group) {
          if (stage1) {
            new_ld.push_back(invocation_densities(memsys, t));
            std::vector<double> olds;
            for (const auto& rec : t.invocations)
              if (!rec.skipped) olds.push_back(rec.log_density);
            old_ld.push_back(olds);
          } else {
            new_ld.push_back(rescore_log_probs(vlm, task.image,
                                               task.instruction, t, pol,
                                               AdapterRole::Policy));
            std::vector<double> olds;
            for (const auto& e : t.elements)
              if (e.kind == StreamElement::Kind::Token && e.sampled)
                olds.push_back(e.log_prob);
            old_ld.push_back(olds);
          }
          {
            ScopedSwap swap(params, ref);
            NoGrad ng;
            std::vector<double> refs;
            if (stage1) {
              for (const auto& d : invocation_densities(memsys, t))
                refs.push_back(d.item());
            } else {
              for (const auto& d :
                   rescore_log_probs(vlm, task.image, task.instruction, t,
                                     pol, AdapterRole::Policy))
                refs.push_back(d.item());
            }
            ref_ld.push_back(refs);
          }
        }

        auto out = grpo_loss(batch, stage, new_ld, old_ld, ref_ld);
        loss_acc = add(loss_acc, out.loss);
        kl_acc += out.kl_per_token;
      }

      Tensor loss = scale(loss_acc, 1.0 / stage.batch_size);
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val))
        throw DivergenceError("run_stage: non-finite loss at step " +
                              std::to_string(rep.optimizer_steps));

      opt.zero_grad();
      loss.backward();
      for (auto& p : params) p.tensor.grad();  // zero grad for unused params
      opt.step(static_cast<double>(rep.optimizer_steps) / total_steps);

      const double inv_n = 1.0 / std::max(1, traj_count);
      m.mean_score *= inv_n;
      m.mean_delta *= inv_n;
      m.inv_rate_short = inv_short * inv_n;
      m.inv_rate_long = inv_long * inv_n;
      m.p_type_mean *= inv_n;
      m.p_neg_mean *= inv_n;
      m.kl = kl_acc / stage.batch_size;
      m.loss = loss_val;
      rep.steps.push_back(m);
      if (metrics) metrics->push_back(m);
      ++rep.optimizer_steps;

      if (m.kl > stage.target_kl_per_token) {
        ++rep.kl_early_stops;
        break;  // next epoch re-anchors exploration
      }
    }
  }
  return rep;
}

EvalReport evaluate(const ToyVlm& vlm, const MemorySystem& memsys,
                    TaskFamily family, int n_tasks, DecodePolicy policy,
                    uint64_t seed, bool keep_trajectories) {
  const auto& cfg = vlm.config();
  const Vocabulary& vocab = vlm.vocab();
  DecodePolicy base_pol = policy;
  base_pol.allow_memory = false;
  base_pol.force_invoke_prob = 0.0;

  EvalReport rep;
  for (int i = 0; i < n_tasks; ++i) {
    TaskInstance task =
        sample_task(family, Rng::derive(seed, 0xe7a1 + i), cfg);
    const uint64_t rseed = Rng::derive(seed, 0x5eed + i);
    auto t = generate(vlm, &memsys, task.image, task.instruction, policy,
                      rseed);
    t.task_id = task.task_id;
    t.score = score_tokens(t.generated_tokens(vocab.base_size), task);
    auto t_base =
        generate(vlm, nullptr, task.image, task.instruction, base_pol, rseed);
    t_base.task_id = task.task_id;
    t_base.score =
        score_tokens(t_base.generated_tokens(vocab.base_size), task);

    rep.mean_score += t.score;
    rep.mean_base_score += t_base.score;
    rep.mean_delta += delta_score(t, t_base);
    if (has_formed_invocation(t)) {
      ++rep.invoking_tasks;
      if (t.invocation_count(MemoryKind::Short) > 0) rep.inv_rate_short += 1;
      if (t.invocation_count(MemoryKind::Long) > 0) rep.inv_rate_long += 1;
      if (t.score < t_base.score) ++rep.harmful_invocations;
    }
    if (keep_trajectories) rep.trajectories.push_back(std::move(t));
  }
  const double inv_n = 1.0 / std::max(1, n_tasks);
  rep.mean_score *= inv_n;
  rep.mean_base_score *= inv_n;
  rep.mean_delta *= inv_n;
  rep.inv_rate_short *= inv_n;
  rep.inv_rate_long *= inv_n;
  return rep;
}

DecodePolicy ablation_policy(const std::string& mode,
                             const StageConfig& stage) {
  DecodePolicy p;
  p.temperature = 0.0;  // greedy, deterministic evaluation
  p.max_new_tokens = stage.max_new_tokens;
  p.role = AdapterRole::Policy;
  p.eligibility = DecodePolicy::Eligibility::DelimiterOnly;
  if (mode == "full") return p;
  if (mode == "vanilla") {
    p.allow_memory = false;
    return p;
  }
  if (mode == "short-only") {
    p.allow_long = false;
    return p;
  }
  if (mode == "long-only") {
    p.allow_short = false;
    return p;
  }
  if (mode.rfind("random-", 0) == 0) {
    const int pct = std::stoi(mode.substr(7));
    if (pct < 0 || pct > 100)
      throw std::runtime_error("ablation_policy: bad percentage in '" + mode +
                               "'");
    p.force_invoke_prob = pct / 100.0;
    p.sample_invocations = false;  // invocations come only from the coin flip
    return p;
  }
  throw std::runtime_error("ablation_policy: unknown mode '" + mode + "'");
}

}  // namespace latmem
