#include "alignlab/training.hpp"

#include "alignlab/io.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace alignlab {

namespace {

/// log pi(y_t | y_<t, x) summed over t >= start, with coeff * dlog/dz into sink.
double log_prob_from(const Policy& policy, const Sequence& seq, std::size_t start, double coeff,
                     LogitGrad* sink) {
  const TokenSpan y(seq.response);
  double total = 0.0;
  for (std::size_t t = start; t < y.size(); ++t) {
    const auto e = eval_context(policy, seq.prompt, y.first(t));
    total += e.log_p(y[t]);
    if (sink && !e.forced && coeff != 0.0) {
      Vec dz = -coeff * e.p;
      dz(y[t]) += coeff;
      sink->add(seq.prompt, y.first(t), dz);
    }
  }
  return total;
}

/// log pi(y_w|x) - log pi(y_l|x), with coeff * d/dz of it into sink.
/// Terms on the shared leading tokens cancel and are skipped. At the first
/// differing position both responses share a context, so the log-partition
/// cancels too and that step contributes z_w - z_l exactly.
double pair_log_ratio(const Policy& policy, const PreferencePair& pair, double coeff,
                      LogitGrad* sink) {
  const Sequence w = pair.chosen_seq();
  const Sequence l = pair.rejected_seq();
  const TokenSpan a(w.response);
  const TokenSpan b(l.response);
  std::size_t k = 0;
  while (k < a.size() && k < b.size() && a[k] == b[k]) ++k;
  const Vec z = logits(policy, w.prompt, a.first(k));
  if (sink && coeff != 0.0) {
    Vec dz = Vec::Zero(z.size());
    dz(a[k]) += coeff;
    dz(b[k]) -= coeff;
    sink->add(w.prompt, a.first(k), dz);
  }
  return (z(a[k]) - z(b[k])) + (log_prob_from(policy, w, k + 1, coeff, sink) -
                                log_prob_from(policy, l, k + 1, -coeff, sink));
}

}  // namespace

double accumulate_log_prob_grad(const Policy& policy, const Sequence& seq, double coeff,
                                LogitGrad* sink) {
  validate_sequence(policy, seq);
  return log_prob_from(policy, seq, 0, coeff, sink);
}

// ---------------------------------------------------------------------------

double dpo_margin(const Policy& policy, const Policy& ref, double beta0,
                  const PreferencePair& pair) {
  require_compatible(policy, ref);
  const Sequence w = pair.chosen_seq();
  const Sequence l = pair.rejected_seq();
  validate_sequence(policy, w);
  validate_sequence(policy, l);
  return beta0 * (pair_log_ratio(policy, pair, 0.0, nullptr) - pair_log_ratio(ref, pair, 0.0, nullptr));
}

double dpo_loss(const Policy& policy, const Policy& ref, double beta0,
                std::span<const PreferencePair> batch, LogitGrad* sink) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "dpo_loss needs a non-empty batch");
  require(beta0 > 0, ErrorCode::InvalidArgument, "beta0 must be > 0");
  require_compatible(policy, ref);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& pair : batch) {
    const double m = dpo_margin(policy, ref, beta0, pair);
    total += -log_sigmoid(m);
    if (sink) {
      const double dm = -sigmoid(-m) * inv_n * beta0;
      pair_log_ratio(policy, pair, dm, sink);
    }
  }
  return total * inv_n;
}

double reverse_dpo_loss(const Policy& policy, const Policy& ref, double beta0,
                        std::span<const PreferencePair> batch, LogitGrad* sink) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "reverse_dpo_loss needs a non-empty batch");
  const auto swapped = swap_all(batch);
  return dpo_loss(policy, ref, beta0, swapped, sink);
}

// ---------------------------------------------------------------------------

namespace {

void note_alpha(DistillStats* stats, const TeacherStep& step) {
  if (!stats) return;
  ++stats->tokens;
  stats->alpha_min = std::min(stats->alpha_min, step.alpha_t);
  stats->alpha_max = std::max(stats->alpha_max, step.alpha_t);
  stats->alpha_sum += step.alpha_t;
}

void check_teacher(const Policy& policy, const TeacherInputs& teacher) {
  require(teacher.dpo && teacher.other, ErrorCode::InvalidArgument, "teacher policies missing");
  require_compatible(policy, *teacher.dpo);
  require_compatible(policy, *teacher.other);
  teacher.cfg.validate();
}

/// One sequence's (1/|y|) sum_t beta_t KL term; gradient scaled by `weight`.
double distill_sequence(const Policy& policy, const TeacherInputs& teacher, const Sequence& seq,
                        double weight, LogitGrad* sink, DistillStats* stats) {
  validate_sequence(policy, seq);
  const TokenSpan y(seq.response);
  const double inv_len = 1.0 / static_cast<double>(y.size());
  const auto& cfg = teacher.cfg;
  double total = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto prefix = y.first(t);
    const auto e = eval_context(policy, seq.prompt, prefix);
    const auto step = teacher_step(*teacher.dpo, *teacher.other, cfg, seq.prompt, prefix);
    if (cfg.mode == TeacherMode::AdaptiveExtrapolate) {
      require(step.alpha_t >= cfg.epsilon && step.alpha_t <= cfg.r + cfg.epsilon,
              ErrorCode::CheckFailure, "adaptive weight outside [epsilon, r + epsilon]");
    }
    note_alpha(stats, step);
    const double k = kl(e.p, step.pi_star);
    total += step.beta_t * k;
    if (sink && !e.forced) {
      sink->add(seq.prompt, prefix,
                (weight * step.beta_t * inv_len) * kl_grad_wrt_logits(e.p, e.log_p, step.log_pi_star));
    }
  }
  return total * inv_len;
}

}  // namespace

double aligndistil_off_loss(const Policy& policy, const TeacherInputs& teacher,
                            std::span<const Sequence> batch, LogitGrad* sink,
                            DistillStats* stats) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "distillation needs a non-empty batch");
  check_teacher(policy, teacher);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& seq : batch) total += distill_sequence(policy, teacher, seq, inv_n, sink, stats);
  return total * inv_n;
}

double aligndistil_on_loss(const Policy& policy, const TeacherInputs& teacher,
                           std::span<const Tokens> prompts, Rng& rng, LogitGrad* sink,
                           std::vector<Sequence>* samples, DistillStats* stats) {
  require(!prompts.empty(), ErrorCode::EmptyBatch, "distillation needs a non-empty batch");
  check_teacher(policy, teacher);
  std::vector<Sequence> drawn;
  drawn.reserve(prompts.size());
  for (const auto& x : prompts) drawn.push_back(sample(policy, x, rng));
  const double value = aligndistil_off_loss(policy, teacher, drawn, sink, stats);
  if (samples) *samples = std::move(drawn);
  return value;
}

// ---------------------------------------------------------------------------

std::vector<double> returns_to_go(std::span<const double> token_rewards) {
  std::vector<double> g(token_rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t i = token_rewards.size(); i-- > 0;) {
    acc += token_rewards[i];
    g[i] = acc;
  }
  return g;
}

namespace {

void check_reward(const Policy& policy, const ContrastiveReward& reward, double beta) {
  require(reward.dpo && reward.rev, ErrorCode::InvalidArgument, "reward policies missing");
  require_compatible(policy, *reward.dpo);
  require_compatible(policy, *reward.rev);
  require(beta >= 0, ErrorCode::InvalidArgument, "beta must be >= 0");
}

}  // namespace

double sentence_pg_surrogate(const Policy& policy, const ContrastiveReward& reward, double beta,
                             std::span<const Sequence> batch, LogitGrad* sink) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "baseline needs a non-empty batch");
  check_reward(policy, reward, beta);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& seq : batch) {
    const double r = ctr_reward(*reward.dpo, *reward.rev, reward.beta0, seq);
    const double inv_len = 1.0 / static_cast<double>(seq.response.size());
    const double lp = seq_log_prob(policy, seq);
    const double log_ratio = lp - seq_log_prob(*reward.dpo, seq);
    // d/dtheta of log_ratio^2 / 2 is log_ratio * dlog pi: the score-function
    // gradient of the sequence KL penalty.
    if (sink) accumulate_log_prob_grad(policy, seq, (r - beta * log_ratio) * inv_len * inv_n, sink);
    total += inv_len * (r * lp - 0.5 * beta * log_ratio * log_ratio);
  }
  return total * inv_n;
}

double token_reinforce_surrogate(const Policy& policy, const ContrastiveReward& reward,
                                 double beta, std::span<const Sequence> batch, LogitGrad* sink) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "baseline needs a non-empty batch");
  check_reward(policy, reward, beta);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& seq : batch) {
    validate_sequence(policy, seq);
    const auto g = returns_to_go(ctr_token_rewards(*reward.dpo, *reward.rev, reward.beta0, seq));
    const TokenSpan y(seq.response);
    const double inv_len = 1.0 / static_cast<double>(y.size());
    double seq_total = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
      const auto prefix = y.first(t);
      const auto e = eval_context(policy, seq.prompt, prefix);
      const auto a = eval_context(*reward.dpo, seq.prompt, prefix);
      seq_total += g[t] * e.log_p(y[t]) - beta * kl(e.p, a.p);
      if (sink && !e.forced) {
        Vec dz = -g[t] * e.p;
        dz(y[t]) += g[t];
        dz -= beta * kl_grad_wrt_logits(e.p, e.log_p, a.log_p);
        sink->add(seq.prompt, prefix, (inv_len * inv_n) * dz);
      }
    }
    total += inv_len * seq_total;
  }
  return total * inv_n;
}

Vec sentence_pg_grad(const Policy& policy, const ContrastiveReward& reward, double beta,
                     std::span<const Sequence> batch) {
  LogitGrad sink(policy.vocab_size());
  sentence_pg_surrogate(policy, reward, beta, batch, &sink);
  return backward(policy, sink);
}

Vec token_reinforce_grad(const Policy& policy, const ContrastiveReward& reward, double beta,
                         std::span<const Sequence> batch) {
  LogitGrad sink(policy.vocab_size());
  token_reinforce_surrogate(policy, reward, beta, batch, &sink);
  return backward(policy, sink);
}

// ---------------------------------------------------------------------------

const char* to_string(Objective objective) {
  switch (objective) {
    case Objective::Dpo: return "dpo";
    case Objective::ReverseDpo: return "reverse-dpo";
    case Objective::AlignOn: return "align-on";
    case Objective::AlignOff: return "align-off";
    case Objective::BaselineSentence: return "baseline-sentence";
    case Objective::BaselineToken: return "baseline-token";
  }
  return "unknown";
}

void TrainConfig::validate() const {
  require(steps >= 0, ErrorCode::Config, "steps must be >= 0");
  require(batch_size >= 1, ErrorCode::Config, "batch_size must be >= 1");
  require(lr >= 0 && std::isfinite(lr), ErrorCode::Config, "lr must be >= 0");
  require(momentum >= 0 && momentum < 1, ErrorCode::Config, "momentum must lie in [0, 1)");
  require(max_grad_norm >= 0, ErrorCode::Config, "max_grad_norm must be >= 0");
  require(beta0 > 0, ErrorCode::Config, "beta0 must be > 0");
  require(beta >= 0, ErrorCode::Config, "beta must be >= 0");
}

double path_kl(const Policy& policy, const Policy& anchor, const Sequence& seq) {
  const TokenSpan y(seq.response);
  double total = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto e = eval_context(policy, seq.prompt, y.first(t));
    if (e.forced) continue;
    const auto a = eval_context(anchor, seq.prompt, y.first(t));
    total += kl(e.p, a.p);
  }
  return total;
}

ProbeMetrics evaluate_probe(const Policy& policy, const ProbeSet& probe) {
  ProbeMetrics m;
  if (probe.prompts.empty() || probe.samples_per_prompt < 1) return m;
  Rng rng(probe.seed);
  const Policy& num = probe.reward_num ? *probe.reward_num : policy;
  std::size_t n = 0;
  for (const auto& x : probe.prompts) {
    for (int k = 0; k < probe.samples_per_prompt; ++k) {
      const Sequence y = sample(policy, x, rng);
      const double len = static_cast<double>(y.response.size());
      if (probe.reward_den) {
        m.token_avg_reward += dpo_seq_reward(num, *probe.reward_den, probe.beta0, y) / len;
      }
      if (probe.anchor) m.kl_to_anchor += path_kl(policy, *probe.anchor, y);
      m.response_len_mean += len;
      ++n;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  m.token_avg_reward *= inv;
  m.kl_to_anchor *= inv;
  m.response_len_mean *= inv;
  return m;
}

namespace {

/// Epoch-wise shuffled minibatches over [0, n).
class BatchCursor {
 public:
  explicit BatchCursor(std::size_t n) : order_(n), pos_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::vector<std::size_t> next(std::size_t batch, Rng& rng) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        for (std::size_t i = order_.size(); i > 1; --i) {
          std::swap(order_[i - 1], order_[rng.below(i)]);
        }
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

template <typename T>
std::vector<T> gather(std::span<const T> items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

void sgd_step(Vec& params, Vec& velocity, Vec g, const TrainConfig& cfg) {
  if (cfg.max_grad_norm > 0) {
    const double norm = g.norm();
    if (norm > cfg.max_grad_norm) g *= cfg.max_grad_norm / norm;
  }
  if (cfg.momentum > 0) {
    velocity = cfg.momentum * velocity + g;
    params -= cfg.lr * velocity;
  } else {
    params -= cfg.lr * g;
  }
}

}  // namespace

TrainResult train(const Policy& init, const TrainConfig& cfg, Objective objective,
                  const TrainData& data, const ProbeSet& probe) {
  cfg.validate();
  TrainResult result;
  result.policy = init;
  Policy& theta = result.policy;
  Vec velocity = Vec::Zero(theta.num_params());
  Rng rng(cfg.seed);

  std::size_t n_items = 0;
  switch (objective) {
    case Objective::Dpo:
    case Objective::ReverseDpo:
      require(data.ref != nullptr, ErrorCode::Dependency, "DPO training needs a reference policy");
      require(!data.pairs.empty(), ErrorCode::EmptyBatch, "no preference pairs");
      n_items = data.pairs.size();
      break;
    case Objective::AlignOff:
      require(!data.responses.empty(), ErrorCode::EmptyBatch, "no responses");
      n_items = data.responses.size();
      break;
    case Objective::AlignOn:
    case Objective::BaselineSentence:
    case Objective::BaselineToken:
      require(!data.prompts.empty(), ErrorCode::EmptyBatch, "no prompts");
      n_items = data.prompts.size();
      break;
  }
  if (objective != Objective::Dpo && objective != Objective::ReverseDpo) {
    require(data.dpo && data.rev, ErrorCode::Dependency,
            "distillation and baselines need both DPO models");
  }
  const TeacherInputs teacher{data.dpo, data.rev, cfg.teacher};
  const ContrastiveReward reward{data.dpo, data.rev, cfg.beta0};
  BatchCursor cursor(n_items);
  const auto batch_size = static_cast<std::size_t>(cfg.batch_size);

  for (int step = 1; step <= cfg.steps; ++step) {
    LogitGrad sink(theta.vocab_size());
    double loss = 0.0;
    try {
      switch (objective) {
        case Objective::Dpo: {
          const auto batch = gather(data.pairs, cursor.next(batch_size, rng));
          loss = dpo_loss(theta, *data.ref, cfg.beta0, batch, &sink);
          break;
        }
        case Objective::ReverseDpo: {
          const auto batch = gather(data.pairs, cursor.next(batch_size, rng));
          loss = reverse_dpo_loss(theta, *data.ref, cfg.beta0, batch, &sink);
          break;
        }
        case Objective::AlignOff: {
          const auto batch = gather(data.responses, cursor.next(batch_size, rng));
          loss = aligndistil_off_loss(theta, teacher, batch, &sink, &result.distill);
          break;
        }
        case Objective::AlignOn: {
          std::vector<Tokens> prompts;
          for (std::size_t i = 0; i < batch_size; ++i) prompts.push_back(data.prompts[rng.below(n_items)]);
          loss = aligndistil_on_loss(theta, teacher, prompts, rng, &sink, nullptr, &result.distill);
          break;
        }
        case Objective::BaselineSentence:
        case Objective::BaselineToken: {
          std::vector<Sequence> batch;
          for (std::size_t i = 0; i < batch_size; ++i) {
            batch.push_back(sample(theta, data.prompts[rng.below(n_items)], rng));
          }
          const double s = objective == Objective::BaselineSentence
                               ? sentence_pg_surrogate(theta, reward, cfg.beta, batch, &sink)
                               : token_reinforce_surrogate(theta, reward, cfg.beta, batch, &sink);
          // Ascent on the surrogate objective is descent on its negation.
          sink.scale(-1.0);
          loss = -s;
          break;
        }
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFinite) throw;
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    Vec g = std::isfinite(loss) ? backward(theta, sink) : Vec();
    if (!std::isfinite(loss) || !g.allFinite()) {
      RunRecord bad;
      bad.step = step;
      bad.loss = std::numeric_limits<double>::quiet_NaN();
      result.records.push_back(bad);
      result.diverged = true;
      result.diagnostic = std::string(to_string(objective)) + ": non-finite loss or gradient at step " +
                          std::to_string(step);
      return result;
    }
    sgd_step(theta.params(), velocity, std::move(g), cfg);
    const auto m = evaluate_probe(theta, probe);
    result.records.push_back({step, loss, m.token_avg_reward, m.kl_to_anchor, m.response_len_mean});
  }
  return result;
}

RmTrainResult train_reward_model(const RewardModel& init, const TrainConfig& cfg,
                                 std::span<const PreferencePair> pairs) {
  cfg.validate();
  require(!pairs.empty(), ErrorCode::EmptyBatch, "no preference pairs");
  RmTrainResult result{init, {}};
  Vec velocity = Vec::Zero(init.params().size());
  Rng rng(cfg.seed);
  BatchCursor cursor(pairs.size());
  for (int step = 1; step <= cfg.steps; ++step) {
    const auto batch = gather(pairs, cursor.next(static_cast<std::size_t>(cfg.batch_size), rng));
    Vec g;
    const double loss = bt_loss(result.model, batch, &g);
    require(std::isfinite(loss) && g.allFinite(), ErrorCode::NonFinite,
            "reward model training diverged at step " + std::to_string(step));
    sgd_step(result.model.params(), velocity, std::move(g), cfg);
    result.records.push_back({step, loss, 0.0, 0.0, 0.0});
  }
  return result;
}

std::string run_records_csv(std::span<const RunRecord> records) {
  std::string out = kRunRecordHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' +
           format_double(r.token_avg_reward) + ',' + format_double(r.kl_to_anchor) + ',' +
           format_double(r.response_len_mean) + '\n';
  }
  return out;
}

}  // namespace alignlab
