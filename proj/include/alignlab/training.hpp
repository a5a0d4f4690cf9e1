#pragma once

#include "alignlab/rewards.hpp"
#include "alignlab/teacher.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alignlab {

/// Adds coeff * d(log pi(y|x))/dz for every visited context into sink and
/// returns log pi(y|x).
double accumulate_log_prob_grad(const Policy& policy, const Sequence& seq, double coeff,
                                LogitGrad* sink);

// ---------------------------------------------------------------------------
// Preference losses. Every loss takes an optional sink receiving dL/dz of the
// trained policy; pass nullptr for value-only evaluation.
// ---------------------------------------------------------------------------

/// beta0 * [(log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))]
double dpo_margin(const Policy& policy, const Policy& ref, double beta0,
                  const PreferencePair& pair);

double dpo_loss(const Policy& policy, const Policy& ref, double beta0,
                std::span<const PreferencePair> batch, LogitGrad* sink = nullptr);

/// dpo_loss with chosen and rejected exchanged in every pair.
double reverse_dpo_loss(const Policy& policy, const Policy& ref, double beta0,
                        std::span<const PreferencePair> batch, LogitGrad* sink = nullptr);

// ---------------------------------------------------------------------------
// Token-level distillation against the synthetic teacher.
// ---------------------------------------------------------------------------

struct TeacherInputs {
  const Policy* dpo = nullptr;
  const Policy* other = nullptr;  // reverse DPO model, or the reference in RLHF mode
  TeacherConfig cfg;
};

/// Per-token statistics gathered while evaluating a distillation loss.
struct DistillStats {
  std::size_t tokens = 0;
  double alpha_min = std::numeric_limits<double>::infinity();
  double alpha_max = -std::numeric_limits<double>::infinity();
  double alpha_sum = 0.0;
};

/// (1/|B|) sum_(x,y) (1/|y|) sum_t beta_t * KL(pi(.|y_<t,x) || pi*(.|y_<t,x)).
double aligndistil_off_loss(const Policy& policy, const TeacherInputs& teacher,
                            std::span<const Sequence> batch, LogitGrad* sink = nullptr,
                            DistillStats* stats = nullptr);

/// The same body over responses sampled from the policy itself. Sampled
/// prefixes are data: no gradient flows through the rollout. The drawn
/// responses are returned through `samples` when non-null.
double aligndistil_on_loss(const Policy& policy, const TeacherInputs& teacher,
                           std::span<const Tokens> prompts, Rng& rng, LogitGrad* sink = nullptr,
                           std::vector<Sequence>* samples = nullptr,
                           DistillStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Policy-gradient baselines with the contrastive reward and a KL anchor to the
// DPO model. Each surrogate's gradient with respect to the policy equals the
// baseline's ascent direction with rewards and sampled responses held fixed.
// ---------------------------------------------------------------------------

/// mean_y (1/|y|) [ r_ctr(x,y) log pi(y|x) - (beta/2) log(pi(y|x)/pi_dpo(y|x))^2 ]
/// The KL penalty enters the bandit reward, so the gradient is
/// (1/|y|) (r_ctr - beta log(pi/pi_dpo)) grad log pi(y|x) per sample.
double sentence_pg_surrogate(const Policy& policy, const ContrastiveReward& reward, double beta,
                             std::span<const Sequence> batch, LogitGrad* sink = nullptr);

/// mean_y (1/|y|) sum_t [ G_t log pi(y_t|.) - beta KL(pi(.|y_<t,x) || pi_dpo(.|y_<t,x)) ]
/// with G_t = sum_{i>=t} r_ctr(x, y_<i, y_i).
double token_reinforce_surrogate(const Policy& policy, const ContrastiveReward& reward,
                                 double beta, std::span<const Sequence> batch,
                                 LogitGrad* sink = nullptr);

Vec sentence_pg_grad(const Policy& policy, const ContrastiveReward& reward, double beta,
                     std::span<const Sequence> batch);
Vec token_reinforce_grad(const Policy& policy, const ContrastiveReward& reward, double beta,
                         std::span<const Sequence> batch);

/// Returns-to-go of the per-token contrastive rewards.
std::vector<double> returns_to_go(std::span<const double> token_rewards);

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

enum class Objective { Dpo, ReverseDpo, AlignOn, AlignOff, BaselineSentence, BaselineToken };

const char* to_string(Objective objective);

struct TrainConfig {
  int steps = 200;
  int batch_size = 16;
  double lr = 0.1;
  double momentum = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  double beta0 = 0.1;
  double beta = 0.1;  // KL coefficient of the policy-gradient baselines
  TeacherConfig teacher;

  void validate() const;
};

struct RunRecord {
  int step = 0;
  double loss = 0.0;
  double token_avg_reward = 0.0;
  double kl_to_anchor = 0.0;
  double response_len_mean = 0.0;
};

/// Fixed held-out telemetry set. Responses are drawn from the current policy
/// with the same seed at every evaluation.
struct ProbeSet {
  std::vector<Tokens> prompts;
  std::uint64_t seed = 0;
  int samples_per_prompt = 1;
  /// Token-averaged reward beta0 * log(num/den); a null numerator means the
  /// policy being trained.
  const Policy* reward_num = nullptr;
  const Policy* reward_den = nullptr;
  double beta0 = 0.1;
  /// KL(pi || anchor); null disables.
  const Policy* anchor = nullptr;
};

struct ProbeMetrics {
  double token_avg_reward = 0.0;
  double kl_to_anchor = 0.0;
  double response_len_mean = 0.0;
};

ProbeMetrics evaluate_probe(const Policy& policy, const ProbeSet& probe);

/// Sequence-level KL(pi(.|x) || anchor(.|x)) for the response drawn, estimated
/// by summing exact per-token KLs along it.
double path_kl(const Policy& policy, const Policy& anchor, const Sequence& seq);

struct TrainData {
  const Policy* ref = nullptr;  // DPO objectives
  const Policy* dpo = nullptr;  // distillation and baselines
  const Policy* rev = nullptr;
  std::span<const PreferencePair> pairs;
  std::span<const Sequence> responses;  // off-policy distillation
  std::span<const Tokens> prompts;      // on-policy objectives
};

struct TrainResult {
  Policy policy;
  std::vector<RunRecord> records;
  bool diverged = false;
  std::string diagnostic;
  DistillStats distill;
};

TrainResult train(const Policy& init, const TrainConfig& cfg, Objective objective,
                  const TrainData& data, const ProbeSet& probe);

/// Bradley-Terry reward-model training with the same SGD loop.
struct RmTrainResult {
  RewardModel model;
  std::vector<RunRecord> records;
};
RmTrainResult train_reward_model(const RewardModel& init, const TrainConfig& cfg,
                                 std::span<const PreferencePair> pairs);

std::string run_records_csv(std::span<const RunRecord> records);
inline constexpr const char* kRunRecordHeader =
    "step,loss,token_avg_reward,kl_to_anchor,response_len_mean";

}  // namespace alignlab
