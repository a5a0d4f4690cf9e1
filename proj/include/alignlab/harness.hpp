#pragma once

#include "alignlab/training.hpp"
#include "alignlab/verify.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace alignlab {

// ---------------------------------------------------------------------------
// Synthetic gold task
// ---------------------------------------------------------------------------

/// Ground-truth token reward g(last context token, next token); a response's
/// gold reward is the sum of g along it. Preference labels follow a
/// Bradley-Terry draw on the gold margin, then flip with probability
/// label_noise.
struct GoldTask {
  std::uint64_t seed = 0;
  int vocab_size = 6;
  int max_len = 6;
  int prompt_len = 3;
  double label_noise = 0.0;
  Mat token_reward;  // (vocab_size - 1) x vocab_size

  static GoldTask make(std::uint64_t seed, int vocab_size, int max_len, int prompt_len,
                       double label_noise, double reward_scale);

  double gold_token_reward(TokenSpan prompt, TokenSpan prefix, TokenId token) const;
  double gold_reward(const Sequence& seq) const;
  Tokens random_prompt(Rng& rng) const;
  /// Probability that the first response is labeled preferred, given the
  /// gold margin R(first) - R(second).
  double preference_probability(double margin) const;
};

std::vector<PreferencePair> gen_preferences(const GoldTask& task, const Policy& ref, int n_pairs,
                                            Rng& rng);

std::string gold_task_to_string(const GoldTask& task);
GoldTask gold_task_from_string(const std::string& text);

// ---------------------------------------------------------------------------
// Configuration: one flat JSON document per experiment.
// ---------------------------------------------------------------------------

/// Every recognised key with its default value.
const nlohmann::json& default_config();

/// Overlays `overrides` on the defaults; throws Error(Config) on unknown keys
/// or type mismatches.
nlohmann::json merge_config(const nlohmann::json& overrides);

/// Parses a command-line string into the JSON type of `key`'s default.
nlohmann::json parse_config_value(const std::string& key, const std::string& text);

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 1;
  std::string output_dir;
  std::vector<std::string> stages;

  PolicyShape shape;
  double init_scale = 1.0;
  double label_noise = 0.0;
  double reward_scale = 1.0;
  int n_train_pairs = 512;
  int n_test_pairs = 512;

  double beta0 = 0.1;
  double beta = 0.08;
  double r = 2.0;
  double epsilon = 0.001;
  double weight = 1.0;

  int batch_size = 16;
  double momentum = 0.0;
  double max_grad_norm = 0.0;
  int rm_steps = 300;
  double rm_lr = 0.5;
  int dpo_steps = 64;
  double dpo_lr = 0.3;
  int align_steps = 300;
  double align_lr = 1.0;
  int bench_steps = 200;
  double bench_lr = 0.1;

  int probe_prompts = 64;
  int probe_samples = 2;
  int final_probe_samples = 16;

  std::string mode = "off";            // align: on | off
  std::string teacher = "adaptive";    // align: constant | adaptive | rlhf
  std::string kind = "sentence";       // baseline: sentence | token
  int verify_instances = 100;
  std::vector<double> ablation_weights;

  static ExperimentConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  TrainConfig train_config(int steps, double lr, const std::string& stage) const;
  TeacherConfig teacher_config() const;
};

ExperimentConfig load_config(const std::string& path);

// ---------------------------------------------------------------------------
// Stages and artifacts
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& known_stages() {
  static const std::vector<std::string> stages = {
      "gen-data",     "train-rm",          "train-dpo",      "train-reverse-dpo",
      "align-on",     "align-off",         "baseline-sentence", "baseline-token",
      "verify",       "eval-reward-acc",   "convergence-bench", "ablation"};
  return stages;
}

/// Deterministic per-stage seed derived from the experiment seed.
std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage);

/// Artifacts produced so far, keyed by path relative to the output directory.
class ArtifactSet {
 public:
  explicit ArtifactSet(std::string root) : root_(std::move(root)) {}
  const std::string& root() const { return root_; }
  std::string path(const std::string& rel) const;
  void write(const std::string& rel, const std::string& contents);
  /// Reads an artifact produced by `stage`, raising a dependency error naming
  /// that stage when it is missing.
  std::string require(const std::string& rel, const std::string& stage) const;
  const std::map<std::string, std::string>& hashes() const { return hashes_; }

 private:
  std::string root_;
  std::map<std::string, std::string> hashes_;
};

struct StageOutcome {
  std::string stage;
  bool check_failed = false;
  std::string message;
};

/// Runs one stage against the artifacts in cfg.output_dir.
StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage,
                       ArtifactSet& artifacts);

struct ExperimentOutcome {
  std::vector<StageOutcome> stages;
  bool check_failed = false;
};

/// Runs every configured stage in order and writes manifest.json. A failing
/// stage halts the pipeline; the raised error names the stage.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

struct ConvergenceCurves {
  std::vector<RunRecord> aligndistil;
  std::vector<RunRecord> token;
  std::vector<RunRecord> sentence;
};

/// On-policy AlignDistil with a static beta (constant weight beta0/beta),
/// token-level REINFORCE and sentence-level policy gradient from the same
/// initialization and seed.
ConvergenceCurves convergence_bench(const ExperimentConfig& cfg, const Policy& init,
                                    const Policy& dpo, const Policy& rev,
                                    std::span<const Tokens> prompts,
                                    std::span<const Tokens> probe, double beta, int steps);

/// Area under the token-averaged reward curve (mean over steps).
double curve_auc(std::span<const RunRecord> curve);

/// First step at which `curve` reaches `target`; -1 if never.
int steps_to_reach(std::span<const RunRecord> curve, double target);

struct RewardAccuracyRow {
  std::string reward;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct ExtrapolationRow {
  std::string weight;  // numeric weight or "adaptive"
  std::string type;    // constant | token adaptive
  double kl_to_dpo = 0.0;
  double avg_length = 0.0;
  double token_avg_reward = 0.0;
};

struct AblationTables {
  std::vector<RewardAccuracyRow> reward_accuracy;
  std::vector<ExtrapolationRow> extrapolation;
};

std::vector<RewardAccuracyRow> reward_accuracy_table(
    const GoldTask& task, const RewardModel* rm, const Policy& ref, const Policy& dpo,
    const Policy& rev, double beta0, std::span<const PreferencePair> train,
    std::span<const PreferencePair> test);

/// One distillation run per constant weight in cfg.ablation_weights (loss
/// scale beta0 / weight) plus one adaptive run, all from `init`. Off-policy runs use
/// `responses`, on-policy runs sample from `prompts` (cfg.mode selects).
std::vector<ExtrapolationRow> extrapolation_table(const ExperimentConfig& cfg, const Policy& init,
                                                  const Policy& dpo, const Policy& rev,
                                                  std::span<const Sequence> responses,
                                                  std::span<const Tokens> prompts,
                                                  std::span<const Tokens> probe);

std::string reward_accuracy_csv(std::span<const RewardAccuracyRow> rows);
std::string extrapolation_csv(std::span<const ExtrapolationRow> rows);

/// Fixed probe prompts for telemetry.
std::vector<Tokens> probe_prompts(const ExperimentConfig& cfg, const GoldTask& task);

/// Probe measuring the contrastive reward and KL to the DPO model.
ProbeSet contrastive_probe(const ExperimentConfig& cfg, std::span<const Tokens> prompts,
                           const Policy& dpo, const Policy& rev, int samples);

/// Prompts and preferred responses of a preference split.
std::vector<Tokens> pair_prompts(std::span<const PreferencePair> pairs);
std::vector<Sequence> chosen_responses(std::span<const PreferencePair> pairs);

/// Everything the pipeline produces, computed in memory. Used by run_stage
/// and by callers that sweep seeds without touching the disk.
struct PipelineModels {
  GoldTask task;
  Policy ref;
  std::vector<PreferencePair> train;
  std::vector<PreferencePair> test;
  RewardModel rm;
  Policy dpo;
  Policy rev;
};

GoldTask make_task(const ExperimentConfig& cfg);
Policy make_reference(const ExperimentConfig& cfg);
std::vector<PreferencePair> make_split(const ExperimentConfig& cfg, const GoldTask& task,
                                       const Policy& ref, const std::string& split);
Policy train_dpo_model(const ExperimentConfig& cfg, const Policy& ref,
                       std::span<const PreferencePair> pairs, bool reverse,
                       std::vector<RunRecord>* records = nullptr);
RewardModel train_rm_model(const ExperimentConfig& cfg, std::span<const PreferencePair> pairs,
                           std::vector<RunRecord>* records = nullptr);

/// AlignDistil from `init` with the given teacher. Off-policy runs train on
/// the preferred responses of `train`, on-policy runs on its prompts.
/// An RLHF-combine teacher pairs the DPO model with `ref`.
TrainResult train_align(const ExperimentConfig& cfg, const TeacherConfig& teacher, bool on_policy,
                        const Policy& init, const Policy& ref, const Policy& dpo,
                        const Policy& rev, std::span<const PreferencePair> train,
                        std::span<const Tokens> probe, int steps, double lr,
                        const std::string& stage);

/// Sentence-level PG or token-level REINFORCE with the contrastive reward.
TrainResult train_baseline(const ExperimentConfig& cfg, bool token_level, const Policy& init,
                           const Policy& dpo, const Policy& rev, std::span<const Tokens> prompts,
                           std::span<const Tokens> probe, double beta, int steps, double lr,
                           const std::string& stage);

/// gen-data, train-dpo and train-reverse-dpo (and the reward model when
/// with_rm) in memory.
PipelineModels build_models(const ExperimentConfig& cfg, bool with_rm);

}  // namespace alignlab
