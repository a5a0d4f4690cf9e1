#pragma once

#include "alignlab/policy.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace alignlab {

/// A prompt with a preferred and a dispreferred response.
///
/// The generator's true reward gap is kept for diagnostics only. Reads through
/// `gold_margin()` are counted so training code can be audited for leaks.
class PreferencePair {
 public:
  PreferencePair() = default;
  PreferencePair(Tokens prompt, Tokens chosen, Tokens rejected, double gold_margin);

  const Tokens& prompt() const { return prompt_; }
  const Tokens& chosen() const { return chosen_; }
  const Tokens& rejected() const { return rejected_; }
  Sequence chosen_seq() const { return {prompt_, chosen_}; }
  Sequence rejected_seq() const { return {prompt_, rejected_}; }

  double gold_margin() const;

  /// Chosen and rejected exchanged; the gold margin flips sign.
  PreferencePair swapped() const;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
  friend std::string to_jsonl_line(const PreferencePair& pair);

 private:
  Tokens prompt_;
  Tokens chosen_;
  Tokens rejected_;
  double gold_margin_ = 0.0;
};

std::uint64_t gold_margin_reads();
void reset_gold_margin_audit();

std::vector<PreferencePair> swap_all(std::span<const PreferencePair> pairs);

// Newline-delimited JSON: {"prompt":[..],"chosen":[..],"rejected":[..],"gold_margin":x}
std::string to_jsonl_line(const PreferencePair& pair);
PreferencePair pair_from_jsonl_line(const std::string& line);
std::string preferences_to_jsonl(std::span<const PreferencePair> pairs);
std::vector<PreferencePair> preferences_from_jsonl(const std::string& text);
void save_preferences(std::span<const PreferencePair> pairs, const std::string& path);
std::vector<PreferencePair> load_preferences(const std::string& path);

/// Scalar reward model: the tiny neural trunk applied after every response
/// token, mean-pooled, then projected by a learned head vector.
/// params = [trunk (E, W1, b1) | head (H)].
class RewardModel {
 public:
  RewardModel() = default;
  RewardModel(int vocab_size, int max_len, int embed_dim, int hidden_dim, std::uint64_t seed,
              double init_scale = 1.0);

  double score(const Sequence& seq) const;
  /// Adds upstream * d(score)/d(params) into grad.
  void accumulate_score_grad(const Sequence& seq, double upstream, Vec& grad) const;

  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  int vocab_size() const { return vocab_size_; }
  int max_len() const { return max_len_; }
  int embed_dim() const { return embed_dim_; }
  int hidden_dim() const { return hidden_dim_; }
  std::uint64_t seed() const { return seed_; }

 private:
  int vocab_size_ = 0;
  int max_len_ = 0;
  int embed_dim_ = 0;
  int hidden_dim_ = 0;
  std::uint64_t seed_ = 0;
  Vec params_;
};

std::string reward_model_to_string(const RewardModel& rm);
RewardModel reward_model_from_string(const std::string& text);

/// Bradley-Terry loss: mean of -log sigma(r(x, y_w) - r(x, y_l)). Optionally
/// writes the gradient with respect to rm.params().
double bt_loss(const RewardModel& rm, std::span<const PreferencePair> batch, Vec* grad = nullptr);

/// beta0 * (log pi_dpo(y|x) - log pi_ref(y|x)).
double dpo_seq_reward(const Policy& dpo, const Policy& ref, double beta0, const Sequence& seq);

/// beta0 * log(pi_dpo(y_t|ctx) / pi_ref(y_t|ctx)).
double dpo_token_reward(const Policy& dpo, const Policy& ref, double beta0, TokenSpan prompt,
                        TokenSpan prefix, TokenId token);

/// beta0 * log(pi_dpo(y|x) / pi_rev(y|x)).
double ctr_reward(const Policy& dpo, const Policy& rev, double beta0, const Sequence& seq);

/// Per-token contrastive rewards along a response.
std::vector<double> ctr_token_rewards(const Policy& dpo, const Policy& rev, double beta0,
                                      const Sequence& seq);

struct RmReward {
  const RewardModel* model;
};
struct DpoReward {
  const Policy* dpo;
  const Policy* ref;
  double beta0;
};
struct ContrastiveReward {
  const Policy* dpo;
  const Policy* rev;
  double beta0;
};
struct CustomReward {
  std::function<double(const Sequence&)> fn;
};

using RewardFn = std::variant<RmReward, DpoReward, ContrastiveReward, CustomReward>;

double evaluate(const RewardFn& fn, const Sequence& seq);

/// Fraction of pairs ranked correctly; ties count one half.
double reward_accuracy(const RewardFn& fn, std::span<const PreferencePair> pairs);

}  // namespace alignlab
