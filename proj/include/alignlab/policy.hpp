#pragma once

#include "alignlab/core.hpp"
#include "alignlab/rng.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace alignlab {

using Tokens = std::vector<TokenId>;
using TokenSpan = std::span<const TokenId>;

/// A prompt with one complete response. The response always ends with the
/// terminator token (vocab_size - 1) and contains it nowhere else.
struct Sequence {
  Tokens prompt;
  Tokens response;

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

enum class PolicyKind { Tabular, TinyNeural };

const char* to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(const std::string& name);

/// Hyper-parameters fixing a policy's parameter layout.
struct PolicyShape {
  PolicyKind kind = PolicyKind::TinyNeural;
  int vocab_size = 6;
  int max_len = 6;     // longest response, terminator included
  int prompt_len = 1;  // tabular: every prompt has exactly this length
  int embed_dim = 8;   // tiny neural only
  int hidden_dim = 32; // tiny neural only

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

/// Autoregressive next-token model over a small vocabulary.
///
/// Tabular: one logit vector per (prompt, prefix) context, laid out as
///   params[((prompt_index * contexts_per_prompt) + prefix_index) * V + v]
/// where prompt_index is the base-(V-1) value of the prompt and
/// prefix_index enumerates non-terminated prefixes by length then value.
///
/// TinyNeural: with context tokens c = prompt ++ prefix,
///   u = [mean_i E[c_i] ; E[c_last] ; |prefix| / max_len]
///   h = tanh(W1 u + b1)
///   z = W2 h + b2
/// and params = [E (V x d), W1 (H x (2d+1)), b1 (H), W2 (V x H), b2 (V)],
/// matrices stored row-major.
class Policy {
 public:
  Policy() = default;
  Policy(PolicyShape shape, std::uint64_t seed, Vec params);

  static Policy tabular(int vocab_size, int max_len, int prompt_len, std::uint64_t seed,
                        double init_scale = 0.0);
  static Policy tiny_neural(int vocab_size, int max_len, int embed_dim, int hidden_dim,
                            std::uint64_t seed, double init_scale = 1.0);
  static Policy make(const PolicyShape& shape, std::uint64_t seed, double init_scale);

  const PolicyShape& shape() const { return shape_; }
  PolicyKind kind() const { return shape_.kind; }
  int vocab_size() const { return shape_.vocab_size; }
  int max_len() const { return shape_.max_len; }
  TokenId eos() const { return shape_.vocab_size - 1; }
  std::uint64_t seed() const { return seed_; }

  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  Eigen::Index num_params() const { return params_.size(); }

  /// Number of distinct non-terminated prefixes per prompt.
  std::int64_t contexts_per_prompt() const;
  /// Tabular only: offset of the logit block for a context.
  Eigen::Index tabular_offset(TokenSpan prompt, TokenSpan prefix) const;

  static std::int64_t param_count(const PolicyShape& shape);

 private:
  PolicyShape shape_{};
  std::uint64_t seed_ = 0;
  Vec params_;
};

/// Throws if the two policies disagree on vocabulary or response length.
void require_compatible(const Policy& a, const Policy& b);

/// Validates a context and returns whether its next token is forced to be
/// the terminator (prefix already holds max_len - 1 tokens).
bool validate_context(const Policy& policy, TokenSpan prompt, TokenSpan prefix);

/// Raw model scores at a context.
Vec logits(const Policy& policy, TokenSpan prompt, TokenSpan prefix);

/// Next-token distribution. At the final position all mass is on the terminator.
Vec next_dist(const Policy& policy, TokenSpan prompt, TokenSpan prefix);

/// Everything about one context a loss typically needs.
struct ContextEval {
  Vec z;        // raw scores
  Vec log_p;    // log next-token distribution (-inf off the terminator when forced)
  Vec p;        // next-token distribution
  bool forced = false;
};

ContextEval eval_context(const Policy& policy, TokenSpan prompt, TokenSpan prefix);

/// Distribution from a logit vector, honoring the forced-terminator mask.
ContextEval dist_from_logits(Vec z, bool forced);

void validate_sequence(const Policy& policy, const Sequence& seq);

/// log pi(response | prompt) = sum_t log pi(y_t | y_<t, prompt).
double seq_log_prob(const Policy& policy, const Sequence& seq);

/// Ancestral sampling; the terminator is forced once max_len is reached.
Sequence sample(const Policy& policy, TokenSpan prompt, Rng& rng);

/// Inverse-CDF draw from a normalized distribution.
TokenId sample_categorical(const Eigen::Ref<const Vec>& p, Rng& rng);

/// Number of terminated responses of length 1..max_len: sum_k (V-1)^k, k < max_len.
std::int64_t response_count(int vocab_size, int max_len);

/// All valid responses, ordered by length then lexicographically.
std::vector<Tokens> enumerate_responses(int vocab_size, int max_len,
                                        std::int64_t limit = 1'000'000);

// ---------------------------------------------------------------------------
// Gradients. A loss reports dL/dz for every context whose logits it used;
// `backward` chains those through the policy's parameterization.
// ---------------------------------------------------------------------------

class LogitGrad {
 public:
  struct Entry {
    Tokens prompt;
    Tokens prefix;
    Vec dz;
  };

  explicit LogitGrad(int vocab_size) : vocab_size_(vocab_size) {}

  void add(TokenSpan prompt, TokenSpan prefix, const Eigen::Ref<const Vec>& dz);
  void scale(double factor);

  const std::map<Tokens, Entry>& entries() const { return entries_; }
  int vocab_size() const { return vocab_size_; }
  bool empty() const { return entries_.empty(); }

 private:
  int vocab_size_;
  std::map<Tokens, Entry> entries_;
};

Vec backward(const Policy& policy, const LogitGrad& dlogits);

using LossFn = std::function<double(const Policy&, LogitGrad*)>;

/// Gradient of a loss closure with respect to the policy's flat parameters.
Vec grad(const Policy& policy, const LossFn& loss);

/// Loss value and gradient in one call.
double value_and_grad(const Policy& policy, const LossFn& loss, Vec& gradient);

// ---------------------------------------------------------------------------
// Checkpoints: one JSON document, parameters written with 17 significant digits.
// ---------------------------------------------------------------------------

std::string checkpoint_to_string(const Policy& policy);
Policy checkpoint_from_string(const std::string& text);
void save_checkpoint(const Policy& policy, const std::string& path);
Policy load_checkpoint(const std::string& path);

}  // namespace alignlab
