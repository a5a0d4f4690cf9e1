#pragma once

#include "alignlab/teacher.hpp"

#include <functional>
#include <string>

namespace alignlab {

/// Which RLHF objective an instance encodes.
///   Rlhf:        E[beta0 log(pi_dpo/pi_ref) - beta log(pi/pi_ref)],
///                teacher z* = (beta0/beta) z_dpo + (1 - beta0/beta) z_ref
///   Contrastive: E[beta0 log(pi_dpo/pi_rev) - beta log(pi/pi_dpo)],
///                teacher z* = z_dpo + (beta0/beta)(z_dpo - z_rev)
enum class InstanceMode { Rlhf, Contrastive };

/// A fully enumerable problem: tabular policies over a single prompt.
struct Instance {
  Tokens prompt;
  Policy theta;
  Policy dpo;
  Policy other;  // reference (Rlhf) or reverse DPO model (Contrastive)
  double beta0 = 0.1;
  double beta = 0.1;
  InstanceMode mode = InstanceMode::Rlhf;

  int vocab_size() const { return theta.vocab_size(); }
  int max_len() const { return theta.max_len(); }

  /// Teacher settings reproducing this instance's synthetic logits.
  TeacherConfig teacher_config() const;
  /// Policy inside the KL penalty.
  const Policy& kl_anchor() const { return mode == InstanceMode::Rlhf ? other : dpo; }

  /// Tabular policies with logits ~ N(0, logit_scale^2), beta0 = 0.1 and
  /// beta drawn uniformly from [0.05, 1].
  static Instance random(int vocab_size, int max_len, std::uint64_t seed,
                         InstanceMode mode = InstanceMode::Rlhf, double logit_scale = 1.0);

  void validate() const;
};

inline constexpr std::int64_t kInstanceLimit = 100'000;

/// Exact RLHF objective value. When grad is non-null it receives the exact
/// gradient with respect to theta's parameters.
double rlhf_objective_exact(const Instance& inst, Vec* grad = nullptr);

/// beta * sum_t E[KL(pi(.|y_<t,x) || pi*(.|y_<t,x))], summed over the prefix tree.
double distill_objective_exact(const Instance& inst, Vec* grad = nullptr);

/// beta * E[sum_t C_t] with C_t = lse(z*) - c_a lse(z_dpo) - c_b lse(z_other),
/// the per-context log-partition constant that separates the two objectives.
double residual_exact(const Instance& inst, Vec* grad = nullptr);

struct IdentityReport {
  double lhs = 0.0;
  double kl_term = 0.0;
  double residual = 0.0;
  double gap = 0.0;            // lhs + kl_term - residual
  double grad_gap_norm = 0.0;  // ||grad lhs - grad(-kl_term + residual)||_inf
  double lhs_kl_grad_gap = 0.0;  // ||grad lhs + grad kl_term||_inf (residual ignored)
};

inline constexpr double kIdentityValueTol = 1e-9;
inline constexpr double kIdentityGradTol = 1e-8;

IdentityReport theorem1_report(const Instance& inst);

class IdentityCheckFailure : public Error {
 public:
  explicit IdentityCheckFailure(const IdentityReport& report);
  const IdentityReport& report() const { return report_; }

 private:
  IdentityReport report_;
};

/// theorem1_report, throwing IdentityCheckFailure when either tolerance is exceeded.
IdentityReport theorem1_check(const Instance& inst);

/// Max over coordinates of |fd - g| / max(|g|, 1e-8), with central differences.
double fd_check(const std::function<double(const Vec&)>& loss, const Vec& params,
                const Vec& analytic_grad, double h = 1e-4);

/// Central-difference gradient (five-point stencil).
Vec fd_gradient(const std::function<double(const Vec&)>& loss, const Vec& params, double h);

/// fd_check for a policy loss closure evaluated without a gradient sink.
double fd_check(const Policy& policy, const LossFn& loss, double h = 1e-4);

std::string identity_csv_header();
std::string identity_csv_row(const std::string& label, const IdentityReport& r);

}  // namespace alignlab
