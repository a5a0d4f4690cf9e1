#pragma once

#include "alignlab/policy.hpp"

#include <string>

namespace alignlab {

enum class TeacherMode { RlhfCombine, ConstantExtrapolate, AdaptiveExtrapolate };

const char* to_string(TeacherMode mode);
TeacherMode teacher_mode_from_string(const std::string& name);

/// Only the fields of the active mode are read:
///   RlhfCombine          beta0, beta
///   ConstantExtrapolate  weight, beta (the static per-token loss scale)
///   AdaptiveExtrapolate  beta0, r, epsilon
struct TeacherConfig {
  TeacherMode mode = TeacherMode::AdaptiveExtrapolate;
  double beta0 = 0.1;
  double beta = 0.1;
  double weight = 1.0;
  double r = 15.0;
  double epsilon = 0.001;

  void validate() const;
};

/// Teacher distribution at one context.
struct TeacherStep {
  Vec z_star;
  Vec pi_star;
  Vec log_pi_star;
  double alpha_t = 0.0;  // effective extrapolation weight
  double tvd_t = 0.0;    // TVD between the two source distributions
  double beta_t = 0.0;   // per-token loss scale
  bool forced = false;   // final position: all mass on the terminator
};

/// (beta0/beta) * z_dpo + (1 - beta0/beta) * z_ref
template <typename DA, typename DB>
Vec combine_rlhf(const Eigen::MatrixBase<DA>& z_dpo, const Eigen::MatrixBase<DB>& z_ref,
                 double beta0, double beta) {
  require(z_dpo.size() == z_ref.size(), ErrorCode::Mismatch, "logit length mismatch");
  require(beta > 0, ErrorCode::InvalidArgument, "beta must be > 0");
  const double c = beta0 / beta;
  return c * z_dpo + (1.0 - c) * z_ref;
}

/// z_dpo + weight * (z_dpo - z_rev)
template <typename DA, typename DB>
Vec extrapolate(const Eigen::MatrixBase<DA>& z_dpo, const Eigen::MatrixBase<DB>& z_rev,
                double weight) {
  require(z_dpo.size() == z_rev.size(), ErrorCode::Mismatch, "logit length mismatch");
  require(weight >= 0, ErrorCode::InvalidArgument, "extrapolation weight must be >= 0");
  return z_dpo + weight * (z_dpo - z_rev);
}

/// Half the L1 distance between two normalized distributions.
template <typename DA, typename DB>
double tvd(const Eigen::MatrixBase<DA>& p, const Eigen::MatrixBase<DB>& q) {
  require(p.size() == q.size(), ErrorCode::Mismatch, "distribution length mismatch");
  require(std::abs(p.sum() - 1.0) <= 1e-9 && std::abs(q.sum() - 1.0) <= 1e-9 &&
              p.minCoeff() >= 0 && q.minCoeff() >= 0,
          ErrorCode::InvalidArgument, "tvd inputs must be normalized");
  return std::min(1.0, 0.5 * (p - q).cwiseAbs().sum());
}

/// tvd * r + epsilon, in [epsilon, r + epsilon].
double adaptive_alpha(double tvd_t, double r, double epsilon);

TeacherStep teacher_step(const Policy& dpo, const Policy& other, const TeacherConfig& cfg,
                         TokenSpan prompt, TokenSpan prefix);

/// Same as teacher_step, from already-evaluated source contexts.
TeacherStep teacher_step(const ContextEval& dpo, const ContextEval& other,
                         const TeacherConfig& cfg);

}  // namespace alignlab
