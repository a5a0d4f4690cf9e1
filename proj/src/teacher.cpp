#include "alignlab/teacher.hpp"

namespace alignlab {

const char* to_string(TeacherMode mode) {
  switch (mode) {
    case TeacherMode::RlhfCombine: return "rlhf";
    case TeacherMode::ConstantExtrapolate: return "constant";
    case TeacherMode::AdaptiveExtrapolate: return "adaptive";
  }
  return "unknown";
}

TeacherMode teacher_mode_from_string(const std::string& name) {
  if (name == "rlhf") return TeacherMode::RlhfCombine;
  if (name == "constant") return TeacherMode::ConstantExtrapolate;
  if (name == "adaptive") return TeacherMode::AdaptiveExtrapolate;
  throw Error(ErrorCode::Config, "unknown teacher mode '" + name + "'");
}

void TeacherConfig::validate() const {
  switch (mode) {
    case TeacherMode::RlhfCombine:
      require(beta0 > 0 && beta > 0, ErrorCode::Config, "beta0 and beta must be > 0");
      break;
    case TeacherMode::ConstantExtrapolate:
      require(weight >= 0 && beta > 0, ErrorCode::Config, "need weight >= 0 and beta > 0");
      break;
    case TeacherMode::AdaptiveExtrapolate:
      require(beta0 > 0 && r >= 0 && epsilon > 0, ErrorCode::Config,
              "need beta0 > 0, r >= 0, epsilon > 0");
      break;
  }
}

double adaptive_alpha(double tvd_t, double r, double epsilon) {
  require(tvd_t >= 0.0 && tvd_t <= 1.0, ErrorCode::InvalidArgument, "tvd must lie in [0, 1]");
  require(r >= 0 && epsilon > 0, ErrorCode::InvalidArgument, "need r >= 0 and epsilon > 0");
  return tvd_t * r + epsilon;
}

TeacherStep teacher_step(const ContextEval& dpo, const ContextEval& other,
                         const TeacherConfig& cfg) {
  cfg.validate();
  require(dpo.z.size() == other.z.size(), ErrorCode::Mismatch, "teacher vocabulary mismatch");
  TeacherStep step;
  step.forced = dpo.forced;
  step.tvd_t = tvd(dpo.p, other.p);
  switch (cfg.mode) {
    case TeacherMode::RlhfCombine:
      step.z_star = combine_rlhf(dpo.z, other.z, cfg.beta0, cfg.beta);
      step.alpha_t = cfg.beta0 / cfg.beta;
      step.beta_t = cfg.beta;
      break;
    case TeacherMode::ConstantExtrapolate:
      step.z_star = extrapolate(dpo.z, other.z, cfg.weight);
      step.alpha_t = cfg.weight;
      step.beta_t = cfg.beta;
      break;
    case TeacherMode::AdaptiveExtrapolate:
      step.alpha_t = adaptive_alpha(step.tvd_t, cfg.r, cfg.epsilon);
      step.z_star = extrapolate(dpo.z, other.z, step.alpha_t);
      step.beta_t = cfg.beta0 / step.alpha_t;
      break;
  }
  require(step.z_star.allFinite(), ErrorCode::NonFinite, "non-finite teacher logits");
  auto d = dist_from_logits(step.z_star, step.forced);
  step.pi_star = std::move(d.p);
  step.log_pi_star = std::move(d.log_p);
  return step;
}

TeacherStep teacher_step(const Policy& dpo, const Policy& other, const TeacherConfig& cfg,
                         TokenSpan prompt, TokenSpan prefix) {
  require_compatible(dpo, other);
  return teacher_step(eval_context(dpo, prompt, prefix), eval_context(other, prompt, prefix), cfg);
}

}  // namespace alignlab
