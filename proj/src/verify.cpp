#include "alignlab/verify.hpp"

#include "alignlab/io.hpp"

#include <cmath>

namespace alignlab {

TeacherConfig Instance::teacher_config() const {
  TeacherConfig cfg;
  cfg.beta0 = beta0;
  cfg.beta = beta;
  if (mode == InstanceMode::Rlhf) {
    cfg.mode = TeacherMode::RlhfCombine;
  } else {
    cfg.mode = TeacherMode::ConstantExtrapolate;
    cfg.weight = beta0 / beta;
  }
  return cfg;
}

Instance Instance::random(int vocab_size, int max_len, std::uint64_t seed, InstanceMode mode,
                          double logit_scale) {
  Rng rng(seed);
  Instance inst;
  inst.prompt = {0};
  inst.mode = mode;
  inst.theta = Policy::tabular(vocab_size, max_len, 1, rng.next_u64(), logit_scale);
  inst.dpo = Policy::tabular(vocab_size, max_len, 1, rng.next_u64(), logit_scale);
  inst.other = Policy::tabular(vocab_size, max_len, 1, rng.next_u64(), logit_scale);
  inst.beta0 = 0.1;
  inst.beta = 0.05 + 0.95 * rng.uniform();
  return inst;
}

void Instance::validate() const {
  require(theta.kind() == PolicyKind::Tabular, ErrorCode::InvalidArgument,
          "instances use tabular policies");
  require_compatible(theta, dpo);
  require_compatible(theta, other);
  require(beta0 > 0 && beta > 0, ErrorCode::InvalidArgument, "beta0 and beta must be > 0");
  require(response_count(vocab_size(), max_len()) <= kInstanceLimit, ErrorCode::InstanceTooLarge,
          "instance enumeration exceeds 1e5 responses");
  validate_context(theta, prompt, {});
}

namespace {

struct ContextTerms {
  ContextEval theta;
  ContextEval dpo;
  ContextEval other;
  ContextEval anchor;
  TeacherStep teacher;
  double kl = 0.0;        // KL(theta || pi*)
  double residual = 0.0;  // C_t
};

/// Coefficients (c_a, c_b) with z* = c_a z_dpo + c_b z_other.
std::pair<double, double> combine_coefficients(const Instance& inst) {
  const double c = inst.beta0 / inst.beta;
  return inst.mode == InstanceMode::Rlhf ? std::pair{c, 1.0 - c} : std::pair{1.0 + c, -c};
}

ContextTerms context_terms(const Instance& inst, const TeacherConfig& cfg, TokenSpan prefix) {
  ContextTerms ct;
  ct.theta = eval_context(inst.theta, inst.prompt, prefix);
  ct.dpo = eval_context(inst.dpo, inst.prompt, prefix);
  ct.other = eval_context(inst.other, inst.prompt, prefix);
  ct.anchor = inst.mode == InstanceMode::Rlhf ? ct.other : ct.dpo;
  ct.teacher = teacher_step(ct.dpo, ct.other, cfg);
  if (!ct.theta.forced) {
    ct.kl = kl(ct.theta.p, ct.teacher.pi_star);
    const auto [ca, cb] = combine_coefficients(inst);
    ct.residual = logsumexp(ct.teacher.z_star) - ca * logsumexp(ct.dpo.z) -
                  cb * logsumexp(ct.other.z);
  }
  return ct;
}

/// Per-response quantities along every enumerated response.
struct ResponseWalk {
  Tokens response;
  double prob = 0.0;
  std::vector<ContextTerms> steps;
};

std::vector<ResponseWalk> walk_responses(const Instance& inst) {
  inst.validate();
  const auto cfg = inst.teacher_config();
  std::vector<ResponseWalk> out;
  for (auto& r : enumerate_responses(inst.vocab_size(), inst.max_len())) {
    ResponseWalk w;
    double logp = 0.0;
    const TokenSpan y(r);
    for (std::size_t t = 0; t < y.size(); ++t) {
      w.steps.push_back(context_terms(inst, cfg, y.first(t)));
      logp += w.steps.back().theta.log_p(y[t]);
    }
    w.prob = std::exp(logp);
    w.response = std::move(r);
    out.push_back(std::move(w));
  }
  return out;
}

/// Adds coeff * (e_{y_t} - p_t) at every context of the walk.
void add_score(const Instance& inst, const ResponseWalk& w, double coeff, LogitGrad& sink) {
  const TokenSpan y(w.response);
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto& e = w.steps[t].theta;
    if (e.forced) continue;
    Vec dz = -coeff * e.p;
    dz(y[t]) += coeff;
    sink.add(inst.prompt, y.first(t), dz);
  }
}

/// Depth-first walk over non-terminated prefixes with their probabilities.
template <typename Visit>
void walk_prefixes(const Instance& inst, const TeacherConfig& cfg, Tokens& prefix, double prob,
                   Visit&& visit) {
  const auto ct = context_terms(inst, cfg, prefix);
  visit(ct, prob);
  if (ct.theta.forced) return;
  for (TokenId v = 0; v < inst.theta.eos(); ++v) {
    prefix.push_back(v);
    walk_prefixes(inst, cfg, prefix, prob * ct.theta.p(v), visit);
    prefix.pop_back();
  }
}

}  // namespace

double rlhf_objective_exact(const Instance& inst, Vec* grad) {
  const auto walks = walk_responses(inst);
  const Policy& anchor = inst.kl_anchor();
  CompensatedSum total;
  LogitGrad sink(inst.vocab_size());
  for (const auto& w : walks) {
    const Sequence seq{inst.prompt, w.response};
    const double f = inst.beta0 * (seq_log_prob(inst.dpo, seq) - seq_log_prob(inst.other, seq)) -
                     inst.beta * (seq_log_prob(inst.theta, seq) - seq_log_prob(anchor, seq));
    total.add(w.prob * f);
    // grad of sum_y pi(y) f(y) with df = -beta dlog pi(y).
    if (grad) add_score(inst, w, w.prob * (f - inst.beta), sink);
  }
  if (grad) *grad = backward(inst.theta, sink);
  return total.value();
}

double distill_objective_exact(const Instance& inst, Vec* grad) {
  inst.validate();
  const auto cfg = inst.teacher_config();
  CompensatedSum total;
  Tokens prefix;
  walk_prefixes(inst, cfg, prefix, 1.0,
                [&](const ContextTerms& ct, double prob) { total.add(prob * inst.beta * ct.kl); });
  if (grad) {
    LogitGrad sink(inst.vocab_size());
    for (const auto& w : walk_responses(inst)) {
      double path = 0.0;
      for (const auto& s : w.steps) path += s.kl;
      add_score(inst, w, inst.beta * w.prob * path, sink);
      const TokenSpan y(w.response);
      for (std::size_t t = 0; t < y.size(); ++t) {
        const auto& s = w.steps[t];
        if (s.theta.forced) continue;
        sink.add(inst.prompt, y.first(t),
                 (inst.beta * w.prob) *
                     kl_grad_wrt_logits(s.theta.p, s.theta.log_p, s.teacher.log_pi_star));
      }
    }
    *grad = backward(inst.theta, sink);
  }
  return total.value();
}

double residual_exact(const Instance& inst, Vec* grad) {
  inst.validate();
  const auto cfg = inst.teacher_config();
  CompensatedSum total;
  Tokens prefix;
  walk_prefixes(inst, cfg, prefix, 1.0, [&](const ContextTerms& ct, double prob) {
    total.add(prob * inst.beta * ct.residual);
  });
  if (grad) {
    LogitGrad sink(inst.vocab_size());
    for (const auto& w : walk_responses(inst)) {
      double path = 0.0;
      for (const auto& s : w.steps) path += s.residual;
      add_score(inst, w, inst.beta * w.prob * path, sink);
    }
    *grad = backward(inst.theta, sink);
  }
  return total.value();
}

IdentityReport theorem1_report(const Instance& inst) {
  IdentityReport r;
  Vec g_lhs, g_kl, g_res;
  r.lhs = rlhf_objective_exact(inst, &g_lhs);
  r.kl_term = distill_objective_exact(inst, &g_kl);
  r.residual = residual_exact(inst, &g_res);
  r.gap = r.lhs + r.kl_term - r.residual;
  r.grad_gap_norm = (g_lhs - (-g_kl + g_res)).cwiseAbs().maxCoeff();
  r.lhs_kl_grad_gap = (g_lhs + g_kl).cwiseAbs().maxCoeff();
  return r;
}

IdentityCheckFailure::IdentityCheckFailure(const IdentityReport& report)
    : Error(ErrorCode::CheckFailure,
            "identity gap " + format_double(report.gap) + ", gradient gap " +
                format_double(report.grad_gap_norm)),
      report_(report) {}

IdentityReport theorem1_check(const Instance& inst) {
  const auto r = theorem1_report(inst);
  if (!(std::abs(r.gap) < kIdentityValueTol) || !(r.grad_gap_norm < kIdentityGradTol)) {
    throw IdentityCheckFailure(r);
  }
  return r;
}

Vec fd_gradient(const std::function<double(const Vec&)>& loss, const Vec& params, double h) {
  require(h >= 1e-7 && h <= 1e-3, ErrorCode::InvalidArgument, "h must lie in [1e-7, 1e-3]");
  Vec x = params;
  Vec g(params.size());
  auto at = [&](Eigen::Index i, double offset) {
    x(i) = params(i) + offset;
    const double f = loss(x);
    require(std::isfinite(f), ErrorCode::NonFinite, "non-finite loss during finite differences");
    return f;
  };
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    // Five-point central stencil, O(h^4) truncation error.
    const double f2p = at(i, 2 * h);
    const double f1p = at(i, h);
    const double f1m = at(i, -h);
    const double f2m = at(i, -2 * h);
    x(i) = params(i);
    g(i) = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h);
  }
  return g;
}

double fd_check(const std::function<double(const Vec&)>& loss, const Vec& params,
                const Vec& analytic_grad, double h) {
  require(analytic_grad.size() == params.size(), ErrorCode::Mismatch, "gradient length");
  require(analytic_grad.allFinite(), ErrorCode::NonFinite, "non-finite analytic gradient");
  const Vec fd = fd_gradient(loss, params, h);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double denom = std::max(std::abs(analytic_grad(i)), 1e-8);
    worst = std::max(worst, std::abs(fd(i) - analytic_grad(i)) / denom);
  }
  return worst;
}

double fd_check(const Policy& policy, const LossFn& loss, double h) {
  const Vec analytic = grad(policy, loss);
  Policy probe = policy;
  return fd_check(
      [&](const Vec& x) {
        probe.params() = x;
        return loss(probe, nullptr);
      },
      policy.params(), analytic, h);
}

std::string identity_csv_header() {
  return "label,lhs,kl_term,residual,gap,grad_gap_norm,lhs_kl_grad_gap";
}

std::string identity_csv_row(const std::string& label, const IdentityReport& r) {
  return label + ',' + format_double(r.lhs) + ',' + format_double(r.kl_term) + ',' +
         format_double(r.residual) + ',' + format_double(r.gap) + ',' +
         format_double(r.grad_gap_norm) + ',' + format_double(r.lhs_kl_grad_gap);
}

}  // namespace alignlab
