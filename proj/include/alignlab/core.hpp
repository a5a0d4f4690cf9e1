#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace alignlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using TokenId = int;

enum class ErrorCode {
  ContextTooLong,
  TokenOutOfRange,
  InvalidContext,
  InstanceTooLarge,
  NonFinite,
  EmptyBatch,
  Mismatch,
  InvalidArgument,
  CheckFailure,
  Io,
  Config,
  Dependency,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}
  ErrorCode code() const noexcept { return code_; }
  /// what() without the error-code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

// ---------------------------------------------------------------------------
// Numerically stable primitives over logit vectors. All of them accept any
// Eigen dense expression and evaluate in the expression's scalar type.
// ---------------------------------------------------------------------------

template <typename Derived>
typename Derived::Scalar logsumexp(const Eigen::MatrixBase<Derived>& z) {
  using S = typename Derived::Scalar;
  const S m = z.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((z.array() - m).exp().sum());
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& z) {
  using S = typename Derived::Scalar;
  const S m = z.maxCoeff();
  Eigen::Matrix<S, Eigen::Dynamic, 1> e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(
    const Eigen::MatrixBase<Derived>& z) {
  return (z.array() - logsumexp(z)).matrix();
}

/// KL(softmax(zp) || softmax(zq)) computed from logits.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_from_logits(const Eigen::MatrixBase<DerivedP>& zp,
                                         const Eigen::MatrixBase<DerivedQ>& zq) {
  const auto lp = log_softmax(zp);
  const auto lq = log_softmax(zq);
  return (lp.array().exp() * (lp - lq).array()).sum();
}

/// KL(p || q) for normalized distributions; terms with p_i == 0 contribute 0.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl(const Eigen::MatrixBase<DerivedP>& p,
                             const Eigen::MatrixBase<DerivedQ>& q) {
  using S = typename DerivedP::Scalar;
  S acc = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0) acc += p(i) * (std::log(p(i)) - std::log(q(i)));
  }
  return acc;
}

/// Gradient of KL(softmax(z) || q) with respect to z, given p = softmax(z),
/// log p and log q: p * (log p - log q - KL).
template <typename DP, typename DLP, typename DLQ>
Eigen::Matrix<typename DP::Scalar, Eigen::Dynamic, 1> kl_grad_wrt_logits(
    const Eigen::MatrixBase<DP>& p, const Eigen::MatrixBase<DLP>& log_p,
    const Eigen::MatrixBase<DLQ>& log_q) {
  using S = typename DP::Scalar;
  Eigen::Matrix<S, Eigen::Dynamic, 1> diff(p.size());
  S klv = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    diff(i) = p(i) > 0 ? log_p(i) - log_q(i) : S(0);
    klv += p(i) * diff(i);
  }
  return (p.array() * (diff.array() - klv)).matrix();
}

inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline bool all_finite(const Eigen::Ref<const Vec>& v) { return v.allFinite(); }

}  // namespace alignlab
