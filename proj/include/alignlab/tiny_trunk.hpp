#pragma once

#include "alignlab/core.hpp"

#include <span>

namespace alignlab::detail {

/// Shared feature extractor of the tiny neural policy and the reward model:
///   u = [mean_i E[c_i] ; E[c_last] ; position], h = tanh(W1 u + b1).
/// Parameter block: E (V x d), W1 (H x (2d+1)), b1 (H), row-major.
struct TinyTrunk {
  int vocab_size;
  int embed_dim;
  int hidden_dim;

  int input_dim() const { return 2 * embed_dim + 1; }
  Eigen::Index size() const {
    return static_cast<Eigen::Index>(vocab_size) * embed_dim +
           static_cast<Eigen::Index>(hidden_dim) * input_dim() + hidden_dim;
  }

  struct Activations {
    Vec u;
    Vec h;
  };

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  void forward(const double* params, std::span<const int> tokens, double position,
               Activations& out) const {
    Eigen::Map<const RowMat> embed(params, vocab_size, embed_dim);
    Eigen::Map<const RowMat> w1(params + vocab_size * embed_dim, hidden_dim, input_dim());
    Eigen::Map<const Vec> b1(params + vocab_size * embed_dim + hidden_dim * input_dim(),
                             hidden_dim);
    out.u.setZero(input_dim());
    for (int t : tokens) out.u.head(embed_dim) += embed.row(t).transpose();
    out.u.head(embed_dim) /= static_cast<double>(tokens.size());
    out.u.segment(embed_dim, embed_dim) = embed.row(tokens.back()).transpose();
    out.u(2 * embed_dim) = position;
    out.h = (w1 * out.u + b1).array().tanh().matrix();
  }

  /// Accumulates d(loss)/d(trunk params) into grad given d(loss)/dh.
  void backward(const double* params, std::span<const int> tokens, const Activations& act,
                const Eigen::Ref<const Vec>& dh, double* grad) const {
    Eigen::Map<const RowMat> w1(params + vocab_size * embed_dim, hidden_dim, input_dim());
    Eigen::Map<RowMat> g_embed(grad, vocab_size, embed_dim);
    Eigen::Map<RowMat> g_w1(grad + vocab_size * embed_dim, hidden_dim, input_dim());
    Eigen::Map<Vec> g_b1(grad + vocab_size * embed_dim + hidden_dim * input_dim(), hidden_dim);

    const Vec da = (dh.array() * (1.0 - act.h.array().square())).matrix();
    g_w1.noalias() += da * act.u.transpose();
    g_b1 += da;
    const Vec du = w1.transpose() * da;
    const double inv_n = 1.0 / static_cast<double>(tokens.size());
    for (int t : tokens) g_embed.row(t) += inv_n * du.head(embed_dim).transpose();
    g_embed.row(tokens.back()) += du.segment(embed_dim, embed_dim).transpose();
  }
};

}  // namespace alignlab::detail
