#include "alignlab/policy.hpp"

#include "alignlab/io.hpp"
#include "alignlab/tiny_trunk.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace alignlab {

namespace {

constexpr std::int64_t kTabularLimit = 1'000'000;

std::int64_t ipow(std::int64_t base, int exp) {
  std::int64_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

detail::TinyTrunk trunk_of(const PolicyShape& s) {
  return {s.vocab_size, s.embed_dim, s.hidden_dim};
}

Tokens concat(TokenSpan a, TokenSpan b) {
  Tokens out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void validate_shape(const PolicyShape& s) {
  require(s.vocab_size >= 2, ErrorCode::InvalidArgument, "vocab_size must be >= 2");
  require(s.max_len >= 1, ErrorCode::InvalidArgument, "max_len must be >= 1");
  if (s.kind == PolicyKind::Tabular) {
    require(s.prompt_len >= 1, ErrorCode::InvalidArgument, "prompt_len must be >= 1");
    // V^T_max bound; computed without overflow.
    std::int64_t p = 1;
    for (int i = 0; i < s.max_len; ++i) {
      p *= s.vocab_size;
      require(p <= kTabularLimit, ErrorCode::InstanceTooLarge,
              "tabular policy needs vocab_size^max_len <= 1e6");
    }
    require(ipow(s.vocab_size - 1, s.prompt_len) <= kTabularLimit, ErrorCode::InstanceTooLarge,
            "too many tabular prompts");
  } else {
    require(s.embed_dim >= 1 && s.hidden_dim >= 1, ErrorCode::InvalidArgument,
            "tiny neural dims must be >= 1");
  }
}

}  // namespace

const char* to_string(PolicyKind kind) {
  return kind == PolicyKind::Tabular ? "tabular" : "tiny_neural";
}

PolicyKind policy_kind_from_string(const std::string& name) {
  if (name == "tabular") return PolicyKind::Tabular;
  if (name == "tiny_neural") return PolicyKind::TinyNeural;
  throw Error(ErrorCode::Config, "unknown policy kind '" + name + "'");
}

std::int64_t response_count(int vocab_size, int max_len) {
  std::int64_t total = 0;
  std::int64_t term = 1;
  for (int k = 0; k < max_len; ++k) {
    total += term;
    term *= (vocab_size - 1);
  }
  return total;
}

std::int64_t Policy::param_count(const PolicyShape& s) {
  validate_shape(s);
  if (s.kind == PolicyKind::Tabular) {
    return ipow(s.vocab_size - 1, s.prompt_len) * response_count(s.vocab_size, s.max_len) *
           s.vocab_size;
  }
  return trunk_of(s).size() + static_cast<std::int64_t>(s.vocab_size) * s.hidden_dim +
         s.vocab_size;
}

Policy::Policy(PolicyShape shape, std::uint64_t seed, Vec params)
    : shape_(shape), seed_(seed), params_(std::move(params)) {
  require(params_.size() == param_count(shape_), ErrorCode::Mismatch,
          "parameter vector length does not match policy shape");
}

Policy Policy::make(const PolicyShape& shape, std::uint64_t seed, double init_scale) {
  Vec params = Vec::Zero(param_count(shape));
  Rng rng(seed);
  if (shape.kind == PolicyKind::Tabular) {
    if (init_scale > 0) {
      for (Eigen::Index i = 0; i < params.size(); ++i) params(i) = init_scale * rng.normal();
    }
  } else {
    const auto trunk = trunk_of(shape);
    const Eigen::Index n_embed = static_cast<Eigen::Index>(shape.vocab_size) * shape.embed_dim;
    const Eigen::Index n_w1 = static_cast<Eigen::Index>(shape.hidden_dim) * trunk.input_dim();
    const Eigen::Index w2_off = trunk.size();
    const Eigen::Index n_w2 = static_cast<Eigen::Index>(shape.vocab_size) * shape.hidden_dim;
    for (Eigen::Index i = 0; i < n_embed; ++i) params(i) = init_scale * rng.normal();
    const double s1 = init_scale / std::sqrt(static_cast<double>(trunk.input_dim()));
    for (Eigen::Index i = 0; i < n_w1; ++i) params(n_embed + i) = s1 * rng.normal();
    const double s2 = init_scale / std::sqrt(static_cast<double>(shape.hidden_dim));
    for (Eigen::Index i = 0; i < n_w2; ++i) params(w2_off + i) = s2 * rng.normal();
  }
  return Policy(shape, seed, std::move(params));
}

Policy Policy::tabular(int vocab_size, int max_len, int prompt_len, std::uint64_t seed,
                       double init_scale) {
  PolicyShape s;
  s.kind = PolicyKind::Tabular;
  s.vocab_size = vocab_size;
  s.max_len = max_len;
  s.prompt_len = prompt_len;
  return make(s, seed, init_scale);
}

Policy Policy::tiny_neural(int vocab_size, int max_len, int embed_dim, int hidden_dim,
                           std::uint64_t seed, double init_scale) {
  PolicyShape s;
  s.kind = PolicyKind::TinyNeural;
  s.vocab_size = vocab_size;
  s.max_len = max_len;
  s.embed_dim = embed_dim;
  s.hidden_dim = hidden_dim;
  return make(s, seed, init_scale);
}

std::int64_t Policy::contexts_per_prompt() const {
  return response_count(shape_.vocab_size, shape_.max_len);
}

Eigen::Index Policy::tabular_offset(TokenSpan prompt, TokenSpan prefix) const {
  const std::int64_t base = shape_.vocab_size - 1;
  std::int64_t prompt_index = 0;
  for (TokenId t : prompt) prompt_index = prompt_index * base + t;
  std::int64_t prefix_index = 0;
  std::int64_t len_offset = 0;
  std::int64_t term = 1;
  for (std::size_t k = 0; k < prefix.size(); ++k) {
    len_offset += term;
    term *= base;
  }
  for (TokenId t : prefix) prefix_index = prefix_index * base + t;
  return static_cast<Eigen::Index>(
      ((prompt_index * contexts_per_prompt()) + len_offset + prefix_index) * shape_.vocab_size);
}

void require_compatible(const Policy& a, const Policy& b) {
  require(a.vocab_size() == b.vocab_size() && a.max_len() == b.max_len(), ErrorCode::Mismatch,
          "policies disagree on vocabulary size or max_len");
}

bool validate_context(const Policy& policy, TokenSpan prompt, TokenSpan prefix) {
  require(static_cast<int>(prefix.size()) < policy.max_len(), ErrorCode::ContextTooLong,
          "prefix length must be < max_len");
  require(!prompt.empty(), ErrorCode::InvalidContext, "prompt must be non-empty");
  const TokenId eos = policy.eos();
  for (TokenId t : prompt) {
    require(t >= 0 && t < policy.vocab_size(), ErrorCode::TokenOutOfRange, "prompt token");
    require(t != eos, ErrorCode::InvalidContext, "terminator inside prompt");
  }
  for (TokenId t : prefix) {
    require(t >= 0 && t < policy.vocab_size(), ErrorCode::TokenOutOfRange, "prefix token");
    require(t != eos, ErrorCode::InvalidContext, "terminator inside prefix");
  }
  if (policy.kind() == PolicyKind::Tabular) {
    require(static_cast<int>(prompt.size()) == policy.shape().prompt_len,
            ErrorCode::InvalidContext, "tabular prompt length mismatch");
  }
  return static_cast<int>(prefix.size()) == policy.max_len() - 1;
}

namespace {

Vec logits_unchecked(const Policy& policy, TokenSpan prompt, TokenSpan prefix,
                     detail::TinyTrunk::Activations* act_out = nullptr) {
  const auto& s = policy.shape();
  if (s.kind == PolicyKind::Tabular) {
    return policy.params().segment(policy.tabular_offset(prompt, prefix), s.vocab_size);
  }
  const auto trunk = trunk_of(s);
  const Tokens ctx = concat(prompt, prefix);
  detail::TinyTrunk::Activations act;
  trunk.forward(policy.params().data(), ctx,
                static_cast<double>(prefix.size()) / static_cast<double>(s.max_len), act);
  using RowMat = detail::TinyTrunk::RowMat;
  const double* w2p = policy.params().data() + trunk.size();
  Eigen::Map<const RowMat> w2(w2p, s.vocab_size, s.hidden_dim);
  Eigen::Map<const Vec> b2(w2p + s.vocab_size * s.hidden_dim, s.vocab_size);
  Vec z = w2 * act.h + b2;
  if (act_out) *act_out = std::move(act);
  return z;
}

}  // namespace

Vec logits(const Policy& policy, TokenSpan prompt, TokenSpan prefix) {
  validate_context(policy, prompt, prefix);
  Vec z = logits_unchecked(policy, prompt, prefix);
  require(z.allFinite(), ErrorCode::NonFinite, "non-finite logits");
  return z;
}

ContextEval dist_from_logits(Vec z, bool forced) {
  ContextEval e;
  const Eigen::Index v = z.size();
  if (forced) {
    e.p = Vec::Zero(v);
    e.p(v - 1) = 1.0;
    e.log_p = Vec::Constant(v, -std::numeric_limits<double>::infinity());
    e.log_p(v - 1) = 0.0;
  } else {
    e.log_p = log_softmax(z);
    e.p = softmax(z);
  }
  e.z = std::move(z);
  e.forced = forced;
  return e;
}

ContextEval eval_context(const Policy& policy, TokenSpan prompt, TokenSpan prefix) {
  const bool forced = validate_context(policy, prompt, prefix);
  Vec z = logits_unchecked(policy, prompt, prefix);
  require(z.allFinite(), ErrorCode::NonFinite, "non-finite logits");
  return dist_from_logits(std::move(z), forced);
}

Vec next_dist(const Policy& policy, TokenSpan prompt, TokenSpan prefix) {
  return eval_context(policy, prompt, prefix).p;
}

void validate_sequence(const Policy& policy, const Sequence& seq) {
  const auto& y = seq.response;
  require(!y.empty(), ErrorCode::InvalidContext, "empty response");
  require(static_cast<int>(y.size()) <= policy.max_len(), ErrorCode::ContextTooLong,
          "response longer than max_len");
  require(y.back() == policy.eos(), ErrorCode::InvalidContext, "response must end in terminator");
  for (std::size_t t = 0; t + 1 < y.size(); ++t) {
    require(y[t] >= 0 && y[t] < policy.eos(), ErrorCode::TokenOutOfRange,
            "response token out of range or interior terminator");
  }
}

double seq_log_prob(const Policy& policy, const Sequence& seq) {
  validate_sequence(policy, seq);
  double total = 0.0;
  const TokenSpan y(seq.response);
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto e = eval_context(policy, seq.prompt, y.first(t));
    total += e.log_p(y[t]);
  }
  return total;
}

TokenId sample_categorical(const Eigen::Ref<const Vec>& p, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  TokenId last_positive = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0) continue;
    cum += p(i);
    last_positive = static_cast<TokenId>(i);
    if (u < cum) return last_positive;
  }
  return last_positive;
}

Sequence sample(const Policy& policy, TokenSpan prompt, Rng& rng) {
  Sequence seq;
  seq.prompt.assign(prompt.begin(), prompt.end());
  while (true) {
    const auto e = eval_context(policy, seq.prompt, seq.response);
    const TokenId tok = sample_categorical(e.p, rng);
    seq.response.push_back(tok);
    if (tok == policy.eos()) break;
  }
  return seq;
}

std::vector<Tokens> enumerate_responses(int vocab_size, int max_len, std::int64_t limit) {
  require(vocab_size >= 2 && max_len >= 1, ErrorCode::InvalidArgument, "bad enumeration shape");
  std::int64_t p = 1;
  for (int i = 0; i < max_len; ++i) {
    p *= vocab_size;
    require(p <= limit, ErrorCode::InstanceTooLarge, "vocab_size^max_len exceeds limit");
  }
  const TokenId eos = vocab_size - 1;
  std::vector<Tokens> out;
  out.reserve(static_cast<std::size_t>(response_count(vocab_size, max_len)));
  for (int len = 0; len < max_len; ++len) {
    Tokens body(static_cast<std::size_t>(len), 0);
    while (true) {
      Tokens r = body;
      r.push_back(eos);
      out.push_back(std::move(r));
      // Odometer increment over base (V-1), most significant digit first.
      int pos = len - 1;
      while (pos >= 0 && body[static_cast<std::size_t>(pos)] == eos - 1) {
        body[static_cast<std::size_t>(pos)] = 0;
        --pos;
      }
      if (pos < 0) break;
      ++body[static_cast<std::size_t>(pos)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void LogitGrad::add(TokenSpan prompt, TokenSpan prefix, const Eigen::Ref<const Vec>& dz) {
  require(dz.size() == vocab_size_, ErrorCode::Mismatch, "logit gradient length");
  Tokens key;
  key.reserve(prompt.size() + prefix.size() + 1);
  key.insert(key.end(), prompt.begin(), prompt.end());
  key.push_back(-1);
  key.insert(key.end(), prefix.begin(), prefix.end());
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    entries_.emplace(std::move(key),
                     Entry{Tokens(prompt.begin(), prompt.end()), Tokens(prefix.begin(), prefix.end()), dz});
  } else {
    it->second.dz += dz;
  }
}

void LogitGrad::scale(double factor) {
  for (auto& [key, e] : entries_) e.dz *= factor;
}

Vec backward(const Policy& policy, const LogitGrad& dlogits) {
  require(dlogits.vocab_size() == policy.vocab_size(), ErrorCode::Mismatch,
          "gradient vocabulary mismatch");
  Vec g = Vec::Zero(policy.num_params());
  const auto& s = policy.shape();
  if (s.kind == PolicyKind::Tabular) {
    for (const auto& [key, e] : dlogits.entries()) {
      if (validate_context(policy, e.prompt, e.prefix)) continue;  // forced: no dependence
      g.segment(policy.tabular_offset(e.prompt, e.prefix), s.vocab_size) += e.dz;
    }
    return g;
  }
  const auto trunk = trunk_of(s);
  using RowMat = detail::TinyTrunk::RowMat;
  const double* w2p = policy.params().data() + trunk.size();
  Eigen::Map<const RowMat> w2(w2p, s.vocab_size, s.hidden_dim);
  Eigen::Map<RowMat> g_w2(g.data() + trunk.size(), s.vocab_size, s.hidden_dim);
  Eigen::Map<Vec> g_b2(g.data() + trunk.size() + s.vocab_size * s.hidden_dim, s.vocab_size);
  for (const auto& [key, e] : dlogits.entries()) {
    if (validate_context(policy, e.prompt, e.prefix)) continue;
    detail::TinyTrunk::Activations act;
    logits_unchecked(policy, e.prompt, e.prefix, &act);
    g_w2.noalias() += e.dz * act.h.transpose();
    g_b2 += e.dz;
    const Vec dh = w2.transpose() * e.dz;
    const Tokens ctx = concat(e.prompt, e.prefix);
    trunk.backward(policy.params().data(), ctx, act, dh, g.data());
  }
  return g;
}

double value_and_grad(const Policy& policy, const LossFn& loss, Vec& gradient) {
  LogitGrad sink(policy.vocab_size());
  const double value = loss(policy, &sink);
  require(std::isfinite(value), ErrorCode::NonFinite, "loss is not finite");
  gradient = backward(policy, sink);
  return value;
}

Vec grad(const Policy& policy, const LossFn& loss) {
  Vec g;
  value_and_grad(policy, loss, g);
  return g;
}

// ---------------------------------------------------------------------------

std::string checkpoint_to_string(const Policy& policy) {
  require(policy.params().allFinite(), ErrorCode::NonFinite, "cannot checkpoint non-finite params");
  const auto& s = policy.shape();
  std::ostringstream out;
  out << "{\n";
  out << "  \"format\": \"alignlab-policy/1\",\n";
  out << "  \"kind\": \"" << to_string(s.kind) << "\",\n";
  out << "  \"vocab_size\": " << s.vocab_size << ",\n";
  out << "  \"max_len\": " << s.max_len << ",\n";
  out << "  \"prompt_len\": " << s.prompt_len << ",\n";
  out << "  \"embed_dim\": " << s.embed_dim << ",\n";
  out << "  \"hidden_dim\": " << s.hidden_dim << ",\n";
  out << "  \"seed\": " << policy.seed() << ",\n";
  out << "  \"params\": [";
  for (Eigen::Index i = 0; i < policy.num_params(); ++i) {
    if (i) out << ", ";
    out << format_double(policy.params()(i));
  }
  out << "]\n}\n";
  return out.str();
}

Policy checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("malformed checkpoint: ") + e.what());
  }
  try {
    PolicyShape s;
    s.kind = policy_kind_from_string(j.at("kind").get<std::string>());
    s.vocab_size = j.at("vocab_size").get<int>();
    s.max_len = j.at("max_len").get<int>();
    s.prompt_len = j.at("prompt_len").get<int>();
    s.embed_dim = j.at("embed_dim").get<int>();
    s.hidden_dim = j.at("hidden_dim").get<int>();
    const auto seed = j.at("seed").get<std::uint64_t>();
    const auto& arr = j.at("params");
    Vec params(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) params(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
    return Policy(s, seed, std::move(params));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("incomplete checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Policy& policy, const std::string& path) {
  write_file(path, checkpoint_to_string(policy));
}

Policy load_checkpoint(const std::string& path) { return checkpoint_from_string(read_file(path)); }

}  // namespace alignlab
