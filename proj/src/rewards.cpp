#include "alignlab/rewards.hpp"

#include "alignlab/io.hpp"
#include "alignlab/tiny_trunk.hpp"

#include <json.hpp>

#include <atomic>
#include <sstream>

namespace alignlab {

namespace {

std::atomic<std::uint64_t> g_gold_margin_reads{0};

Tokens tokens_from_json(const nlohmann::json& j) {
  Tokens out;
  for (const auto& v : j) out.push_back(v.get<TokenId>());
  return out;
}

void check_beta0(double beta0) {
  require(beta0 > 0 && std::isfinite(beta0), ErrorCode::InvalidArgument, "beta0 must be > 0");
}

}  // namespace

PreferencePair::PreferencePair(Tokens prompt, Tokens chosen, Tokens rejected, double gold_margin)
    : prompt_(std::move(prompt)),
      chosen_(std::move(chosen)),
      rejected_(std::move(rejected)),
      gold_margin_(gold_margin) {
  require(chosen_ != rejected_, ErrorCode::InvalidArgument,
          "chosen and rejected responses must differ");
}

double PreferencePair::gold_margin() const {
  g_gold_margin_reads.fetch_add(1, std::memory_order_relaxed);
  return gold_margin_;
}

PreferencePair PreferencePair::swapped() const {
  return PreferencePair(prompt_, rejected_, chosen_, -gold_margin_);
}

std::uint64_t gold_margin_reads() { return g_gold_margin_reads.load(); }
void reset_gold_margin_audit() { g_gold_margin_reads.store(0); }

std::vector<PreferencePair> swap_all(std::span<const PreferencePair> pairs) {
  std::vector<PreferencePair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.swapped());
  return out;
}

std::string to_jsonl_line(const PreferencePair& pair) {
  nlohmann::json j;
  j["prompt"] = pair.prompt_;
  j["chosen"] = pair.chosen_;
  j["rejected"] = pair.rejected_;
  j["gold_margin"] = pair.gold_margin_;
  return j.dump();
}

PreferencePair pair_from_jsonl_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    return PreferencePair(tokens_from_json(j.at("prompt")), tokens_from_json(j.at("chosen")),
                          tokens_from_json(j.at("rejected")), j.at("gold_margin").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("bad preference record: ") + e.what());
  }
}

std::string preferences_to_jsonl(std::span<const PreferencePair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += to_jsonl_line(p);
    out += '\n';
  }
  return out;
}

std::vector<PreferencePair> preferences_from_jsonl(const std::string& text) {
  std::vector<PreferencePair> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(pair_from_jsonl_line(line));
  }
  return out;
}

void save_preferences(std::span<const PreferencePair> pairs, const std::string& path) {
  write_file(path, preferences_to_jsonl(pairs));
}

std::vector<PreferencePair> load_preferences(const std::string& path) {
  return preferences_from_jsonl(read_file(path));
}

// ---------------------------------------------------------------------------

RewardModel::RewardModel(int vocab_size, int max_len, int embed_dim, int hidden_dim,
                         std::uint64_t seed, double init_scale)
    : vocab_size_(vocab_size),
      max_len_(max_len),
      embed_dim_(embed_dim),
      hidden_dim_(hidden_dim),
      seed_(seed) {
  const detail::TinyTrunk trunk{vocab_size, embed_dim, hidden_dim};
  params_ = Vec::Zero(trunk.size() + hidden_dim);
  Rng rng(seed);
  const Eigen::Index n_embed = static_cast<Eigen::Index>(vocab_size) * embed_dim;
  const Eigen::Index n_w1 = static_cast<Eigen::Index>(hidden_dim) * trunk.input_dim();
  for (Eigen::Index i = 0; i < n_embed; ++i) params_(i) = init_scale * rng.normal();
  const double s1 = init_scale / std::sqrt(static_cast<double>(trunk.input_dim()));
  for (Eigen::Index i = 0; i < n_w1; ++i) params_(n_embed + i) = s1 * rng.normal();
  const double s2 = init_scale / std::sqrt(static_cast<double>(hidden_dim));
  for (Eigen::Index i = 0; i < hidden_dim; ++i) params_(trunk.size() + i) = s2 * rng.normal();
}

namespace {

struct PooledPass {
  std::vector<Tokens> contexts;
  std::vector<detail::TinyTrunk::Activations> acts;
  Vec pooled;
};

PooledPass pooled_forward(const RewardModel& rm, const Sequence& seq) {
  require(!seq.response.empty() && static_cast<int>(seq.response.size()) <= rm.max_len(),
          ErrorCode::InvalidContext, "reward model response length");
  require(!seq.prompt.empty(), ErrorCode::InvalidContext, "empty prompt");
  for (TokenId t : seq.prompt) {
    require(t >= 0 && t < rm.vocab_size(), ErrorCode::TokenOutOfRange, "prompt token");
  }
  for (TokenId t : seq.response) {
    require(t >= 0 && t < rm.vocab_size(), ErrorCode::TokenOutOfRange, "response token");
  }
  const detail::TinyTrunk trunk{rm.vocab_size(), rm.embed_dim(), rm.hidden_dim()};
  PooledPass pass;
  pass.pooled = Vec::Zero(rm.hidden_dim());
  Tokens ctx = seq.prompt;
  for (std::size_t t = 0; t < seq.response.size(); ++t) {
    ctx.push_back(seq.response[t]);
    detail::TinyTrunk::Activations act;
    trunk.forward(rm.params().data(), ctx,
                  static_cast<double>(t + 1) / static_cast<double>(rm.max_len()), act);
    pass.pooled += act.h;
    pass.contexts.push_back(ctx);
    pass.acts.push_back(std::move(act));
  }
  pass.pooled /= static_cast<double>(seq.response.size());
  return pass;
}

}  // namespace

double RewardModel::score(const Sequence& seq) const {
  const detail::TinyTrunk trunk{vocab_size_, embed_dim_, hidden_dim_};
  const auto pass = pooled_forward(*this, seq);
  return params_.segment(trunk.size(), hidden_dim_).dot(pass.pooled);
}

void RewardModel::accumulate_score_grad(const Sequence& seq, double upstream, Vec& grad) const {
  const detail::TinyTrunk trunk{vocab_size_, embed_dim_, hidden_dim_};
  require(grad.size() == params_.size(), ErrorCode::Mismatch, "gradient length");
  const auto pass = pooled_forward(*this, seq);
  grad.segment(trunk.size(), hidden_dim_) += upstream * pass.pooled;
  const Vec dh = (upstream / static_cast<double>(pass.acts.size())) *
                 params_.segment(trunk.size(), hidden_dim_);
  for (std::size_t t = 0; t < pass.acts.size(); ++t) {
    trunk.backward(params_.data(), pass.contexts[t], pass.acts[t], dh, grad.data());
  }
}

std::string reward_model_to_string(const RewardModel& rm) {
  std::ostringstream out;
  out << "{\n  \"format\": \"alignlab-reward-model/1\",\n";
  out << "  \"vocab_size\": " << rm.vocab_size() << ",\n";
  out << "  \"max_len\": " << rm.max_len() << ",\n";
  out << "  \"embed_dim\": " << rm.embed_dim() << ",\n";
  out << "  \"hidden_dim\": " << rm.hidden_dim() << ",\n";
  out << "  \"seed\": " << rm.seed() << ",\n";
  out << "  \"params\": [";
  for (Eigen::Index i = 0; i < rm.params().size(); ++i) {
    if (i) out << ", ";
    out << format_double(rm.params()(i));
  }
  out << "]\n}\n";
  return out.str();
}

RewardModel reward_model_from_string(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RewardModel rm(j.at("vocab_size").get<int>(), j.at("max_len").get<int>(),
                   j.at("embed_dim").get<int>(), j.at("hidden_dim").get<int>(),
                   j.at("seed").get<std::uint64_t>(), 0.0);
    const auto& arr = j.at("params");
    require(static_cast<Eigen::Index>(arr.size()) == rm.params().size(), ErrorCode::Mismatch,
            "reward model parameter count");
    for (std::size_t i = 0; i < arr.size(); ++i) rm.params()(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
    return rm;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("bad reward model: ") + e.what());
  }
}

double bt_loss(const RewardModel& rm, std::span<const PreferencePair> batch, Vec* grad) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "bt_loss needs a non-empty batch");
  if (grad) *grad = Vec::Zero(rm.params().size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& pair : batch) {
    const Sequence w = pair.chosen_seq();
    const Sequence l = pair.rejected_seq();
    const double margin = rm.score(w) - rm.score(l);
    total += -log_sigmoid(margin);
    if (grad) {
      // d/dm of -log sigma(m) = -sigma(-m)
      const double dm = -sigmoid(-margin) * inv_n;
      rm.accumulate_score_grad(w, dm, *grad);
      rm.accumulate_score_grad(l, -dm, *grad);
    }
  }
  return total * inv_n;
}

// ---------------------------------------------------------------------------

double dpo_token_reward(const Policy& dpo, const Policy& ref, double beta0, TokenSpan prompt,
                        TokenSpan prefix, TokenId token) {
  require_compatible(dpo, ref);
  check_beta0(beta0);
  require(token >= 0 && token < dpo.vocab_size(), ErrorCode::TokenOutOfRange, "token");
  const auto a = eval_context(dpo, prompt, prefix);
  const auto b = eval_context(ref, prompt, prefix);
  if (a.forced) return 0.0;
  return beta0 * (a.log_p(token) - b.log_p(token));
}

std::vector<double> ctr_token_rewards(const Policy& dpo, const Policy& rev, double beta0,
                                      const Sequence& seq) {
  require_compatible(dpo, rev);
  check_beta0(beta0);
  validate_sequence(dpo, seq);
  std::vector<double> out;
  const TokenSpan y(seq.response);
  for (std::size_t t = 0; t < y.size(); ++t) {
    out.push_back(dpo_token_reward(dpo, rev, beta0, seq.prompt, y.first(t), y[t]));
  }
  return out;
}

double dpo_seq_reward(const Policy& dpo, const Policy& ref, double beta0, const Sequence& seq) {
  require_compatible(dpo, ref);
  check_beta0(beta0);
  return beta0 * (seq_log_prob(dpo, seq) - seq_log_prob(ref, seq));
}

double ctr_reward(const Policy& dpo, const Policy& rev, double beta0, const Sequence& seq) {
  return dpo_seq_reward(dpo, rev, beta0, seq);
}

double evaluate(const RewardFn& fn, const Sequence& seq) {
  return std::visit(
      [&](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, RmReward>) {
          return f.model->score(seq);
        } else if constexpr (std::is_same_v<T, DpoReward>) {
          return dpo_seq_reward(*f.dpo, *f.ref, f.beta0, seq);
        } else if constexpr (std::is_same_v<T, ContrastiveReward>) {
          return ctr_reward(*f.dpo, *f.rev, f.beta0, seq);
        } else {
          return f.fn(seq);
        }
      },
      fn);
}

double reward_accuracy(const RewardFn& fn, std::span<const PreferencePair> pairs) {
  require(!pairs.empty(), ErrorCode::EmptyBatch, "reward_accuracy needs a non-empty set");
  double hits = 0.0;
  for (const auto& pair : pairs) {
    const double rw = evaluate(fn, pair.chosen_seq());
    const double rl = evaluate(fn, pair.rejected_seq());
    if (rw > rl) {
      hits += 1.0;
    } else if (rw == rl) {
      hits += 0.5;
    }
  }
  return hits / static_cast<double>(pairs.size());
}

}  // namespace alignlab
