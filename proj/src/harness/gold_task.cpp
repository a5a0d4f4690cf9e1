#include "alignlab/harness.hpp"

#include "alignlab/io.hpp"

#include <sstream>

namespace alignlab {

GoldTask GoldTask::make(std::uint64_t seed, int vocab_size, int max_len, int prompt_len,
                        double label_noise, double reward_scale) {
  require(vocab_size >= 3, ErrorCode::Config, "gold task needs vocab_size >= 3");
  require(max_len >= 2, ErrorCode::Config, "gold task needs max_len >= 2");
  require(prompt_len >= 1, ErrorCode::Config, "prompt_len must be >= 1");
  require(label_noise >= 0 && label_noise < 0.5, ErrorCode::Config,
          "label_noise must lie in [0, 0.5)");
  GoldTask task;
  task.seed = seed;
  task.vocab_size = vocab_size;
  task.max_len = max_len;
  task.prompt_len = prompt_len;
  task.label_noise = label_noise;
  task.token_reward = Mat(vocab_size - 1, vocab_size);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < task.token_reward.rows(); ++i) {
    for (Eigen::Index j = 0; j < task.token_reward.cols(); ++j) {
      task.token_reward(i, j) = reward_scale * rng.normal();
    }
  }
  return task;
}

double GoldTask::gold_token_reward(TokenSpan prompt, TokenSpan prefix, TokenId token) const {
  const TokenId last = prefix.empty() ? prompt.back() : prefix.back();
  return token_reward(last, token);
}

double GoldTask::gold_reward(const Sequence& seq) const {
  double total = 0.0;
  const TokenSpan y(seq.response);
  for (std::size_t t = 0; t < y.size(); ++t) total += gold_token_reward(seq.prompt, y.first(t), y[t]);
  return total;
}

Tokens GoldTask::random_prompt(Rng& rng) const {
  Tokens p(static_cast<std::size_t>(prompt_len));
  for (auto& t : p) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab_size - 1)));
  return p;
}

double GoldTask::preference_probability(double margin) const {
  return (1.0 - label_noise) * sigmoid(margin) + label_noise * sigmoid(-margin);
}

std::vector<PreferencePair> gen_preferences(const GoldTask& task, const Policy& ref, int n_pairs,
                                            Rng& rng) {
  require(n_pairs >= 1, ErrorCode::InvalidArgument, "n_pairs must be >= 1");
  require(ref.vocab_size() == task.vocab_size && ref.max_len() == task.max_len,
          ErrorCode::Mismatch, "reference policy does not match the task");
  std::vector<PreferencePair> out;
  out.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const Tokens prompt = task.random_prompt(rng);
    const Sequence a = sample(ref, prompt, rng);
    Sequence b = sample(ref, prompt, rng);
    int attempts = 0;
    while (b.response == a.response) {
      require(++attempts < 1000, ErrorCode::InvalidArgument,
              "reference policy too peaked to draw distinct responses");
      b = sample(ref, prompt, rng);
    }
    const double ra = task.gold_reward(a);
    const double rb = task.gold_reward(b);
    if (rng.uniform() < task.preference_probability(ra - rb)) {
      out.emplace_back(prompt, a.response, b.response, ra - rb);
    } else {
      out.emplace_back(prompt, b.response, a.response, rb - ra);
    }
  }
  return out;
}

std::string gold_task_to_string(const GoldTask& task) {
  std::ostringstream out;
  out << "{\n  \"format\": \"alignlab-gold-task/1\",\n";
  out << "  \"seed\": " << task.seed << ",\n";
  out << "  \"vocab_size\": " << task.vocab_size << ",\n";
  out << "  \"max_len\": " << task.max_len << ",\n";
  out << "  \"prompt_len\": " << task.prompt_len << ",\n";
  out << "  \"label_noise\": " << format_double(task.label_noise) << ",\n";
  out << "  \"token_reward\": [";
  for (Eigen::Index i = 0; i < task.token_reward.rows(); ++i) {
    out << (i ? ",\n    [" : "\n    [");
    for (Eigen::Index j = 0; j < task.token_reward.cols(); ++j) {
      if (j) out << ", ";
      out << format_double(task.token_reward(i, j));
    }
    out << "]";
  }
  out << "\n  ]\n}\n";
  return out.str();
}

GoldTask gold_task_from_string(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    GoldTask task;
    task.seed = j.at("seed").get<std::uint64_t>();
    task.vocab_size = j.at("vocab_size").get<int>();
    task.max_len = j.at("max_len").get<int>();
    task.prompt_len = j.at("prompt_len").get<int>();
    task.label_noise = j.at("label_noise").get<double>();
    const auto& rows = j.at("token_reward");
    task.token_reward = Mat(static_cast<Eigen::Index>(rows.size()), task.vocab_size);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int k = 0; k < task.vocab_size; ++k) {
        task.token_reward(static_cast<Eigen::Index>(i), k) = rows[i].at(static_cast<std::size_t>(k)).get<double>();
      }
    }
    return task;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("bad gold task: ") + e.what());
  }
}

}  // namespace alignlab
