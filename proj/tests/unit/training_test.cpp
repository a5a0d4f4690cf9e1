#include "test_util.hpp"

#include "alignlab/verify.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace alignlab;
using namespace alignlab::testing;

namespace {

constexpr double kFdTol = 1e-6;

TeacherConfig teacher_cfg(TeacherMode mode) {
  TeacherConfig c;
  c.mode = mode;
  c.beta0 = 0.1;
  c.beta = 0.3;
  c.weight = 1.5;
  c.r = 10.0;
  return c;
}

struct Toy {
  Policy theta, ref, dpo, rev;
  std::vector<PreferencePair> pairs;
  std::vector<Sequence> seqs;
};

Toy make_toy(std::uint64_t seed, int v = 4, int t = 3) {
  Toy toy;
  toy.theta = random_tabular(v, t, seed * 7 + 1, 1.0);
  toy.ref = random_tabular(v, t, seed * 7 + 2, 1.0);
  toy.dpo = random_tabular(v, t, seed * 7 + 3, 1.0);
  toy.rev = random_tabular(v, t, seed * 7 + 4, 1.0);
  toy.pairs = random_pairs(toy.ref, 6, seed * 7 + 5);
  toy.seqs = random_sequences(toy.ref, 6, seed * 7 + 6);
  return toy;
}

double mean_margin(const Policy& p, const Policy& ref, std::span<const PreferencePair> pairs) {
  double s = 0.0;
  for (const auto& pr : pairs) s += dpo_margin(p, ref, 0.1, pr);
  return s / static_cast<double>(pairs.size());
}

/// Mean over every free context of KL(pi || anchor). Each prefix is the
/// response that ends right after it, minus the terminator.
double mean_context_kl(const Policy& p, const Policy& anchor) {
  double s = 0.0;
  int n = 0;
  for (const auto& y : enumerate_responses(p.vocab_size(), p.max_len())) {
    const auto prefix = TokenSpan(y).first(y.size() - 1);
    const auto e = eval_context(p, Tokens{0}, prefix);
    if (e.forced) continue;
    s += kl(e.p, next_dist(anchor, Tokens{0}, prefix));
    ++n;
  }
  return s / n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss values on hand-built cases.

TEST(DpoLoss, EqualPoliciesGiveLn2) {
  const auto ref = random_tabular(4, 3, 1, 1.0);
  const auto pairs = random_pairs(ref, 10, 2);
  EXPECT_NEAR(dpo_loss(ref, ref, 0.1, pairs), std::log(2.0), 1e-15);
  EXPECT_NEAR(reverse_dpo_loss(ref, ref, 0.1, pairs), std::log(2.0), 1e-15);
}

TEST(DpoLoss, MarginOneGivesKnownValue) {
  // chosen [EOS] vs rejected [0, EOS] at one prompt; log-ratio gap of 10.
  auto ref = Policy::tabular(3, 2, 1, 0);
  auto theta = Policy::tabular(3, 2, 1, 0);
  const auto off = theta.tabular_offset(Tokens{0}, Tokens{});
  theta.params()(off + 2) = 5.0;
  theta.params()(off + 0) = -5.0;
  const PreferencePair pair({0}, {2}, {0, 2}, 0.0);
  ASSERT_NEAR(dpo_margin(theta, ref, 0.1, pair), 1.0, 1e-12);
  const std::vector<PreferencePair> batch{pair};
  EXPECT_NEAR(dpo_loss(theta, ref, 0.1, batch), 0.313262, 1e-6);
  EXPECT_NEAR(dpo_loss(theta, ref, 0.1, batch), -log_sigmoid(1.0), 1e-12);
}

TEST(DpoLoss, ReverseEqualsSwappedBatch) {
  const auto toy = make_toy(3);
  EXPECT_EQ(reverse_dpo_loss(toy.theta, toy.ref, 0.1, toy.pairs),
            dpo_loss(toy.theta, toy.ref, 0.1, swap_all(toy.pairs)));
}

TEST(DpoLoss, SaturatedMarginApproachesZero) {
  auto theta = Policy::tabular(3, 2, 1, 0);
  const auto ref = Policy::tabular(3, 2, 1, 0);
  const auto off = theta.tabular_offset(Tokens{0}, Tokens{});
  theta.params()(off + 2) = 500.0;
  const std::vector<PreferencePair> batch{PreferencePair({0}, {2}, {0, 2}, 0.0)};
  EXPECT_LT(dpo_loss(theta, ref, 0.1, batch), 1e-20);
}

TEST(AlignDistil, SingleContextKlValue) {
  auto theta = Policy::tabular(2, 2, 1, 0);
  auto dpo = Policy::tabular(2, 2, 1, 0);
  const auto off = dpo.tabular_offset(Tokens{0}, Tokens{});
  dpo.params()(off) = std::log(0.75);
  dpo.params()(off + 1) = std::log(0.25);
  TeacherConfig c;
  c.mode = TeacherMode::ConstantExtrapolate;
  c.weight = 0.0;
  c.beta = 1.0;
  const TeacherInputs teacher{&dpo, &dpo, c};
  const std::vector<Sequence> batch{{{0}, {1}}};
  const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  EXPECT_NEAR(aligndistil_off_loss(theta, teacher, batch), expected, 1e-15);
  EXPECT_NEAR(expected, 0.143841, 1e-6);
}

TEST(AlignDistil, ZeroWhenStudentEqualsTeacher) {
  const auto dpo = random_tabular(4, 3, 5, 1.0);
  TeacherConfig c;
  c.mode = TeacherMode::ConstantExtrapolate;
  c.weight = 0.0;
  const TeacherInputs teacher{&dpo, &dpo, c};
  const auto seqs = random_sequences(dpo, 20, 6);
  EXPECT_LT(std::abs(aligndistil_off_loss(dpo, teacher, seqs)), 1e-12);
  Rng rng(1);
  std::vector<Tokens> prompts(10, Tokens{0});
  EXPECT_LT(std::abs(aligndistil_on_loss(dpo, teacher, prompts, rng)), 1e-12);
}

TEST(AlignDistil, PositiveWhenStudentDiffers) {
  const auto toy = make_toy(7);
  const TeacherInputs teacher{&toy.dpo, &toy.rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  EXPECT_GT(aligndistil_off_loss(toy.theta, teacher, toy.seqs), 1e-9);
}

TEST(AlignDistil, DuplicatedBatchKeepsValue) {
  const auto toy = make_toy(8);
  const TeacherInputs teacher{&toy.dpo, &toy.rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  auto doubled = toy.seqs;
  doubled.insert(doubled.end(), toy.seqs.begin(), toy.seqs.end());
  EXPECT_NEAR(aligndistil_off_loss(toy.theta, teacher, doubled),
              aligndistil_off_loss(toy.theta, teacher, toy.seqs), 1e-15);
}

TEST(AlignDistil, DoublingBeta0DoublesAdaptiveLoss) {
  const auto toy = make_toy(9);
  auto c = teacher_cfg(TeacherMode::AdaptiveExtrapolate);
  const double l1 = aligndistil_off_loss(toy.theta, {&toy.dpo, &toy.rev, c}, toy.seqs);
  c.beta0 *= 2;
  const double l2 = aligndistil_off_loss(toy.theta, {&toy.dpo, &toy.rev, c}, toy.seqs);
  EXPECT_EQ(l2, 2 * l1);
}

TEST(AlignDistil, OnPolicyDeterministicUnderSeed) {
  const auto toy = make_toy(10);
  const TeacherInputs teacher{&toy.dpo, &toy.rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  const std::vector<Tokens> prompts(8, Tokens{1});
  Rng a(5), b(5);
  EXPECT_EQ(aligndistil_on_loss(toy.theta, teacher, prompts, a),
            aligndistil_on_loss(toy.theta, teacher, prompts, b));
}

TEST(AlignDistil, SingleStepOnAndOffAgree) {
  const auto theta = random_tabular(4, 1, 1, 1.0);
  const auto dpo = random_tabular(4, 1, 2, 1.0);
  const auto rev = random_tabular(4, 1, 3, 1.0);
  const TeacherInputs teacher{&dpo, &rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  const std::vector<Tokens> prompts{{0}, {1}, {2}};
  Rng rng(1);
  std::vector<Sequence> drawn;
  const double on = aligndistil_on_loss(theta, teacher, prompts, rng, nullptr, &drawn);
  EXPECT_NEAR(on, aligndistil_off_loss(theta, teacher, drawn), 1e-12);
}

TEST(AlignDistil, AlphaStatsStayInBounds) {
  const auto toy = make_toy(11);
  const auto c = teacher_cfg(TeacherMode::AdaptiveExtrapolate);
  DistillStats stats;
  aligndistil_off_loss(toy.theta, {&toy.dpo, &toy.rev, c}, toy.seqs, nullptr, &stats);
  ASSERT_GT(stats.tokens, 0u);
  EXPECT_GE(stats.alpha_min, c.epsilon);
  EXPECT_LE(stats.alpha_max, c.r + c.epsilon);
}

TEST(AlignDistil, RejectsMismatchedTeacher) {
  const auto theta = random_tabular(4, 3, 1);
  const auto other = random_tabular(5, 3, 1);
  const std::vector<Sequence> batch{{{0}, {3}}};
  EXPECT_THROW(aligndistil_off_loss(theta, {&other, &other, TeacherConfig{}}, batch), Error);
  EXPECT_THROW(aligndistil_off_loss(theta, {&theta, &theta, TeacherConfig{}}, std::span<const Sequence>{}),
               Error);
}

// ---------------------------------------------------------------------------
// Gradients against finite differences, 10 seeded tabular instances each.

class LossGradients : public ::testing::TestWithParam<int> {};

TEST_P(LossGradients, MatchFiniteDifferences) {
  const auto toy = make_toy(static_cast<std::uint64_t>(100 + GetParam()));
  const auto& pairs = toy.pairs;
  const auto& seqs = toy.seqs;

  EXPECT_LT(fd_check(toy.theta, [&](const Policy& p, LogitGrad* s) { return dpo_loss(p, toy.ref, 0.1, pairs, s); }),
            kFdTol) << "dpo";
  EXPECT_LT(fd_check(toy.theta,
                     [&](const Policy& p, LogitGrad* s) { return reverse_dpo_loss(p, toy.ref, 0.1, pairs, s); }),
            kFdTol) << "reverse dpo";
  for (auto mode : {TeacherMode::RlhfCombine, TeacherMode::ConstantExtrapolate, TeacherMode::AdaptiveExtrapolate}) {
    const TeacherInputs teacher{&toy.dpo, &toy.rev, teacher_cfg(mode)};
    EXPECT_LT(fd_check(toy.theta,
                       [&](const Policy& p, LogitGrad* s) { return aligndistil_off_loss(p, teacher, seqs, s); }),
              kFdTol) << "aligndistil off, " << to_string(mode);
  }

  // On-policy: the gradient is the off-policy gradient on the drawn samples.
  const TeacherInputs teacher{&toy.dpo, &toy.rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  const std::vector<Tokens> prompts{{0}, {1}, {2}, {0}};
  Rng rng(static_cast<std::uint64_t>(GetParam()));
  std::vector<Sequence> drawn;
  LogitGrad on_sink(toy.theta.vocab_size());
  aligndistil_on_loss(toy.theta, teacher, prompts, rng, &on_sink, &drawn);
  const Vec g_on = backward(toy.theta, on_sink);
  const Vec g_off = grad(toy.theta, [&](const Policy& p, LogitGrad* s) {
    return aligndistil_off_loss(p, teacher, drawn, s);
  });
  EXPECT_EQ(g_on, g_off);
  EXPECT_LT(fd_check(toy.theta,
                     [&](const Policy& p, LogitGrad* s) { return aligndistil_off_loss(p, teacher, drawn, s); }),
            kFdTol) << "aligndistil on";

  const ContrastiveReward reward{&toy.dpo, &toy.rev, 0.1};
  const auto samples = random_sequences(toy.theta, 6, 900 + GetParam());
  EXPECT_LT(fd_check(toy.theta,
                     [&](const Policy& p, LogitGrad* s) { return sentence_pg_surrogate(p, reward, 0.08, samples, s); }),
            kFdTol) << "sentence pg";
  EXPECT_LT(fd_check(toy.theta,
                     [&](const Policy& p, LogitGrad* s) { return token_reinforce_surrogate(p, reward, 0.08, samples, s); }),
            kFdTol) << "token reinforce";
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradients, ::testing::Range(0, 10));

TEST(LossGradients, TinyNeuralDistillation) {
  const auto theta = Policy::tiny_neural(4, 3, 3, 5, 1, 1.0);
  const auto dpo = Policy::tiny_neural(4, 3, 3, 5, 2, 1.0);
  const auto rev = Policy::tiny_neural(4, 3, 3, 5, 3, 1.0);
  const auto seqs = random_sequences(Policy::tabular(4, 3, 2, 4, 1.0), 5, 5);
  const TeacherInputs teacher{&dpo, &rev, teacher_cfg(TeacherMode::AdaptiveExtrapolate)};
  EXPECT_LT(fd_check(theta, [&](const Policy& p, LogitGrad* s) { return aligndistil_off_loss(p, teacher, seqs, s); }),
            kFdTol);
}

TEST(NegLogProbGradient, ClosedFormPerContext) {
  const auto p = random_tabular(4, 3, 12, 1.0);
  const Sequence s{{1}, {0, 2, 3}};
  const Vec g = grad(p, [&](const Policy& pol, LogitGrad* sink) {
    return -accumulate_log_prob_grad(pol, s, -1.0, sink);
  });
  Vec expected = Vec::Zero(p.num_params());
  const TokenSpan y(s.response);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto off = p.tabular_offset(s.prompt, y.first(t));
    Vec d = next_dist(p, s.prompt, y.first(t));
    d(y[t]) -= 1.0;
    expected.segment(off, 4) = d;
  }
  EXPECT_LT((g - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(grad(p, [](const Policy&, LogitGrad*) { return 3.0; }), Vec::Zero(p.num_params()));
}

// ---------------------------------------------------------------------------
// Baselines.

TEST(Baselines, ZeroRewardAtAnchorGivesZeroGradient) {
  const auto dpo = random_tabular(4, 3, 13, 1.0);
  const ContrastiveReward reward{&dpo, &dpo, 0.1};
  const auto samples = random_sequences(dpo, 10, 14);
  EXPECT_LT(sentence_pg_grad(dpo, reward, 0.08, samples).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(token_reinforce_grad(dpo, reward, 0.08, samples).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Baselines, RewardTermScalesLinearly) {
  const auto toy = make_toy(15);
  const auto samples = random_sequences(toy.theta, 8, 16);
  // With beta = 0 only the reward term remains; r_ctr is linear in beta0.
  const Vec g1 = sentence_pg_grad(toy.theta, {&toy.dpo, &toy.rev, 0.1}, 0.0, samples);
  const Vec g3 = sentence_pg_grad(toy.theta, {&toy.dpo, &toy.rev, 0.3}, 0.0, samples);
  EXPECT_LT((g3 - 3.0 * g1).cwiseAbs().maxCoeff(), 1e-14);
  const Vec t1 = token_reinforce_grad(toy.theta, {&toy.dpo, &toy.rev, 0.1}, 0.0, samples);
  const Vec t3 = token_reinforce_grad(toy.theta, {&toy.dpo, &toy.rev, 0.3}, 0.0, samples);
  EXPECT_LT((t3 - 3.0 * t1).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Baselines, ReturnsToGoTelescoping) {
  const auto toy = make_toy(17);
  for (const auto& s : random_sequences(toy.theta, 20, 18)) {
    const auto r = ctr_token_rewards(toy.dpo, toy.rev, 0.1, s);
    const auto g = returns_to_go(r);
    ASSERT_NEAR(g.front(), ctr_reward(toy.dpo, toy.rev, 0.1, s), 1e-12);
    ASSERT_EQ(g.back(), r.back());
  }
  const std::vector<double> r{1.0, 2.0, 3.0};
  EXPECT_EQ(returns_to_go(r), (std::vector<double>{6.0, 5.0, 3.0}));
}

TEST(Baselines, TokenKlTermUsesStudentToAnchorDirection) {
  // Zero rewards isolate -beta * KL(pi || pi_dpo) along the response.
  const auto theta = random_tabular(3, 2, 19, 1.0);
  const auto dpo = random_tabular(3, 2, 20, 1.0);
  const ContrastiveReward reward{&dpo, &dpo, 0.1};
  const std::vector<Sequence> batch{{{0}, {0, 2}}};
  const Vec p = next_dist(theta, Tokens{0}, Tokens{});
  const Vec q = next_dist(dpo, Tokens{0}, Tokens{});
  const double expected = -0.5 * 0.08 * kl(p, q);
  EXPECT_NEAR(token_reinforce_surrogate(theta, reward, 0.08, batch), expected, 1e-15);
}

// ---------------------------------------------------------------------------
// Training loop.

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto toy = make_toy(21);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.lr = 0.0;
  cfg.batch_size = 4;
  ProbeSet probe;
  probe.prompts = {{0}, {1}};
  probe.anchor = &toy.dpo;
  probe.reward_num = &toy.dpo;
  probe.reward_den = &toy.rev;
  TrainData data;
  data.ref = &toy.ref;
  data.pairs = toy.pairs;
  const auto r = train(toy.theta, cfg, Objective::Dpo, data, probe);
  EXPECT_EQ(r.policy.params(), toy.theta.params());
  ASSERT_EQ(r.records.size(), 5u);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.token_avg_reward, r.records[0].token_avg_reward);
    EXPECT_EQ(rec.kl_to_anchor, r.records[0].kl_to_anchor);
  }
}

TEST(Train, OneDpoStepIncreasesMargin) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto toy = make_toy(30 + seed);
    TrainConfig cfg;
    cfg.steps = 1;
    cfg.lr = 1e-3;
    cfg.batch_size = static_cast<int>(toy.pairs.size());
    TrainData data;
    data.ref = &toy.ref;
    data.pairs = toy.pairs;
    const auto r = train(toy.theta, cfg, Objective::Dpo, data, ProbeSet{});
    EXPECT_GT(mean_margin(r.policy, toy.ref, toy.pairs), mean_margin(toy.theta, toy.ref, toy.pairs));
  }
}

TEST(Train, ReverseDpoMatchesDpoOnSwappedData) {
  const auto toy = make_toy(40);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.lr = 0.5;
  cfg.batch_size = 3;
  cfg.seed = 99;
  const auto swapped = swap_all(toy.pairs);
  TrainData a;
  a.ref = &toy.ref;
  a.pairs = swapped;
  TrainData b;
  b.ref = &toy.ref;
  b.pairs = toy.pairs;
  const auto ra = train(toy.ref, cfg, Objective::Dpo, a, ProbeSet{});
  const auto rb = train(toy.ref, cfg, Objective::ReverseDpo, b, ProbeSet{});
  EXPECT_EQ(ra.policy.params(), rb.policy.params());
  ASSERT_EQ(ra.records.size(), rb.records.size());
  for (std::size_t i = 0; i < ra.records.size(); ++i) EXPECT_EQ(ra.records[i].loss, rb.records[i].loss);
}

TEST(Train, ReverseDpoInvertsRewardAccuracy) {
  // Separable data: chosen always the shorter response.
  const auto ref = random_tabular(4, 3, 41, 0.5);
  std::vector<PreferencePair> pairs;
  for (const auto& p : random_pairs(ref, 200, 42)) {
    if (p.chosen().size() == p.rejected().size()) continue;
    pairs.push_back(p.chosen().size() < p.rejected().size() ? p : p.swapped());
  }
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.lr = 5.0;
  cfg.batch_size = 16;
  TrainData data;
  data.ref = &ref;
  data.pairs = pairs;
  const auto rev = train(ref, cfg, Objective::ReverseDpo, data, ProbeSet{});
  EXPECT_LT(reward_accuracy(DpoReward{&rev.policy, &ref, 0.1}, pairs), 0.5);
}

TEST(Train, WeightZeroContractionIsMonotone) {
  const auto dpo = random_tabular(4, 3, 50, 1.5);
  const auto init = random_tabular(4, 3, 51, 1.5);
  std::vector<Sequence> all;
  for (const auto& y : enumerate_responses(4, 3)) all.push_back({{0}, y});
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.lr = 0.5;
  cfg.batch_size = static_cast<int>(all.size());
  cfg.teacher.mode = TeacherMode::ConstantExtrapolate;
  cfg.teacher.weight = 0.0;
  cfg.teacher.beta = 1.0;
  TrainData data;
  data.dpo = &dpo;
  data.rev = &dpo;
  data.responses = all;
  Policy p = init;
  double prev = mean_context_kl(p, dpo);
  const double start = prev;
  for (int step = 0; step < 50; ++step) {
    p = train(p, cfg, Objective::AlignOff, data, ProbeSet{}).policy;
    const double now = mean_context_kl(p, dpo);
    ASSERT_LT(now, prev) << "step " << step;
    prev = now;
  }
  EXPECT_LT(prev, 0.5 * start);
}

TEST(Train, NonFiniteInitDiverges) {
  const auto toy = make_toy(60);
  Policy bad = toy.theta;
  bad.params().setConstant(std::numeric_limits<double>::quiet_NaN());
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  TrainData data;
  data.ref = &toy.ref;
  data.pairs = toy.pairs;
  const auto r = train(bad, cfg, Objective::Dpo, data, ProbeSet{});
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.diagnostic.empty());
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(std::isnan(r.records.back().loss));
}

TEST(Train, DeterministicUnderSeed) {
  const auto toy = make_toy(70);
  TrainConfig cfg;
  cfg.steps = 15;
  cfg.lr = 0.3;
  cfg.batch_size = 4;
  cfg.seed = 3;
  std::vector<Tokens> prompts{{0}, {1}, {2}};
  ProbeSet probe;
  probe.prompts = prompts;
  probe.seed = 4;
  probe.reward_num = &toy.dpo;
  probe.reward_den = &toy.rev;
  probe.anchor = &toy.dpo;
  TrainData data;
  data.dpo = &toy.dpo;
  data.rev = &toy.rev;
  data.prompts = prompts;
  for (auto obj : {Objective::AlignOn, Objective::BaselineSentence, Objective::BaselineToken}) {
    const auto a = train(toy.theta, cfg, obj, data, probe);
    const auto b = train(toy.theta, cfg, obj, data, probe);
    EXPECT_EQ(a.policy.params(), b.policy.params()) << to_string(obj);
    EXPECT_EQ(run_records_csv(a.records), run_records_csv(b.records));
  }
}

TEST(Train, MissingInputsRaiseErrors) {
  const auto toy = make_toy(80);
  TrainConfig cfg;
  cfg.steps = 1;
  TrainData data;
  data.pairs = toy.pairs;
  EXPECT_THROW(train(toy.theta, cfg, Objective::Dpo, data, ProbeSet{}), Error);
  TrainData d2;
  d2.responses = toy.seqs;
  EXPECT_THROW(train(toy.theta, cfg, Objective::AlignOff, d2, ProbeSet{}), Error);
  cfg.lr = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(RunRecords, CsvHasFixedHeader) {
  const std::vector<RunRecord> recs{{1, 0.5, 0.25, 0.125, 2.0}};
  const auto csv = run_records_csv(recs);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kRunRecordHeader);
  EXPECT_EQ(run_records_csv({}), std::string(kRunRecordHeader) + "\n");
}

TEST(Probe, KlToSelfIsZero) {
  const auto p = random_tabular(4, 3, 90, 2.0);
  ProbeSet probe;
  probe.prompts = {{0}, {1}, {2}};
  probe.samples_per_prompt = 5;
  probe.anchor = &p;
  probe.reward_num = &p;
  probe.reward_den = &p;
  const auto m = evaluate_probe(p, probe);
  EXPECT_LT(std::abs(m.kl_to_anchor), 1e-12);
  EXPECT_EQ(m.token_avg_reward, 0.0);
  EXPECT_GE(m.response_len_mean, 1.0);
}
