#include "test_util.hpp"

#include "alignlab/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace alignlab;
using namespace alignlab::testing;
namespace fs = std::filesystem;

namespace {

/// A tabular task small enough for every stage to finish in well under a second.
ExperimentConfig small_config(const std::string& dir, std::vector<std::string> stages) {
  nlohmann::json j = {{"policy_kind", "tabular"}, {"vocab_size", 4},      {"max_len", 3},
                      {"prompt_len", 1},          {"n_train_pairs", 64},  {"n_test_pairs", 64},
                      {"rm_steps", 5},            {"dpo_steps", 10},      {"dpo_lr", 2.0},
                      {"align_steps", 5},         {"bench_steps", 4},     {"probe_prompts", 6},
                      {"final_probe_samples", 2}, {"verify_instances", 9}, {"output_dir", dir},
                      {"stages", stages}};
  return ExperimentConfig::from_json(j);
}

std::string fresh_dir(const std::string& name) {
  const auto d = tmp_dir("harness/" + name);
  fs::remove_all(d);
  return d;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::Io;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsRoundTrip) {
  const auto cfg = ExperimentConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(cfg.to_json(), merge_config(nlohmann::json::object()));
  EXPECT_EQ(cfg.ablation_weights, (std::vector<double>{1.0, 1.2, 1.5, 1.8, 2.0}));
  EXPECT_EQ(cfg.epsilon, 0.001);
}

TEST(Config, RejectsBadInput) {
  EXPECT_EQ(code_of([] { merge_config({{"nope", 1}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { merge_config({{"beta0", "x"}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { parse_config_value("beta0", "abc"); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { parse_config_value("missing_key", "1"); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"stages", {"bogus"}}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"mode", "sideways"}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"teacher", "oracle"}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"n_train_pairs", 0}}); }), ErrorCode::Config);
  EXPECT_EQ(code_of([] { load_config("/nonexistent/config.json"); }), ErrorCode::Io);
}

TEST(Config, ParsesCommandLineValues) {
  EXPECT_EQ(parse_config_value("beta0", "0.25"), 0.25);
  EXPECT_EQ(parse_config_value("dpo_steps", "12"), 12);
  EXPECT_EQ(parse_config_value("mode", "on"), "on");
  EXPECT_EQ(parse_config_value("stages", "gen-data,verify"), nlohmann::json({"gen-data", "verify"}));
  EXPECT_EQ(parse_config_value("ablation_weights", "1,2.5"), nlohmann::json({1.0, 2.5}));
}

TEST(Config, TeacherAndTrainSettings) {
  auto cfg = ExperimentConfig::from_json({{"teacher", "constant"}, {"weight", 1.5}, {"seed", 4}});
  const auto t = cfg.teacher_config();
  EXPECT_EQ(t.mode, TeacherMode::ConstantExtrapolate);
  EXPECT_EQ(t.weight, 1.5);
  const auto tc = cfg.train_config(7, 0.2, "align-off");
  EXPECT_EQ(tc.steps, 7);
  EXPECT_EQ(tc.lr, 0.2);
  EXPECT_EQ(tc.seed, stage_seed(4, "align-off"));
  EXPECT_NE(stage_seed(4, "align-off"), stage_seed(4, "align-on"));
  EXPECT_NE(stage_seed(4, "align-off"), stage_seed(5, "align-off"));
}

// ---------------------------------------------------------------------------
// Synthetic data

TEST(GenPreferences, DeterministicForSeed) {
  const auto task = GoldTask::make(1, 5, 4, 2, 0.0, 1.0);
  const auto ref = Policy::tabular(5, 4, 2, 3, 0.5);
  Rng a(9), b(9);
  const auto da = gen_preferences(task, ref, 200, a);
  const auto db = gen_preferences(task, ref, 200, b);
  EXPECT_EQ(preferences_to_jsonl(da), preferences_to_jsonl(db));
  for (const auto& p : da) {
    EXPECT_NE(p.chosen(), p.rejected());
    EXPECT_EQ(p.prompt().size(), 2u);
  }
  EXPECT_EQ(gold_task_to_string(gold_task_from_string(gold_task_to_string(task))), gold_task_to_string(task));
}

TEST(GenPreferences, HugeMarginsFollowGoldOrdering) {
  const auto task = GoldTask::make(2, 5, 4, 1, 0.0, 1000.0);
  const auto ref = Policy::tabular(5, 4, 1, 3, 0.5);
  Rng rng(10);
  const auto pairs = gen_preferences(task, ref, 500, rng);
  int huge = 0;
  for (const auto& p : pairs) {
    const double m = task.gold_reward(p.chosen_seq()) - task.gold_reward(p.rejected_seq());
    if (std::abs(m) > 40.0) {
      ++huge;
      EXPECT_GT(m, 0.0);
    }
  }
  EXPECT_GT(huge, 450);
  const CustomReward gold{[&](const Sequence& s) { return task.gold_reward(s); }};
  std::vector<PreferencePair> clear;
  for (const auto& p : pairs)
    if (std::abs(task.gold_reward(p.chosen_seq()) - task.gold_reward(p.rejected_seq())) > 40.0) clear.push_back(p);
  EXPECT_EQ(reward_accuracy(gold, clear), 1.0);
  reset_gold_margin_audit();
}

TEST(GenPreferences, FlipRateFollowsBradleyTerry) {
  for (double noise : {0.0, 0.2}) {
    const auto task = GoldTask::make(3, 5, 4, 1, noise, 1.0);
    const auto ref = Policy::tabular(5, 4, 1, 4, 0.5);
    Rng rng(11);
    const auto pairs = gen_preferences(task, ref, 10000, rng);
    double flips = 0.0, expected = 0.0;
    for (const auto& p : pairs) {
      const double m = task.gold_reward(p.chosen_seq()) - task.gold_reward(p.rejected_seq());
      if (m < 0) flips += 1.0;
      // Probability the observed ordering is the gold-wrong one.
      expected += 1.0 - task.preference_probability(std::abs(m));
    }
    EXPECT_NEAR(flips / 1e4, expected / 1e4, 0.02) << "noise " << noise;
  }
  const auto t = GoldTask::make(3, 5, 4, 1, 0.0, 1.0);
  EXPECT_NEAR(1.0 - t.preference_probability(0.7), sigmoid(-0.7), 1e-15);
}

TEST(GenPreferences, StoredMarginMatchesGold) {
  const auto task = GoldTask::make(4, 4, 3, 1, 0.0, 1.0);
  const auto ref = Policy::tabular(4, 3, 1, 5, 0.5);
  Rng rng(12);
  for (const auto& p : gen_preferences(task, ref, 50, rng))
    EXPECT_NEAR(p.gold_margin(), task.gold_reward(p.chosen_seq()) - task.gold_reward(p.rejected_seq()), 1e-12);
  reset_gold_margin_audit();
}

// ---------------------------------------------------------------------------
// Stages

TEST(Pipeline, VerifyOnlyWritesIdentityCsvAndManifest) {
  const auto dir = fresh_dir("verify");
  const auto out = run_experiment(small_config(dir, {"verify"}));
  EXPECT_FALSE(out.check_failed);
  const auto csv = read_file(dir + "/identity.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_EQ(csv.find(",0\n"), std::string::npos);
  const auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
  EXPECT_TRUE(manifest.contains("config_hash"));
}

TEST(Pipeline, MissingUpstreamNamesStage) {
  const auto dir = fresh_dir("missing");
  try {
    run_experiment(small_config(dir, {"train-dpo"}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Dependency);
    EXPECT_NE(e.message().find("gen-data"), std::string::npos);
    EXPECT_NE(e.message().find("train-dpo"), std::string::npos);
  }
  run_experiment(small_config(dir, {"gen-data", "train-dpo"}));
  fs::remove(dir + "/dpo.json");
  try {
    run_experiment(small_config(dir, {"align-off"}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Dependency);
    EXPECT_NE(e.message().find("'train-dpo'"), std::string::npos);
  }
}

TEST(Pipeline, ZeroStepBenchWritesHeaderOnlyCurves) {
  const auto dir = fresh_dir("bench0");
  auto cfg = small_config(dir, {"gen-data", "train-dpo", "train-reverse-dpo", "convergence-bench"});
  cfg.bench_steps = 0;
  run_experiment(cfg);
  for (const auto* name : {"aligndistil", "token", "sentence"})
    EXPECT_EQ(read_file(dir + "/convergence_" + std::string(name) + ".csv"),
              std::string(kRunRecordHeader) + "\n");
}

TEST(Pipeline, BenchCurvesRepeatExactly) {
  const auto cfg = small_config("", {});
  const auto m = build_models(cfg, false);
  const auto task = m.task;
  const auto prompts = pair_prompts(m.train);
  const auto probe = probe_prompts(cfg, task);
  const auto a = convergence_bench(cfg, m.ref, m.dpo, m.rev, prompts, probe, 0.08, 6);
  const auto b = convergence_bench(cfg, m.ref, m.dpo, m.rev, prompts, probe, 0.08, 6);
  EXPECT_EQ(run_records_csv(a.aligndistil), run_records_csv(b.aligndistil));
  EXPECT_EQ(run_records_csv(a.token), run_records_csv(b.token));
  EXPECT_EQ(run_records_csv(a.sentence), run_records_csv(b.sentence));
  EXPECT_EQ(a.aligndistil.size(), 6u);
}

TEST(Pipeline, FullRunManifestListsEveryArtifact) {
  const auto dir = fresh_dir("full");
  std::vector<std::string> stages(known_stages().begin(), known_stages().end());
  const auto out = run_experiment(small_config(dir, stages));
  EXPECT_EQ(out.stages.size(), stages.size());
  const auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
  std::set<std::string> listed;
  for (const auto& entry : manifest.at("files")) {
    const auto name = entry.at("path").get<std::string>();
    listed.insert(name);
    EXPECT_EQ(entry.at("hash").get<std::string>(), content_hash(read_file(dir + "/" + name))) << name;
  }
  std::set<std::string> on_disk;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) on_disk.insert(fs::relative(e.path(), dir).string());
  on_disk.erase("manifest.json");
  EXPECT_EQ(listed, on_disk);
  for (const auto* f : {"dpo.json", "dpo_rev.json", "rm.json", "align_off.json", "align_on.json",
                        "baseline_token.json", "baseline_sentence.json", "identity.csv",
                        "reward_accuracy.csv", "ablation_reward_accuracy.csv", "ablation_extrapolation.csv"})
    EXPECT_TRUE(listed.count(f)) << f;

  const auto ext = read_file(dir + "/ablation_extrapolation.csv");
  EXPECT_EQ(ext.substr(0, ext.find('\n')), "weight,type,kl_to_dpo,avg_length,token_avg_reward");
  EXPECT_EQ(std::count(ext.begin(), ext.end(), '\n'), 7);
}

TEST(Pipeline, StagesNeverReadGoldMargins) {
  reset_gold_margin_audit();
  const auto dir = fresh_dir("audit");
  run_experiment(small_config(dir, {"gen-data", "train-rm", "train-dpo", "train-reverse-dpo", "align-off"}));
  EXPECT_EQ(gold_margin_reads(), 0u);
}

TEST(Pipeline, RerunIsByteIdentical) {
  const auto d1 = fresh_dir("rerun1");
  const auto d2 = fresh_dir("rerun2");
  const std::vector<std::string> stages = {"gen-data", "train-dpo", "train-reverse-dpo", "align-off"};
  run_experiment(small_config(d1, stages));
  run_experiment(small_config(d2, stages));
  for (const auto* f : {"train.jsonl", "test.jsonl", "ref.json", "dpo.json", "dpo_rev.json",
                        "align_off.json", "align_off_curve.csv"})
    EXPECT_EQ(read_file(d1 + "/" + f), read_file(d2 + "/" + f)) << f;
}

TEST(Studies, CurveStatistics) {
  std::vector<RunRecord> c(4);
  for (int i = 0; i < 4; ++i) c[i] = {i + 1, 0.0, 0.1 * i, 0.0, 1.0};
  EXPECT_NEAR(curve_auc(c), 0.15, 1e-15);
  EXPECT_EQ(steps_to_reach(c, 0.15), 3);
  EXPECT_EQ(steps_to_reach(c, 1.0), -1);
}

TEST(Studies, GoldRowIsPerfectOnNoiselessData) {
  auto cfg = small_config("", {});
  const auto m = build_models(cfg, false);
  const auto rows = reward_accuracy_table(m.task, nullptr, m.ref, m.dpo, m.rev, cfg.beta0, m.train, m.test);
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0].reward, "gold");
  // Noiseless labels still come from a Bradley-Terry draw, so gold accuracy
  // equals the fraction of pairs whose label agrees with the gold ordering.
  double agree = 0.0;
  for (const auto& p : m.train)
    agree += m.task.gold_reward(p.chosen_seq()) > m.task.gold_reward(p.rejected_seq()) ? 1.0 : 0.0;
  EXPECT_NEAR(rows[0].train_acc, agree / static_cast<double>(m.train.size()), 1e-12);
  reset_gold_margin_audit();
}

TEST(Artifacts, RequireNamesProducingStage) {
  ArtifactSet a(fresh_dir("artifacts"));
  try {
    a.require("x.json", "producer");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Dependency);
    EXPECT_NE(std::string(e.what()).find("producer"), std::string::npos);
  }
  a.write("x.json", "{}");
  EXPECT_EQ(a.require("x.json", "producer"), "{}");
  EXPECT_EQ(a.hashes().at("x.json"), content_hash("{}"));
}
