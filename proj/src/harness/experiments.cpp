#include "alignlab/harness.hpp"

#include "alignlab/io.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <set>

namespace alignlab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

std::string ArtifactSet::path(const std::string& rel) const {
  return (fs::path(root_) / rel).string();
}

void ArtifactSet::write(const std::string& rel, const std::string& contents) {
  write_file(path(rel), contents);
  hashes_[rel] = content_hash(contents);
}

std::string ArtifactSet::require(const std::string& rel, const std::string& stage) const {
  const auto p = path(rel);
  if (!fs::exists(p)) {
    throw Error(ErrorCode::Dependency,
                "missing " + rel + " (produced by stage '" + stage + "'); run that stage first");
  }
  return read_file(p);
}

// ---------------------------------------------------------------------------
// In-memory pipeline
// ---------------------------------------------------------------------------

GoldTask make_task(const ExperimentConfig& cfg) {
  return GoldTask::make(stage_seed(cfg.seed, "task"), cfg.shape.vocab_size, cfg.shape.max_len,
                        cfg.shape.prompt_len, cfg.label_noise, cfg.reward_scale);
}

Policy make_reference(const ExperimentConfig& cfg) {
  return Policy::make(cfg.shape, stage_seed(cfg.seed, "reference"), cfg.init_scale);
}

std::vector<PreferencePair> make_split(const ExperimentConfig& cfg, const GoldTask& task,
                                       const Policy& ref, const std::string& split) {
  Rng rng(stage_seed(cfg.seed, "data-" + split));
  const int n = split == "test" ? cfg.n_test_pairs : cfg.n_train_pairs;
  return gen_preferences(task, ref, n, rng);
}

std::vector<Tokens> probe_prompts(const ExperimentConfig& cfg, const GoldTask& task) {
  Rng rng(stage_seed(cfg.seed, "probe-prompts"));
  std::vector<Tokens> out;
  for (int i = 0; i < cfg.probe_prompts; ++i) out.push_back(task.random_prompt(rng));
  return out;
}

ProbeSet contrastive_probe(const ExperimentConfig& cfg, std::span<const Tokens> prompts,
                           const Policy& dpo, const Policy& rev, int samples) {
  ProbeSet probe;
  probe.prompts.assign(prompts.begin(), prompts.end());
  probe.seed = stage_seed(cfg.seed, "probe-sampling");
  probe.samples_per_prompt = samples;
  probe.reward_num = &dpo;
  probe.reward_den = &rev;
  probe.beta0 = cfg.beta0;
  probe.anchor = &dpo;
  return probe;
}

std::vector<Tokens> pair_prompts(std::span<const PreferencePair> pairs) {
  std::vector<Tokens> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.prompt());
  return out;
}

std::vector<Sequence> chosen_responses(std::span<const PreferencePair> pairs) {
  std::vector<Sequence> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.chosen_seq());
  return out;
}

namespace {

void require_converged(const TrainResult& r, const std::string& stage) {
  if (r.diverged) throw Error(ErrorCode::NonFinite, stage + ": " + r.diagnostic);
}

}  // namespace

Policy train_dpo_model(const ExperimentConfig& cfg, const Policy& ref,
                       std::span<const PreferencePair> pairs, bool reverse,
                       std::vector<RunRecord>* records) {
  const std::string stage = reverse ? "train-reverse-dpo" : "train-dpo";
  const auto tc = cfg.train_config(cfg.dpo_steps, cfg.dpo_lr, stage);
  TrainData data;
  data.ref = &ref;
  data.pairs = pairs;
  ProbeSet probe;
  const auto task = make_task(cfg);
  probe.prompts = probe_prompts(cfg, task);
  probe.seed = stage_seed(cfg.seed, "probe-sampling");
  probe.samples_per_prompt = cfg.probe_samples;
  probe.reward_den = &ref;
  probe.beta0 = cfg.beta0;
  probe.anchor = &ref;
  auto result = train(ref, tc, reverse ? Objective::ReverseDpo : Objective::Dpo, data, probe);
  if (records) *records = result.records;
  require_converged(result, stage);
  return std::move(result.policy);
}

RewardModel train_rm_model(const ExperimentConfig& cfg, std::span<const PreferencePair> pairs,
                           std::vector<RunRecord>* records) {
  const RewardModel init(cfg.shape.vocab_size, cfg.shape.max_len, cfg.shape.embed_dim,
                         cfg.shape.hidden_dim, stage_seed(cfg.seed, "rm-init"), cfg.init_scale);
  auto result = train_reward_model(init, cfg.train_config(cfg.rm_steps, cfg.rm_lr, "train-rm"), pairs);
  if (records) *records = result.records;
  return std::move(result.model);
}

TrainResult train_align(const ExperimentConfig& cfg, const TeacherConfig& teacher, bool on_policy,
                        const Policy& init, const Policy& ref, const Policy& dpo,
                        const Policy& rev, std::span<const PreferencePair> train_pairs,
                        std::span<const Tokens> probe, int steps, double lr,
                        const std::string& stage) {
  auto tc = cfg.train_config(steps, lr, stage);
  tc.teacher = teacher;
  const auto prompts = pair_prompts(train_pairs);
  const auto responses = chosen_responses(train_pairs);
  TrainData data;
  data.dpo = &dpo;
  data.rev = teacher.mode == TeacherMode::RlhfCombine ? &ref : &rev;
  data.prompts = prompts;
  data.responses = responses;
  return train(init, tc, on_policy ? Objective::AlignOn : Objective::AlignOff, data,
               contrastive_probe(cfg, probe, dpo, rev, cfg.probe_samples));
}

TrainResult train_baseline(const ExperimentConfig& cfg, bool token_level, const Policy& init,
                           const Policy& dpo, const Policy& rev, std::span<const Tokens> prompts,
                           std::span<const Tokens> probe, double beta, int steps, double lr,
                           const std::string& stage) {
  auto tc = cfg.train_config(steps, lr, stage);
  tc.beta = beta;
  TrainData data;
  data.dpo = &dpo;
  data.rev = &rev;
  data.prompts = prompts;
  return train(init, tc, token_level ? Objective::BaselineToken : Objective::BaselineSentence,
               data, contrastive_probe(cfg, probe, dpo, rev, cfg.probe_samples));
}

PipelineModels build_models(const ExperimentConfig& cfg, bool with_rm) {
  PipelineModels m;
  m.task = make_task(cfg);
  m.ref = make_reference(cfg);
  m.train = make_split(cfg, m.task, m.ref, "train");
  m.test = make_split(cfg, m.task, m.ref, "test");
  if (with_rm) m.rm = train_rm_model(cfg, m.train);
  m.dpo = train_dpo_model(cfg, m.ref, m.train, false);
  m.rev = train_dpo_model(cfg, m.ref, m.train, true);
  return m;
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

ConvergenceCurves convergence_bench(const ExperimentConfig& cfg, const Policy& init,
                                    const Policy& dpo, const Policy& rev,
                                    std::span<const Tokens> prompts,
                                    std::span<const Tokens> probe, double beta, int steps) {
  require(beta > 0, ErrorCode::Config, "beta must be > 0");
  const std::string stage = "convergence-bench";
  TeacherConfig teacher;
  teacher.mode = TeacherMode::ConstantExtrapolate;
  teacher.beta0 = cfg.beta0;
  teacher.beta = beta;
  teacher.weight = cfg.beta0 / beta;
  ConvergenceCurves out;
  TrainData data;
  data.dpo = &dpo;
  data.rev = &rev;
  data.prompts = prompts;
  auto tc = cfg.train_config(steps, cfg.bench_lr, stage);
  tc.teacher = teacher;
  tc.beta = beta;
  const auto ps = contrastive_probe(cfg, probe, dpo, rev, cfg.probe_samples);
  auto a = train(init, tc, Objective::AlignOn, data, ps);
  auto t = train(init, tc, Objective::BaselineToken, data, ps);
  auto s = train(init, tc, Objective::BaselineSentence, data, ps);
  out.aligndistil = std::move(a.records);
  out.token = std::move(t.records);
  out.sentence = std::move(s.records);
  return out;
}

double curve_auc(std::span<const RunRecord> curve) {
  if (curve.empty()) return 0.0;
  CompensatedSum total;
  for (const auto& r : curve) total.add(r.token_avg_reward);
  return total.value() / static_cast<double>(curve.size());
}

int steps_to_reach(std::span<const RunRecord> curve, double target) {
  for (const auto& r : curve) {
    if (r.token_avg_reward >= target) return r.step;
  }
  return -1;
}

std::vector<RewardAccuracyRow> reward_accuracy_table(
    const GoldTask& task, const RewardModel* rm, const Policy& ref, const Policy& dpo,
    const Policy& rev, double beta0, std::span<const PreferencePair> train_pairs,
    std::span<const PreferencePair> test_pairs) {
  std::vector<std::pair<std::string, RewardFn>> fns;
  fns.emplace_back("gold", CustomReward{[&task](const Sequence& s) { return task.gold_reward(s); }});
  if (rm) fns.emplace_back("reward_model", RmReward{rm});
  fns.emplace_back("dpo", DpoReward{&dpo, &ref, beta0});
  fns.emplace_back("contrastive_dpo", ContrastiveReward{&dpo, &rev, beta0});
  std::vector<RewardAccuracyRow> rows;
  for (const auto& [name, fn] : fns) {
    rows.push_back({name, reward_accuracy(fn, train_pairs), reward_accuracy(fn, test_pairs)});
  }
  return rows;
}

std::vector<ExtrapolationRow> extrapolation_table(const ExperimentConfig& cfg, const Policy& init,
                                                  const Policy& dpo, const Policy& rev,
                                                  std::span<const Sequence> responses,
                                                  std::span<const Tokens> prompts,
                                                  std::span<const Tokens> probe) {
  const bool on_policy = cfg.mode == "on";
  TrainData data;
  data.dpo = &dpo;
  data.rev = &rev;
  data.responses = responses;
  data.prompts = prompts;
  const auto train_probe = contrastive_probe(cfg, probe, dpo, rev, cfg.probe_samples);
  const auto final_probe = contrastive_probe(cfg, probe, dpo, rev, cfg.final_probe_samples);

  auto run = [&](const TeacherConfig& teacher, const std::string& weight, const std::string& type) {
    auto tc = cfg.train_config(cfg.align_steps, cfg.align_lr, "ablation");
    tc.teacher = teacher;
    auto r = train(init, tc, on_policy ? Objective::AlignOn : Objective::AlignOff, data, train_probe);
    require_converged(r, "ablation");
    const auto m = evaluate_probe(r.policy, final_probe);
    return ExtrapolationRow{weight, type, m.kl_to_anchor, m.response_len_mean, m.token_avg_reward};
  };

  std::vector<ExtrapolationRow> rows;
  for (double w : cfg.ablation_weights) {
    TeacherConfig t = cfg.teacher_config();
    t.mode = TeacherMode::ConstantExtrapolate;
    t.weight = w;
    t.beta = cfg.beta0 / w;
    rows.push_back(run(t, format_double(w), "constant"));
  }
  TeacherConfig t = cfg.teacher_config();
  t.mode = TeacherMode::AdaptiveExtrapolate;
  rows.push_back(run(t, "adaptive", "token adaptive"));
  return rows;
}

std::string reward_accuracy_csv(std::span<const RewardAccuracyRow> rows) {
  std::string out = "reward,train_acc,test_acc\n";
  for (const auto& r : rows) {
    out += r.reward + ',' + format_double(r.train_acc) + ',' + format_double(r.test_acc) + '\n';
  }
  return out;
}

std::string extrapolation_csv(std::span<const ExtrapolationRow> rows) {
  std::string out = "weight,type,kl_to_dpo,avg_length,token_avg_reward\n";
  for (const auto& r : rows) {
    out += r.weight + ',' + r.type + ',' + format_double(r.kl_to_dpo) + ',' +
           format_double(r.avg_length) + ',' + format_double(r.token_avg_reward) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

namespace {

struct Loaded {
  const ArtifactSet& a;

  GoldTask task() const { return gold_task_from_string(a.require("task.json", "gen-data")); }
  Policy ref() const { return checkpoint_from_string(a.require("ref.json", "gen-data")); }
  std::vector<PreferencePair> split(const std::string& name) const {
    return preferences_from_jsonl(a.require(name + ".jsonl", "gen-data"));
  }
  Policy dpo() const { return checkpoint_from_string(a.require("dpo.json", "train-dpo")); }
  Policy rev() const {
    return checkpoint_from_string(a.require("dpo_rev.json", "train-reverse-dpo"));
  }
  RewardModel rm() const { return reward_model_from_string(a.require("rm.json", "train-rm")); }
};

bool is_training_stage(const std::string& stage) {
  static const std::set<std::string> training = {
      "train-rm",  "train-dpo",         "train-reverse-dpo", "align-on",
      "align-off", "baseline-sentence", "baseline-token",    "convergence-bench",
      "ablation"};
  return training.count(stage) > 0;
}

void write_trained(ArtifactSet& a, const std::string& stem, const TrainResult& r,
                   const std::string& stage) {
  a.write(stem + "_curve.csv", run_records_csv(r.records));
  require_converged(r, stage);
  a.write(stem + ".json", checkpoint_to_string(r.policy));
}

StageOutcome run_stage_body(const ExperimentConfig& cfg, const std::string& stage,
                            ArtifactSet& a) {
  StageOutcome out;
  out.stage = stage;
  const Loaded in{a};

  if (stage == "gen-data") {
    const auto task = make_task(cfg);
    const auto ref = make_reference(cfg);
    a.write("task.json", gold_task_to_string(task));
    a.write("ref.json", checkpoint_to_string(ref));
    a.write("train.jsonl", preferences_to_jsonl(make_split(cfg, task, ref, "train")));
    a.write("test.jsonl", preferences_to_jsonl(make_split(cfg, task, ref, "test")));
  } else if (stage == "train-rm") {
    std::vector<RunRecord> records;
    const auto rm = train_rm_model(cfg, in.split("train"), &records);
    a.write("rm_curve.csv", run_records_csv(records));
    a.write("rm.json", reward_model_to_string(rm));
  } else if (stage == "train-dpo" || stage == "train-reverse-dpo") {
    const bool reverse = stage == "train-reverse-dpo";
    const auto ref = in.ref();
    const auto train_pairs = in.split("train");
    std::vector<RunRecord> records;
    const std::string stem = reverse ? "dpo_rev" : "dpo";
    Policy model;
    try {
      model = train_dpo_model(cfg, ref, train_pairs, reverse, &records);
    } catch (const Error&) {
      a.write(stem + "_curve.csv", run_records_csv(records));
      throw;
    }
    a.write(stem + "_curve.csv", run_records_csv(records));
    a.write(stem + ".json", checkpoint_to_string(model));
  } else if (stage == "align-on" || stage == "align-off") {
    const bool on = stage == "align-on";
    const auto task = in.task();
    const auto ref = in.ref();
    const auto dpo = in.dpo();
    const auto rev = in.rev();
    const auto r = train_align(cfg, cfg.teacher_config(), on, ref, ref, dpo, rev, in.split("train"),
                               probe_prompts(cfg, task), cfg.align_steps, cfg.align_lr, stage);
    write_trained(a, on ? "align_on" : "align_off", r, stage);
  } else if (stage == "baseline-sentence" || stage == "baseline-token") {
    const bool token = stage == "baseline-token";
    const auto task = in.task();
    const auto ref = in.ref();
    const auto dpo = in.dpo();
    const auto rev = in.rev();
    const auto prompts = pair_prompts(in.split("train"));
    const auto r = train_baseline(cfg, token, ref, dpo, rev, prompts, probe_prompts(cfg, task),
                                  cfg.beta, cfg.align_steps, cfg.align_lr, stage);
    write_trained(a, token ? "baseline_token" : "baseline_sentence", r, stage);
  } else if (stage == "verify") {
    std::string csv = identity_csv_header() + ",passed\n";
    int failures = 0;
    for (int i = 0; i < cfg.verify_instances; ++i) {
      const int v = 2 + i % 3;
      const int t = 1 + (i / 3) % 3;
      const auto mode = (i / 9) % 2 == 0 ? InstanceMode::Rlhf : InstanceMode::Contrastive;
      const std::uint64_t seed = stage_seed(cfg.seed, "verify-" + std::to_string(i));
      const auto inst = Instance::random(v, t, seed, mode);
      const auto r = theorem1_report(inst);
      bool ok = std::abs(r.gap) < kIdentityValueTol && r.grad_gap_norm < kIdentityGradTol;
      if (t == 1) ok = ok && r.lhs_kl_grad_gap < kIdentityGradTol;
      failures += ok ? 0 : 1;
      const std::string label = std::string("V") + std::to_string(v) + "_T" + std::to_string(t) +
                                (mode == InstanceMode::Rlhf ? "_rlhf_" : "_contrastive_") +
                                std::to_string(i);
      csv += identity_csv_row(label, r) + (ok ? ",1\n" : ",0\n");
    }
    a.write("identity.csv", csv);
    if (failures > 0) {
      out.check_failed = true;
      out.message = std::to_string(failures) + " of " + std::to_string(cfg.verify_instances) +
                    " identity checks failed";
    }
  } else if (stage == "eval-reward-acc") {
    const auto rm = in.rm();
    const auto rows = reward_accuracy_table(in.task(), &rm, in.ref(), in.dpo(), in.rev(), cfg.beta0,
                                            in.split("train"), in.split("test"));
    a.write("reward_accuracy.csv", reward_accuracy_csv(rows));
  } else if (stage == "convergence-bench") {
    const auto task = in.task();
    const auto ref = in.ref();
    const auto dpo = in.dpo();
    const auto rev = in.rev();
    const auto prompts = pair_prompts(in.split("train"));
    const auto curves = convergence_bench(cfg, ref, dpo, rev, prompts, probe_prompts(cfg, task),
                                          cfg.beta, cfg.bench_steps);
    a.write("convergence_aligndistil.csv", run_records_csv(curves.aligndistil));
    a.write("convergence_token.csv", run_records_csv(curves.token));
    a.write("convergence_sentence.csv", run_records_csv(curves.sentence));
  } else if (stage == "ablation") {
    const auto task = in.task();
    const auto ref = in.ref();
    const auto dpo = in.dpo();
    const auto rev = in.rev();
    const auto rm = in.rm();
    const auto train_pairs = in.split("train");
    const auto test_pairs = in.split("test");
    const auto acc = reward_accuracy_table(task, &rm, ref, dpo, rev, cfg.beta0, train_pairs, test_pairs);
    a.write("ablation_reward_accuracy.csv", reward_accuracy_csv(acc));
    const auto ext = extrapolation_table(cfg, ref, dpo, rev, chosen_responses(train_pairs),
                                         pair_prompts(train_pairs), probe_prompts(cfg, task));
    a.write("ablation_extrapolation.csv", extrapolation_csv(ext));
  } else {
    throw Error(ErrorCode::Config, "unknown stage '" + stage + "'");
  }
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage,
                       ArtifactSet& artifacts) {
  const bool audited = is_training_stage(stage);
  if (audited) reset_gold_margin_audit();
  StageOutcome out;
  try {
    out = run_stage_body(cfg, stage, artifacts);
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + stage + "' failed: " + e.message());
  }
  if (audited && gold_margin_reads() != 0) {
    throw Error(ErrorCode::CheckFailure,
                "stage '" + stage + "' read gold margins " + std::to_string(gold_margin_reads()) +
                    " times");
  }
  return out;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  require(!cfg.output_dir.empty(), ErrorCode::Config, "output_dir must be set");
  require(!cfg.stages.empty(), ErrorCode::Config, "no stages configured");
  ArtifactSet artifacts(cfg.output_dir);
  const std::string config_text = cfg.to_json().dump(2) + "\n";
  artifacts.write("config.json", config_text);

  ExperimentOutcome outcome;
  for (const auto& stage : cfg.stages) {
    auto s = run_stage(cfg, stage, artifacts);
    outcome.check_failed = outcome.check_failed || s.check_failed;
    outcome.stages.push_back(std::move(s));
  }

  // Every file under the output directory, including ones left by earlier runs.
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(cfg.output_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), cfg.output_dir).generic_string();
    if (rel != "manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::json manifest;
  manifest["name"] = cfg.name;
  manifest["created_utc"] = utc_timestamp();
  manifest["config_hash"] = content_hash(config_text);
  manifest["stages_run"] = cfg.stages;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& rel : files) {
    entries.push_back({{"path", rel}, {"hash", content_hash(read_file(artifacts.path(rel)))}});
  }
  manifest["files"] = entries;
  write_file(artifacts.path("manifest.json"), manifest.dump(2) + "\n");
  return outcome;
}

}  // namespace alignlab
