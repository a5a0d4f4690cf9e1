// alignlab: command-line driver for the experiment pipeline.
//
// Every subcommand accepts --config <file.json> plus one flag per config key;
// flags override the file. Exit status: 0 success, 1 runtime failure,
// 2 failed check, 3 configuration or missing-dependency error.

#include "alignlab/harness.hpp"
#include "alignlab/io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>

using namespace alignlab;

namespace {

struct Invocation {
  std::string config_path;
  std::map<std::string, std::string> overrides;
  std::vector<std::string> stages;  // empty: take stages from the config
};

void add_config_flags(CLI::App* cmd, Invocation& inv) {
  cmd->add_option("--config", inv.config_path, "JSON config file")->check(CLI::ExistingFile);
  for (const auto& [key, value] : default_config().items()) {
    std::string flags = "--" + key;
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    if (dashed != key) flags += ",--" + dashed;
    std::string help = "config key '" + key + "' (default " + value.dump() + ")";
    cmd->add_option_function<std::string>(
        flags, [&inv, key = key](const std::string& text) { inv.overrides[key] = text; }, help);
  }
}

ExperimentConfig resolve(const Invocation& inv) {
  nlohmann::json doc = nlohmann::json::object();
  if (!inv.config_path.empty()) {
    try {
      doc = nlohmann::json::parse(read_file(inv.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Config, std::string("malformed config: ") + e.what());
    }
    require(doc.is_object(), ErrorCode::Config, "config must be a JSON object");
  }
  for (const auto& [key, text] : inv.overrides) doc[key] = parse_config_value(key, text);
  if (!inv.stages.empty()) doc["stages"] = inv.stages;
  return ExperimentConfig::from_json(doc);
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::CheckFailure:
      return 2;
    case ErrorCode::Config:
    case ErrorCode::Dependency:
      return 3;
    default:
      return 1;
  }
}

int execute(const Invocation& inv) {
  try {
    const auto cfg = resolve(inv);
    const auto outcome = run_experiment(cfg);
    for (const auto& s : outcome.stages) {
      std::cout << s.stage << ": " << (s.check_failed ? "CHECK FAILED" : "ok");
      if (!s.message.empty()) std::cout << " (" << s.message << ")";
      std::cout << '\n';
    }
    std::cout << "artifacts in " << cfg.output_dir << '\n';
    return outcome.check_failed ? 2 : 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-level distillation and preference-optimization experiments on toy tasks"};
  app.require_subcommand(1);

  struct Command {
    std::string name;
    std::string help;
    std::vector<std::string> stages;
  };
  const std::vector<Command> simple = {
      {"gen-data", "sample the gold task, reference policy and preference splits", {"gen-data"}},
      {"train-rm", "train the Bradley-Terry reward model", {"train-rm"}},
      {"train-dpo", "train the DPO model", {"train-dpo"}},
      {"train-reverse-dpo", "train the DPO model on swapped preferences", {"train-reverse-dpo"}},
      {"verify", "check the RLHF/distillation identity on enumerable instances", {"verify"}},
      {"eval-reward-acc", "reward accuracy of gold, reward-model, DPO and contrastive rewards",
       {"eval-reward-acc"}},
      {"convergence-bench", "AlignDistil vs policy-gradient baselines at a shared beta",
       {"convergence-bench"}},
      {"ablation", "reward-accuracy and extrapolation-weight tables", {"ablation"}},
      {"run", "run the stages listed in the config", {}},
  };

  std::vector<Invocation> invocations(simple.size() + 2);
  std::vector<CLI::App*> commands;
  for (std::size_t i = 0; i < simple.size(); ++i) {
    auto* cmd = app.add_subcommand(simple[i].name, simple[i].help);
    invocations[i].stages = simple[i].stages;
    add_config_flags(cmd, invocations[i]);
    commands.push_back(cmd);
  }

  // align: --mode and --teacher are ordinary config flags; the stage follows --mode.
  auto& align_inv = invocations[simple.size()];
  auto* align = app.add_subcommand("align", "AlignDistil from the reference policy");
  add_config_flags(align, align_inv);
  commands.push_back(align);

  auto& base_inv = invocations[simple.size() + 1];
  auto* baseline = app.add_subcommand("baseline", "policy-gradient baseline with the contrastive reward");
  add_config_flags(baseline, base_inv);
  commands.push_back(baseline);

  CLI11_PARSE(app, argc, argv);

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!commands[i]->parsed()) continue;
    Invocation inv = invocations[i];
    if (commands[i] == align || commands[i] == baseline) {
      const bool is_align = commands[i] == align;
      try {
        const auto cfg = resolve(inv);
        inv.stages = {is_align ? "align-" + cfg.mode : "baseline-" + cfg.kind};
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.code());
      }
    }
    return execute(inv);
  }
  return 3;
}
