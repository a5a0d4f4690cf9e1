#include "alignlab/harness.hpp"

#include "alignlab/io.hpp"

#include <sstream>

namespace alignlab {

const nlohmann::json& default_config() {
  static const nlohmann::json defaults = {
      {"name", "experiment"},
      {"seed", 1},
      {"output_dir", "runs/experiment"},
      {"stages", nlohmann::json::array()},
      // policy
      {"policy_kind", "tiny_neural"},
      {"vocab_size", 6},
      {"max_len", 6},
      {"prompt_len", 3},
      {"embed_dim", 8},
      {"hidden_dim", 32},
      {"init_scale", 1.0},
      // data
      {"label_noise", 0.0},
      {"reward_scale", 1.0},
      {"n_train_pairs", 512},
      {"n_test_pairs", 512},
      // objective coefficients
      {"beta0", 0.1},
      {"beta", 0.08},
      {"r", 2.0},
      {"epsilon", 0.001},
      {"weight", 1.0},
      // optimization
      {"batch_size", 16},
      {"momentum", 0.0},
      {"max_grad_norm", 0.0},
      {"rm_steps", 300},
      {"rm_lr", 0.5},
      {"dpo_steps", 64},
      {"dpo_lr", 0.3},
      {"align_steps", 300},
      {"align_lr", 1.0},
      {"bench_steps", 200},
      {"bench_lr", 0.1},
      // telemetry
      {"probe_prompts", 64},
      {"probe_samples", 2},
      {"final_probe_samples", 16},
      // stage selectors
      {"mode", "off"},
      {"teacher", "adaptive"},
      {"kind", "sentence"},
      {"verify_instances", 100},
      {"ablation_weights", {1.0, 1.2, 1.5, 1.8, 2.0}},
  };
  return defaults;
}

namespace {

bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_array()) return v.is_array();
  return false;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

nlohmann::json merge_config(const nlohmann::json& overrides) {
  require(overrides.is_object(), ErrorCode::Config, "config must be a JSON object");
  nlohmann::json merged = default_config();
  for (const auto& [key, value] : overrides.items()) {
    require(merged.contains(key), ErrorCode::Config, "unknown config key '" + key + "'");
    require(same_kind(merged[key], value), ErrorCode::Config, "wrong type for config key '" + key + "'");
    merged[key] = value;
  }
  return merged;
}

nlohmann::json parse_config_value(const std::string& key, const std::string& text) {
  const auto& defaults = default_config();
  require(defaults.contains(key), ErrorCode::Config, "unknown config key '" + key + "'");
  const auto& def = defaults.at(key);
  try {
    std::size_t used = 0;
    if (def.is_number_integer()) {
      const long long v = std::stoll(text, &used);
      require(used == text.size(), ErrorCode::Config, "bad integer for '" + key + "'");
      return v;
    }
    if (def.is_number()) {
      const double v = std::stod(text, &used);
      require(used == text.size(), ErrorCode::Config, "bad number for '" + key + "'");
      return v;
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::Config, "cannot parse '" + text + "' for '" + key + "'");
  }
  if (def.is_string()) return text;
  if (def.is_array()) {
    nlohmann::json arr = nlohmann::json::array();
    const bool numeric = key == "ablation_weights";
    for (const auto& item : split_list(text)) {
      if (numeric) {
        try {
          arr.push_back(std::stod(item));
        } catch (const std::logic_error&) {
          throw Error(ErrorCode::Config, "bad number '" + item + "' for '" + key + "'");
        }
      } else {
        arr.push_back(item);
      }
    }
    return arr;
  }
  throw Error(ErrorCode::Config, "unsupported config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  const auto j = merge_config(doc);
  ExperimentConfig c;
  try {
    c.name = j.at("name").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.stages = j.at("stages").get<std::vector<std::string>>();
    c.shape.kind = policy_kind_from_string(j.at("policy_kind").get<std::string>());
    c.shape.vocab_size = j.at("vocab_size").get<int>();
    c.shape.max_len = j.at("max_len").get<int>();
    c.shape.prompt_len = j.at("prompt_len").get<int>();
    c.shape.embed_dim = j.at("embed_dim").get<int>();
    c.shape.hidden_dim = j.at("hidden_dim").get<int>();
    c.init_scale = j.at("init_scale").get<double>();
    c.label_noise = j.at("label_noise").get<double>();
    c.reward_scale = j.at("reward_scale").get<double>();
    c.n_train_pairs = j.at("n_train_pairs").get<int>();
    c.n_test_pairs = j.at("n_test_pairs").get<int>();
    c.beta0 = j.at("beta0").get<double>();
    c.beta = j.at("beta").get<double>();
    c.r = j.at("r").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.weight = j.at("weight").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.momentum = j.at("momentum").get<double>();
    c.max_grad_norm = j.at("max_grad_norm").get<double>();
    c.rm_steps = j.at("rm_steps").get<int>();
    c.rm_lr = j.at("rm_lr").get<double>();
    c.dpo_steps = j.at("dpo_steps").get<int>();
    c.dpo_lr = j.at("dpo_lr").get<double>();
    c.align_steps = j.at("align_steps").get<int>();
    c.align_lr = j.at("align_lr").get<double>();
    c.bench_steps = j.at("bench_steps").get<int>();
    c.bench_lr = j.at("bench_lr").get<double>();
    c.probe_prompts = j.at("probe_prompts").get<int>();
    c.probe_samples = j.at("probe_samples").get<int>();
    c.final_probe_samples = j.at("final_probe_samples").get<int>();
    c.mode = j.at("mode").get<std::string>();
    c.teacher = j.at("teacher").get<std::string>();
    c.kind = j.at("kind").get<std::string>();
    c.verify_instances = j.at("verify_instances").get<int>();
    c.ablation_weights = j.at("ablation_weights").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  for (const auto& s : c.stages) {
    bool known = false;
    for (const auto& k : known_stages()) known = known || (k == s);
    require(known, ErrorCode::Config, "unknown stage '" + s + "'");
  }
  require(c.mode == "on" || c.mode == "off", ErrorCode::Config, "mode must be on or off");
  teacher_mode_from_string(c.teacher);
  require(c.kind == "sentence" || c.kind == "token", ErrorCode::Config,
          "kind must be sentence or token");
  require(c.n_train_pairs >= 1 && c.n_test_pairs >= 1, ErrorCode::Config, "pair counts must be >= 1");
  require(c.probe_prompts >= 0 && c.probe_samples >= 1 && c.final_probe_samples >= 1,
          ErrorCode::Config, "probe sizes");
  require(c.verify_instances >= 1, ErrorCode::Config, "verify_instances must be >= 1");
  Policy::param_count(c.shape);  // validates the shape
  c.teacher_config().validate();
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"name", name},
      {"seed", seed},
      {"output_dir", output_dir},
      {"stages", stages},
      {"policy_kind", to_string(shape.kind)},
      {"vocab_size", shape.vocab_size},
      {"max_len", shape.max_len},
      {"prompt_len", shape.prompt_len},
      {"embed_dim", shape.embed_dim},
      {"hidden_dim", shape.hidden_dim},
      {"init_scale", init_scale},
      {"label_noise", label_noise},
      {"reward_scale", reward_scale},
      {"n_train_pairs", n_train_pairs},
      {"n_test_pairs", n_test_pairs},
      {"beta0", beta0},
      {"beta", beta},
      {"r", r},
      {"epsilon", epsilon},
      {"weight", weight},
      {"batch_size", batch_size},
      {"momentum", momentum},
      {"max_grad_norm", max_grad_norm},
      {"rm_steps", rm_steps},
      {"rm_lr", rm_lr},
      {"dpo_steps", dpo_steps},
      {"dpo_lr", dpo_lr},
      {"align_steps", align_steps},
      {"align_lr", align_lr},
      {"bench_steps", bench_steps},
      {"bench_lr", bench_lr},
      {"probe_prompts", probe_prompts},
      {"probe_samples", probe_samples},
      {"final_probe_samples", final_probe_samples},
      {"mode", mode},
      {"teacher", teacher},
      {"kind", kind},
      {"verify_instances", verify_instances},
      {"ablation_weights", ablation_weights},
  };
}

TrainConfig ExperimentConfig::train_config(int steps, double lr, const std::string& stage) const {
  TrainConfig t;
  t.steps = steps;
  t.lr = lr;
  t.batch_size = batch_size;
  t.momentum = momentum;
  t.max_grad_norm = max_grad_norm;
  t.seed = stage_seed(seed, stage);
  t.beta0 = beta0;
  t.beta = beta;
  t.teacher = teacher_config();
  return t;
}

TeacherConfig ExperimentConfig::teacher_config() const {
  TeacherConfig t;
  t.mode = teacher_mode_from_string(teacher);
  t.beta0 = beta0;
  t.beta = beta;
  t.weight = weight;
  t.r = r;
  t.epsilon = epsilon;
  return t;
}

ExperimentConfig load_config(const std::string& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, std::string("malformed config: ") + e.what());
  }
  return ExperimentConfig::from_json(doc);
}

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace alignlab
