#include "pcc/config.hpp"

#include "pcc/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace pcc::config {

using nlohmann::json;

double OptimizerConfig::lr_at(int epoch) const {
  int start = 0;
  for (const auto& phase : lr_schedule) {
    if (phase.epochs < 0 || epoch < start + phase.epochs) return phase.lr;
    start += phase.epochs;
  }
  return lr_schedule.empty() ? 1e-4 : lr_schedule.back().lr;
}

void RunConfig::validate() const {
  encoder.validate();
  if (cluster_dim < 0) throw ConfigError("cluster_dim must be >= 0");
  if (fusion_mode != fusion::FusionMode::none && cluster_dim == 0) {
    throw ConfigError("fusion mode " + fusion::to_string(fusion_mode) + " needs cluster_dim > 0");
  }
  if (topk.k < 1 || topk.k > encoder.tokens()) {
    throw ConfigError("topk.k must be in [1, " + std::to_string(encoder.tokens()) + "]");
  }
  if (optimizer.kind != "adam") throw ConfigError("only the adam optimizer is supported");
  if (optimizer.lr_schedule.empty()) throw ConfigError("lr_schedule is empty");
  for (const auto& p : optimizer.lr_schedule) {
    if (!(p.lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (augmentation != "none") throw ConfigError("unsupported augmentation '" + augmentation + "'");
  crf_config.validate();
  for (const auto& m : ablation_modes) fusion::parse_fusion_mode(m);
  if (synthetic) synthetic->validate();
}

vit::EncoderConfig RunConfig::seeded_encoder() const {
  vit::EncoderConfig e = encoder;
  e.seed = seed;
  return e;
}

namespace {

void to_json(json& j, const LlmSettings& s) {
  j = {{"backend", s.backend},
       {"model_id", s.model_id},
       {"mock_script", s.mock_script},
       {"cache_path", s.cache_path},
       {"gen_template", s.gen_template},
       {"refine_template", s.refine_template},
       {"stability_window", s.stability_window},
       {"max_iterations", s.max_iterations},
       {"max_retries", s.max_retries},
       {"request_timeout", s.request_timeout}};
}

LlmSettings llm_from_json(const json& j) {
  LlmSettings d, s;
  s.backend = j.value("backend", d.backend);
  s.model_id = j.value("model_id", d.model_id);
  s.mock_script = j.value("mock_script", d.mock_script);
  s.cache_path = j.value("cache_path", d.cache_path);
  s.gen_template = j.value("gen_template", d.gen_template);
  s.refine_template = j.value("refine_template", d.refine_template);
  s.stability_window = j.value("stability_window", d.stability_window);
  s.max_iterations = j.value("max_iterations", d.max_iterations);
  s.max_retries = j.value("max_retries", d.max_retries);
  s.request_timeout = j.value("request_timeout", d.request_timeout);
  return s;
}

}  // namespace

void to_json(json& j, const RunConfig& c) {
  json schedule = json::array();
  for (const auto& p : c.optimizer.lr_schedule) {
    schedule.push_back({{"epochs", p.epochs < 0 ? json("rest") : json(p.epochs)}, {"lr", p.lr}});
  }
  j = {{"encoder", c.encoder},
       {"cluster_dim", c.cluster_dim},
       {"fusion_mode", fusion::to_string(c.fusion_mode)},
       {"topk", {{"k", c.topk.k}}},
       {"refiner_residual", c.refiner_residual},
       {"loss_includes_background", c.loss_includes_background},
       {"optimizer",
        {{"kind", c.optimizer.kind},
         {"lr_schedule", schedule},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"epsilon", c.optimizer.epsilon},
         {"weight_decay", c.optimizer.weight_decay}}},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"seed", c.seed},
       {"workers", c.workers},
       {"deterministic", c.deterministic},
       {"eval_every", c.eval_every},
       {"augmentation", c.augmentation},
       {"crf", c.crf},
       {"crf_config", c.crf_config},
       {"paths",
        {{"dataset", c.paths.dataset},
         {"cluster_map", c.paths.cluster_map},
         {"checkpoints", c.paths.checkpoints},
         {"outputs", c.paths.outputs}}},
       {"ablation_modes", c.ablation_modes}};
  if (c.llm) {
    json l;
    to_json(l, *c.llm);
    j["llm"] = l;
  }
  if (c.synthetic) j["synthetic"] = *c.synthetic;
}

void from_json(const json& j, RunConfig& c) {
  const RunConfig d;
  c.encoder = j.value("encoder", d.encoder);
  c.cluster_dim = j.value("cluster_dim", d.cluster_dim);
  c.fusion_mode = fusion::parse_fusion_mode(j.value("fusion_mode", fusion::to_string(d.fusion_mode)));
  c.topk.k = j.contains("topk") ? j.at("topk").value("k", d.topk.k) : d.topk.k;
  c.refiner_residual = j.value("refiner_residual", d.refiner_residual);
  c.loss_includes_background = j.value("loss_includes_background", d.loss_includes_background);
  c.optimizer = d.optimizer;
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    c.optimizer.kind = o.value("kind", d.optimizer.kind);
    if (o.contains("lr_schedule")) {
      c.optimizer.lr_schedule.clear();
      for (const auto& p : o.at("lr_schedule")) {
        LrPhase phase;
        const json& e = p.at("epochs");
        phase.epochs = e.is_string() ? -1 : e.get<int>();
        phase.lr = p.at("lr").get<double>();
        c.optimizer.lr_schedule.push_back(phase);
      }
    }
    c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
    c.optimizer.epsilon = o.value("epsilon", d.optimizer.epsilon);
    c.optimizer.weight_decay = o.value("weight_decay", d.optimizer.weight_decay);
  }
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.augmentation = j.value("augmentation", d.augmentation);
  c.crf = j.value("crf", d.crf);
  c.crf_config = j.value("crf_config", d.crf_config);
  c.paths = d.paths;
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    c.paths.dataset = p.value("dataset", d.paths.dataset);
    c.paths.cluster_map = p.value("cluster_map", d.paths.cluster_map);
    c.paths.checkpoints = p.value("checkpoints", d.paths.checkpoints);
    c.paths.outputs = p.value("outputs", d.paths.outputs);
  }
  c.llm = j.contains("llm") ? std::optional(llm_from_json(j.at("llm"))) : std::nullopt;
  c.synthetic = j.contains("synthetic") ? std::optional(j.at("synthetic").get<data::SyntheticSpec>())
                                        : std::nullopt;
  c.ablation_modes = j.value("ablation_modes", d.ablation_modes);
}

void apply_env_overrides(json& j, char** envp) {
  if (envp == nullptr) return;
  constexpr std::string_view prefix = "PCC_";
  for (char** e = envp; *e != nullptr; ++e) {
    const std::string entry(*e);
    if (!entry.starts_with(prefix)) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(prefix.size(), eq - prefix.size());
    const std::string raw = entry.substr(eq + 1);
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
      const auto sep = key.find("__", start);
      const std::string part = key.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      if (sep == std::string::npos) {
        json value = json::parse(raw, nullptr, false);
        (*node)[part] = value.is_discarded() ? json(raw) : value;
        break;
      }
      node = &(*node)[part];
      start = sep + 2;
    }
  }
}

RunConfig load_run_config(const std::filesystem::path& path, char** envp) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  apply_env_overrides(j, envp);
  RunConfig cfg;
  try {
    cfg = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  // Relative paths are resolved against the config file's directory.
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(cfg.paths.dataset);
  resolve(cfg.paths.cluster_map);
  resolve(cfg.paths.checkpoints);
  resolve(cfg.paths.outputs);
  if (cfg.llm) {
    resolve(cfg.llm->mock_script);
    resolve(cfg.llm->cache_path);
    resolve(cfg.llm->gen_template);
    resolve(cfg.llm->refine_template);
  }
  cfg.validate();
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IOError("cannot write config " + path.string());
  out << json(cfg).dump(2) << '\n';
}

}  // namespace pcc::config
