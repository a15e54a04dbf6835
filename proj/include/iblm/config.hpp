#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iblm/entropy.hpp"
#include "iblm/error.hpp"
#include "iblm/gapt.hpp"
#include "iblm/nets.hpp"
#include "iblm/optim.hpp"
#include "iblm/tasks.hpp"

namespace iblm::harness {

using nlohmann::json;

struct CorpusConfig {
  std::string path;                       // empty: generate a synthetic corpus
  std::size_t synthetic_bytes = 1200000;
  double val_fraction = 0.1;
};

struct ConflictConfig {
  std::size_t n_per_task = 256;
  double sigma = 0.25;
  double shift_relative = 0.5;  // shift std as a multiple of each tensor's init scale
  std::string strategy = "mixed";
  std::string mbe_scope = "per-task";  // "per-task" or "batch"
};

struct EarlyStopConfig {
  bool enabled = false;
  double threshold_fraction = 0.2;
  long activation_step = -1;  // -1: 45% of total_steps
};

struct GradScanConfig {
  bool enabled = false;
  std::size_t k_batches = 2;
  long stride = 1;
};

struct RunConfig {
  std::string experiment = "lm-pretrain";  // lm-pretrain, conflict, arithmetic, grad-scan
  std::string controller = "ce-only";      // ce-only, gapt, lagrangian
  std::uint64_t seed = 0;
  long total_steps = 2000;
  std::size_t batch_size = 32;
  std::size_t seq_len = 64;
  long eval_every = 100;
  std::size_t eval_batches = 4;
  std::string output_dir = "runs/default";
  TransformerConfig model;
  MlpConfig mlp;
  CorpusConfig corpus;
  ConflictConfig conflict;
  tasks::ArithmeticSpec arithmetic;
  OptimizerConfig optimizer;
  gapt::Config gapt;
  MbeConfig mbe{2.0, true};
  EarlyStopConfig early_stop;
  GradScanConfig grad_scan;

  long early_stop_activation() const {
    return early_stop.activation_step >= 0 ? early_stop.activation_step
                                           : static_cast<long>(0.45 * static_cast<double>(total_steps));
  }

  // Number of per-layer representations the experiment's model exposes.
  int layer_count() const { return experiment == "conflict" ? 1 : model.layers; }

  // Interior layers unless configured explicitly; the MLP has a single layer.
  std::set<int> regularized_layers() const {
    if (!gapt.regularized_layers.empty()) return gapt.regularized_layers;
    const int n = layer_count();
    if (n <= 2) return {n};
    std::set<int> out;
    for (int l = 2; l < n; ++l) out.insert(l);
    return out;
  }

  gapt::Config resolved_gapt() const {
    gapt::Config g = gapt;
    g.regularized_layers = regularized_layers();
    return g;
  }

  void validate() const {
    static const std::set<std::string> experiments = {"lm-pretrain", "conflict", "arithmetic", "grad-scan"};
    static const std::set<std::string> controllers = {"ce-only", "gapt", "lagrangian"};
    static const std::set<std::string> strategies = {"pos-only", "neg-only", "pos-neg", "neg-pos", "mixed", "gapt-mbe"};
    if (!experiments.count(experiment)) throw ConfigError("unknown experiment '" + experiment + "'");
    if (!controllers.count(controller)) throw ConfigError("unknown controller '" + controller + "'");
    if (total_steps < 1) throw ConfigError("total_steps must be positive");
    if (batch_size < 1 || seq_len < 1) throw ConfigError("batch_size and seq_len must be positive");
    if (eval_every < 1) throw ConfigError("eval_every must be positive");
    if (eval_batches < 1) throw ConfigError("eval_batches must be positive");
    if (!(early_stop.threshold_fraction > 0.0)) throw ConfigError("early_stop.threshold_fraction must be > 0");
    if (grad_scan.k_batches < 1 || grad_scan.stride < 1) throw ConfigError("grad_scan.k_batches and stride must be positive");
    if (!strategies.count(conflict.strategy)) throw ConfigError("unknown conflict strategy '" + conflict.strategy + "'");
    if (conflict.mbe_scope != "per-task" && conflict.mbe_scope != "batch") {
      throw ConfigError("conflict.mbe_scope must be 'per-task' or 'batch'");
    }
    if (!(conflict.shift_relative >= 0.0)) throw ConfigError("conflict.shift_relative must be >= 0");
    if (!(corpus.val_fraction > 0.0 && corpus.val_fraction < 1.0)) throw ConfigError("corpus.val_fraction must lie in (0, 1)");
    if (experiment != "conflict" && experiment != "arithmetic" && seq_len > model.context_length) {
      throw ConfigError("seq_len exceeds model.context_length");
    }
    optimizer.validate();
    resolved_gapt().validate();
    mbe.validate();
    for (int l : regularized_layers()) {
      if (l < 1 || l > layer_count()) throw ConfigError("regularized layer " + std::to_string(l) + " does not exist");
    }
    if (experiment != "conflict") {
      TransformerConfig m = model;
      m.vocab_size = std::max<std::size_t>(m.vocab_size, 1);
      m.validate();
    }
    mlp.validate();
    if (experiment == "arithmetic") arithmetic.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON mapping. Every field of RunConfig appears in to_json, which also
// defines the set of keys accepted from files and --set overrides.

inline json to_json(const RunConfig& c) {
  json g = {{"delta", c.gapt.delta},
            {"tau", c.gapt.tau},
            {"patience_mem", c.gapt.patience_mem},
            {"patience_comp", c.gapt.patience_comp},
            {"lambda_mbe", c.gapt.lambda_mbe},
            {"regularized_layers", std::vector<int>(c.gapt.regularized_layers.begin(), c.gapt.regularized_layers.end())},
            {"ce_ema", c.gapt.ce_ema}};
  return {
      {"experiment", c.experiment},
      {"controller", c.controller},
      {"seed", c.seed},
      {"total_steps", c.total_steps},
      {"batch_size", c.batch_size},
      {"seq_len", c.seq_len},
      {"eval_every", c.eval_every},
      {"eval_batches", c.eval_batches},
      {"output_dir", c.output_dir},
      {"model",
       {{"layers", c.model.layers},
        {"model_dim", c.model.model_dim},
        {"heads", c.model.heads},
        {"context_length", c.model.context_length},
        {"unet_skips", c.model.unet_skips}}},
      {"mlp",
       {{"hidden_dim", c.mlp.hidden_dim},
        {"output_dim", c.mlp.output_dim},
        {"activation", c.mlp.activation == Activation::relu ? "relu" : "gelu"}}},
      {"corpus", {{"path", c.corpus.path}, {"synthetic_bytes", c.corpus.synthetic_bytes}, {"val_fraction", c.corpus.val_fraction}}},
      {"conflict",
       {{"n_per_task", c.conflict.n_per_task},
        {"sigma", c.conflict.sigma},
        {"shift_relative", c.conflict.shift_relative},
        {"strategy", c.conflict.strategy},
        {"mbe_scope", c.conflict.mbe_scope}}},
      {"arithmetic",
       {{"train_digits", {c.arithmetic.train.lo, c.arithmetic.train.hi}},
        {"ood_digits", {c.arithmetic.ood.lo, c.arithmetic.ood.hi}},
        {"count_train", c.arithmetic.count_train},
        {"count_test_id", c.arithmetic.count_test_id},
        {"count_test_ood", c.arithmetic.count_test_ood},
        {"count_val_ood", c.arithmetic.count_val_ood}}},
      {"optimizer",
       {{"kind", c.optimizer.kind},
        {"learning_rate", c.optimizer.learning_rate},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"gapt", g},
      {"mbe", {{"alpha", c.mbe.alpha}, {"normalize", c.mbe.normalize}, {"epsilon", c.mbe.epsilon}}},
      {"early_stop",
       {{"enabled", c.early_stop.enabled},
        {"threshold_fraction", c.early_stop.threshold_fraction},
        {"activation_step", c.early_stop.activation_step}}},
      {"grad_scan", {{"enabled", c.grad_scan.enabled}, {"k_batches", c.grad_scan.k_batches}, {"stride", c.grad_scan.stride}}},
  };
}

namespace detail {

inline void check_keys(const json& given, const json& known, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) throw ConfigError("config: unknown key '" + path + "'");
    if (known[it.key()].is_object()) check_keys(it.value(), known[it.key()], path);
  }
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::check_keys(j, to_json(c), "");
  json full = to_json(c);
  full.merge_patch(j);
  try {
    c.experiment = full["experiment"];
    c.controller = full["controller"];
    c.seed = full["seed"];
    c.total_steps = full["total_steps"];
    c.batch_size = full["batch_size"];
    c.seq_len = full["seq_len"];
    c.eval_every = full["eval_every"];
    c.eval_batches = full["eval_batches"];
    c.output_dir = full["output_dir"];
    const auto& m = full["model"];
    c.model.layers = m["layers"];
    c.model.model_dim = m["model_dim"];
    c.model.heads = m["heads"];
    c.model.context_length = m["context_length"];
    c.model.unet_skips = m["unet_skips"];
    c.model.seed = c.seed;
    const auto& mlp = full["mlp"];
    c.mlp.hidden_dim = mlp["hidden_dim"];
    c.mlp.output_dim = mlp["output_dim"];
    const std::string act = mlp["activation"];
    if (act != "relu" && act != "gelu") throw ConfigError("mlp.activation must be 'relu' or 'gelu'");
    c.mlp.activation = act == "relu" ? Activation::relu : Activation::gelu;
    c.mlp.seed = c.seed;
    const auto& co = full["corpus"];
    c.corpus.path = co["path"];
    c.corpus.synthetic_bytes = co["synthetic_bytes"];
    c.corpus.val_fraction = co["val_fraction"];
    const auto& cf = full["conflict"];
    c.conflict.n_per_task = cf["n_per_task"];
    c.conflict.sigma = cf["sigma"];
    c.conflict.shift_relative = cf["shift_relative"];
    c.conflict.strategy = cf["strategy"];
    c.conflict.mbe_scope = cf["mbe_scope"];
    const auto& ar = full["arithmetic"];
    c.arithmetic.train = {ar["train_digits"].at(0), ar["train_digits"].at(1)};
    c.arithmetic.ood = {ar["ood_digits"].at(0), ar["ood_digits"].at(1)};
    c.arithmetic.count_train = ar["count_train"];
    c.arithmetic.count_test_id = ar["count_test_id"];
    c.arithmetic.count_test_ood = ar["count_test_ood"];
    c.arithmetic.count_val_ood = ar["count_val_ood"];
    c.arithmetic.seed = c.seed;
    const auto& op = full["optimizer"];
    c.optimizer.kind = op["kind"];
    c.optimizer.learning_rate = op["learning_rate"];
    c.optimizer.beta1 = op["beta1"];
    c.optimizer.beta2 = op["beta2"];
    c.optimizer.epsilon = op["epsilon"];
    c.optimizer.weight_decay = op["weight_decay"];
    const auto& g = full["gapt"];
    c.gapt.delta = g["delta"];
    c.gapt.tau = g["tau"];
    c.gapt.patience_mem = g["patience_mem"];
    c.gapt.patience_comp = g["patience_comp"];
    c.gapt.lambda_mbe = g["lambda_mbe"];
    c.gapt.regularized_layers.clear();
    for (int l : g["regularized_layers"]) c.gapt.regularized_layers.insert(l);
    c.gapt.ce_ema = g["ce_ema"];
    const auto& mb = full["mbe"];
    c.mbe.alpha = mb["alpha"];
    c.mbe.normalize = mb["normalize"];
    c.mbe.epsilon = mb["epsilon"];
    const auto& es = full["early_stop"];
    c.early_stop.enabled = es["enabled"];
    c.early_stop.threshold_fraction = es["threshold_fraction"];
    c.early_stop.activation_step = es["activation_step"];
    const auto& gs = full["grad_scan"];
    c.grad_scan.enabled = gs["enabled"];
    c.grad_scan.k_batches = gs["k_batches"];
    c.grad_scan.stride = gs["stride"];
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

// Per-experiment defaults applied before the user's file and overrides.
inline json experiment_defaults(const std::string& experiment) {
  json d = json::object();
  if (experiment == "conflict") {
    d["optimizer"] = {{"kind", "sgd"}, {"learning_rate", 0.05}};
    d["batch_size"] = 32;
  } else if (experiment == "arithmetic") {
    d["batch_size"] = 16;
    d["early_stop"] = {{"enabled", true}, {"threshold_fraction", 0.2}};
    d["model"] = {{"context_length", 32}};
  }
  return d;
}

// "a.b.c=value": the value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  std::string pointer;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    pointer += "/" + key.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  const json known = to_json(RunConfig{});
  if (!known.contains(json::json_pointer(pointer))) throw ConfigError("--set: unknown key '" + key + "'");
  j[json::json_pointer(pointer)] = value;
}

// Resolves defaults <- experiment defaults <- file <- overrides.
inline RunConfig resolve_config(const json& file, const std::vector<std::string>& overrides) {
  if (!file.is_object()) throw ConfigError("config: top level must be a JSON object");
  json user = file;
  for (const auto& o : overrides) apply_override(user, o);
  const std::string experiment = user.value("experiment", RunConfig{}.experiment);
  json merged = experiment_defaults(experiment);
  merged.merge_patch(user);
  RunConfig c = from_json(merged);
  c.validate();
  return c;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

}  // namespace iblm::harness
