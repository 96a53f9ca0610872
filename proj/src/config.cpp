#include "spattn/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <sstream>

#include "spattn/error.hpp"

namespace spattn {

namespace {

using Json = nlohmann::ordered_json;

std::size_t as_size(const Json& v, const std::string& field) {
  if (!v.is_number_unsigned()) throw ConfigError(field + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t as_u64(const Json& v, const std::string& field) {
  if (!v.is_number_unsigned()) throw ConfigError(field + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double as_double(const Json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(field + ": must be finite");
  return d;
}

bool as_bool(const Json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
  return v.get<bool>();
}

std::string as_string(const Json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field + ": expected a string");
  return v.get<std::string>();
}

using Setter = std::function<void(const Json&, const std::string&)>;

void apply_section(const Json& obj, const std::string& section, const std::map<std::string, Setter>& setters) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    const std::string field = section + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(field + ": unknown key");
    it->second(value, field);
  }
}

}  // namespace

void PruneConfig::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("prune.R: must lie in (0, 1)");
  if (!(temperature > 0.0)) throw ConfigError("prune.T: must be > 0");
  if (!(lambda_sp >= 0.0)) throw ConfigError("prune.lambda_sp: must be >= 0");
  if (total_steps == 0) throw ConfigError("prune.total_steps: must be >= 1");
  if (mode == PruneMode::kDifferentiable && phase1_steps >= total_steps) {
    throw ConfigError("prune.phase1_steps: must be < prune.total_steps for differentiable pruning");
  }
}

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optim.lr: must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2: must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps: must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("optim.clip_norm: must be > 0");
  if (batch_size == 0) throw ConfigError("optim.batch_size: must be >= 1");
  if (eval_every == 0) throw ConfigError("optim.eval_every: must be >= 1");
}

void ExperimentConfig::validate() const {
  model.validate();
  prune.validate();
  optim.validate();
  data.validate();
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "none") return PruneMode::kNone;
  if (s == "vanilla") return PruneMode::kVanilla;
  if (s == "differentiable") return PruneMode::kDifferentiable;
  throw ConfigError("prune.mode: expected none, vanilla or differentiable, got \"" + s + "\"");
}

PruneScope parse_prune_scope(const std::string& s) {
  if (s == "none") return PruneScope::kNone;
  if (s == "decoder_only") return PruneScope::kDecoderOnly;
  if (s == "encoder_only") return PruneScope::kEncoderOnly;
  if (s == "both") return PruneScope::kBoth;
  throw ConfigError("model.prune_scope: expected none, decoder_only, encoder_only or both, got \"" + s + "\"");
}

ExperimentConfig parse_config(const std::string& json_text) {
  Json doc;
  try {
    doc = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");

  ExperimentConfig c;
  ModelConfig& m = c.model;
  PruneConfig& p = c.prune;
  OptimConfig& o = c.optim;
  DataSpec& d = c.data;

  const std::map<std::string, Setter> model_keys = {
      {"vocab_size", [&](const Json& v, const std::string& f) { m.vocab_size = as_size(v, f); }},
      {"model_dim", [&](const Json& v, const std::string& f) { m.model_dim = as_size(v, f); }},
      {"heads", [&](const Json& v, const std::string& f) { m.heads = as_size(v, f); }},
      {"enc_layers", [&](const Json& v, const std::string& f) { m.enc_layers = as_size(v, f); }},
      {"dec_layers", [&](const Json& v, const std::string& f) { m.dec_layers = as_size(v, f); }},
      {"ffn_hidden", [&](const Json& v, const std::string& f) { m.ffn_hidden = as_size(v, f); }},
      {"expansion", [&](const Json& v, const std::string& f) { m.expansion = as_size(v, f); }},
      {"out_dim", [&](const Json& v, const std::string& f) { m.out_dim = as_size(v, f); }},
      {"style_dim", [&](const Json& v, const std::string& f) { m.style_dim = as_size(v, f); }},
      {"prune_scope", [&](const Json& v, const std::string& f) { m.prune_scope = parse_prune_scope(as_string(v, f)); }},
  };
  const std::map<std::string, Setter> prune_keys = {
      {"mode", [&](const Json& v, const std::string& f) { p.mode = parse_prune_mode(as_string(v, f)); }},
      {"R", [&](const Json& v, const std::string& f) { p.ratio = as_double(v, f); }},
      {"T", [&](const Json& v, const std::string& f) { p.temperature = as_double(v, f); }},
      {"lambda_sp", [&](const Json& v, const std::string& f) { p.lambda_sp = as_double(v, f); }},
      {"phase1_steps", [&](const Json& v, const std::string& f) { p.phase1_steps = as_size(v, f); }},
      {"total_steps", [&](const Json& v, const std::string& f) { p.total_steps = as_size(v, f); }},
      {"hard_phase", [&](const Json& v, const std::string& f) { p.hard_phase = as_bool(v, f); }},
  };
  const std::map<std::string, Setter> optim_keys = {
      {"lr", [&](const Json& v, const std::string& f) { o.lr = as_double(v, f); }},
      {"beta1", [&](const Json& v, const std::string& f) { o.beta1 = as_double(v, f); }},
      {"beta2", [&](const Json& v, const std::string& f) { o.beta2 = as_double(v, f); }},
      {"eps", [&](const Json& v, const std::string& f) { o.eps = as_double(v, f); }},
      {"clip_norm", [&](const Json& v, const std::string& f) { o.clip_norm = as_double(v, f); }},
      {"batch_size", [&](const Json& v, const std::string& f) { o.batch_size = as_size(v, f); }},
      {"eval_every", [&](const Json& v, const std::string& f) { o.eval_every = as_size(v, f); }},
  };
  const std::map<std::string, Setter> data_keys = {
      {"teacher_seed", [&](const Json& v, const std::string& f) { d.teacher_seed = as_u64(v, f); }},
      {"shift", [&](const Json& v, const std::string& f) { d.shift = as_double(v, f); }},
      {"style_scale", [&](const Json& v, const std::string& f) { d.style_scale = as_double(v, f); }},
      {"min_len", [&](const Json& v, const std::string& f) { d.min_len = as_size(v, f); }},
      {"max_len", [&](const Json& v, const std::string& f) { d.max_len = as_size(v, f); }},
      {"noise_std", [&](const Json& v, const std::string& f) { d.noise_std = as_double(v, f); }},
      {"n_train", [&](const Json& v, const std::string& f) { d.n_train = as_size(v, f); }},
      {"n_eval_in", [&](const Json& v, const std::string& f) { d.n_eval_in = as_size(v, f); }},
      {"n_eval_ood", [&](const Json& v, const std::string& f) { d.n_eval_ood = as_size(v, f); }},
  };
  const std::map<std::string, Setter> top_keys = {
      {"model", [&](const Json& v, const std::string& f) { apply_section(v, f, model_keys); }},
      {"prune", [&](const Json& v, const std::string& f) { apply_section(v, f, prune_keys); }},
      {"optim", [&](const Json& v, const std::string& f) { apply_section(v, f, optim_keys); }},
      {"data", [&](const Json& v, const std::string& f) { apply_section(v, f, data_keys); }},
      {"seed", [&](const Json& v, const std::string& f) { c.seed = as_u64(v, f); }},
      {"output_dir", [&](const Json& v, const std::string& f) { c.output_dir = as_string(v, f); }},
  };
  for (const auto& [key, value] : doc.items()) {
    auto it = top_keys.find(key);
    if (it == top_keys.end()) throw ConfigError(key + ": unknown key");
    it->second(value, key);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& c) {
  Json doc;
  doc["model"] = {
      {"vocab_size", c.model.vocab_size}, {"model_dim", c.model.model_dim},
      {"heads", c.model.heads},           {"enc_layers", c.model.enc_layers},
      {"dec_layers", c.model.dec_layers}, {"ffn_hidden", c.model.ffn_hidden},
      {"expansion", c.model.expansion},   {"out_dim", c.model.out_dim},
      {"style_dim", c.model.style_dim},   {"prune_scope", to_string(c.model.prune_scope)},
  };
  doc["prune"] = {
      {"mode", to_string(c.prune.mode)},
      {"R", c.prune.ratio},
      {"T", c.prune.temperature},
      {"lambda_sp", c.prune.lambda_sp},
      {"phase1_steps", c.prune.phase1_steps},
      {"total_steps", c.prune.total_steps},
      {"hard_phase", c.prune.hard_phase},
  };
  doc["optim"] = {
      {"lr", c.optim.lr},
      {"beta1", c.optim.beta1},
      {"beta2", c.optim.beta2},
      {"eps", c.optim.eps},
      {"clip_norm", c.optim.clip_norm},
      {"batch_size", c.optim.batch_size},
      {"eval_every", c.optim.eval_every},
  };
  doc["data"] = {
      {"teacher_seed", c.data.teacher_seed}, {"shift", c.data.shift},         {"style_scale", c.data.style_scale},
      {"min_len", c.data.min_len},           {"max_len", c.data.max_len},     {"noise_std", c.data.noise_std},
      {"n_train", c.data.n_train},           {"n_eval_in", c.data.n_eval_in}, {"n_eval_ood", c.data.n_eval_ood},
  };
  doc["seed"] = c.seed;
  doc["output_dir"] = c.output_dir;
  return doc.dump(2) + "\n";
}

}  // namespace spattn
