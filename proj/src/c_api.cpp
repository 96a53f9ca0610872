#include "spattn/spattn.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "spattn/config.hpp"
#include "spattn/data.hpp"
#include "spattn/error.hpp"
#include "spattn/gradcheck.hpp"
#include "spattn/io.hpp"
#include "spattn/training.hpp"

struct spattn_config {
  spattn::ExperimentConfig value;
};

struct spattn_model {
  spattn::Checkpoint checkpoint;
};

struct spattn_eval_result {
  std::string split;
  spattn::EvalResult value;
};

struct spattn_gradcheck_report {
  std::vector<spattn::GradCheckResult> results;
};

namespace {

thread_local std::string g_last_error;

spattn_status fail(spattn_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <class F>
spattn_status guarded(F&& body) {
  try {
    body();
    return SPATTN_OK;
  } catch (const spattn::ConfigError& e) {
    return fail(SPATTN_ERR_CONFIG, e.what());
  } catch (const spattn::DivergenceError& e) {
    return fail(SPATTN_ERR_DIVERGENCE, e.what());
  } catch (const spattn::IoError& e) {
    return fail(SPATTN_ERR_IO, e.what());
  } catch (const spattn::RangeError& e) {
    return fail(SPATTN_ERR_RANGE, e.what());
  } catch (const spattn::DimensionError& e) {
    return fail(SPATTN_ERR_DIMENSION, e.what());
  } catch (const spattn::ContractError& e) {
    return fail(SPATTN_ERR_CONTRACT, e.what());
  } catch (const std::exception& e) {
    return fail(SPATTN_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(SPATTN_ERR_INTERNAL, "unknown error");
  }
}

char* copy_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

bool known_split(const char* split) { return std::strcmp(split, "in") == 0 || std::strcmp(split, "ood") == 0; }

const spattn::Dataset& pick_split(const spattn::ExperimentData& data, const std::string& split) {
  if (split == "in") return data.eval_in;
  if (split == "ood") return data.eval_ood;
  throw spattn::ContractError("split must be \"in\" or \"ood\", got \"" + split + "\"");
}

void check_compatible(const spattn::Checkpoint& ck, const spattn::ExperimentConfig& config) {
  if (!(ck.config.model == config.model)) {
    throw spattn::ConfigError("model: config does not match the checkpoint's model section");
  }
  if (ck.config.prune.mode != config.prune.mode) {
    throw spattn::ConfigError(std::string("prune.mode: config says ") + spattn::to_string(config.prune.mode) +
                              ", checkpoint was trained with " + spattn::to_string(ck.config.prune.mode));
  }
}

// Inference settings come from the checkpoint, data from the given config.
spattn::ExperimentConfig inference_config(const spattn::Checkpoint& ck, const spattn::ExperimentConfig& config) {
  spattn::ExperimentConfig c = config;
  c.prune = ck.config.prune;
  return c;
}

}  // namespace

extern "C" {

const char* spattn_last_error(void) { return g_last_error.c_str(); }

const char* spattn_version(void) { return "1.0.0"; }

void spattn_string_free(char* s) { delete[] s; }

spattn_status spattn_config_load(const char* path, spattn_config** out) {
  if (!path || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_config_load: null argument");
  return guarded([&] { *out = new spattn_config{spattn::load_config(path)}; });
}

spattn_status spattn_config_parse(const char* json, spattn_config** out) {
  if (!json || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_config_parse: null argument");
  return guarded([&] { *out = new spattn_config{spattn::parse_config(json)}; });
}

spattn_status spattn_config_to_json(const spattn_config* config, char** out) {
  if (!config || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_config_to_json: null argument");
  return guarded([&] { *out = copy_string(spattn::to_json(config->value)); });
}

spattn_status spattn_config_output_dir(const spattn_config* config, char** out) {
  if (!config || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_config_output_dir: null argument");
  return guarded([&] { *out = copy_string(config->value.output_dir); });
}

void spattn_config_free(spattn_config* config) { delete config; }

spattn_status spattn_train(const spattn_config* config, spattn_step_callback callback, void* user) {
  if (!config) return fail(SPATTN_ERR_ARGUMENT, "spattn_train: null config");
  namespace fs = std::filesystem;
  const spattn::ExperimentConfig& c = config->value;
  const fs::path dir(c.output_dir);
  const std::size_t layers = c.model.pruned_layer_count();

  std::ofstream metrics;
  spattn::ExperimentData data;
  std::unique_ptr<spattn::Trainer> trainer;

  spattn_status status = guarded([&] {
    c.validate();
    fs::create_directories(dir);
    fs::remove(dir / "thresholds.txt");
    fs::remove(dir / "last.ckpt");
    fs::remove(dir / "final.ckpt");
    metrics.open(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw spattn::IoError("cannot open " + (dir / "metrics.csv").string() + " for writing");
    metrics << spattn::metrics_header(layers) << std::flush;
    data = spattn::make_experiment_data(c.data, c.model, c.seed);
    trainer = std::make_unique<spattn::Trainer>(c, data);
    while (!trainer->done()) {
      const spattn::MetricsRow row = trainer->step();
      metrics << spattn::metrics_line(row, layers) << std::flush;
      if (callback) {
        spattn_step_info info{};
        info.step = row.step;
        info.phase = row.phase;
        info.task_loss = row.task_loss;
        info.sp_loss = row.sp_loss ? *row.sp_loss : std::numeric_limits<double>::quiet_NaN();
        info.layers = row.active_frac.size();
        info.theta = row.theta.empty() ? nullptr : row.theta.data();
        info.active_frac = row.active_frac.data();
        info.has_eval = row.eval_in.has_value();
        info.eval_in = row.eval_in.value_or(0.0);
        info.eval_ood = row.eval_ood.value_or(0.0);
        callback(&info, user);
      }
    }
    spattn::save_checkpoint((dir / "final.ckpt").string(), c, trainer->params());
    if (c.prune.mode == spattn::PruneMode::kDifferentiable) {
      spattn::write_text_file((dir / "thresholds.txt").string(), spattn::thresholds_table(trainer->params()));
    }
  });
  if (status == SPATTN_ERR_DIVERGENCE && trainer) {
    const std::string message = g_last_error;
    try {
      spattn::save_checkpoint((dir / "last.ckpt").string(), c, trainer->params());
    } catch (const std::exception&) {
    }
    g_last_error = message;
  }
  return status;
}

spattn_status spattn_model_load(const char* checkpoint_path, spattn_model** out) {
  if (!checkpoint_path || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_model_load: null argument");
  return guarded([&] { *out = new spattn_model{spattn::load_checkpoint(checkpoint_path)}; });
}

spattn_status spattn_model_thresholds(const spattn_model* model, double* out, size_t capacity, size_t* count) {
  if (!model || !count) return fail(SPATTN_ERR_ARGUMENT, "spattn_model_thresholds: null argument");
  const auto& th = model->checkpoint.params.thresholds;
  *count = th.size();
  if (out) {
    for (std::size_t i = 0; i < th.size() && i < capacity; ++i) out[i] = th[i].item();
  }
  return SPATTN_OK;
}

void spattn_model_free(spattn_model* model) { delete model; }

spattn_status spattn_eval(const spattn_model* model, const spattn_config* config, const char* split,
                          spattn_eval_result** out) {
  if (!model || !config || !split || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_eval: null argument");
  if (!known_split(split)) return fail(SPATTN_ERR_ARGUMENT, std::string("spattn_eval: unknown split ") + split);
  return guarded([&] {
    const spattn::Checkpoint& ck = model->checkpoint;
    check_compatible(ck, config->value);
    const spattn::ExperimentConfig c = inference_config(ck, config->value);
    const spattn::ExperimentData data = spattn::make_experiment_data(c.data, c.model, c.seed);
    const spattn::Dataset& d = pick_split(data, split);
    *out = new spattn_eval_result{split, spattn::evaluate(ck.params, d, c, spattn::inference_context(c.prune))};
  });
}

double spattn_eval_loss(const spattn_eval_result* result) {
  return result ? result->value.loss : std::numeric_limits<double>::quiet_NaN();
}

size_t spattn_eval_layers(const spattn_eval_result* result) { return result ? result->value.active_frac.size() : 0; }

double spattn_eval_active_frac(const spattn_eval_result* result, size_t layer) {
  if (!result || layer >= result->value.active_frac.size()) return std::numeric_limits<double>::quiet_NaN();
  return result->value.active_frac[layer];
}

spattn_status spattn_eval_csv(const spattn_eval_result* result, char** out) {
  if (!result || !out) return fail(SPATTN_ERR_ARGUMENT, "spattn_eval_csv: null argument");
  return guarded([&] {
    const auto& af = result->value.active_frac;
    std::string s = "split,task_loss";
    for (std::size_t l = 1; l <= af.size(); ++l) s += ",active_frac_" + std::to_string(l);
    s += "\n" + result->split + "," + spattn::format_number(result->value.loss);
    for (double v : af) s += "," + spattn::format_number(v);
    *out = copy_string(s + "\n");
  });
}

void spattn_eval_result_free(spattn_eval_result* result) { delete result; }

spattn_status spattn_export_masks(const spattn_model* model, const spattn_config* config, const char* split,
                                  size_t sample, const char* out_dir) {
  if (!model || !config || !split || !out_dir) return fail(SPATTN_ERR_ARGUMENT, "spattn_export_masks: null argument");
  if (!known_split(split)) return fail(SPATTN_ERR_ARGUMENT, std::string("spattn_export_masks: unknown split ") + split);
  return guarded([&] {
    namespace fs = std::filesystem;
    const spattn::Checkpoint& ck = model->checkpoint;
    check_compatible(ck, config->value);
    const spattn::ExperimentConfig c = inference_config(ck, config->value);
    const spattn::ExperimentData data = spattn::make_experiment_data(c.data, c.model, c.seed);
    const auto maps = spattn::decoder_heatmaps(ck.params, c, pick_split(data, split), sample);
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    for (const auto& m : maps) {
      const std::string stem = "layer" + std::to_string(m.layer) + "_head" + std::to_string(m.head);
      spattn::write_text_file((dir / (stem + ".pgm")).string(), spattn::pgm_image(m.pixels, m.size, m.size));
      spattn::write_text_file((dir / (stem + "_mask.csv")).string(), spattn::mask_csv(m));
    }
  });
}

spattn_status spattn_gradcheck(uint64_t seed, int inject_fault, spattn_gradcheck_report** out) {
  if (!out) return fail(SPATTN_ERR_ARGUMENT, "spattn_gradcheck: null argument");
  return guarded([&] {
    const auto fault = inject_fault ? spattn::Fault::kSigmoidBackward : spattn::Fault::kNone;
    *out = new spattn_gradcheck_report{spattn::run_gradcheck_suite(seed, fault)};
  });
}

size_t spattn_gradcheck_count(const spattn_gradcheck_report* report) { return report ? report->results.size() : 0; }

const char* spattn_gradcheck_name(const spattn_gradcheck_report* report, size_t i) {
  if (!report || i >= report->results.size()) return nullptr;
  return report->results[i].name.c_str();
}

double spattn_gradcheck_error(const spattn_gradcheck_report* report, size_t i) {
  if (!report || i >= report->results.size()) return std::numeric_limits<double>::quiet_NaN();
  return report->results[i].max_rel_error;
}

double spattn_gradcheck_tolerance(const spattn_gradcheck_report* report, size_t i) {
  if (!report || i >= report->results.size()) return std::numeric_limits<double>::quiet_NaN();
  return report->results[i].tolerance;
}

int spattn_gradcheck_passed(const spattn_gradcheck_report* report) {
  if (!report) return 0;
  for (const auto& r : report->results) {
    if (!r.passed()) return 0;
  }
  return 1;
}

void spattn_gradcheck_report_free(spattn_gradcheck_report* report) { delete report; }

}  // extern "C"
