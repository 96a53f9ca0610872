// Command-line driver over the C API: train, eval, masks, gradcheck.
//
// Exit codes: 0 success, 2 config or usage error, 3 divergence, 4 check failure,
// 1 anything else.

#include <CLI11.hpp>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <string>

#include "spattn/spattn.h"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace {

int exit_code(spattn_status s) {
  switch (s) {
    case SPATTN_OK:
      return 0;
    case SPATTN_ERR_CONFIG:
      return 2;
    case SPATTN_ERR_DIVERGENCE:
      return 3;
    case SPATTN_ERR_CHECK:
      return 4;
    default:
      return 1;
  }
}

int report(spattn_status s) {
  if (s != SPATTN_OK) std::fprintf(stderr, "error: %s\n", spattn_last_error());
  return exit_code(s);
}

void print_progress(const spattn_step_info* info, void* user) {
  if (!info->has_eval || *static_cast<bool*>(user)) return;
  std::fprintf(stderr, "step %zu phase %d task %.6g", info->step, info->phase, info->task_loss);
  if (!std::isnan(info->sp_loss)) std::fprintf(stderr, " sp %.6g", info->sp_loss);
  std::fprintf(stderr, " eval_in %.6g eval_ood %.6g\n", info->eval_in, info->eval_ood);
}

int cmd_train(const std::string& config_path, bool quiet) {
  spattn_config* config = nullptr;
  if (auto s = spattn_config_load(config_path.c_str(), &config); s != SPATTN_OK) return report(s);
  const spattn_status s = spattn_train(config, print_progress, &quiet);
  spattn_config_free(config);
  return report(s);
}

// Loads a checkpoint and a config, runs `body`, frees both.
template <class F>
int with_model(const std::string& ckpt_path, const std::string& config_path, F&& body) {
  spattn_config* config = nullptr;
  if (auto s = spattn_config_load(config_path.c_str(), &config); s != SPATTN_OK) return report(s);
  spattn_model* model = nullptr;
  spattn_status s = spattn_model_load(ckpt_path.c_str(), &model);
  if (s == SPATTN_OK) s = body(model, config);
  spattn_model_free(model);
  spattn_config_free(config);
  return report(s);
}

int cmd_eval(const std::string& ckpt, const std::string& config_path, const std::string& split) {
  return with_model(ckpt, config_path, [&](spattn_model* model, spattn_config* config) {
    spattn_eval_result* result = nullptr;
    spattn_status s = spattn_eval(model, config, split.c_str(), &result);
    char* csv = nullptr;
    if (s == SPATTN_OK) s = spattn_eval_csv(result, &csv);
    if (s == SPATTN_OK) std::fputs(csv, stdout);
    spattn_string_free(csv);
    spattn_eval_result_free(result);
    return s;
  });
}

int cmd_masks(const std::string& ckpt, const std::string& config_path, const std::string& split, std::size_t sample,
              const std::string& out_dir) {
  return with_model(ckpt, config_path, [&](spattn_model* model, spattn_config* config) {
    return spattn_export_masks(model, config, split.c_str(), sample, out_dir.c_str());
  });
}

int cmd_gradcheck(std::uint64_t seed, bool inject_fault) {
  spattn_gradcheck_report* rep = nullptr;
  if (auto s = spattn_gradcheck(seed, inject_fault ? 1 : 0, &rep); s != SPATTN_OK) return report(s);
  int failures = 0;
  for (std::size_t i = 0; i < spattn_gradcheck_count(rep); ++i) {
    const double err = spattn_gradcheck_error(rep, i);
    const double tol = spattn_gradcheck_tolerance(rep, i);
    const bool ok = err <= tol;
    failures += ok ? 0 : 1;
    std::printf("%-44s max_rel_error %.3e tol %.0e %s\n", spattn_gradcheck_name(rep, i), err, tol,
                ok ? "ok" : "FAIL");
  }
  spattn_gradcheck_report_free(rep);
  if (failures > 0) {
    std::fprintf(stderr, "gradcheck: %d check(s) exceeded tolerance\n", failures);
    return exit_code(SPATTN_ERR_CHECK);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many same-sized intermediates per step; keep
  // them on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Sparse-attention pruning experiments on a synthetic sequence task"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, split = "in", out_dir;
  bool quiet = false, inject_fault = false;
  std::size_t sample = 0;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Train a model and write metrics.csv, final.ckpt, thresholds.txt");
  train->add_option("config", config_path, "Experiment config (JSON)")->required();
  train->add_flag("-q,--quiet", quiet, "Suppress progress on stderr");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints one CSV row");
  eval->add_option("checkpoint", ckpt_path)->required();
  eval->add_option("config", config_path)->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"in", "ood"}));

  auto* masks = app.add_subcommand("masks", "Export decoder attention heatmaps for one sample");
  masks->add_option("checkpoint", ckpt_path)->required();
  masks->add_option("config", config_path)->required();
  masks->add_option("--sample", sample, "Sequence index in the eval split")->required();
  masks->add_option("--out", out_dir, "Output directory")->required();
  masks->add_option("--split", split)->check(CLI::IsMember({"in", "ood"}));

  auto* grad = app.add_subcommand("gradcheck", "Compare autodiff gradients with finite differences");
  grad->add_option("--seed", seed)->required();
  grad->add_flag("--inject-fault", inject_fault, "Use a sigmoid with a broken backward rule (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(SPATTN_ERR_CONFIG);
  }

  if (*train) return cmd_train(config_path, quiet);
  if (*eval) return cmd_eval(ckpt_path, config_path, split);
  if (*masks) return cmd_masks(ckpt_path, config_path, split, sample, out_dir);
  return cmd_gradcheck(seed, inject_fault);
}
