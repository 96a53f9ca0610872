#pragma once

// Sparsity regularizer, loss assembly, Adam with global-norm clipping and the
// two-phase schedule.
//
// Differentiable pruning trains in two phases. Phase 1 applies soft masks and
// updates every parameter including the thresholds against task + lambda * L_sp.
// Phase 2 applies hard masks built from the learned thresholds, drops L_sp and
// leaves the thresholds untouched. Thresholds are projected onto [0, inf)
// after every update.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "spattn/attention.hpp"
#include "spattn/config.hpp"
#include "spattn/data.hpp"
#include "spattn/model.hpp"

namespace spattn {

/// Mean over all layers and heads of (head mean of soft mask - R)^2, with
/// head means taken over valid pairs. Every mask must be soft; valid_len[l]
/// holds the per-sequence valid lengths of layer l.
Tensor sparsity_loss(std::span<const SparseMask> soft_masks, std::span<const std::vector<std::size_t>> valid_len,
                     double ratio);

/// Phase 1 of differentiable pruning: task + lambda_sp * sp; otherwise task.
Tensor total_loss(const Tensor& task_loss, const Tensor& sp_loss, int phase, const PruneConfig& config);

/// Squared error averaged over valid frames and output channels.
Tensor task_loss(const Tensor& frames, const Tensor& targets, std::span<const std::size_t> frame_len);

class Adam {
 public:
  Adam(std::vector<Tensor> params, const OptimConfig& config);

  /// Clips the gradients of the `active` parameters to the global norm limit,
  /// then updates them. Inactive parameters keep their values and moments.
  /// Returns the pre-clip gradient norm.
  double step(const std::vector<bool>& active);
  void zero_grad();

  std::size_t step_count() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  OptimConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

struct MetricsRow {
  std::size_t step = 0;
  int phase = 1;
  double task_loss = 0.0;
  std::optional<double> sp_loss;  // only computed in phase 1 of differentiable pruning
  std::vector<double> theta;      // after the update; empty unless differentiable
  std::vector<double> active_frac;  // hard (or vanilla) mask active fraction per pruned layer
  std::optional<double> eval_in;
  std::optional<double> eval_ood;

  // Diagnostics kept out of the CSV.
  std::vector<double> mask_mean;  // mean of the applied mask per pruned layer
  bool masks_binary = true;       // every applied mask entry in {0, 1}
  bool masks_open = true;         // every applied mask entry in (0, 1)
};

struct EvalResult {
  double loss = 0.0;
  std::vector<double> active_frac;  // per pruned layer, pooled over the split
  std::vector<double> mask_mean;    // mean of the applied mask per pruned layer
  bool masks_binary = true;
  bool masks_open = true;
};

/// Forward context for a training step of the given phase.
PruneContext train_context(const PruneConfig& prune, int phase);
/// Forward context at inference: hard masks for differentiable pruning
/// (soft when the hard phase is disabled), head-union masks for vanilla.
PruneContext inference_context(const PruneConfig& prune);

struct StepLoss {
  ForwardOutput forward;
  Tensor task;
  Tensor sp;     // undefined unless phase 1 of differentiable pruning
  Tensor total;
};

/// Forward pass and loss assembly of a training step, without the update.
StepLoss step_loss(const Batch& batch, const ModelParams& params, int phase, const ExperimentConfig& config);

/// Forward, backward, clip and update on one batch. In phase 2 the threshold
/// gradients are discarded before clipping and the thresholds keep their values.
/// Throws DivergenceError, leaving the parameters untouched, when the loss is
/// not finite.
MetricsRow train_step(const Batch& batch, ModelParams& params, Adam& optim, int phase, const ExperimentConfig& config);

/// Pooled loss and mask statistics over a whole dataset.
EvalResult evaluate(const ModelParams& params, const Dataset& data, const ExperimentConfig& config,
                    const PruneContext& ctx);

/// Phase of a 1-based step index.
int phase_of(std::size_t step, const PruneConfig& prune);

class Trainer {
 public:
  Trainer(ExperimentConfig config, const ExperimentData& data);

  /// Runs the next step (with evaluation on cadence) and returns its row.
  MetricsRow step();
  bool done() const { return steps_done_ >= config_.prune.total_steps; }
  std::size_t steps_done() const { return steps_done_; }

  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const ExperimentConfig& config() const { return config_; }
  /// Indices of the batch used by a given 1-based step.
  std::vector<std::size_t> batch_indices(std::size_t step) const;

 private:
  ExperimentConfig config_;
  const ExperimentData* data_;
  ModelParams params_;
  Adam optim_;
  std::vector<std::vector<std::size_t>> buckets_;
  std::vector<std::size_t> bucket_of_;
  std::size_t steps_done_ = 0;
};

struct RunObserver {
  std::function<void(const MetricsRow&)> on_row;
  /// Called once after the last phase-1 step of differentiable pruning;
  /// returning false stops the run there.
  std::function<bool(const Trainer&)> on_phase1_end;
};

struct RunResult {
  ModelParams params;
  std::vector<MetricsRow> rows;
  bool stopped_early = false;
};

/// Full schedule: single phase for none/vanilla, two phases for differentiable.
RunResult run_two_phase(const ExperimentConfig& config, const ExperimentData& data, const RunObserver& observer = {});

}  // namespace spattn
