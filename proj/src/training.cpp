#include "spattn/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spattn/error.hpp"
#include "spattn/random.hpp"

namespace spattn {

namespace {

struct MaskTotals {
  double sum = 0.0;
  double count = 0.0;
};

MaskTotals mask_totals(const SparseMask& mask, std::span<const std::size_t> valid_len) {
  const Tensor& v = mask.values;
  const std::size_t heads = v.dim(1), n = v.dim(2);
  auto mv = v.data();
  MaskTotals t;
  for (std::size_t b = 0; b < valid_len.size(); ++b) {
    const std::size_t len = valid_len[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        const double* row = mv.data() + ((b * heads + h) * n + i) * n;
        for (std::size_t j = 0; j < len; ++j) t.sum += row[j];
      }
    }
    t.count += static_cast<double>(heads * len * len);
  }
  return t;
}

std::vector<Tensor> optimizer_params(const ModelParams& params) {
  std::vector<Tensor> out;
  for (auto& [name, t] : params.named_weights()) out.push_back(t);
  for (const auto& t : params.thresholds) out.push_back(t);
  return out;
}

bool differentiable(const PruneConfig& p) { return p.mode == PruneMode::kDifferentiable; }

}  // namespace

Tensor sparsity_loss(std::span<const SparseMask> soft_masks, std::span<const std::vector<std::size_t>> valid_len,
                     double ratio) {
  if (soft_masks.empty()) throw ContractError("sparsity_loss: no masks");
  if (valid_len.size() != soft_masks.size()) {
    throw ContractError("sparsity_loss: one valid-length list per mask is required");
  }
  Tensor total;
  std::size_t heads_seen = 0;
  for (std::size_t l = 0; l < soft_masks.size(); ++l) {
    const SparseMask& m = soft_masks[l];
    if (m.kind != MaskKind::kSoft) {
      throw ContractError(std::string("sparsity_loss: expected soft masks, got ") + to_string(m.kind));
    }
    const Tensor layer = reduce_sum(square(add_scalar(head_means(m, valid_len[l]), -ratio)));
    total = total.defined() ? add(total, layer) : layer;
    heads_seen += m.values.dim(1);
  }
  return scale(total, 1.0 / static_cast<double>(heads_seen));
}

Tensor total_loss(const Tensor& task, const Tensor& sp, int phase, const PruneConfig& config) {
  if (phase != 1 && phase != 2) throw ContractError("total_loss: phase must be 1 or 2");
  if (!differentiable(config) || phase == 2 || config.lambda_sp == 0.0 || !sp.defined()) return task;
  return add(task, scale(sp, config.lambda_sp));
}

Tensor task_loss(const Tensor& frames, const Tensor& targets, std::span<const std::size_t> frame_len) {
  if (frames.shape() != targets.shape() || frames.rank() != 3) {
    throw DimensionError("task_loss: prediction " + shape_str(frames.shape()) + " vs target " +
                         shape_str(targets.shape()));
  }
  const std::size_t batch = frames.dim(0), n = frames.dim(1), out = frames.dim(2);
  if (frame_len.size() != batch) throw DimensionError("task_loss: one frame length per sequence is required");
  double count = 0.0;
  for (auto len : frame_len) count += static_cast<double>(len * out);
  std::vector<double> weight(frames.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill_n(weight.begin() + b * n * out, std::min(frame_len[b], n) * out, 1.0 / count);
  }
  return reduce_sum(mul(square(sub(frames, targets)), Tensor::from(frames.shape(), std::move(weight))));
}

// ---- Adam -----------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, const OptimConfig& config) : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Adam::step(const std::vector<bool>& active) {
  if (active.size() != params_.size()) throw ContractError("Adam::step: one flag per parameter is required");
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!active[i]) continue;
    for (double g : params_[i].grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > config_.clip_norm ? config_.clip_norm / (norm + 1e-6) : 1.0;

  ++t_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!active[i]) continue;
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] * clip;
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
      w[k] -= config_.lr * (m[k] / bias1) / (std::sqrt(v[k] / bias2) + config_.eps);
    }
  }
  return norm;
}

// ---- steps ----------------------------------------------------------------

int phase_of(std::size_t step, const PruneConfig& prune) {
  return differentiable(prune) && prune.hard_phase && step > prune.phase1_steps ? 2 : 1;
}

PruneContext train_context(const PruneConfig& prune, int phase) {
  PruneContext ctx;
  ctx.mode = prune.mode;
  ctx.temperature = prune.temperature;
  ctx.stage = phase == 1 ? MaskStage::kSoft : MaskStage::kHard;
  return ctx;
}

PruneContext inference_context(const PruneConfig& prune) {
  PruneContext ctx;
  ctx.mode = prune.mode;
  ctx.temperature = prune.temperature;
  ctx.stage = prune.hard_phase ? MaskStage::kHard : MaskStage::kSoft;
  return ctx;
}

StepLoss step_loss(const Batch& batch, const ModelParams& params, int phase, const ExperimentConfig& config) {
  const PruneConfig& prune = config.prune;
  StepLoss out;
  out.forward = model_forward(batch.input, params, config.model, train_context(prune, phase));
  out.task = task_loss(out.forward.frames, batch.targets, batch.frame_len);
  const auto traces = out.forward.pruned_traces();
  if (differentiable(prune) && phase == 1 && !traces.empty()) {
    std::vector<SparseMask> masks;
    std::vector<std::vector<std::size_t>> lens;
    for (const auto* t : traces) {
      masks.push_back(*t->mask);
      lens.push_back(t->probs.valid_len);
    }
    out.sp = sparsity_loss(masks, lens, prune.ratio);
  }
  out.total = total_loss(out.task, out.sp, phase, prune);
  return out;
}

MetricsRow train_step(const Batch& batch, ModelParams& params, Adam& optim, int phase,
                      const ExperimentConfig& config) {
  const StepLoss sl = step_loss(batch, params, phase, config);
  const auto traces = sl.forward.pruned_traces();
  const Tensor& loss = sl.total;

  MetricsRow row;
  row.phase = phase;
  row.task_loss = sl.task.item();
  if (sl.sp.defined()) row.sp_loss = sl.sp.item();
  if (!std::isfinite(loss.item())) {
    throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(optim.step_count() + 1));
  }

  // Monitoring: hard-mask active fraction with the thresholds used in this forward.
  for (std::size_t l = 0; l < traces.size(); ++l) {
    const BlockTrace& t = *traces[l];
    const SparseMask& applied = *t.mask;
    row.mask_mean.push_back(sparsity_of(applied, t.probs.valid_len));
    row.masks_binary = row.masks_binary && is_binary(applied, t.probs.valid_len);
    row.masks_open = row.masks_open && in_open_unit_interval(applied, t.probs.valid_len);
    if (applied.kind == MaskKind::kSoft) {
      row.active_frac.push_back(sparsity_of(hard_mask(t.probs, params.thresholds[l].item()), t.probs.valid_len));
    } else {
      row.active_frac.push_back(row.mask_mean.back());
    }
  }
  if (traces.empty()) row.active_frac.assign(config.model.pruned_layer_count(), 1.0);

  optim.zero_grad();
  loss.backward();
  std::vector<bool> flags(optim.params().size(), true);
  const std::size_t first_theta = flags.size() - params.thresholds.size();
  for (std::size_t i = first_theta; i < flags.size(); ++i) flags[i] = phase == 1;
  optim.step(flags);
  for (auto& theta : params.thresholds) {
    auto v = theta.mutable_data();
    v[0] = std::max(v[0], 0.0);
    row.theta.push_back(v[0]);
  }
  return row;
}

EvalResult evaluate(const ModelParams& params, const Dataset& data, const ExperimentConfig& config,
                    const PruneContext& ctx) {
  double sq = 0.0;
  double count = 0.0;
  std::vector<MaskTotals> applied;
  std::vector<MaskTotals> active;
  EvalResult result;
  const std::size_t chunk = config.optim.batch_size;
  for (const auto& bucket : length_buckets(data)) {
    for (std::size_t start = 0; start < bucket.size(); start += chunk) {
      const std::size_t end = std::min(bucket.size(), start + chunk);
      const Batch batch = make_batch(data, std::span<const std::size_t>(bucket).subspan(start, end - start));
      const ForwardOutput fwd = model_forward(batch.input, params, config.model, ctx);
      auto pred = fwd.frames.data();
      auto target = batch.targets.data();
      const std::size_t n = fwd.frames.dim(1), out = fwd.frames.dim(2);
      for (std::size_t b = 0; b < batch.frame_len.size(); ++b) {
        for (std::size_t k = 0; k < batch.frame_len[b] * out; ++k) {
          const double d = pred[b * n * out + k] - target[b * n * out + k];
          sq += d * d;
        }
        count += static_cast<double>(batch.frame_len[b] * out);
      }
      const auto traces = fwd.pruned_traces();
      applied.resize(traces.size());
      active.resize(traces.size());
      for (std::size_t l = 0; l < traces.size(); ++l) {
        const BlockTrace& t = *traces[l];
        const MaskTotals a = mask_totals(*t.mask, t.probs.valid_len);
        applied[l].sum += a.sum;
        applied[l].count += a.count;
        const MaskTotals h = t.mask->kind == MaskKind::kSoft
                                 ? mask_totals(hard_mask(t.probs, params.thresholds[l].item()), t.probs.valid_len)
                                 : a;
        active[l].sum += h.sum;
        active[l].count += h.count;
        result.masks_binary = result.masks_binary && is_binary(*t.mask, t.probs.valid_len);
        result.masks_open = result.masks_open && in_open_unit_interval(*t.mask, t.probs.valid_len);
      }
    }
  }
  result.loss = sq / count;
  for (std::size_t l = 0; l < applied.size(); ++l) {
    result.mask_mean.push_back(applied[l].sum / applied[l].count);
    result.active_frac.push_back(active[l].sum / active[l].count);
  }
  if (applied.empty()) result.active_frac.assign(config.model.pruned_layer_count(), 1.0);
  return result;
}

// ---- Trainer --------------------------------------------------------------

Trainer::Trainer(ExperimentConfig config, const ExperimentData& data)
    : config_(std::move(config)),
      data_(&data),
      params_(init_params(config_.model, config_.prune.mode, config_.seed)),
      optim_(optimizer_params(params_), config_.optim),
      buckets_(length_buckets(data.train)),
      bucket_of_(data.train.size()) {
  config_.validate();
  for (std::size_t b = 0; b < buckets_.size(); ++b) {
    for (auto i : buckets_[b]) bucket_of_[i] = b;
  }
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  Rng rng(config_.seed, Stream::kBatches, step);
  std::vector<std::size_t> pool = buckets_[bucket_of_[rng.below(data_->train.size())]];
  const std::size_t want = config_.optim.batch_size;
  std::vector<std::size_t> out;
  if (pool.size() >= want) {
    for (std::size_t i = 0; i < want; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      out.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < want; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

MetricsRow Trainer::step() {
  if (done()) throw ContractError("Trainer::step: schedule already complete");
  const std::size_t s = steps_done_ + 1;
  const Batch batch = make_batch(data_->train, batch_indices(s));
  MetricsRow row = train_step(batch, params_, optim_, phase_of(s, config_.prune), config_);
  row.step = s;
  steps_done_ = s;
  if (s % config_.optim.eval_every == 0 || s == config_.prune.total_steps) {
    const PruneContext ctx = inference_context(config_.prune);
    row.eval_in = evaluate(params_, data_->eval_in, config_, ctx).loss;
    row.eval_ood = evaluate(params_, data_->eval_ood, config_, ctx).loss;
  }
  return row;
}

RunResult run_two_phase(const ExperimentConfig& config, const ExperimentData& data, const RunObserver& observer) {
  Trainer trainer(config, data);
  RunResult result;
  const bool two_phase = config.prune.mode == PruneMode::kDifferentiable && config.prune.hard_phase;
  auto phase1_boundary = [&]() {
    return two_phase && trainer.steps_done() == config.prune.phase1_steps && observer.on_phase1_end &&
           !observer.on_phase1_end(trainer);
  };
  if (phase1_boundary()) {
    result.stopped_early = true;
  }
  while (!result.stopped_early && !trainer.done()) {
    MetricsRow row = trainer.step();
    if (observer.on_row) observer.on_row(row);
    result.rows.push_back(std::move(row));
    if (phase1_boundary()) result.stopped_early = true;
  }
  result.params = trainer.params();
  return result;
}

}  // namespace spattn
