#include "spattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "spattn/attention.hpp"
#include "spattn/data.hpp"
#include "spattn/error.hpp"
#include "spattn/model.hpp"
#include "spattn/random.hpp"
#include "spattn/training.hpp"

namespace spattn {

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor loss = f();
  if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
  loss.backward();

  Rng rng(options.seed, Stream::kGradcheck);
  double worst = 0.0;
  auto central = [&](std::span<double> w, std::size_t k, double eps) {
    const double saved = w[k];
    w[k] = saved + eps;
    const double up = f().item();
    w[k] = saved - eps;
    const double down = f().item();
    w[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("grad_check: f is not finite at a perturbed point");
    return (up - down) / (2.0 * eps);
  };
  auto rel_error = [](double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); };

  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      for (std::size_t i = 0; i < options.max_coords_per_param; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(options.max_coords_per_param);
    }
    for (auto k : coords) {
      const double a = analytic[k];
      double rel = rel_error(a, central(p.mutable_data(), k, options.eps));
      if (options.step_ladder && rel > 1e-6) {
        for (double eps : {options.eps * 10, options.eps * 100, options.eps / 10, options.eps / 100}) {
          if (eps >= 1e-7 && eps <= 1e-3) rel = std::min(rel, rel_error(a, central(p.mutable_data(), k, eps)));
        }
      }
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

namespace {

constexpr double kOpTolerance = 1e-5;
constexpr double kLossTolerance = 1e-4;
constexpr double kTemperature = 0.01;

Tensor uniform_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// sigmoid whose backward drops the (1 - s) factor.
Tensor faulty_sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  auto in = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [in](const detail::TensorImpl& o) {
    std::vector<double> g(o.data.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * o.data[i];
    in->accumulate(g);
  });
}

struct Suite {
  std::uint64_t seed;
  Fault fault;
  Rng rng;
  std::vector<GradCheckResult> results;

  Tensor sig(const Tensor& x) const { return fault == Fault::kSigmoidBackward ? faulty_sigmoid(x) : sigmoid(x); }

  // Contracts an op output with fixed random weights so every output entry
  // contributes a distinct amount to the scalar.
  void op(const std::string& name, const std::function<Tensor()>& build, std::vector<Tensor> params,
          double tolerance = kOpTolerance) {
    const Shape out_shape = build().shape();
    const Tensor weights = uniform_tensor(rng, out_shape, -1.0, 1.0, false);
    auto f = [&] { return reduce_sum(mul(build(), weights)); };
    GradCheckOptions opt;
    opt.seed = seed;
    opt.step_ladder = true;
    results.push_back({name, grad_check(f, std::move(params), opt), tolerance});
  }
};

AttentionParams random_attention(Rng& rng, std::size_t dim, std::size_t heads, std::size_t head_dim) {
  AttentionParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w_q = uniform_tensor(rng, {dim, heads * head_dim}, -s, s);
  p.w_k = uniform_tensor(rng, {dim, heads * head_dim}, -s, s);
  p.w_v = uniform_tensor(rng, {dim, heads * head_dim}, -s, s);
  p.w_o = uniform_tensor(rng, {heads * head_dim, dim}, -s, s);
  p.heads = heads;
  p.head_dim = head_dim;
  return p;
}

// Threshold whose cut sits between `margin` and 1.2 * margin (probability
// units) from the nearest valid attention entry, preferring cuts near the
// average entry. Cuts deep inside wide gaps saturate every sigmoid, which
// leaves gradients below the resolution of central differences. Returns a
// negative value when no gap is wide enough.
double threshold_with_margin(const AttentionProbs& a, double margin) {
  const std::size_t n = a.length(), heads = a.heads();
  auto pv = a.probs.data();
  std::vector<double> scaled{0.0};
  for (std::size_t b = 0; b < a.batch(); ++b) {
    const std::size_t len = a.valid_len[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) scaled.push_back(pv[((b * heads + h) * n + i) * n + j] * len);
      }
    }
  }
  const double m = margin * static_cast<double>(a.valid_len.front());
  std::sort(scaled.begin(), scaled.end());
  double best = -1.0;
  auto consider = [&](double cut) {
    if (best < 0.0 || std::abs(cut - 1.0) < std::abs(best - 1.0)) best = cut;
  };
  for (std::size_t k = 0; k + 1 < scaled.size(); ++k) {
    if (scaled[k + 1] - scaled[k] < 2.2 * m) continue;
    consider(scaled[k] + 1.1 * m);
    consider(scaled[k + 1] - 1.1 * m);
  }
  return best;
}

void op_checks(Suite& s) {
  Rng& rng = s.rng;
  {
    Tensor a = uniform_tensor(rng, {3, 4}), b = uniform_tensor(rng, {4, 2});
    s.op("matmul", [&] { return matmul(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4}), b = uniform_tensor(rng, {2, 4, 2});
    s.op("matmul_batched", [&] { return matmul(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4}), b = uniform_tensor(rng, {4, 2});
    s.op("matmul_shared_rhs", [&] { return matmul(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4});
    s.op("transpose_last", [&] { return transpose_last(a); }, {a});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4}), b = uniform_tensor(rng, {4});
    s.op("add_broadcast", [&] { return add(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {3, 4}), b = uniform_tensor(rng, {});
    s.op("sub_scalar", [&] { return sub(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4}), b = uniform_tensor(rng, {3, 4});
    s.op("mul_broadcast", [&] { return mul(a, b); }, {a, b});
  }
  {
    Tensor a = uniform_tensor(rng, {5});
    s.op("scale", [&] { return scale(a, -1.7); }, {a});
    s.op("add_scalar", [&] { return add_scalar(a, 0.3); }, {a});
    s.op("square", [&] { return square(a); }, {a});
  }
  {
    Tensor a = uniform_tensor(rng, {3, 5});
    for (auto& x : a.mutable_data()) {
      if (std::abs(x) < 0.05) x = x < 0 ? -0.05 : 0.05;  // away from the kink
    }
    s.op("relu", [&] { return relu(a); }, {a});
  }
  {
    Tensor a = uniform_tensor(rng, {3, 4});
    s.op("sigmoid", [&] { return s.sig(a); }, {a});
  }
  {
    // Steep relaxation: sigmoid((a - theta) / T) with every a between 5T and
    // 12T from theta. Much further out the sigmoid is saturated to within
    // rounding and central differences only see noise.
    Tensor a = Tensor::zeros({12}, true);
    Tensor theta = Tensor::scalar(0.5, true);
    for (auto& x : a.mutable_data()) {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      x = 0.5 + side * rng.uniform(5 * kTemperature, 12 * kTemperature);
    }
    s.op("sigmoid_chain", [&] { return s.sig(scale(sub(a, theta), 1.0 / kTemperature)); }, {a, theta},
         kLossTolerance);
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4});
    s.op("reduce_sum", [&] { return reduce_sum(a); }, {a});
    s.op("reduce_mean", [&] { return reduce_mean(a); }, {a});
    s.op("reduce_mean_axis", [&] { return reduce_mean(a, 1); }, {a});
    s.op("sum_except", [&] { return sum_except(a, 1); }, {a});
  }
  {
    Tensor p = uniform_tensor(rng, {3, 4}), t = uniform_tensor(rng, {3, 4});
    s.op("mse", [&] { return mse(p, t); }, {p, t});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4});
    std::vector<double> pad{0.0, 0.0, 0.0, -std::numeric_limits<double>::infinity()};
    const Tensor key_pad = Tensor::from({4}, pad);
    s.op("softmax_rows", [&] { return softmax_rows(add(a, key_pad)); }, {a});
  }
  {
    Tensor x = uniform_tensor(rng, {2, 3, 5}), g = uniform_tensor(rng, {5}), b = uniform_tensor(rng, {5});
    s.op("layer_norm", [&] { return layer_norm(x, g, b); }, {x, g, b});
  }
  {
    Tensor a = uniform_tensor(rng, {2, 3, 4});
    s.op("reshape", [&] { return reshape(a, {6, 4}); }, {a});
    s.op("repeat_rows", [&] { return repeat_rows(a, 3); }, {a});
    s.op("split_heads", [&] { return split_heads(a, 2); }, {a});
    Tensor m = uniform_tensor(rng, {2, 2, 3, 2});
    s.op("merge_heads", [&] { return merge_heads(m); }, {m});
    Tensor e = uniform_tensor(rng, {2, 4});
    s.op("expand_rows", [&] { return expand_rows(e, 3); }, {e});
  }
  {
    Tensor table = uniform_tensor(rng, {5, 3});
    const std::vector<std::size_t> ids{4, 0, 4, 2};
    s.op("embedding", [&] { return embedding(table, ids, {2, 2}); }, {table});
  }
}

void attention_checks(Suite& s) {
  Rng& rng = s.rng;
  const std::size_t dim = 6, heads = 2, n = 5;
  const std::vector<std::size_t> valid{5, 3};
  Tensor x = uniform_tensor(rng, {2, n, dim});
  AttentionParams p = random_attention(rng, dim, heads, 3);
  s.op("attention", [&] { return masked_attention(x, p, valid, nullptr); }, {x, p.w_q, p.w_k, p.w_v, p.w_o});

  // Soft-masked attention at a threshold that clears every valid entry by 5T.
  // Short sequences with inputs in [-1, 1] keep the softmax away from
  // saturation, so the instance needs few redraws to find such a threshold.
  const std::vector<std::size_t> equal{4};
  double theta0 = -1.0;
  for (int attempt = 0; attempt < 256 && theta0 < 0.0; ++attempt) {
    x = uniform_tensor(rng, {1, 4, dim}, -1.0, 1.0);
    theta0 = threshold_with_margin(attention_probs(x.detach(), p, equal), 5 * kTemperature);
  }
  if (theta0 < 0.0) throw Error("gradcheck: no threshold with sufficient margin found");
  Tensor theta = Tensor::scalar(theta0, true);
  s.op(
      "soft_masked_attention",
      [&] {
        const AttentionProbs a = attention_probs(x, p, equal);
        const SparseMask m = soft_mask(a, theta, kTemperature);
        return attend_values(a, x, p, &m);
      },
      {x, p.w_q, p.w_k, p.w_v, p.w_o, theta}, kLossTolerance);
  s.op(
      "head_means",
      [&] { return head_means(soft_mask(attention_probs(x, p, equal), theta, kTemperature), equal); },
      {x, theta}, kLossTolerance);
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.model.vocab_size = 7;
  c.model.model_dim = 8;
  c.model.heads = 2;
  c.model.enc_layers = 1;
  c.model.dec_layers = 2;
  c.model.ffn_hidden = 12;
  c.model.expansion = 2;
  c.model.out_dim = 3;
  c.model.style_dim = 3;
  c.prune.mode = PruneMode::kDifferentiable;
  c.prune.ratio = 0.45;
  c.prune.temperature = kTemperature;
  c.prune.lambda_sp = 1.0;
  return c;
}

Dataset random_dataset(Rng& rng, const ModelConfig& m, std::size_t count, std::size_t tokens) {
  Dataset d;
  d.style_dim = m.style_dim;
  d.out_dim = m.out_dim;
  d.expansion = m.expansion;
  for (std::size_t i = 0; i < count; ++i) {
    Sequence s;
    for (std::size_t t = 0; t < tokens; ++t) s.tokens.push_back(rng.below(m.vocab_size));
    for (std::size_t k = 0; k < m.style_dim; ++k) s.style.push_back(rng.normal());
    for (std::size_t k = 0; k < tokens * m.expansion * m.out_dim; ++k) s.targets.push_back(rng.uniform(-1.0, 1.0));
    d.sequences.push_back(std::move(s));
  }
  return d;
}

void loss_checks(Suite& s) {
  const ExperimentConfig config = small_config();
  const double margin = 5 * config.prune.temperature;
  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng rng(s.seed, Stream::kGradcheck, 1000 + static_cast<std::uint64_t>(attempt));
    ModelParams params = init_params(config.model, config.prune.mode, rng.next_u64());
    const Dataset data = random_dataset(rng, config.model, 2, 3);
    const std::vector<std::size_t> idx{0, 1};
    const Batch batch = make_batch(data, idx);

    // Pick thresholds layer by layer: each layer's probabilities depend on
    // the masks of the layers before it.
    bool ok = true;
    for (std::size_t l = 0; l < params.thresholds.size() && ok; ++l) {
      const StepLoss probe = step_loss(batch, params, 1, config);
      const double theta = threshold_with_margin(probe.forward.pruned_traces()[l]->probs, margin);
      ok = theta > 0.0;
      if (ok) params.thresholds[l].mutable_data()[0] = theta;
    }
    if (!ok) continue;
    // Central differences cannot resolve a ReLU kink closer than eps.
    const StepLoss probe = step_loss(batch, params, 1, config);
    double relu_margin = std::numeric_limits<double>::infinity();
    for (const auto* trace : {&probe.forward.encoder_trace, &probe.forward.decoder_trace}) {
      for (const auto& t : *trace) relu_margin = std::min(relu_margin, t.relu_margin);
    }
    if (relu_margin < 1e-4) continue;

    auto f = [&] { return step_loss(batch, params, 1, config).total; };
    GradCheckOptions opt;
    opt.seed = s.seed;
    opt.max_coords_per_param = 4;
    opt.step_ladder = true;
    for (const auto& [name, t] : params.named_weights()) {
      s.results.push_back({"phase1_loss." + name, grad_check(f, {t}, opt), kLossTolerance});
    }
    for (std::size_t l = 0; l < params.thresholds.size(); ++l) {
      s.results.push_back(
          {"phase1_loss.theta_" + std::to_string(l + 1), grad_check(f, {params.thresholds[l]}, opt), kLossTolerance});
    }
    return;
  }
  throw Error("gradcheck: no model instance with sufficient threshold margin found");
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, Fault fault) {
  Suite s{seed, fault, Rng(seed, Stream::kGradcheck), {}};
  op_checks(s);
  attention_checks(s);
  loss_checks(s);
  return s.results;
}

}  // namespace spattn
