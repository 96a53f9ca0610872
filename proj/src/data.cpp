#include "spattn/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "spattn/error.hpp"
#include "spattn/random.hpp"

namespace spattn {

namespace {

std::vector<double> normal_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

constexpr std::uint64_t kTrainSplit = 1;
constexpr std::uint64_t kEvalInSplit = 2;
constexpr std::uint64_t kEvalOodSplit = 3;

}  // namespace

void DataSpec::validate() const {
  if (!(shift >= 0.0) || !std::isfinite(shift)) throw ConfigError("data.shift: must be finite and >= 0");
  if (!(style_scale > 0.0) || !std::isfinite(style_scale)) throw ConfigError("data.style_scale: must be > 0");
  if (min_len == 0) throw ConfigError("data.min_len: must be >= 1");
  if (max_len < min_len) throw ConfigError("data.max_len: must be >= data.min_len");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("data.noise_std: must be finite and >= 0");
  if (n_train == 0) throw ConfigError("data.n_train: must be >= 1");
  if (n_eval_in == 0) throw ConfigError("data.n_eval_in: must be >= 1");
  if (n_eval_ood == 0) throw ConfigError("data.n_eval_ood: must be >= 1");
}

Teacher::Teacher(std::uint64_t seed, std::size_t vocab_size, std::size_t style_dim, std::size_t out_dim)
    : vocab_(vocab_size), style_dim_(style_dim), out_dim_(out_dim) {
  Rng rng(seed, Stream::kTeacher);
  token_w_ = normal_vector(rng, vocab_ * kHidden, 1.0);
  pos_w_ = normal_vector(rng, kHidden, 2.0);
  style_w_ = normal_vector(rng, style_dim_ * kHidden, 1.0 / std::sqrt(static_cast<double>(style_dim_)));
  hidden_b_ = normal_vector(rng, kHidden, 0.5);
  out_w_ = normal_vector(rng, kHidden * out_dim_, 1.0 / std::sqrt(static_cast<double>(kHidden)));
  out_b_ = normal_vector(rng, out_dim_, 0.1);

  Rng dir_rng(seed, Stream::kShiftDirection);
  direction_ = normal_vector(dir_rng, style_dim_, 1.0);
  double norm = 0.0;
  for (double v : direction_) norm += v * v;
  norm = std::sqrt(norm);
  for (auto& v : direction_) v /= norm;
}

std::vector<double> Teacher::frame(std::size_t token, double position, std::span<const double> style) const {
  if (token >= vocab_) throw RangeError("teacher: token id " + std::to_string(token) + " outside vocabulary");
  if (style.size() != style_dim_) throw DimensionError("teacher: style has wrong dimension");
  std::vector<double> hidden(kHidden);
  for (std::size_t k = 0; k < kHidden; ++k) {
    double pre = token_w_[token * kHidden + k] + position * pos_w_[k] + hidden_b_[k];
    for (std::size_t s = 0; s < style_dim_; ++s) pre += style[s] * style_w_[s * kHidden + k];
    hidden[k] = std::tanh(pre);
  }
  std::vector<double> out(out_b_);
  for (std::size_t k = 0; k < kHidden; ++k) {
    for (std::size_t o = 0; o < out_dim_; ++o) out[o] += hidden[k] * out_w_[k * out_dim_ + o];
  }
  return out;
}

Teacher make_teacher(std::uint64_t seed, const ModelConfig& config) {
  return Teacher(seed, config.vocab_size, config.style_dim, config.out_dim);
}

bool Dataset::operator==(const Dataset& o) const {
  if (style_dim != o.style_dim || out_dim != o.out_dim || expansion != o.expansion ||
      sequences.size() != o.sequences.size()) {
    return false;
  }
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& a = sequences[i];
    const auto& b = o.sequences[i];
    if (a.tokens != b.tokens || a.style != b.style || a.targets != b.targets) return false;
  }
  return true;
}

Dataset sample_dataset(const Teacher& teacher, Domain domain, const DataSpec& spec, std::size_t n_sequences,
                       std::size_t expansion, std::uint64_t seed) {
  spec.validate();
  if (expansion == 0) throw ContractError("sample_dataset: expansion must be >= 1");
  Rng lengths(seed, Stream::kLengths);
  Rng tokens(seed, Stream::kTokens);
  Rng styles(seed, Stream::kStyles);
  Rng noise(seed, Stream::kNoise);
  const double offset = domain == Domain::kOod ? spec.shift : 0.0;

  Dataset out;
  out.style_dim = teacher.style_dim();
  out.out_dim = teacher.out_dim();
  out.expansion = expansion;
  out.sequences.reserve(n_sequences);
  for (std::size_t n = 0; n < n_sequences; ++n) {
    Sequence seq;
    const std::size_t len = spec.min_len + lengths.below(spec.max_len - spec.min_len + 1);
    seq.tokens.resize(len);
    for (auto& t : seq.tokens) t = tokens.below(teacher.vocab_size());
    seq.style.resize(teacher.style_dim());
    for (std::size_t s = 0; s < seq.style.size(); ++s) {
      seq.style[s] = offset * teacher.shift_direction()[s] + spec.style_scale * styles.normal();
    }
    const std::size_t frames = len * expansion;
    seq.targets.reserve(frames * teacher.out_dim());
    for (std::size_t f = 0; f < frames; ++f) {
      const double pos = frames > 1 ? static_cast<double>(f) / static_cast<double>(frames - 1) : 0.0;
      for (double v : teacher.frame(seq.tokens[f / expansion], pos, seq.style)) {
        seq.targets.push_back(spec.noise_std > 0.0 ? v + spec.noise_std * noise.normal() : v);
      }
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

ExperimentData make_experiment_data(const DataSpec& spec, const ModelConfig& config, std::uint64_t seed) {
  const Teacher teacher = make_teacher(spec.teacher_seed, config);
  const std::size_t r = config.expansion;
  return {sample_dataset(teacher, Domain::kIn, spec, spec.n_train, r, mix64(seed) + kTrainSplit),
          sample_dataset(teacher, Domain::kIn, spec, spec.n_eval_in, r, mix64(seed) + kEvalInSplit),
          sample_dataset(teacher, Domain::kOod, spec, spec.n_eval_ood, r, mix64(seed) + kEvalOodSplit)};
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: no sequences selected");
  Batch batch;
  auto& in = batch.input;
  in.batch = indices.size();
  for (auto i : indices) {
    if (i >= data.size()) throw RangeError("make_batch: sequence index " + std::to_string(i) + " out of range");
    in.max_tokens = std::max(in.max_tokens, data.sequences[i].tokens.size());
  }
  const std::size_t r = data.expansion;
  const std::size_t max_frames = in.max_tokens * r;
  in.tokens.assign(in.batch * in.max_tokens, 0);
  std::vector<double> style(in.batch * data.style_dim);
  std::vector<double> targets(in.batch * max_frames * data.out_dim, 0.0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sequence& seq = data.sequences[indices[b]];
    std::copy(seq.tokens.begin(), seq.tokens.end(), in.tokens.begin() + b * in.max_tokens);
    std::copy(seq.style.begin(), seq.style.end(), style.begin() + b * data.style_dim);
    std::copy(seq.targets.begin(), seq.targets.end(), targets.begin() + b * max_frames * data.out_dim);
    in.token_len.push_back(seq.tokens.size());
    batch.frame_len.push_back(seq.tokens.size() * r);
  }
  in.style = Tensor::from({in.batch, data.style_dim}, std::move(style));
  batch.targets = Tensor::from({in.batch, max_frames, data.out_dim}, std::move(targets));
  return batch;
}

std::vector<std::vector<std::size_t>> length_buckets(const Dataset& data) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < data.size(); ++i) by_len[data.sequences[i].tokens.size()].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [len, idx] : by_len) out.push_back(std::move(idx));
  return out;
}

}  // namespace spattn
