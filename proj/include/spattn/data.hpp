#pragma once

// Synthetic sequence regression with a controllable domain gap.
//
// A frozen random teacher maps (token, normalized frame position, style) to an
// output frame. In-domain styles are isotropic normal around 0; the OOD split
// moves the mean by `shift` along a fixed unit direction derived from the
// teacher seed.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spattn/model.hpp"
#include "spattn/tensor.hpp"

namespace spattn {

enum class Domain { kIn, kOod };

struct DataSpec {
  std::uint64_t teacher_seed = 1234;
  double shift = 3.0;
  double style_scale = 1.0;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  double noise_std = 0.01;
  std::size_t n_train = 2000;
  std::size_t n_eval_in = 200;
  std::size_t n_eval_ood = 200;

  void validate() const;
  bool operator==(const DataSpec&) const = default;
};

/// Fixed two-layer tanh network; hidden width 64.
class Teacher {
 public:
  static constexpr std::size_t kHidden = 64;

  Teacher(std::uint64_t seed, std::size_t vocab_size, std::size_t style_dim, std::size_t out_dim);

  /// One output frame for a token at normalized position in [0, 1].
  std::vector<double> frame(std::size_t token, double position, std::span<const double> style) const;
  /// Unit vector along which OOD styles are shifted.
  const std::vector<double>& shift_direction() const { return direction_; }

  std::size_t vocab_size() const { return vocab_; }
  std::size_t style_dim() const { return style_dim_; }
  std::size_t out_dim() const { return out_dim_; }

 private:
  std::size_t vocab_, style_dim_, out_dim_;
  std::vector<double> token_w_;  // [vocab, hidden]
  std::vector<double> pos_w_;    // [hidden]
  std::vector<double> style_w_;  // [style_dim, hidden]
  std::vector<double> hidden_b_;
  std::vector<double> out_w_;  // [hidden, out_dim]
  std::vector<double> out_b_;
  std::vector<double> direction_;
};

Teacher make_teacher(std::uint64_t seed, const ModelConfig& config);

struct Sequence {
  std::vector<std::size_t> tokens;
  std::vector<double> style;
  std::vector<double> targets;  // [tokens.size() * expansion, out_dim]
};

struct Dataset {
  std::size_t style_dim = 0;
  std::size_t out_dim = 0;
  std::size_t expansion = 1;
  std::vector<Sequence> sequences;

  std::size_t size() const { return sequences.size(); }
  bool operator==(const Dataset&) const;
};

/// Pure function of (teacher, domain, spec, n, seed). Frame f of a sequence
/// with F frames uses token f / expansion at normalized position f / (F - 1).
Dataset sample_dataset(const Teacher& teacher, Domain domain, const DataSpec& spec, std::size_t n_sequences,
                       std::size_t expansion, std::uint64_t seed);

struct ExperimentData {
  Dataset train;
  Dataset eval_in;
  Dataset eval_ood;
};

/// The three splits used by an experiment, each from its own derived seed.
ExperimentData make_experiment_data(const DataSpec& spec, const ModelConfig& config, std::uint64_t seed);

struct Batch {
  ModelInput input;
  Tensor targets;                    // [B, max_tokens * r, out_dim]
  std::vector<std::size_t> frame_len;  // valid frames per sequence
};

/// Pads the chosen sequences to the longest one.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Groups sequence indices by token length (ascending length order).
std::vector<std::vector<std::size_t>> length_buckets(const Dataset& data);

}  // namespace spattn
