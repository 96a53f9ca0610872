#pragma once

// File formats: the binary tensor container (checkpoints and dataset caches),
// the metrics CSV, threshold tables and PGM heatmaps. Layouts are described in
// docs/FORMATS.md.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "spattn/config.hpp"
#include "spattn/data.hpp"
#include "spattn/model.hpp"
#include "spattn/training.hpp"

namespace spattn {

inline constexpr char kCheckpointMagic[9] = "SPATTNCK";
inline constexpr char kDatasetMagic[9] = "SPATTNDS";
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Container {
  std::string magic;
  std::string header;  // JSON text
  std::vector<NamedTensor> tensors;
  std::vector<double> thetas;
};

void write_container(const std::string& path, const Container& c);
/// Throws IoError on a short read, bad magic or unsupported version.
Container read_container(const std::string& path, const char* expected_magic);

struct Checkpoint {
  ExperimentConfig config;
  ModelParams params;
};

void save_checkpoint(const std::string& path, const ExperimentConfig& config, const ModelParams& params);
Checkpoint load_checkpoint(const std::string& path);

void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

/// Number formatting shared by every text artifact.
std::string format_number(double v);

std::string metrics_header(std::size_t layers);
std::string metrics_line(const MetricsRow& row, std::size_t layers);

/// One "layer_index theta" line per threshold, 1-based.
std::string thresholds_table(const ModelParams& params);

/// ASCII PGM (P2, maxval 255) of a square valid_len x valid_len image.
std::string pgm_image(const std::vector<int>& pixels, std::size_t width, std::size_t height);

/// Attention heatmap of one decoder head for a single sequence: pixel =
/// round(255 * (mask * A) / row max of (mask * A)) over the valid region, 0
/// for rows whose masked maximum is 0.
struct HeadHeatmap {
  std::size_t layer = 0;  // 1-based
  std::size_t head = 0;   // 1-based
  std::size_t size = 0;   // valid length
  std::vector<int> pixels;
  std::vector<double> mask;  // applied mask over the valid region; ones when unmasked
};

/// Inference-mode forward of one sequence and a heatmap per decoder head.
std::vector<HeadHeatmap> decoder_heatmaps(const ModelParams& params, const ExperimentConfig& config,
                                          const Dataset& data, std::size_t index);

/// Comma-separated mask rows of a heatmap.
std::string mask_csv(const HeadHeatmap& map);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace spattn
