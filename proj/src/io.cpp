#include "spattn/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "spattn/error.hpp"

namespace spattn {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot open " + path + " for writing");
  }
  template <class T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open " + path);
  }
  template <class T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError(path_ + ": truncated file");
  }
  std::string string(std::size_t n) {
    if (n > (1u << 30)) throw IoError(path_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void write_container(const std::string& path, const Container& c) {
  Writer w(path);
  w.bytes(c.magic.data(), 8);
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint64_t>(c.header.size());
  w.bytes(c.header.data(), c.header.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    w.bytes(t.values.data(), t.values.size() * sizeof(double));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.thetas.size()));
  w.bytes(c.thetas.data(), c.thetas.size() * sizeof(double));
  w.finish();
}

Container read_container(const std::string& path, const char* expected_magic) {
  Reader r(path);
  Container c;
  c.magic = r.string(8);
  if (c.magic != expected_magic) throw IoError(path + ": not a " + std::string(expected_magic) + " file");
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw IoError(path + ": unsupported version " + std::to_string(version));
  c.header = r.string(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError(path + ": tensor " + t.name + " has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = numel_of(t.shape);
    if (n > (std::size_t{1} << 31)) throw IoError(path + ": tensor " + t.name + " is implausibly large");
    t.values.resize(n);
    r.bytes(t.values.data(), n * sizeof(double));
    c.tensors.push_back(std::move(t));
  }
  c.thetas.resize(r.get<std::uint32_t>());
  r.bytes(c.thetas.data(), c.thetas.size() * sizeof(double));
  return c;
}

void save_checkpoint(const std::string& path, const ExperimentConfig& config, const ModelParams& params) {
  Container c;
  c.magic = kCheckpointMagic;
  c.header = to_json(config);
  for (const auto& [name, t] : params.named_weights()) {
    c.tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  for (const auto& t : params.thresholds) c.thetas.push_back(t.item());
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::string& path) {
  Container c = read_container(path, kCheckpointMagic);
  Checkpoint ck;
  try {
    ck.config = parse_config(c.header);
  } catch (const ConfigError& e) {
    throw IoError(path + ": embedded config is invalid: " + e.what());
  }
  ck.params = init_params(ck.config.model, ck.config.prune.mode, 0);
  auto weights = ck.params.named_weights();
  if (weights.size() != c.tensors.size()) {
    throw IoError(path + ": expected " + std::to_string(weights.size()) + " tensors, found " +
                  std::to_string(c.tensors.size()));
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto& [name, t] = weights[i];
    const NamedTensor& stored = c.tensors[i];
    if (stored.name != name || stored.shape != t.shape()) {
      throw IoError(path + ": tensor " + stored.name + " " + shape_str(stored.shape) + " does not match " + name +
                    " " + shape_str(t.shape()));
    }
    std::copy(stored.values.begin(), stored.values.end(), t.mutable_data().begin());
  }
  if (c.thetas.size() != ck.params.thresholds.size()) {
    throw IoError(path + ": expected " + std::to_string(ck.params.thresholds.size()) + " thresholds, found " +
                  std::to_string(c.thetas.size()));
  }
  for (std::size_t i = 0; i < c.thetas.size(); ++i) ck.params.thresholds[i].mutable_data()[0] = c.thetas[i];
  return ck;
}

void save_dataset(const std::string& path, const Dataset& data) {
  Container c;
  c.magic = kDatasetMagic;
  nlohmann::ordered_json header = {{"style_dim", data.style_dim},
                                   {"out_dim", data.out_dim},
                                   {"expansion", data.expansion},
                                   {"sequences", data.size()}};
  c.header = header.dump();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sequence& s = data.sequences[i];
    const std::string prefix = "seq." + std::to_string(i);
    c.tensors.push_back({prefix + ".tokens", {s.tokens.size()}, std::vector<double>(s.tokens.begin(), s.tokens.end())});
    c.tensors.push_back({prefix + ".style", {s.style.size()}, s.style});
    c.tensors.push_back({prefix + ".targets", {s.tokens.size() * data.expansion, data.out_dim}, s.targets});
  }
  write_container(path, c);
}

Dataset load_dataset(const std::string& path) {
  Container c = read_container(path, kDatasetMagic);
  Dataset d;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(c.header);
    d.style_dim = header.at("style_dim").get<std::size_t>();
    d.out_dim = header.at("out_dim").get<std::size_t>();
    d.expansion = header.at("expansion").get<std::size_t>();
    count = header.at("sequences").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad dataset header: " + e.what());
  }
  if (c.tensors.size() != 3 * count) throw IoError(path + ": tensor count does not match sequence count");
  for (std::size_t i = 0; i < count; ++i) {
    Sequence s;
    for (double v : c.tensors[3 * i].values) s.tokens.push_back(static_cast<std::size_t>(v));
    s.style = std::move(c.tensors[3 * i + 1].values);
    s.targets = std::move(c.tensors[3 * i + 2].values);
    if (s.style.size() != d.style_dim || s.targets.size() != s.tokens.size() * d.expansion * d.out_dim) {
      throw IoError(path + ": sequence " + std::to_string(i) + " has inconsistent sizes");
    }
    d.sequences.push_back(std::move(s));
  }
  return d;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string metrics_header(std::size_t layers) {
  std::string h = "step,phase,task_loss,sp_loss";
  for (std::size_t l = 1; l <= layers; ++l) h += ",theta_" + std::to_string(l);
  for (std::size_t l = 1; l <= layers; ++l) h += ",active_frac_" + std::to_string(l);
  return h + ",eval_in,eval_ood\n";
}

std::string metrics_line(const MetricsRow& row, std::size_t layers) {
  std::string s = std::to_string(row.step) + "," + std::to_string(row.phase) + "," + format_number(row.task_loss) + ",";
  if (row.sp_loss) s += format_number(*row.sp_loss);
  for (std::size_t l = 0; l < layers; ++l) {
    s += ",";
    if (l < row.theta.size()) s += format_number(row.theta[l]);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    s += ",";
    if (l < row.active_frac.size()) s += format_number(row.active_frac[l]);
  }
  s += ",";
  if (row.eval_in) s += format_number(*row.eval_in);
  s += ",";
  if (row.eval_ood) s += format_number(*row.eval_ood);
  return s + "\n";
}

std::string thresholds_table(const ModelParams& params) {
  std::string s;
  for (std::size_t l = 0; l < params.thresholds.size(); ++l) {
    s += std::to_string(l + 1) + " " + format_number(params.thresholds[l].item()) + "\n";
  }
  return s;
}

std::string pgm_image(const std::vector<int>& pixels, std::size_t width, std::size_t height) {
  if (pixels.size() != width * height) throw DimensionError("pgm_image: pixel count does not match dimensions");
  std::ostringstream os;
  os << "P2\n" << width << ' ' << height << "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) os << (c ? " " : "") << pixels[r * width + c];
    os << '\n';
  }
  return os.str();
}

std::vector<HeadHeatmap> decoder_heatmaps(const ModelParams& params, const ExperimentConfig& config,
                                          const Dataset& data, std::size_t index) {
  if (index >= data.size()) {
    throw RangeError("sample index " + std::to_string(index) + " out of range [0, " + std::to_string(data.size()) +
                     ")");
  }
  const std::vector<std::size_t> one{index};
  const Batch batch = make_batch(data, one);
  const ForwardOutput fwd = model_forward(batch.input, params, config.model, inference_context(config.prune));

  std::vector<HeadHeatmap> maps;
  for (std::size_t l = 0; l < fwd.decoder_trace.size(); ++l) {
    const BlockTrace& t = fwd.decoder_trace[l];
    const std::size_t heads = t.probs.heads(), n = t.probs.length(), len = t.probs.valid_len[0];
    auto a = t.probs.probs.data();
    for (std::size_t h = 0; h < heads; ++h) {
      HeadHeatmap map;
      map.layer = l + 1;
      map.head = h + 1;
      map.size = len;
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> row(len);
        double row_max = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = (h * n + i) * n + j;
          const double m = t.mask ? t.mask->values.data()[k] : 1.0;
          map.mask.push_back(m);
          row[j] = m * a[k];
          row_max = std::max(row_max, row[j]);
        }
        for (double v : row) map.pixels.push_back(row_max > 0.0 ? static_cast<int>(std::lround(255.0 * v / row_max)) : 0);
      }
      maps.push_back(std::move(map));
    }
  }
  return maps;
}

std::string mask_csv(const HeadHeatmap& map) {
  std::string s;
  for (std::size_t i = 0; i < map.size; ++i) {
    for (std::size_t j = 0; j < map.size; ++j) {
      if (j) s += ",";
      s += format_number(map.mask[i * map.size + j]);
    }
    s += "\n";
  }
  return s;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace spattn
