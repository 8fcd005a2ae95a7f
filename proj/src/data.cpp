#include "data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>

#include "rng.hpp"

namespace lba {

Dataset Dataset::head(std::size_t count) const {
  std::vector<std::size_t> idx(std::min(count, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return select(idx);
}

Dataset Dataset::select(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.name = name;
  out.features = Matrix<float>(indices.size(), dimension());
  out.labels.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = features.row(indices.at(r));
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels[r] = labels[indices[r]];
  }
  return out;
}

void Dataset::validate() const {
  if (features.rows() != labels.size())
    throw ShapeError("dataset has " + std::to_string(features.rows()) + " samples but " +
                     std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
}

namespace {

std::vector<unsigned char> read_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw IdxError(IdxError::Kind::Io, "cannot open '" + path + "'");
  std::vector<unsigned char> bytes;
  unsigned char buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int errnum = 0;
      const std::string msg = gzerror(f, &errnum);
      gzclose(f);
      throw IdxError(IdxError::Kind::Truncated, "'" + path + "': read failed at offset " +
                                                    std::to_string(bytes.size()) + ": " + msg);
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), buf, buf + n);
  }
  gzclose(f);
  return bytes;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (b.size() < offset + 4)
    throw IdxError(IdxError::Kind::Truncated,
                   "'" + path + "' truncated at offset " + std::to_string(b.size()) +
                       " (header needs " + std::to_string(offset + 4) + " bytes)");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void require_bytes(const std::vector<unsigned char>& b, std::size_t needed, const std::string& path) {
  if (b.size() < needed)
    throw IdxError(IdxError::Kind::Truncated, "'" + path + "' truncated at offset " +
                                                  std::to_string(b.size()) + " (expected " +
                                                  std::to_string(needed) + " bytes)");
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_all(images_path);
  const auto lab = read_all(labels_path);
  if (const auto magic = be32(img, 0, images_path); magic != 0x00000803)
    throw IdxError(IdxError::Kind::BadMagic,
                   "'" + images_path + "': bad IDX image magic " + std::to_string(magic));
  if (const auto magic = be32(lab, 0, labels_path); magic != 0x00000801)
    throw IdxError(IdxError::Kind::BadMagic,
                   "'" + labels_path + "': bad IDX label magic " + std::to_string(magic));
  const std::size_t count = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t label_count = be32(lab, 4, labels_path);
  if (count != label_count)
    throw IdxError(IdxError::Kind::CountMismatch, "image count " + std::to_string(count) +
                                                      " != label count " +
                                                      std::to_string(label_count));
  const std::size_t dim = rows * cols;
  require_bytes(img, 16 + count * dim, images_path);
  require_bytes(lab, 8 + count, labels_path);

  Dataset ds;
  ds.name = images_path;
  ds.features = Matrix<float>(count, dim);
  ds.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < dim; ++j)
      ds.features(i, j) = static_cast<float>(img[16 + i * dim + j]) / 255.0f;
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::max(10, max_label + 1);
  return ds;
}

Dataset generate(const SyntheticSpec& spec) {
  if (spec.samples == 0 || spec.dimension == 0 || spec.classes < 2)
    throw std::invalid_argument("synthetic dataset needs samples, dimension > 0 and >= 2 classes");
  auto rng = substream(spec.seed, "synthetic");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset ds;
  ds.num_classes = spec.classes;
  ds.features = Matrix<float>(spec.samples, spec.dimension);
  ds.labels.resize(spec.samples);
  const auto classes = static_cast<std::size_t>(spec.classes);

  if (spec.kind == SyntheticSpec::Kind::GaussianBlobs) {
    ds.name = "gaussian-blobs";
    Matrix<double> means(classes, spec.dimension);
    for (auto& v : means.values()) v = 0.2 + 0.6 * unit(rng);
    std::normal_distribution<double> noise(0.0, spec.spread);
    for (std::size_t i = 0; i < spec.samples; ++i) {
      const std::size_t y = i % classes;
      ds.labels[i] = static_cast<int>(y);
      for (std::size_t j = 0; j < spec.dimension; ++j)
        ds.features(i, j) = static_cast<float>(std::clamp(means(y, j) + noise(rng), 0.0, 1.0));
    }
    return ds;
  }

  ds.name = "linearly-separable";
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> w(classes, spec.dimension);
  for (auto& v : w.values()) v = normal(rng);
  std::vector<float> x(spec.dimension);
  std::vector<double> score(classes);
  for (std::size_t i = 0; i < spec.samples;) {
    for (auto& v : x) v = static_cast<float>(unit(rng));
    for (std::size_t c = 0; c < classes; ++c) {
      score[c] = 0.0;
      for (std::size_t j = 0; j < spec.dimension; ++j) score[c] += w(c, j) * x[j];
    }
    const auto best = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
    double runner_up = -INFINITY;
    for (std::size_t c = 0; c < classes; ++c)
      if (c != best) runner_up = std::max(runner_up, score[c]);
    if (score[best] - runner_up < spec.margin) continue;
    std::copy(x.begin(), x.end(), ds.features.row(i).begin());
    ds.labels[i] = static_cast<int>(best);
    ++i;
  }
  return ds;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw CheckpointError("'" + path + "' truncated at offset " +
                          std::to_string(static_cast<long long>(is.gcount())));
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

float get_f32(std::istream& is, const std::string& path) {
  return std::bit_cast<float>(get_u32(is, path));
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointLayer>& layers) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write '" + path + "'");
  os.write("LBA1", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const auto& layer : layers) {
    put_u32(os, static_cast<std::uint32_t>(layer.weights.rows()));
    put_u32(os, static_cast<std::uint32_t>(layer.weights.cols()));
    for (float v : layer.weights.values()) put_f32(os, v);
    os.put(layer.bias ? 1 : 0);
    if (layer.bias) {
      if (layer.bias->size() != layer.weights.rows())
        throw CheckpointError("bias length does not match layer output count");
      for (float v : *layer.bias) put_f32(os, v);
    }
  }
  if (!os) throw CheckpointError("write to '" + path + "' failed");
}

std::vector<CheckpointLayer> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[4] = {};
  if (!is.read(magic, 4) || std::string(magic, 4) != "LBA1")
    throw CheckpointError("'" + path + "' is not an LBA1 checkpoint");
  if (const auto version = get_u32(is, path); version != kCheckpointVersion)
    throw CheckpointError("'" + path + "': unsupported checkpoint version " +
                          std::to_string(version));
  const std::uint32_t count = get_u32(is, path);
  std::vector<CheckpointLayer> layers;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::size_t out = get_u32(is, path);
    const std::size_t in = get_u32(is, path);
    if (out == 0 || in == 0 || out * in > (std::size_t{1} << 30))
      throw CheckpointError("'" + path + "': implausible layer shape");
    CheckpointLayer layer;
    layer.weights = Matrix<float>(out, in);
    for (float& v : layer.weights.values()) v = get_f32(is, path);
    const int flag = is.get();
    if (flag == std::char_traits<char>::eof()) throw CheckpointError("'" + path + "' truncated");
    if (flag != 0) {
      layer.bias = std::vector<float>(out);
      for (float& v : *layer.bias) v = get_f32(is, path);
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace lba
